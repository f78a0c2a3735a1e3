//! memescope-core: interpretability toolkit for multimodal (text +
//! visual-region) transformer classifiers.
//!
//! The crate pairs a fully verifiable reference model with three explanation
//! pipelines:
//!
//! - **Modality attribution** — input gradients split between the text and
//!   visual modalities, jointly L2-normalized so the two sums share one unit
//!   space ([`attribution`]).
//! - **Visual-text grounding** — attention-mass queries from word-piece
//!   positions onto visual regions, per layer and head ([`attention`]).
//! - **Error analysis** — Integrated Gradients word attribution over false
//!   positives, with aggregate bias fingerprints ([`attribution`] +
//!   [`report`]).
//!
//! Everything runs on a tape-based reverse-mode autodiff engine
//! ([`tensor`]) whose gradients are continuously validated against central
//! finite differences, and on synthetic datasets with planted label rules
//! ([`data`]) so every pipeline can be checked against known ground truth.

pub mod attention;
pub mod attribution;
pub mod data;
pub mod error;
pub mod model;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
