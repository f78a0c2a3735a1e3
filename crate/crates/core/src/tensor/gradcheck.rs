//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of a gradient check; `max_rel` is the headline number.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with an absolute floor of 1: tiny gradients are compared
/// absolutely, everything else relatively.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Compare the tape gradient of `build(x)` against central finite
/// differences at every coordinate of `x`.
///
/// `build` must deterministically construct a scalar-valued graph from the
/// leaf it is handed; it is invoked once for the analytic gradient and twice
/// per coordinate for the numeric one, each time on a fresh tape.
pub fn grad_check<F>(build: F, x: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_grad());
    let out = build(&mut tape, leaf)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::validation("grad_check: build must yield a scalar"));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(leaf)
        .ok_or_else(|| Error::Internal("leaf gradient missing".into()))?
        .clone();

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe.clone());
        let o = build(&mut t, v)?;
        Ok(t.value(o).item())
    };

    let mut report = GradCheckReport {
        max_rel: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let f_plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let f_minus = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (f_plus - f_minus) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = relative_error(a, numeric);
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact_to_1e10() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(vec![6], 1.0, &mut rng);
        let x = Tensor::randn(vec![6], 1.0, &mut rng);
        let report = grad_check(
            |tape, v| {
                let wv = tape.constant(w.clone());
                let prod = tape.mul(v, wv)?;
                Ok(tape.sum(prod))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel <= 1e-10, "rel = {}", report.max_rel);
    }

    #[test]
    fn cubic_polynomial_within_1e6() {
        // f(x) = sum(x^3 + 2x^2 - x)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(vec![5], 1.0, &mut rng);
        let report = grad_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                let cube = tape.mul(sq, v)?;
                let two_sq = tape.scale(sq, 2.0);
                let neg = tape.scale(v, -1.0);
                let a = tape.add(cube, two_sq)?;
                let b = tape.add(a, neg)?;
                Ok(tape.sum(b))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel <= 1e-6, "rel = {}", report.max_rel);
    }

    #[test]
    fn random_matmul_grads_match_finite_differences() {
        // Gradients w.r.t. both factors of a random 3x4 by 4x2 product.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 2], 1.0, &mut rng);

        let rep_a = grad_check(
            |tape, v| {
                let bv = tape.constant(b.clone());
                let c = tape.matmul(v, bv)?;
                Ok(tape.sum(c))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(rep_a.max_rel <= 1e-6, "dA rel = {}", rep_a.max_rel);

        let rep_b = grad_check(
            |tape, v| {
                let av = tape.constant(a.clone());
                let c = tape.matmul(av, v)?;
                Ok(tape.sum(c))
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(rep_b.max_rel <= 1e-6, "dB rel = {}", rep_b.max_rel);
    }

    // Weighted sum pins distinct per-coordinate gradients so symmetric bugs
    // cannot cancel.
    fn weighted(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
        let shape = tape.value(v).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let w = tape.constant(Tensor::randn(shape, 1.0, &mut rng));
        let prod = tape.mul(v, w)?;
        Ok(tape.sum(prod))
    }

    #[test]
    fn every_primitive_matches_finite_differences_over_100_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
            let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
                ("gelu", {
                    Box::new(move |t: &mut Tape, v| {
                        let g = t.gelu(v);
                        weighted(t, g, seed)
                    })
                }),
                ("tanh", {
                    Box::new(move |t: &mut Tape, v| {
                        let g = t.tanh(v);
                        weighted(t, g, seed)
                    })
                }),
                ("softmax", {
                    Box::new(move |t: &mut Tape, v| {
                        let s = t.softmax(v, 1)?;
                        weighted(t, s, seed)
                    })
                }),
                ("layer_norm", {
                    Box::new(move |t: &mut Tape, v| {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
                        let g = t.leaf(Tensor::randn(vec![4], 1.0, &mut rng));
                        let b = t.leaf(Tensor::randn(vec![4], 1.0, &mut rng));
                        let y = t.layer_norm(v, g, b, 1e-5)?;
                        weighted(t, y, seed)
                    })
                }),
                ("matmul", {
                    Box::new(move |t: &mut Tape, v| {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb22);
                        let w = t.constant(Tensor::randn(vec![4, 3], 1.0, &mut rng));
                        let c = t.matmul(v, w)?;
                        weighted(t, c, seed)
                    })
                }),
                ("transpose", {
                    Box::new(move |t: &mut Tape, v| {
                        let tr = t.transpose(v)?;
                        weighted(t, tr, seed)
                    })
                }),
                ("add_row_bias", {
                    Box::new(move |t: &mut Tape, v| {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc33);
                        let bias = t.leaf(Tensor::randn(vec![4], 1.0, &mut rng));
                        let y = t.add_row_bias(v, bias)?;
                        weighted(t, y, seed)
                    })
                }),
                ("slice_concat", {
                    Box::new(move |t: &mut Tape, v| {
                        let left = t.slice_cols(v, 0, 2)?;
                        let right = t.slice_cols(v, 2, 2)?;
                        let back = t.concat_cols(&[right, left])?;
                        weighted(t, back, seed)
                    })
                }),
                ("bce", {
                    Box::new(move |t: &mut Tape, v| {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd44);
                        let targets: Vec<f64> =
                            (0..12).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
                        let y = t.constant(Tensor::new(vec![3, 4], targets).unwrap());
                        t.bce_with_logits(v, y)
                    })
                }),
            ];
            for (name, build) in cases {
                let report = grad_check(&build, &x, 1e-5).unwrap();
                assert!(
                    report.max_rel <= 1e-4,
                    "{name} seed {seed}: rel {} at {} (ad {} vs fd {})",
                    report.max_rel,
                    report.worst_index,
                    report.analytic,
                    report.numeric
                );
            }
        }
    }
}
