//! Central finite-difference verification of reverse-mode gradients.

use rand::Rng;

use super::tape::{Tape, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that near-zero gradients
/// are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckFailure {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per input tensor.
    pub per_input: Vec<f64>,
    pub failures: Vec<GradCheckFailure>,
    pub tolerance: f64,
    pub coordinates_checked: usize,
    /// Coordinates left out because the function is not smooth there.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.per_input.extend(other.per_input);
        self.failures.extend(other.failures);
        self.coordinates_checked += other.coordinates_checked;
        self.skipped += other.skipped;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `eps` for every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        tolerance: tol,
        ..Default::default()
    };
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut worst: f64 = 0.0;
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = relative_error(analytic[i], numeric);
            worst = worst.max(rel);
            report.coordinates_checked += 1;
            if !(rel < tol) {
                report.failures.push(GradCheckFailure {
                    input: k,
                    index: i,
                    analytic: analytic[i],
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.per_input.push(worst);
    }
    Ok(report)
}

fn scalar_of(tape: &Tape<'_>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(invalid(format!(
            "grad_check needs a scalar function, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// One differentiable op wrapped as a scalar function for gradient checks.
pub struct OpCase {
    pub name: &'static str,
    pub input_shapes: Vec<Vec<usize>>,
    pub build: fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
}

impl std::fmt::Debug for OpCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpCase").field("name", &self.name).finish()
    }
}

/// Reduces an arbitrary output to a scalar through a fixed, non-uniform
/// weighting so that invariants like `sum(softmax) = 1` do not hide errors.
pub fn probe(tape: &mut Tape<'_>, out: Var) -> Result<Var> {
    let n = tape.value(out).numel();
    let shape = tape.value(out).shape().to_vec();
    let w: Vec<f64> = (0..n)
        .map(|i| ((i as f64 + 1.0) * 0.7).sin() + 0.3)
        .collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Every differentiable op on the tape, each with a small input signature.
pub fn registered_ops() -> Vec<OpCase> {
    fn case(
        name: &'static str,
        input_shapes: Vec<Vec<usize>>,
        build: fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
    ) -> OpCase {
        OpCase {
            name,
            input_shapes,
            build,
        }
    }
    vec![
        case("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            probe(t, o)
        }),
        case("add", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let o = t.add(v[0], v[1])?;
            probe(t, o)
        }),
        case("sub", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let o = t.sub(v[0], v[1])?;
            probe(t, o)
        }),
        case("mul", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let o = t.mul(v[0], v[1])?;
            probe(t, o)
        }),
        case("add_row", vec![vec![3, 4], vec![4]], |t, v| {
            let o = t.add_row(v[0], v[1])?;
            probe(t, o)
        }),
        case("mul_row", vec![vec![3, 4], vec![4]], |t, v| {
            let o = t.mul_row(v[0], v[1])?;
            probe(t, o)
        }),
        case("mul_col", vec![vec![3, 4], vec![3]], |t, v| {
            let o = t.mul_col(v[0], v[1])?;
            probe(t, o)
        }),
        case("scale", vec![vec![2, 3]], |t, v| {
            let o = t.scale(v[0], -1.7);
            probe(t, o)
        }),
        case("transpose", vec![vec![2, 3]], |t, v| {
            let o = t.transpose(v[0])?;
            probe(t, o)
        }),
        case("reshape", vec![vec![2, 3]], |t, v| {
            let o = t.reshape(v[0], vec![3, 2])?;
            probe(t, o)
        }),
        case("softmax", vec![vec![2, 5]], |t, v| {
            let o = t.softmax(v[0])?;
            probe(t, o)
        }),
        case("sigmoid", vec![vec![2, 3]], |t, v| {
            let o = t.sigmoid(v[0]);
            probe(t, o)
        }),
        case("gelu", vec![vec![2, 3]], |t, v| {
            let o = t.gelu(v[0]);
            probe(t, o)
        }),
        case("layer_norm", vec![vec![3, 5]], |t, v| {
            let o = t.layer_norm(v[0]);
            probe(t, o)
        }),
        case("concat_rows", vec![vec![2, 3], vec![1, 3]], |t, v| {
            let o = t.concat(&[v[0], v[1]], 0)?;
            probe(t, o)
        }),
        case("concat_cols", vec![vec![2, 3], vec![2, 2]], |t, v| {
            let o = t.concat(&[v[0], v[1]], 1)?;
            probe(t, o)
        }),
        case("mean_axis0", vec![vec![3, 4]], |t, v| {
            let o = t.mean(v[0], 0)?;
            probe(t, o)
        }),
        case("mean_axis1", vec![vec![3, 4]], |t, v| {
            let o = t.mean(v[0], 1)?;
            probe(t, o)
        }),
        case("sum", vec![vec![2, 3]], |t, v| {
            let s = t.sum(v[0]);
            let sq = t.mul(s, s)?;
            Ok(sq)
        }),
        case("gather_rows", vec![vec![4, 3]], |t, v| {
            let o = t.gather_rows(v[0], &[2, 0, 2])?;
            probe(t, o)
        }),
        case("normalize", vec![vec![5]], |t, v| {
            // keep the block strictly positive
            let p = t.softmax(v[0])?;
            let o = t.normalize(p)?;
            probe(t, o)
        }),
        case("bce", vec![vec![4]], |t, v| {
            let p = t.sigmoid(v[0]);
            t.bce(p, &[1.0, 0.0, 1.0, 0.0])
        }),
        case("softmax_matmul", vec![vec![2, 3], vec![3, 4]], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            let s = t.softmax(o)?;
            probe(t, s)
        }),
    ]
}

/// Uniform inputs in `[-2, 2]` for an op signature.
pub fn random_inputs<R: Rng>(shapes: &[Vec<usize>], rng: &mut R) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(
                s.clone(),
                (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .expect("valid shape")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let x = Tensor::new(vec![2, 2], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let report = grad_check(
            |t, v| {
                let s = t.scale(v[0], 3.0);
                Ok(t.sum(s))
            },
            &[x],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-9, "{}", report.max_rel_error());
    }

    #[test]
    fn softmax_matmul_composite_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = random_inputs(&[vec![2, 3], vec![3, 4]], &mut rng);
        let case = registered_ops()
            .into_iter()
            .find(|c| c.name == "softmax_matmul")
            .unwrap();
        let report = grad_check(case.build, &inputs, 1e-4, 1e-3).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error() < 1e-3);
    }

    #[test]
    fn broken_derivative_is_reported() {
        let x = Tensor::vector(vec![0.5, -1.2, 1.9]);
        let report = grad_check(
            |t, v| {
                // forward is x^2, backward claims x
                let value = {
                    let d = t.value(v[0]).data();
                    Tensor::vector(d.iter().map(|a| a * a).collect())
                };
                let sq = t.custom(
                    &[v[0]],
                    value,
                    Box::new(|ins, g| {
                        let d = ins[0]
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(a, b)| a * b)
                            .collect();
                        vec![Tensor::vector(d)]
                    }),
                );
                Ok(t.sum(sq))
            },
            &[x],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 3);
    }

    #[test]
    fn every_registered_op_passes_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in registered_ops() {
            for _ in 0..5 {
                let inputs = random_inputs(&case.input_shapes, &mut rng);
                let report = grad_check(case.build, &inputs, 1e-4, 1e-3).unwrap();
                assert!(report.passed(), "{}: {:?}", case.name, report.failures);
            }
        }
    }
}
