//! The IID head and the two interventional heads, and the weighted loss.

use rand::Rng;

use crate::autodiff::{bce_scalar, Tape, Var};
use crate::error::{invalid, Result};
use crate::params::{ParamId, ParameterSet};
use crate::tensor::Tensor;

/// `(lambda_i, lambda_t, lambda_s)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub iid: f64,
    pub temporal: f64,
    pub structural: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            iid: 1.0,
            temporal: 0.5,
            structural: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(iid: f64, temporal: f64, structural: f64) -> Result<Self> {
        let w = LossWeights {
            iid,
            temporal,
            structural,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.iid, self.temporal, self.structural];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || all.iter().all(|&v| v == 0.0) {
            return Err(invalid(format!(
                "loss weights {all:?} must be nonnegative and not all zero"
            )));
        }
        Ok(())
    }

    /// Whether the interventional heads (and so the dictionary) are used.
    pub fn uses_interventions(&self) -> bool {
        self.temporal > 0.0 || self.structural > 0.0
    }
}

/// Two linear layers with GELU between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl Mlp {
    pub fn init<R: Rng>(
        params: &mut ParameterSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            w1: params.insert_glorot(&format!("{prefix}/w1"), input, hidden, rng)?,
            b1: params.insert(&format!("{prefix}/b1"), Tensor::zeros(&[hidden]))?,
            w2: params.insert_glorot(&format!("{prefix}/w2"), hidden, hidden, rng)?,
            b2: params.insert(&format!("{prefix}/b2"), Tensor::zeros(&[hidden]))?,
        })
    }

    pub fn bind_names(params: &ParameterSet, prefix: &str) -> Result<Self> {
        let get = |s: &str| params.require(&format!("{prefix}/{s}"));
        Ok(Mlp {
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }

    pub fn record(&self, tape: &mut Tape<'_>) -> MlpVars {
        MlpVars {
            w1: tape.param(self.w1),
            b1: tape.param(self.b1),
            w2: tape.param(self.w2),
            b2: tape.param(self.b2),
        }
    }
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let a = tape.matmul(x, self.w1)?;
        let a = tape.add(a, self.b1)?;
        let a = tape.gelu(a);
        let b = tape.matmul(a, self.w2)?;
        tape.add(b, self.b2)
    }
}

/// Row map to a scalar: `w` is stored as a `[width, 1]` matrix.
fn row_map<R: Rng>(
    params: &mut ParameterSet,
    name: &str,
    width: usize,
    rng: &mut R,
) -> Result<ParamId> {
    params.insert_glorot(name, width, 1, rng)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub f_is: Mlp,
    pub f_it: Mlp,
    pub f_s: Mlp,
    pub f_t: Mlp,
    pub w_i1: ParamId,
    pub w_i2: ParamId,
    pub w_c1: ParamId,
    pub w_c2: ParamId,
    pub w_c3: ParamId,
    pub w_c4: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub f_is: MlpVars,
    pub f_it: MlpVars,
    pub f_s: MlpVars,
    pub f_t: MlpVars,
    pub w_i1: Var,
    pub w_i2: Var,
    pub w_c1: Var,
    pub w_c2: Var,
    pub w_c3: Var,
    pub w_c4: Var,
}

impl HeadParams {
    /// `hs_width` and `ht_width` are the widths of `H^S` and `H^T`;
    /// `dict_width` is the confounder width.
    pub fn init<R: Rng>(
        params: &mut ParameterSet,
        hs_width: usize,
        ht_width: usize,
        dict_width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(HeadParams {
            f_is: Mlp::init(params, "head/f_is", hs_width, hidden, rng)?,
            f_it: Mlp::init(params, "head/f_it", ht_width, hidden, rng)?,
            f_s: Mlp::init(params, "head/f_s", hs_width, hidden, rng)?,
            f_t: Mlp::init(params, "head/f_t", ht_width, hidden, rng)?,
            w_i1: row_map(params, "head/w_i1", hidden, rng)?,
            w_i2: row_map(params, "head/w_i2", hidden, rng)?,
            w_c1: row_map(params, "head/w_c1", hidden, rng)?,
            w_c2: row_map(params, "head/w_c2", hidden, rng)?,
            w_c3: row_map(params, "head/w_c3", dict_width, rng)?,
            w_c4: row_map(params, "head/w_c4", dict_width, rng)?,
        })
    }

    pub fn bind_names(params: &ParameterSet) -> Result<Self> {
        Ok(HeadParams {
            f_is: Mlp::bind_names(params, "head/f_is")?,
            f_it: Mlp::bind_names(params, "head/f_it")?,
            f_s: Mlp::bind_names(params, "head/f_s")?,
            f_t: Mlp::bind_names(params, "head/f_t")?,
            w_i1: params.require("head/w_i1")?,
            w_i2: params.require("head/w_i2")?,
            w_c1: params.require("head/w_c1")?,
            w_c2: params.require("head/w_c2")?,
            w_c3: params.require("head/w_c3")?,
            w_c4: params.require("head/w_c4")?,
        })
    }

    pub fn record(&self, tape: &mut Tape<'_>) -> HeadVars {
        HeadVars {
            f_is: self.f_is.record(tape),
            f_it: self.f_it.record(tape),
            f_s: self.f_s.record(tape),
            f_t: self.f_t.record(tape),
            w_i1: tape.param(self.w_i1),
            w_i2: tape.param(self.w_i2),
            w_c1: tape.param(self.w_c1),
            w_c2: tape.param(self.w_c2),
            w_c3: tape.param(self.w_c3),
            w_c4: tape.param(self.w_c4),
        }
    }
}

fn two_term_logit(tape: &mut Tape<'_>, a: Var, wa: Var, b: Var, wb: Var) -> Result<Var> {
    let x = tape.matmul(a, wa)?;
    let y = tape.matmul(b, wb)?;
    tape.add(x, y)
}

/// Pre-sigmoid value of the IID head, shape `[1]`.
pub fn iid_logit(tape: &mut Tape<'_>, h_s: Var, h_t: Var, p: &HeadVars) -> Result<Var> {
    let a = p.f_is.forward(tape, h_s)?;
    let b = p.f_it.forward(tape, h_t)?;
    two_term_logit(tape, a, p.w_i1, b, p.w_i2)
}

/// `y^I = sigmoid(W^I_1 f^{I_S}(H^S) + W^I_2 f^{I_T}(H^T))`.
pub fn predict_iid(tape: &mut Tape<'_>, h_s: Var, h_t: Var, p: &HeadVars) -> Result<Var> {
    let z = iid_logit(tape, h_s, h_t, p)?;
    Ok(tape.sigmoid(z))
}

/// Pre-sigmoid value of the structural interventional head, shape `[1]`.
pub fn struct_intervention_logit(
    tape: &mut Tape<'_>,
    h_s: Var,
    e_s: Var,
    p: &HeadVars,
) -> Result<Var> {
    let a = p.f_s.forward(tape, h_s)?;
    two_term_logit(tape, a, p.w_c1, e_s, p.w_c3)
}

/// `y^S = sigmoid(W^c_1 f^s(H^S) + W^c_3 E_S)`.
pub fn predict_struct_intervention(
    tape: &mut Tape<'_>,
    h_s: Var,
    e_s: Var,
    p: &HeadVars,
) -> Result<Var> {
    let z = struct_intervention_logit(tape, h_s, e_s, p)?;
    Ok(tape.sigmoid(z))
}

pub fn temporal_intervention_logit(
    tape: &mut Tape<'_>,
    h_t: Var,
    e_t: Var,
    p: &HeadVars,
) -> Result<Var> {
    let a = p.f_t.forward(tape, h_t)?;
    two_term_logit(tape, a, p.w_c2, e_t, p.w_c4)
}

/// `y^T = sigmoid(W^c_2 f^t(H^T) + W^c_4 E_T)`.
pub fn predict_temporal_intervention(
    tape: &mut Tape<'_>,
    h_t: Var,
    e_t: Var,
    p: &HeadVars,
) -> Result<Var> {
    let z = temporal_intervention_logit(tape, h_t, e_t, p)?;
    Ok(tape.sigmoid(z))
}

/// Binary cross-entropy with the prediction clamped to
/// `[CLAMP_EPS, 1 - CLAMP_EPS]` (see [`crate::autodiff::CLAMP_EPS`]).
pub fn risk_ce(p: f64, y: f64) -> f64 {
    bce_scalar(p, y)
}

/// Per-head predictions for a batch, each a vector of probabilities.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub iid: Var,
    pub structural: Option<Var>,
    pub temporal: Option<Var>,
}

/// `lambda_i R(y^I) + lambda_t R(y^T) + lambda_s R(y^S)`, each `R` a mean
/// cross-entropy. Heads with zero weight may be absent.
pub fn total_loss(
    tape: &mut Tape<'_>,
    out: &HeadOutputs,
    labels: &[f64],
    w: &LossWeights,
) -> Result<Var> {
    let r_i = tape.bce(out.iid, labels)?;
    let mut loss = tape.scale(r_i, w.iid);
    for (head, lambda) in [(out.temporal, w.temporal), (out.structural, w.structural)] {
        if lambda == 0.0 {
            continue;
        }
        let head = head.ok_or_else(|| invalid("weighted head missing from the batch outputs"))?;
        let r = tape.bce(head, labels)?;
        let r = tape.scale(r, lambda);
        loss = tape.add(loss, r)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, random_inputs};
    use crate::tensor::{gelu_scalar, sigmoid_scalar};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParameterSet, HeadParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        let h = HeadParams::init(&mut p, 4, 6, 10, 3, &mut rng).unwrap();
        (p, h)
    }

    fn mlp_oracle(p: &ParameterSet, m: &Mlp, x: &[f64]) -> Vec<f64> {
        let lin = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let (r, c) = w.dims2();
            (0..c)
                .map(|j| (0..r).map(|i| x[i] * w.row(i)[j]).sum::<f64>() + b.data()[j])
                .collect()
        };
        let a: Vec<f64> = lin(x, p.value(m.w1), p.value(m.b1))
            .into_iter()
            .map(gelu_scalar)
            .collect();
        lin(&a, p.value(m.w2), p.value(m.b2))
    }

    fn dotw(p: &ParameterSet, w: ParamId, x: &[f64]) -> f64 {
        p.value(w).data().iter().zip(x).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn iid_head_examples() {
        let (mut p, h) = setup(1);
        let hs_v = vec![0.5, -1.0, 0.2, 0.0];
        let ht_v = vec![1.0, 0.3, -0.7, 0.1, 0.0, 2.0];

        {
            let mut t = Tape::with_params(&p);
            let v = h.record(&mut t);
            let (hs, ht) = (
                t.constant(Tensor::vector(hs_v.clone())),
                t.constant(Tensor::vector(ht_v.clone())),
            );
            let y = predict_iid(&mut t, hs, ht, &v).unwrap();
            let expect = sigmoid_scalar(
                dotw(&p, h.w_i1, &mlp_oracle(&p, &h.f_is, &hs_v))
                    + dotw(&p, h.w_i2, &mlp_oracle(&p, &h.f_it, &ht_v)),
            );
            assert!((t.value(y).item() - expect).abs() < 1e-14);
        }

        // zero structural path: temporal term alone
        p.value_mut(h.w_i1)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        {
            let mut t = Tape::with_params(&p);
            let v = h.record(&mut t);
            let (hs, ht) = (
                t.constant(Tensor::vector(hs_v.clone())),
                t.constant(Tensor::vector(ht_v.clone())),
            );
            let y = predict_iid(&mut t, hs, ht, &v).unwrap();
            let expect = sigmoid_scalar(dotw(&p, h.w_i2, &mlp_oracle(&p, &h.f_it, &ht_v)));
            assert!((t.value(y).item() - expect).abs() < 1e-14);
        }

        p.value_mut(h.w_i2)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let mut t = Tape::with_params(&p);
        let v = h.record(&mut t);
        let (hs, ht) = (
            t.constant(Tensor::vector(hs_v)),
            t.constant(Tensor::vector(ht_v)),
        );
        let y = predict_iid(&mut t, hs, ht, &v).unwrap();
        assert_eq!(t.value(y).item(), 0.5);
    }

    #[test]
    fn interventional_heads() {
        let (mut p, h) = setup(2);
        p.value_mut(h.w_c3)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let mut t = Tape::with_params(&p);
        let v = h.record(&mut t);
        let hs = t.constant(Tensor::vector(vec![0.5, -1.0, 0.2, 0.0]));
        let e1 = t.constant(Tensor::vector((0..10).map(|i| i as f64).collect()));
        let e2 = t.constant(Tensor::vector(vec![-3.0; 10]));
        let a = predict_struct_intervention(&mut t, hs, e1, &v).unwrap();
        let b = predict_struct_intervention(&mut t, hs, e2, &v).unwrap();
        assert_eq!(t.value(a).item(), t.value(b).item());

        let ht = t.constant(Tensor::vector(vec![0.1; 6]));
        let y = predict_temporal_intervention(&mut t, ht, e1, &v).unwrap();
        let expect = sigmoid_scalar(
            dotw(&p, h.w_c2, &mlp_oracle(&p, &h.f_t, &[0.1; 6]))
                + dotw(&p, h.w_c4, &(0..10).map(|i| i as f64).collect::<Vec<_>>()),
        );
        assert!((t.value(y).item() - expect).abs() < 1e-14);
    }

    #[test]
    fn risk_examples() {
        assert!(risk_ce(1.0, 1.0) < 1e-6);
        assert!((risk_ce(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(risk_ce(0.5, 0.0), risk_ce(0.5, 1.0));
        assert!(risk_ce(0.0, 1.0).is_finite());
    }

    #[test]
    fn loss_weights() {
        let mut t = Tape::new();
        let y = t.constant(Tensor::vector(vec![0.9, 0.2, 0.6]));
        let labels = [1.0, 0.0, 0.0];
        let r: f64 = labels
            .iter()
            .zip([0.9, 0.2, 0.6])
            .map(|(&l, p)| risk_ce(p, l))
            .sum::<f64>()
            / 3.0;
        let out = HeadOutputs {
            iid: y,
            structural: Some(y),
            temporal: Some(y),
        };
        let l = total_loss(&mut t, &out, &labels, &LossWeights::default()).unwrap();
        assert!((t.value(l).item() - 2.0 * r).abs() < 1e-15);
        let only = HeadOutputs {
            iid: y,
            structural: None,
            temporal: None,
        };
        let l = total_loss(
            &mut t,
            &only,
            &labels,
            &LossWeights::new(1.0, 0.0, 0.0).unwrap(),
        )
        .unwrap();
        assert!((t.value(l).item() - r).abs() < 1e-15);
        assert!(total_loss(&mut t, &only, &labels, &LossWeights::default()).is_err());
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(1.0, -0.1, 0.0).is_err());
    }

    #[test]
    fn nwgm_against_explicit_enumeration() {
        // two confounders: exact adjustment averages the head over d, the
        // approximation feeds the expected d through the head once
        let (p, h) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let ins = random_inputs(&[vec![4], vec![2, 10]], &mut rng);
        let alpha = [0.3, 0.7];
        let mut t = Tape::with_params(&p);
        let v = h.record(&mut t);
        let hs = t.constant(ins[0].clone());
        let mut exact = 0.0;
        let mut logits = Vec::new();
        for (i, a) in alpha.iter().enumerate() {
            let d = t.constant(Tensor::vector(ins[1].row(i).to_vec()));
            let z = struct_intervention_logit(&mut t, hs, d, &v).unwrap();
            logits.push(t.value(z).item());
            exact += a * sigmoid_scalar(t.value(z).item());
        }
        let e: Vec<f64> = (0..10)
            .map(|c| alpha[0] * ins[1].row(0)[c] + alpha[1] * ins[1].row(1)[c])
            .collect();
        let ev = t.constant(Tensor::vector(e));
        let approx = predict_struct_intervention(&mut t, hs, ev, &v).unwrap();
        let gap = (t.value(approx).item() - exact).abs();
        // the logit is affine in d, so the gap is a Jensen gap of the
        // sigmoid, bounded by max|sigmoid''| / 2 * Var(logit)
        let mean = alpha[0] * logits[0] + alpha[1] * logits[1];
        let var = alpha[0] * (logits[0] - mean).powi(2) + alpha[1] * (logits[1] - mean).powi(2);
        assert!(gap <= 0.0963 / 2.0 * var + 1e-15, "gap {gap} var {var}");
        println!("nwgm gap {gap:.3e} (logit variance {var:.3e})");
    }

    #[test]
    fn head_gradients() {
        let (p, h) = setup(4);
        let ids: Vec<ParamId> = [h.f_is, h.f_it, h.f_s, h.f_t]
            .iter()
            .flat_map(|m| [m.w1, m.b1, m.w2, m.b2])
            .chain([h.w_i1, h.w_i2, h.w_c1, h.w_c2, h.w_c3, h.w_c4])
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut inputs = random_inputs(&[vec![4], vec![6], vec![10], vec![10]], &mut rng);
        inputs.extend(ids.iter().map(|&id| p.value(id).clone()));
        let report = grad_check(
            |t, xs| {
                let mlp = |o: usize| MlpVars {
                    w1: xs[o],
                    b1: xs[o + 1],
                    w2: xs[o + 2],
                    b2: xs[o + 3],
                };
                let v = HeadVars {
                    f_is: mlp(4),
                    f_it: mlp(8),
                    f_s: mlp(12),
                    f_t: mlp(16),
                    w_i1: xs[20],
                    w_i2: xs[21],
                    w_c1: xs[22],
                    w_c2: xs[23],
                    w_c3: xs[24],
                    w_c4: xs[25],
                };
                let yi = predict_iid(t, xs[0], xs[1], &v)?;
                let ys = predict_struct_intervention(t, xs[0], xs[2], &v)?;
                let yt = predict_temporal_intervention(t, xs[1], xs[3], &v)?;
                let out = HeadOutputs {
                    iid: yi,
                    structural: Some(ys),
                    temporal: Some(yt),
                };
                total_loss(t, &out, &[1.0], &LossWeights::default())
            },
            &inputs,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
