//! One token-mixing block and one channel-mixing block over an `N x hidden`
//! sequence, both pre-norm with GELU and a residual path.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::params::{ParamId, ParameterSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MixerShape {
    pub tokens: usize,
    pub input: usize,
    pub hidden: usize,
    /// Hidden width of the token MLP as a fraction of `tokens`.
    pub token_expansion: f64,
    /// Hidden width of the channel MLP as a multiple of `hidden`.
    pub channel_expansion: f64,
}

impl MixerShape {
    pub fn token_hidden(&self) -> usize {
        ((self.tokens as f64 * self.token_expansion).round() as usize).max(1)
    }

    pub fn channel_hidden(&self) -> usize {
        ((self.hidden as f64 * self.channel_expansion).round() as usize).max(1)
    }
}

#[derive(Clone, Debug)]
pub struct MixerParams {
    pub shape: MixerShape,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub token_w1: ParamId,
    pub token_b1: ParamId,
    pub token_w2: ParamId,
    pub token_b2: ParamId,
    pub channel_w1: ParamId,
    pub channel_b1: ParamId,
    pub channel_w2: ParamId,
    pub channel_b2: ParamId,
}

/// The mixer's parameters recorded on one tape.
#[derive(Clone, Copy, Debug)]
pub struct MixerVars {
    proj_w: Var,
    proj_b: Var,
    token_w1: Var,
    token_b1: Var,
    token_w2: Var,
    token_b2: Var,
    channel_w1: Var,
    channel_b1: Var,
    channel_w2: Var,
    channel_b2: Var,
}

impl MixerParams {
    pub fn init<R: Rng>(
        params: &mut ParameterSet,
        prefix: &str,
        shape: MixerShape,
        rng: &mut R,
    ) -> Result<Self> {
        if shape.tokens == 0 || shape.input == 0 || shape.hidden == 0 {
            return Err(invalid(format!("degenerate mixer shape {shape:?}")));
        }
        let (n, h, th, ch) = (
            shape.tokens,
            shape.hidden,
            shape.token_hidden(),
            shape.channel_hidden(),
        );
        let name = |s: &str| format!("{prefix}/{s}");
        Ok(MixerParams {
            proj_w: params.insert_glorot(&name("proj_w"), shape.input, h, rng)?,
            proj_b: params.insert(&name("proj_b"), Tensor::zeros(&[h]))?,
            token_w1: params.insert_glorot(&name("token_w1"), n, th, rng)?,
            token_b1: params.insert(&name("token_b1"), Tensor::zeros(&[th]))?,
            token_w2: params.insert_glorot(&name("token_w2"), th, n, rng)?,
            token_b2: params.insert(&name("token_b2"), Tensor::zeros(&[n]))?,
            channel_w1: params.insert_glorot(&name("channel_w1"), h, ch, rng)?,
            channel_b1: params.insert(&name("channel_b1"), Tensor::zeros(&[ch]))?,
            channel_w2: params.insert_glorot(&name("channel_w2"), ch, h, rng)?,
            channel_b2: params.insert(&name("channel_b2"), Tensor::zeros(&[h]))?,
            shape,
        })
    }

    /// Looks up the parameters created by [`MixerParams::init`].
    pub fn bind_names(params: &ParameterSet, prefix: &str, shape: MixerShape) -> Result<Self> {
        let get = |s: &str| params.require(&format!("{prefix}/{s}"));
        Ok(MixerParams {
            proj_w: get("proj_w")?,
            proj_b: get("proj_b")?,
            token_w1: get("token_w1")?,
            token_b1: get("token_b1")?,
            token_w2: get("token_w2")?,
            token_b2: get("token_b2")?,
            channel_w1: get("channel_w1")?,
            channel_b1: get("channel_b1")?,
            channel_w2: get("channel_w2")?,
            channel_b2: get("channel_b2")?,
            shape,
        })
    }

    pub fn record(&self, tape: &mut Tape<'_>) -> MixerVars {
        MixerVars {
            proj_w: tape.param(self.proj_w),
            proj_b: tape.param(self.proj_b),
            token_w1: tape.param(self.token_w1),
            token_b1: tape.param(self.token_b1),
            token_w2: tape.param(self.token_w2),
            token_b2: tape.param(self.token_b2),
            channel_w1: tape.param(self.channel_w1),
            channel_b1: tape.param(self.channel_b1),
            channel_w2: tape.param(self.channel_w2),
            channel_b2: tape.param(self.channel_b2),
        }
    }
}

/// `F` for a padded token matrix whose first `live` rows are real. Padded
/// rows are zeroed before token mixing and in the output.
pub fn mixer_forward(tape: &mut Tape<'_>, tokens: Var, live: usize, p: &MixerVars) -> Result<Var> {
    let n = tape.value(tokens).shape()[0];
    if live > n {
        return Err(invalid(format!(
            "{live} live rows in a {n}-row token matrix"
        )));
    }
    let mask = tape.constant(Tensor::vector(
        (0..n).map(|i| if i < live { 1.0 } else { 0.0 }).collect(),
    ));

    let x = tape.matmul(tokens, p.proj_w)?;
    let x = tape.add_row(x, p.proj_b)?;
    let x0 = tape.mul_col(x, mask)?;

    let y = tape.layer_norm(x0);
    let y = tape.mul_col(y, mask)?;
    let yt = tape.transpose(y)?;
    let a = tape.matmul(yt, p.token_w1)?;
    let a = tape.add_row(a, p.token_b1)?;
    let a = tape.gelu(a);
    let b = tape.matmul(a, p.token_w2)?;
    let b = tape.add_row(b, p.token_b2)?;
    let b = tape.transpose(b)?;
    let x1 = tape.add(x0, b)?;

    let c = tape.layer_norm(x1);
    let c = tape.matmul(c, p.channel_w1)?;
    let c = tape.add_row(c, p.channel_b1)?;
    let c = tape.gelu(c);
    let c = tape.matmul(c, p.channel_w2)?;
    let c = tape.add_row(c, p.channel_b2)?;
    let x2 = tape.add(x1, c)?;
    tape.mul_col(x2, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, probe, random_inputs};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> MixerShape {
        MixerShape {
            tokens: 4,
            input: 3,
            hidden: 5,
            token_expansion: 0.5,
            channel_expansion: 2.0,
        }
    }

    fn zero_mlps(params: &mut ParameterSet, m: &MixerParams) {
        for id in [m.token_w2, m.token_b2, m.channel_w2, m.channel_b2] {
            params
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zeroed_mixer_is_the_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParameterSet::new();
        let m = MixerParams::init(&mut params, "m", shape(), &mut rng).unwrap();
        zero_mlps(&mut params, &m);
        params
            .value_mut(m.proj_b)
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3, 0.0, 0.5]);
        let tokens = random_inputs(&[vec![4, 3]], &mut rng).remove(0);
        let mut t = Tape::with_params(&params);
        let v = m.record(&mut t);
        let x = t.constant(tokens.clone());
        let f = mixer_forward(&mut t, x, 3, &v).unwrap();
        let w = params.value(m.proj_w);
        let b = params.value(m.proj_b);
        for r in 0..4 {
            for c in 0..5 {
                let expect = if r < 3 {
                    (0..3).map(|k| tokens.row(r)[k] * w.row(k)[c]).sum::<f64>() + b.data()[c]
                } else {
                    0.0
                };
                assert!((t.value(f).row(r)[c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn live_row_swap_permutes_output_without_token_mixing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParameterSet::new();
        let m = MixerParams::init(&mut params, "m", shape(), &mut rng).unwrap();
        params
            .value_mut(m.token_w2)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let tokens = random_inputs(&[vec![4, 3]], &mut rng).remove(0);
        let mut swapped = tokens.clone();
        let (r0, r1) = (tokens.row(0).to_vec(), tokens.row(1).to_vec());
        swapped.data_mut()[..3].copy_from_slice(&r1);
        swapped.data_mut()[3..6].copy_from_slice(&r0);
        let mut t = Tape::with_params(&params);
        let v = m.record(&mut t);
        let (a, b) = (t.constant(tokens), t.constant(swapped));
        let fa = mixer_forward(&mut t, a, 4, &v).unwrap();
        let fb = mixer_forward(&mut t, b, 4, &v).unwrap();
        assert_eq!(t.value(fa).row(0), t.value(fb).row(1));
        assert_eq!(t.value(fa).row(1), t.value(fb).row(0));
        assert_eq!(t.value(fa).row(2), t.value(fb).row(2));
    }

    #[test]
    fn padded_rows_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParameterSet::new();
        let m = MixerParams::init(&mut params, "m", shape(), &mut rng).unwrap();
        let tokens = random_inputs(&[vec![4, 3]], &mut rng).remove(0);
        let mut junk = tokens.clone();
        junk.data_mut()[6..].iter_mut().for_each(|v| *v = 9.0);
        let mut t = Tape::with_params(&params);
        let v = m.record(&mut t);
        let (a, b) = (t.constant(tokens), t.constant(junk));
        let fa = mixer_forward(&mut t, a, 2, &v).unwrap();
        let fb = mixer_forward(&mut t, b, 2, &v).unwrap();
        assert_eq!(t.value(fa), t.value(fb));
    }

    #[test]
    fn mixer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParameterSet::new();
        let m = MixerParams::init(&mut params, "m", shape(), &mut rng).unwrap();
        let ids = [
            m.proj_w,
            m.proj_b,
            m.token_w1,
            m.token_b1,
            m.token_w2,
            m.token_b2,
            m.channel_w1,
            m.channel_b1,
            m.channel_w2,
            m.channel_b2,
        ];
        let mut inputs = random_inputs(&[vec![4, 3]], &mut rng);
        // nonzero biases so their gradients are exercised away from zero
        inputs.extend(ids.iter().map(|&id| {
            let mut v = params.value(id).clone();
            v.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x += 0.1 * ((i as f64) * 0.37).sin());
            v
        }));
        let report = grad_check(
            |t, xs| {
                let v = MixerVars {
                    proj_w: xs[1],
                    proj_b: xs[2],
                    token_w1: xs[3],
                    token_b1: xs[4],
                    token_w2: xs[5],
                    token_b2: xs[6],
                    channel_w1: xs[7],
                    channel_b1: xs[8],
                    channel_w2: xs[9],
                    channel_b2: xs[10],
                };
                let f = mixer_forward(t, xs[0], 3, &v)?;
                probe(t, f)
            },
            &inputs,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
