use crate::error::{invalid, Result};
use crate::graph::{EdgeSequence, EventStore};
use crate::tensor::Tensor;

/// `cos(dt * omega_i)` with `omega_i = alpha^(-(i-1)/beta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEncoding {
    dim: usize,
    alpha: f64,
    beta: f64,
    omega: Vec<f64>,
}

impl TimeEncoding {
    pub fn new(dim: usize, alpha: f64, beta: f64) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("time encoding width must be positive"));
        }
        if !(alpha > 1.0 && alpha.is_finite()) || !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid(format!(
                "time encoding needs alpha > 1 and beta > 0, got {alpha}, {beta}"
            )));
        }
        let omega = (0..dim).map(|i| alpha.powf(-(i as f64) / beta)).collect();
        Ok(TimeEncoding {
            dim,
            alpha,
            beta,
            omega,
        })
    }

    /// `alpha = beta = sqrt(dim)`; alpha is floored at 2 so narrow encodings
    /// still have decreasing frequencies.
    pub fn with_dim(dim: usize) -> Result<Self> {
        let r = (dim as f64).sqrt();
        TimeEncoding::new(dim, r.max(2.0), r.max(1.0))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn encode_into(&self, dt: f64, out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(&self.omega) {
            *o = (dt * w).cos();
        }
    }

    pub fn encode(&self, dt: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.encode_into(dt, &mut out);
        out
    }
}

/// Token matrix for one edge sequence, zero-padded to `n` rows. Live rows
/// form a prefix, in the sequence's newest-first order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokens {
    pub matrix: Tensor,
    pub live: usize,
    pub events: Vec<usize>,
}

impl Tokens {
    pub fn mask(&self) -> Vec<bool> {
        (0..self.matrix.shape()[0]).map(|i| i < self.live).collect()
    }
}

/// Rows `[time_encode(t0 - t_k) || x^e_k]`.
pub fn edge_tokens(
    store: &EventStore,
    seq: &EdgeSequence,
    enc: &TimeEncoding,
    n: usize,
) -> Result<Tokens> {
    if seq.len() > n {
        return Err(invalid(format!(
            "sequence of {} edges exceeds {n} token rows",
            seq.len()
        )));
    }
    let width = enc.dim() + store.feature_dim();
    let mut data = vec![0.0; n.max(1) * width];
    for (r, &idx) in seq.events.iter().enumerate() {
        let e = store.event(idx);
        let row = &mut data[r * width..(r + 1) * width];
        enc.encode_into(seq.t0 - e.time, &mut row[..enc.dim()]);
        row[enc.dim()..].copy_from_slice(&e.features);
    }
    Ok(Tokens {
        matrix: Tensor::matrix(n.max(1), width, data)?,
        live: seq.len(),
        events: seq.events.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Event;
    use std::f64::consts::PI;

    #[test]
    fn encoding_examples() {
        let e = TimeEncoding::new(3, 2.0, 1.0).unwrap();
        let v = e.encode(PI);
        // cos(pi), cos(pi/2), cos(pi/4)
        assert_eq!(v[0], -1.0);
        assert!(v[1].abs() < 1e-15);
        assert!((v[2] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(e.encode(0.0).iter().all(|&x| x == 1.0));
        let one = TimeEncoding::new(1, 3.0, 2.0).unwrap();
        assert_eq!(one.encode(0.3), vec![0.3f64.cos()]);
        assert!(TimeEncoding::new(3, 1.0, 1.0).is_err());
        assert!(TimeEncoding::new(3, 2.0, 0.0).is_err());
    }

    #[test]
    fn frequencies_decrease() {
        for d in [1, 2, 7, 100] {
            let e = TimeEncoding::with_dim(d).unwrap();
            assert_eq!(e.omega()[0], 1.0);
            assert!(e.omega().windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn tokens_pad_and_concat() {
        let s = EventStore::from_events(
            vec![
                Event::new(0, 1, 1.0, vec![7.0]),
                Event::new(0, 2, 2.0, vec![8.0]),
            ],
            None,
        )
        .unwrap();
        let enc = TimeEncoding::new(2, 2.0, 1.0).unwrap();
        let empty = s.recent_edges(0, 0.5, 4, None).unwrap();
        let t = edge_tokens(&s, &empty, &enc, 4).unwrap();
        assert_eq!(t.matrix.shape(), &[4, 3]);
        assert!(t.matrix.data().iter().all(|&v| v == 0.0));
        assert!(t.mask().iter().all(|m| !m));

        let one = s.recent_edges(0, 1.5, 4, None).unwrap();
        let t = edge_tokens(&s, &one, &enc, 4).unwrap();
        assert_eq!(t.live, 1);
        assert_eq!(t.matrix.row(0), &[0.5f64.cos(), (0.25f64).cos(), 7.0]);
        assert!(t.matrix.row(1).iter().all(|&v| v == 0.0));
    }
}
