use std::cmp::Ordering;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result, SigError};
use crate::tensor::Tensor;

/// One endpoint's mixer output: an `N x hidden` matrix whose first `live`
/// rows are real edges.
#[derive(Clone, Copy, Debug)]
pub struct SideRows {
    pub f: Var,
    pub live: usize,
}

/// Attention masks over the two endpoint sequences. A side with no live
/// edges has no mask.
#[derive(Clone, Copy, Debug)]
pub struct TemporalScores {
    pub m_u: Option<Var>,
    pub m_v: Option<Var>,
}

fn live_mean(tape: &mut Tape<'_>, side: SideRows) -> Result<Var> {
    let (n, h) = tape.value(side.f).dims2();
    if side.live == 0 {
        return Ok(tape.constant(Tensor::zeros(&[h])));
    }
    // padded rows of F are zero, so rescale the full-row mean
    let m = tape.mean(side.f, 0)?;
    Ok(tape.scale(m, n as f64 / side.live as f64))
}

/// `softmax(K q / sqrt(h))` over the live rows of `keys`, with `-inf`
/// logits on padding.
fn masked_attention(tape: &mut Tape<'_>, keys: SideRows, q: Var, w_key: Var) -> Result<Var> {
    let (n, h) = tape.value(keys.f).dims2();
    let k = tape.matmul(keys.f, w_key)?;
    let qc = tape.reshape(q, vec![h, 1])?;
    let logits = tape.matmul(k, qc)?;
    let logits = tape.reshape(logits, vec![n])?;
    let logits = tape.scale(logits, 1.0 / (h as f64).sqrt());
    let mask = tape.constant(Tensor::vector(
        (0..n)
            .map(|i| {
                if i < keys.live {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect(),
    ));
    let logits = tape.add(logits, mask)?;
    tape.softmax(logits)
}

/// `q_u = W1 mean(F_u)`, `K_v = F_v W2`, `M_v = softmax(q_u . K_v / sqrt(h))`,
/// and symmetrically for `M_u`. An empty side contributes a zero query.
pub fn temporal_scores(
    tape: &mut Tape<'_>,
    u: SideRows,
    v: SideRows,
    w_query: Var,
    w_key: Var,
) -> Result<TemporalScores> {
    if u.live == 0 && v.live == 0 {
        return Err(SigError::NoTemporalContext);
    }
    let mu = live_mean(tape, u)?;
    let mv = live_mean(tape, v)?;
    let q_u = tape.matmul(mu, w_query)?;
    let q_v = tape.matmul(mv, w_query)?;
    let m_v = if v.live > 0 {
        Some(masked_attention(tape, v, q_u, w_key)?)
    } else {
        None
    };
    let m_u = if u.live > 0 {
        Some(masked_attention(tape, u, q_v, w_key)?)
    } else {
        None
    };
    Ok(TemporalScores { m_u, m_v })
}

/// Positions of the `k` best entries of `scores`, best first. Ties go to the
/// larger `times` entry, then to the lower position.
pub fn select_top_k(scores: &[f64], times: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(times[b].partial_cmp(&times[a]).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Score-weighted mean of the selected rows of `f`, with weights given by
/// `m` renormalised over the selection. Gradients reach `m`.
pub fn pool_selected(tape: &mut Tape<'_>, f: Var, m: Var, selected: &[usize]) -> Result<Var> {
    if selected.is_empty() {
        return Err(invalid("pooling over an empty selection"));
    }
    let n = tape.value(m).numel();
    let col = tape.reshape(m, vec![n, 1])?;
    let w = tape.gather_rows(col, selected)?;
    let w = tape.reshape(w, vec![selected.len()])?;
    let w = tape.normalize(w)?;
    let rows = tape.gather_rows(f, selected)?;
    tape.matmul(w, rows)
}

/// `H^T = [h_u || h_v]`; an empty side contributes zeros.
pub fn temporal_repr(
    tape: &mut Tape<'_>,
    u: SideRows,
    v: SideRows,
    scores: &TemporalScores,
    sel_u: &[usize],
    sel_v: &[usize],
) -> Result<Var> {
    let h = tape.value(u.f).dims2().1;
    let mut side = |f: Var, m: Option<Var>, sel: &[usize]| -> Result<Var> {
        match m {
            Some(m) if !sel.is_empty() => pool_selected(tape, f, m, sel),
            _ => Ok(tape.constant(Tensor::zeros(&[h]))),
        }
    };
    let hu = side(u.f, scores.m_u, sel_u)?;
    let hv = side(v.f, scores.m_v, sel_v)?;
    tape.concat(&[hu, hv], 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, probe, random_inputs};
    use crate::tensor::{dot, softmax_slice};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(f).collect()).unwrap()
    }

    #[test]
    fn singleton_and_uniform_scores() {
        let mut t = Tape::new();
        let fu = t.constant(mat(3, 2, |i| if i < 4 { i as f64 * 0.3 } else { 0.0 }));
        let fv = t.constant(mat(3, 2, |i| if i < 2 { 0.7 } else { 0.0 }));
        let w = t.constant(Tensor::eye(2));
        let s = temporal_scores(
            &mut t,
            SideRows { f: fu, live: 2 },
            SideRows { f: fv, live: 1 },
            w,
            w,
        )
        .unwrap();
        assert_eq!(t.value(s.m_v.unwrap()).data(), &[1.0, 0.0, 0.0]);

        let same = t.constant(mat(3, 2, |_| 0.4));
        let s = temporal_scores(
            &mut t,
            SideRows { f: fu, live: 2 },
            SideRows { f: same, live: 3 },
            w,
            w,
        )
        .unwrap();
        for &x in t.value(s.m_v.unwrap()).data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_sides() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[2, 2]));
        let w = t.constant(Tensor::eye(2));
        let empty = SideRows { f: z, live: 0 };
        assert!(matches!(
            temporal_scores(&mut t, empty, empty, w, w),
            Err(SigError::NoTemporalContext)
        ));
        let fv = t.constant(mat(2, 2, |i| i as f64));
        let s = temporal_scores(&mut t, empty, SideRows { f: fv, live: 2 }, w, w).unwrap();
        assert!(s.m_u.is_none());
        // zero query: uniform over v's live rows
        assert_eq!(t.value(s.m_v.unwrap()).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_scores_match_unpadded_dense_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (n, h, lu, lv) = (5, 3, 4, 2);
            let ins = random_inputs(&[vec![n, h], vec![n, h], vec![h, h], vec![h, h]], &mut rng);
            let mut fu = ins[0].clone();
            let mut fv = ins[1].clone();
            fu.data_mut()[lu * h..].iter_mut().for_each(|x| *x = 0.0);
            fv.data_mut()[lv * h..].iter_mut().for_each(|x| *x = 0.0);
            let mut t = Tape::new();
            let (a, b) = (t.constant(fu.clone()), t.constant(fv.clone()));
            let (w1, w2) = (t.constant(ins[2].clone()), t.constant(ins[3].clone()));
            let s = temporal_scores(
                &mut t,
                SideRows { f: a, live: lu },
                SideRows { f: b, live: lv },
                w1,
                w2,
            )
            .unwrap();

            // oracle over live rows only
            let mean = |f: &Tensor, l: usize| -> Vec<f64> {
                (0..h)
                    .map(|c| (0..l).map(|r| f.row(r)[c]).sum::<f64>() / l as f64)
                    .collect()
            };
            let vecmat = |x: &[f64], w: &Tensor| -> Vec<f64> {
                (0..h)
                    .map(|c| (0..h).map(|k| x[k] * w.row(k)[c]).sum())
                    .collect()
            };
            let q_u = vecmat(&mean(&fu, lu), &ins[2]);
            let logits: Vec<f64> = (0..lv)
                .map(|r| dot(&vecmat(fv.row(r), &ins[3]), &q_u) / (h as f64).sqrt())
                .collect();
            let expect = softmax_slice(&logits).unwrap();
            let got = t.value(s.m_v.unwrap()).data();
            for r in 0..n {
                let e = if r < lv { expect[r] } else { 0.0 };
                assert!((got[r] - e).abs() < 1e-12);
            }
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(
            select_top_k(&[0.1, 0.5, 0.3], &[3.0, 2.0, 1.0], 2),
            vec![1, 2]
        );
        assert_eq!(select_top_k(&[0.1, 0.5, 0.3], &[0.0; 3], 10), vec![1, 2, 0]);
        // tie: the more recent edge wins even at a higher position
        assert_eq!(select_top_k(&[0.4, 0.4, 0.2], &[1.0, 2.0, 3.0], 1), vec![1]);
        assert_eq!(select_top_k(&[0.4, 0.4], &[2.0, 2.0], 1), vec![0]);
    }

    proptest! {
        #[test]
        fn top_k_matches_exhaustive_oracle(
            scores in prop::collection::vec(0u8..6, 0..12),
            times in prop::collection::vec(0u8..4, 12),
            k in 0usize..14,
        ) {
            let s: Vec<f64> = scores.iter().map(|&x| x as f64 / 10.0).collect();
            let t: Vec<f64> = times[..s.len()].iter().map(|&x| x as f64).collect();
            let got = select_top_k(&s, &t, k);
            // an entry is selected iff fewer than k entries beat it
            let beats = |a: usize, b: usize| s[a] > s[b] || (s[a] == s[b] && (t[a] > t[b] || (t[a] == t[b] && a < b)));
            let mut oracle: Vec<usize> = (0..s.len())
                .filter(|&i| (0..s.len()).filter(|&j| beats(j, i)).count() < k)
                .collect();
            oracle.sort_by_key(|&i| (0..s.len()).filter(|&j| beats(j, i)).count());
            prop_assert_eq!(got, oracle);
        }
    }

    #[test]
    fn pooling_examples() {
        let mut t = Tape::new();
        let f = t.constant(mat(3, 2, |i| i as f64));
        let m = t.constant(Tensor::vector(vec![0.2, 0.2, 0.6]));
        let one = pool_selected(&mut t, f, m, &[2]).unwrap();
        assert_eq!(t.value(one).data(), &[4.0, 5.0]);
        let two = pool_selected(&mut t, f, m, &[0, 1]).unwrap();
        assert_eq!(t.value(two).data(), &[1.0, 2.0]);
    }

    #[test]
    fn extract_and_pool_gradients_reach_both_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let ins = random_inputs(&[vec![4, 3], vec![4, 3], vec![3, 3], vec![3, 3]], &mut rng);
            let report = grad_check(
                |t, xs| {
                    let u = SideRows { f: xs[0], live: 4 };
                    let v = SideRows { f: xs[1], live: 4 };
                    let s = temporal_scores(t, u, v, xs[2], xs[3])?;
                    // fixed selection: gradient flows through the renormalised weights
                    let h = temporal_repr(t, u, v, &s, &[0, 2], &[1, 3, 0])?;
                    probe(t, h)
                },
                &ins,
                1e-4,
                1e-3,
            )
            .unwrap();
            assert!(report.passed(), "{report:?}");

            let mut t = Tape::new();
            let xs: Vec<Var> = ins.iter().map(|x| t.input(x.clone())).collect();
            let u = SideRows { f: xs[0], live: 4 };
            let v = SideRows { f: xs[1], live: 4 };
            let s = temporal_scores(&mut t, u, v, xs[2], xs[3]).unwrap();
            let h = temporal_repr(&mut t, u, v, &s, &[0, 2], &[1, 3, 0]).unwrap();
            let l = probe(&mut t, h).unwrap();
            let g = t.backward(l).unwrap();
            for w in [xs[2], xs[3]] {
                assert!(g.wrt(w).unwrap().iter().any(|x| x.abs() > 1e-6));
            }
        }
    }
}
