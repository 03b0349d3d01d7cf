//! Confounder dictionary: centroids of link embeddings, and the
//! attention-weighted expectation over them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result, SigError};
use crate::params::{ParamId, ParameterSet};
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_MAX_ITERS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    /// `k x l` centroid matrix.
    pub centroids: Tensor,
    /// Sum of squared distances to the assigned centroid, after each
    /// centroid update.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// Nearest centroid, ties to the lower index.
fn nearest(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(row, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn means(x: &Tensor, assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let l = x.dims2().1;
    let mut sums = vec![vec![0.0; l]; k];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sums
}

/// Moves points into empty clusters: each empty cluster takes the point of
/// the currently largest cluster that lies farthest from that cluster's
/// centroid. Returns whether anything moved.
fn repair_empty(x: &Tensor, assignments: &mut [usize], centroids: &mut [Vec<f64>]) -> bool {
    let k = centroids.len();
    let mut moved = false;
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return moved;
        };
        // largest cluster, ties to the lower index
        let big = (0..k)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("k >= 1");
        let far = (0..assignments.len())
            .filter(|&i| assignments[i] == big)
            .map(|i| (i, sq_dist(x.row(i), &centroids[big])))
            .fold(
                (usize::MAX, -1.0),
                |acc, p| if p.1 > acc.1 { p } else { acc },
            )
            .0;
        assignments[far] = empty;
        centroids[empty] = x.row(far).to_vec();
        moved = true;
        let updated = means(x, assignments, k);
        centroids[big] = updated[big].clone();
    }
}

/// k-means with k-means++ seeding and Lloyd iterations until the
/// assignment stops changing or `max_iters` is reached.
pub fn cluster(x: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<Clustering> {
    if x.rank() != 2 {
        return Err(invalid(format!(
            "cluster expects a matrix, got {:?}",
            x.shape()
        )));
    }
    let (rows, _) = x.dims2();
    if k == 0 || k > rows {
        return Err(invalid(format!(
            "cannot form {k} clusters from {rows} rows"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen = vec![false; rows];
    let first = rng.gen_range(0..rows);
    chosen[first] = true;
    centroids.push(x.row(first).to_vec());
    let mut d2: Vec<f64> = (0..rows)
        .map(|i| sq_dist(x.row(i), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = rows - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // fewer distinct points than k: any unused row
            let free: Vec<usize> = (0..rows).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(x.row(pick).to_vec());
        let c = centroids.last().expect("just pushed");
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), c));
        }
    }

    let mut assignments = vec![usize::MAX; rows];
    let mut objective = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        for (i, a) in assignments.iter_mut().enumerate() {
            let (j, _) = nearest(x.row(i), &centroids);
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        let mut next = means(x, &assignments, k);
        for (j, c) in next.iter_mut().enumerate() {
            if !assignments.contains(&j) {
                *c = centroids[j].clone();
            }
        }
        centroids = next;
        changed |= repair_empty(x, &mut assignments, &mut centroids);
        objective.push(
            assignments
                .iter()
                .enumerate()
                .map(|(i, &a)| sq_dist(x.row(i), &centroids[a]))
                .sum(),
        );
        if !changed {
            break;
        }
    }
    let l = x.dims2().1;
    Ok(Clustering {
        assignments,
        centroids: Tensor::matrix(k, l, centroids.concat())?,
        objective,
        iterations,
    })
}

/// `k x l` matrix of cluster means.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfounderDictionary {
    pub centroids: Tensor,
    pub sizes: Vec<usize>,
}

impl ConfounderDictionary {
    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.centroids.shape()[1]
    }
}

/// Row `i` is the mean of the rows of `x` assigned to cluster `i`.
pub fn build_dictionary(
    assignments: &[usize],
    x: &Tensor,
    k: usize,
) -> Result<ConfounderDictionary> {
    let (rows, l) = x.dims2();
    if assignments.len() != rows {
        return Err(invalid(format!(
            "{} assignments for {rows} rows",
            assignments.len()
        )));
    }
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        if a >= k {
            return Err(invalid(format!("assignment {a} out of range for k = {k}")));
        }
        sizes[a] += 1;
    }
    if let Some(j) = sizes.iter().position(|&s| s == 0) {
        return Err(invalid(format!("cluster {j} is empty")));
    }
    let data = means(x, assignments, k).concat();
    Ok(ConfounderDictionary {
        centroids: Tensor::matrix(k, l, data)?,
        sizes,
    })
}

/// Key and query projections of one expectation head.
#[derive(Clone, Copy, Debug)]
pub struct ExpectationParams {
    /// `l x p`, applied to dictionary rows.
    pub key: ParamId,
    /// `|q| x p`, applied to the query.
    pub query: ParamId,
}

impl ExpectationParams {
    pub fn init<R: Rng>(
        params: &mut ParameterSet,
        prefix: &str,
        width: usize,
        query: usize,
        proj: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ExpectationParams {
            key: params.insert_glorot(&format!("{prefix}/key"), width, proj, rng)?,
            query: params.insert_glorot(&format!("{prefix}/query"), query, proj, rng)?,
        })
    }

    pub fn bind_names(params: &ParameterSet, prefix: &str) -> Result<Self> {
        Ok(ExpectationParams {
            key: params.require(&format!("{prefix}/key"))?,
            query: params.require(&format!("{prefix}/query"))?,
        })
    }
}

/// `E = sum_i alpha_i D[i]` with
/// `alpha = softmax((D W_key) (W_query^T q) / sqrt(|q|))`. Evaluated as
/// `D (W_key (W_query^T q))` so the dictionary is never projected whole.
/// Returns `(alpha, E)`.
pub fn confounder_expectation(
    tape: &mut Tape<'_>,
    q: Var,
    dict: Var,
    w_key: Var,
    w_query: Var,
) -> Result<(Var, Var)> {
    let (qt, dt) = (tape.value(q), tape.value(dict));
    let (k, l) = dt.dims2();
    let qn = qt.numel();
    if qt.rank() != 1 || tape.value(w_query).shape()[0] != qn || tape.value(w_key).shape()[0] != l {
        return Err(SigError::Shape {
            op: "confounder_expectation",
            lhs: tape.value(q).shape().to_vec(),
            rhs: tape.value(dict).shape().to_vec(),
        });
    }
    let p = tape.value(w_key).shape()[1];
    let r = tape.matmul(q, w_query)?;
    let r = tape.reshape(r, vec![p, 1])?;
    let s = tape.matmul(w_key, r)?;
    let logits = tape.matmul(dict, s)?;
    let logits = tape.reshape(logits, vec![k])?;
    let logits = tape.scale(logits, 1.0 / (qn as f64).sqrt());
    let alpha = tape.softmax(logits)?;
    let e = tape.matmul(alpha, dict)?;
    Ok((alpha, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, probe, random_inputs};

    fn pts(rows: &[[f64; 2]]) -> Tensor {
        Tensor::matrix(rows.len(), 2, rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn two_obvious_clusters() {
        let x = pts(&[[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]]);
        for seed in 0..10 {
            let c = cluster(&x, 2, 50, seed).unwrap();
            let mut rows: Vec<Vec<f64>> = (0..2).map(|j| c.centroids.row(j).to_vec()).collect();
            rows.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
            assert_eq!(rows, vec![vec![0.0, 0.5], vec![10.0, 10.5]]);
        }
    }

    #[test]
    fn k_one_and_k_rows() {
        let x = pts(&[[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]]);
        let c = cluster(&x, 1, 10, 3).unwrap();
        assert_eq!(c.centroids.row(0), &[3.0, 3.0]);
        let c = cluster(&x, 3, 10, 3).unwrap();
        for i in 0..3 {
            assert_eq!(c.centroids.row(c.assignments[i]), x.row(i));
        }
        assert!(cluster(&x, 4, 10, 3).is_err());
    }

    #[test]
    fn duplicates_still_fill_every_cluster() {
        let x = pts(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [2.0, 2.0]]);
        let c = cluster(&x, 3, 10, 0).unwrap();
        let d = build_dictionary(&c.assignments, &x, 3).unwrap();
        assert!(d.sizes.iter().all(|&s| s > 0));
    }

    #[test]
    fn dictionary_rows_are_cluster_means() {
        let x = pts(&[[1.0, 2.0], [3.0, 4.0], [3.0, 4.0], [9.0, 0.0]]);
        let d = build_dictionary(&[0, 1, 1, 0], &x, 2).unwrap();
        assert_eq!(d.centroids.row(0), &[5.0, 1.0]);
        assert_eq!(d.centroids.row(1), &[3.0, 4.0]);
        assert_eq!(d.sizes, vec![2, 2]);
        assert!(build_dictionary(&[0, 0, 0, 0], &x, 2).is_err());
    }

    #[test]
    fn expectation_examples() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::vector(vec![0.3, -1.2, 2.0]));
        let same = t.constant(
            Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap(),
        );
        let wk = t.constant(Tensor::from_rows(&[vec![0.5, 1.0], vec![-0.3, 2.0]]).unwrap());
        let wq = t.constant(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
        );
        let (_, e) = confounder_expectation(&mut t, q, same, wk, wq).unwrap();
        assert!(t
            .value(e)
            .data()
            .iter()
            .zip([1.0, 2.0])
            .all(|(a, b)| (a - b).abs() < 1e-15));

        let d = t.constant(
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0], vec![-1.0, 7.0]]).unwrap(),
        );
        let zero = t.constant(Tensor::zeros(&[2, 2]));
        let (a, e) = confounder_expectation(&mut t, q, d, zero, wq).unwrap();
        assert!(t
            .value(a)
            .data()
            .iter()
            .all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!((t.value(e).data()[0] - 1.0).abs() < 1e-15);
        assert!((t.value(e).data()[1] - 3.0).abs() < 1e-15);

        let bad = t.constant(Tensor::zeros(&[3, 2]));
        assert!(confounder_expectation(&mut t, q, d, bad, wq).is_err());
    }

    #[test]
    fn expectation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let ins = random_inputs(&[vec![4], vec![3, 5], vec![5, 2], vec![4, 2]], &mut rng);
            let report = grad_check(
                |t, xs| {
                    let (_, e) = confounder_expectation(t, xs[0], xs[1], xs[2], xs[3])?;
                    probe(t, e)
                },
                &ins,
                1e-4,
                1e-3,
            )
            .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }
}
