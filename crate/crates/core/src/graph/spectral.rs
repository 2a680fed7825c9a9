use std::ops::RangeInclusive;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Partition, SignedGraph};
use crate::error::{Error, Result};

pub const DEFAULT_K_RANGE: RangeInclusive<usize> = 2..=8;

const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 200;

/// Spectral clustering for every `k` in `k_range`, keeping the partition
/// with the highest signed modularity (ties to the smaller `k`).
///
/// Non-isolated nodes are embedded with the `k` eigenvectors of smallest
/// eigenvalue of the normalized Laplacian of `|W|`, rows scaled to unit
/// length, then clustered by k-means. Isolated nodes become singletons.
pub fn spectral_communities(graph: &SignedGraph, k_range: RangeInclusive<usize>, seed: u64) -> Result<Partition> {
    let n = graph.n_nodes();
    if n < 2 {
        return Err(Error::invalid(format!("spectral clustering needs at least 2 nodes, got {n}")));
    }
    if k_range.is_empty() || *k_range.start() < 1 {
        return Err(Error::config("empty or zero k range"));
    }
    if *k_range.end() > n {
        return Err(Error::invalid(format!("k = {} exceeds the {n} nodes", k_range.end())));
    }
    let active: Vec<usize> = (0..n).filter(|&i| !graph.is_isolated(i)).collect();
    let embedding_full = if active.len() >= 2 { Some(laplacian_eigvecs(graph, &active)) } else { None };

    let mut best: Option<Partition> = None;
    for k in k_range {
        let mut assignment = vec![0usize; n];
        let mut next = 0;
        if let Some(vecs) = &embedding_full {
            let kk = k.min(active.len());
            let mut emb = vecs.columns(0, kk).into_owned();
            for mut row in emb.row_iter_mut() {
                let norm = row.norm();
                if norm > 0.0 {
                    row /= norm;
                }
            }
            let labels = kmeans(&emb, kk, KMEANS_RESTARTS, seed.wrapping_add(k as u64))?;
            for (slot, &node) in active.iter().enumerate() {
                assignment[node] = labels[slot];
            }
            next = kk;
        } else if let Some(&node) = active.first() {
            assignment[node] = 0;
            next = 1;
        }
        for i in 0..n {
            if graph.is_isolated(i) {
                assignment[i] = next;
                next += 1;
            }
        }
        let p = Partition::new(graph, &assignment)?;
        if best.as_ref().map_or(true, |b| p.signed_modularity > b.signed_modularity + 1e-12) {
            best = Some(p);
        }
    }
    Ok(best.expect("non-empty k range"))
}

/// Eigenvectors of `I - D^-1/2 |W| D^-1/2` over `active`, columns ordered
/// by ascending eigenvalue.
fn laplacian_eigvecs(graph: &SignedGraph, active: &[usize]) -> DMatrix<f64> {
    let m = active.len();
    let w = graph.weight_matrix();
    let inv_sqrt: Vec<f64> = active.iter().map(|&i| 1.0 / graph.k_abs(i).sqrt()).collect();
    let lap = DMatrix::from_fn(m, m, |a, b| {
        let off = w[(active[a], active[b])].abs() * inv_sqrt[a] * inv_sqrt[b];
        if a == b {
            1.0 - off
        } else {
            -off
        }
    });
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    DMatrix::from_fn(m, m, |r, c| eig.eigenvectors[(r, order[c])])
}

/// Lloyd's k-means on the rows of `points` with k-means++ seeding; the
/// restart with the lowest within-cluster sum of squares wins.
pub fn kmeans(points: &DMatrix<f64>, k: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k-means with k = {k} on {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let (inertia, labels) = lloyd(points, k, &mut rng);
        if best.as_ref().map_or(true, |b| inertia < b.0 - 1e-12) {
            best = Some((inertia, labels));
        }
    }
    Ok(super::relabel(&best.expect("at least one restart").1))
}

fn dist2(points: &DMatrix<f64>, r: usize, centers: &DMatrix<f64>, c: usize) -> f64 {
    (0..points.ncols()).map(|j| (points[(r, j)] - centers[(c, j)]).powi(2)).sum()
}

fn lloyd(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<usize>) {
    let (n, d) = points.shape();
    let mut centers = DMatrix::zeros(k, d);
    let first = rng.gen_range(0..n);
    centers.row_mut(0).copy_from(&points.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|r| dist2(points, r, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (r, w) in nearest.iter().enumerate() {
                if target < *w {
                    chosen = r;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).copy_from(&points.row(pick));
        for r in 0..n {
            nearest[r] = nearest[r].min(dist2(points, r, &centers, c));
        }
    }
    let mut labels = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for r in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dd = dist2(points, r, &centers, c);
                if dd < best_d - 1e-15 {
                    best = c;
                    best_d = dd;
                }
            }
            if labels[r] != best {
                labels[r] = best;
                changed = true;
            }
        }
        let mut sums = DMatrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for r in 0..n {
            let mut row = sums.row_mut(labels[r]);
            row += points.row(r);
            counts[labels[r]] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at the point farthest from its center.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist2(points, a, &centers, labels[a])
                            .total_cmp(&dist2(points, b, &centers, labels[b]))
                            .then(b.cmp(&a))
                    })
                    .expect("non-empty");
                centers.row_mut(c).copy_from(&points.row(far));
                labels[far] = c;
                changed = true;
            } else {
                let mean = sums.row(c) / counts[c] as f64;
                centers.row_mut(c).copy_from(&mean);
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = (0..n).map(|r| dist2(points, r, &centers, labels[r])).sum();
    (inertia, labels)
}
