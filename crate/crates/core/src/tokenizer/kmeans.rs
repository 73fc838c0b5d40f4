use rand::Rng;
use rayon::prelude::*;

use super::TokenizerError;

/// Squared distance accumulated in `f64` in coordinate order.
#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        s += d * d;
    }
    s
}

/// Index of the nearest centroid; ties go to the smallest index.
#[inline]
pub fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Number of pairwise-distinct rows (bitwise comparison).
pub fn distinct_rows(points: &[f32], dim: usize) -> usize {
    let mut rows: Vec<Vec<u32>> = points
        .chunks_exact(dim)
        .map(|r| r.iter().map(|x| x.to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub centroids: Vec<f32>,
    pub labels: Vec<usize>,
    /// Mean squared distance to the assigned centroid after each assignment step.
    pub trace: Vec<f64>,
}

fn assign_all(points: &[f32], centroids: &[f32], dim: usize) -> Vec<(usize, f64)> {
    points
        .par_chunks_exact(dim)
        .with_min_len(64)
        .map(|p| nearest(p, centroids, dim))
        .collect()
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Empty clusters are moved onto the point farthest from its current
/// centroid. Results depend only on the inputs and `rng`'s state because
/// the parallel assignment step is reduced in point order.
pub fn kmeans<R: Rng + ?Sized>(
    points: &[f32],
    dim: usize,
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Result<KmeansResult, TokenizerError> {
    let n = points.len() / dim;
    if k == 0 || n < k {
        return Err(TokenizerError::TooFewPoints { points: n, centroids: k });
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive mass")
        } else {
            return Err(TokenizerError::TooFewPoints {
                points: distinct_rows(points, dim),
                centroids: k,
            });
        };
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }

    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::with_capacity(iters + 1);
    for it in 0..=iters {
        let assigned = assign_all(points, &centroids, dim);
        let err = assigned.iter().map(|a| a.1).sum::<f64>() / n as f64;
        trace.push(err);
        let changed = assigned.iter().zip(&labels).any(|(a, &l)| a.0 != l);
        for (l, a) in labels.iter_mut().zip(&assigned) {
            *l = a.0;
        }
        if it == iters || !changed {
            break;
        }

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(row(i)) {
                *s += x as f64;
            }
        }
        let mut dist: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        for j in 0..k {
            let c = &mut centroids[j * dim..(j + 1) * dim];
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (cv, &s) in c.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *cv = (s * inv) as f32;
                }
            } else {
                let far = dist
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &d)| if d > b.1 { (i, d) } else { b })
                    .0;
                c.copy_from_slice(row(far));
                dist[far] = 0.0;
            }
        }
    }
    Ok(KmeansResult {
        centroids,
        labels,
        trace,
    })
}
