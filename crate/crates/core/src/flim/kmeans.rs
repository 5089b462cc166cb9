use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub objective: f64,
    /// Objective after initialization and after every Lloyd iteration.
    pub history: Vec<f64>,
    /// k actually used; smaller than the request when there are fewer
    /// distinct points.
    pub k: usize,
    pub requested_k: usize,
}

impl KMeans {
    pub fn clamped(&self) -> bool {
        self.k < self.requested_k
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

/// Index of the nearest centroid, lowest index on ties.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut objective = 0.0;
    let assignment = points
        .iter()
        .map(|p| {
            let (j, d) = nearest(p, centroids);
            objective += d;
            j
        })
        .collect();
    (assignment, objective)
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    if target < d {
                        chosen = Some(i);
                        break;
                    }
                    target -= d;
                }
            }
            // Rounding can leave `target` just past the last positive weight.
            chosen.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // Only reachable when every point coincides with a centroid.
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm with seeded k-means++ initialization.
///
/// Stops when assignments are stable or after 100 iterations. Empty
/// clusters keep their previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if points.is_empty() {
        return Err(Error::Empty("k-means points"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("k-means points differ in dimension".into()));
    }
    let k_eff = k.min(distinct_count(points));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k_eff, &mut rng);
    let (mut assignment, mut objective) = assign(points, &centroids);
    let mut history = vec![objective];

    for _ in 0..MAX_ITERATIONS {
        let mut sums = vec![vec![0.0; dim]; k_eff];
        let mut counts = vec![0usize; k_eff];
        for (p, &j) in points.iter().zip(&assignment) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
        let (next, obj) = assign(points, &centroids);
        objective = obj;
        history.push(obj);
        if next == assignment {
            break;
        }
        assignment = next;
    }

    Ok(KMeans {
        centroids,
        assignment,
        objective,
        history,
        k: k_eff,
        requested_k: k,
    })
}
