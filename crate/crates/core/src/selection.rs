//! Representative-interval selection.
//!
//! Two methods: uniform random sampling with equal weights, and k-means over
//! instruction-weighted block vectors with k chosen by silhouette score.
//! Both are fully determined by their seed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::{IntervalProfile, ProfileSet};

pub const DEFAULT_MAX_CLUSTERS: usize = 50;
pub const DEFAULT_MAX_ITERS: usize = 300;
/// Independent k-means++ restarts per k; the lowest-WCSS run is kept.
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Random,
    KMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chosen {
    pub interval_id: u64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: Method,
    pub seed: u64,
    pub k_used: Option<usize>,
    pub chosen: Vec<Chosen>,
    /// Silhouette score per swept k (k-means only).
    #[serde(default)]
    pub silhouette_by_k: BTreeMap<usize, f64>,
    /// Cluster label of every full interval, indexed by interval id (k-means only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub assignments: Vec<usize>,
}

impl SelectionResult {
    pub fn weight_sum(&self) -> f64 {
        self.chosen.iter().map(|c| c.weight).sum()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("selection serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<SelectionResult> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

pub fn select_random(profiles: &ProfileSet, n: usize, seed: u64) -> Result<SelectionResult> {
    let pool = profiles.full_intervals();
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if n == 0 || n > pool.len() {
        return Err(Error::NTooLarge {
            requested: n,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<u64> = index::sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i].interval_id)
        .collect();
    picked.sort_unstable();
    let weight = 1.0 / n as f64;
    Ok(SelectionResult {
        method: Method::Random,
        seed,
        k_used: None,
        chosen: picked
            .into_iter()
            .map(|interval_id| Chosen {
                interval_id,
                weight,
            })
            .collect(),
        silhouette_by_k: BTreeMap::new(),
        assignments: Vec::new(),
    })
}

/// Dense vector of each block's share of the interval's instructions.
pub fn normalize_bbv(interval: &IntervalProfile, profiles: &ProfileSet) -> Vec<f64> {
    let size = interval.actual_size as f64;
    let mut v = vec![0.0; profiles.block_table.len()];
    for e in &interval.entries {
        let len = profiles.block_table.inst_count(e.bb_id).unwrap_or(0);
        v[e.bb_id as usize] = (e.count * len) as f64 / size;
    }
    v
}

/// Squared Euclidean distance, accumulated in fixed point so the result does
/// not depend on the order of the coordinates.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let max = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .fold(0.0f64, f64::max);
    if max == 0.0 || !max.is_finite() {
        return max;
    }
    // Scale the largest term to just below 2^100; the sum of up to 2^26 terms
    // then fits an i128 exactly.
    let exp = max.log2().ceil() as i32;
    let scale = 2f64.powi(100 - exp);
    let total: i128 = a
        .iter()
        .zip(b)
        .map(|(x, y)| ((x - y) * (x - y) * scale) as i128)
        .sum();
    total as f64 / scale
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squared distances.
    pub wcss: f64,
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave the walk short of the target.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            // Every point coincides with a center: take the first unused index.
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize) -> Clustering {
    let n = points.len();
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(p, &centroids);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        // Refill clusters that lost every point with the point farthest from
        // its own centroid.
        loop {
            let mut sizes = vec![0usize; k];
            for &a in &assignments {
                sizes[a] += 1;
            }
            let Some(empty) = sizes.iter().position(|&s| s == 0) else {
                break;
            };
            let far = (0..n)
                .filter(|&i| sizes[assignments[i]] > 1)
                .max_by(|&i, &j| {
                    let di = squared_distance(&points[i], &centroids[assignments[i]]);
                    let dj = squared_distance(&points[j], &centroids[assignments[j]]);
                    di.total_cmp(&dj).then(j.cmp(&i))
                })
                .expect("k <= n leaves a cluster with two points");
            assignments[far] = empty;
            centroids[empty] = points[far].clone();
            changed = true;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut sizes = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            sizes[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (c, sum) in sums.into_iter().enumerate() {
            centroids[c] = sum.into_iter().map(|s| s / sizes[c] as f64).collect();
        }
        if !changed {
            break;
        }
    }
    refine_single_moves(
        points,
        &mut assignments,
        &mut centroids,
        max_iters.max(1) * n,
    );
    let wcss = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum();
    Clustering {
        assignments,
        centroids,
        wcss,
    }
}

/// Moves single points between clusters while some move lowers the WCSS,
/// taking the largest decrease each time (ties: lowest point, then lowest
/// cluster). Moving x from A to B changes the WCSS by
/// |B|/(|B|+1)·d(x,c_B)² − |A|/(|A|−1)·d(x,c_A)².
/// A partition with no improving move is also a Lloyd fixpoint.
fn refine_single_moves(
    points: &[Vec<f64>],
    assignments: &mut [usize],
    centroids: &mut [Vec<f64>],
    max_moves: usize,
) {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for _ in 0..max_moves {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, p) in points.iter().enumerate() {
            let from = assignments[i];
            if sizes[from] < 2 {
                continue;
            }
            let nf = sizes[from] as f64;
            let removal = nf / (nf - 1.0) * squared_distance(p, &centroids[from]);
            for to in (0..k).filter(|&c| c != from) {
                let nt = sizes[to] as f64;
                let delta = nt / (nt + 1.0) * squared_distance(p, &centroids[to]) - removal;
                // Relative guard against moves that only win by rounding.
                if delta < -1e-12 * removal && best.is_none_or(|(d, _, _)| delta < d) {
                    best = Some((delta, i, to));
                }
            }
        }
        let Some((_, i, to)) = best else {
            return;
        };
        let from = assignments[i];
        sizes[from] -= 1;
        sizes[to] += 1;
        assignments[i] = to;
        for c in [from, to] {
            centroids[c] = mean_of(points, assignments, c, sizes[c]);
        }
    }
}

fn mean_of(points: &[Vec<f64>], assignments: &[usize], cluster: usize, size: usize) -> Vec<f64> {
    let mut sum = vec![0.0; points[0].len()];
    for (p, _) in points
        .iter()
        .zip(assignments)
        .filter(|(_, &a)| a == cluster)
    {
        for (s, x) in sum.iter_mut().zip(p) {
            *s += x;
        }
    }
    sum.into_iter().map(|s| s / size as f64).collect()
}

/// Lloyd's algorithm from a single seeded k-means++ start.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<Clustering> {
    kmeans_restarts(points, k, seed, max_iters, 1)
}

/// Best (lowest WCSS, earliest on ties) of `restarts` seeded k-means runs.
pub fn kmeans_restarts(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<Clustering> {
    if k == 0 || k > points.len() {
        return Err(Error::KOutOfRange {
            k,
            points: points.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..restarts.max(1) {
        let init = kmeans_pp_init(points, k, &mut rng);
        let run = lloyd(points, init, max_iters);
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Mean silhouette coefficient. Points alone in their cluster score 0.
pub fn silhouette(points: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    let labels: Vec<usize> = {
        let mut l = assignments.to_vec();
        l.sort_unstable();
        l.dedup();
        l
    };
    if labels.len() < 2 {
        return Err(Error::SingleCluster);
    }
    let slot: BTreeMap<usize, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let sizes = {
        let mut s = vec![0usize; labels.len()];
        for a in assignments {
            s[slot[a]] += 1;
        }
        s
    };
    let n = points.len();
    let mut total = 0.0;
    let mut sums = vec![0.0; labels.len()];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[slot[&assignments[j]]] += distance(&points[i], &points[j]);
            }
        }
        let own = slot[&assignments[i]];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..labels.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Per-k seed so each k's clustering is independent of the sweep range.
fn seed_for_k(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn select_kmeans(profiles: &ProfileSet, n_max: usize, seed: u64) -> Result<SelectionResult> {
    let pool = profiles.full_intervals();
    if pool.len() < 2 {
        return Err(Error::EmptyPool);
    }
    let points: Vec<Vec<f64>> = pool.iter().map(|p| normalize_bbv(p, profiles)).collect();
    let n = points.len();

    let all_identical = points.iter().all(|p| p == &points[0]);
    let mut silhouette_by_k = BTreeMap::new();
    let clustering = if all_identical || n_max < 2 {
        kmeans_restarts(&points, 1, seed_for_k(seed, 1), DEFAULT_MAX_ITERS, 1)?
    } else {
        // More clusters than distinct points would force coincident centroids.
        let distinct = {
            let mut d: Vec<&Vec<f64>> = points.iter().collect();
            d.sort_by(|a, b| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            d.dedup();
            d.len()
        };
        let upper = n_max.min(n - 1).max(2).min(distinct);
        let mut best: Option<(f64, Clustering)> = None;
        for k in 2..=upper {
            let c = kmeans_restarts(
                &points,
                k,
                seed_for_k(seed, k),
                DEFAULT_MAX_ITERS,
                DEFAULT_RESTARTS,
            )?;
            let Ok(score) = silhouette(&points, &c.assignments) else {
                continue;
            };
            silhouette_by_k.insert(k, score);
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, c));
            }
        }
        best.expect("k = 2 always yields two clusters").1
    };

    let k = clustering.centroids.len();
    let mut chosen = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<usize> = (0..n).filter(|&i| clustering.assignments[i] == c).collect();
        let rep = members
            .iter()
            .copied()
            .min_by(|&i, &j| {
                squared_distance(&points[i], &clustering.centroids[c])
                    .total_cmp(&squared_distance(&points[j], &clustering.centroids[c]))
                    .then(pool[i].interval_id.cmp(&pool[j].interval_id))
            })
            .expect("clusters are nonempty");
        chosen.push(Chosen {
            interval_id: pool[rep].interval_id,
            weight: members.len() as f64 / n as f64,
        });
    }
    chosen.sort_by_key(|c| c.interval_id);
    Ok(SelectionResult {
        method: Method::KMeans,
        seed,
        k_used: Some(k),
        chosen,
        silhouette_by_k,
        assignments: clustering.assignments,
    })
}
