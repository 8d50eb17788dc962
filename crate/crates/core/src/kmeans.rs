//! Lloyd's k-means with k-means++ seeding.
//!
//! The assignment step runs in parallel; centroid sums are reduced over
//! fixed-size chunks in chunk order, so results do not depend on how many
//! worker threads are available.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numkit::{sq_dist, DenseVector, Rng};

const REDUCE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KMeansInit {
    KMeansPlusPlus,
    RandomPoints,
}

#[derive(Debug, Clone)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub init: KMeansInit,
    /// Independent restarts; the run with the lowest final inertia wins.
    pub n_init: usize,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        KMeansConfig { k, max_iters: 100, tol: 1e-6, seed: 0, init: KMeansInit::KMeansPlusPlus, n_init: 1 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_init(mut self, init: KMeansInit) -> Self {
        self.init = init;
        self
    }

    pub fn with_restarts(mut self, n_init: usize) -> Self {
        self.n_init = n_init;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.max_iters == 0 || self.n_init == 0 {
            return Err(Error::invalid("max_iters and n_init must be at least 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid(format!("tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<DenseVector>,
    pub assignments: Vec<usize>,
    /// Final `Σ ‖x − q(x)‖²`.
    pub inertia: f64,
    pub iters_run: usize,
    /// Inertia after every assignment step, final assignment last.
    pub inertia_history: Vec<f64>,
}

/// Index of the nearest centroid by squared Euclidean distance, ties to the
/// lowest index.
pub fn nearest_centroid(point: &[f64], centroids: &[DenseVector]) -> Result<usize> {
    let first = centroids.first().ok_or(Error::Empty("centroid list"))?;
    if let Some(c) = centroids.iter().find(|c| c.dim() != point.len()) {
        return Err(Error::dims(c.dim(), point.len()));
    }
    debug_assert_eq!(first.dim(), point.len());
    Ok(nearest(point, centroids).0)
}

fn nearest(point: &[f64], centroids: &[DenseVector]) -> (usize, f64) {
    let mut best = (0, sq_dist(point, &centroids[0]));
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn count_distinct(points: &[DenseVector]) -> usize {
    let mut keys: Vec<Vec<u64>> = points.iter().map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect()).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn init_plus_plus(points: &[DenseVector], k: usize, rng: &mut Rng) -> Vec<DenseVector> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.index(points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut pick = None;
        if total > 0.0 {
            let mut target = rng.uniform() * total;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            // rounding can leave `target` just past the last positive weight
            if pick.is_none() {
                pick = d2.iter().rposition(|&w| w > 0.0);
            }
        }
        let Some(i) = pick else { break };
        let c = points[i].clone();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn init_random(points: &[DenseVector], k: usize, rng: &mut Rng) -> Vec<DenseVector> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    rng.shuffle(&mut order);
    let mut centroids: Vec<DenseVector> = Vec::with_capacity(k);
    for i in order {
        if centroids.iter().all(|c| c != &points[i]) {
            centroids.push(points[i].clone());
            if centroids.len() == k {
                break;
            }
        }
    }
    centroids
}

fn assign(points: &[DenseVector], centroids: &[DenseVector]) -> (Vec<usize>, Vec<f64>) {
    points.par_iter().map(|p| nearest(p, centroids)).unzip()
}

/// Per-cluster coordinate sums and counts, reduced chunk by chunk in order.
fn cluster_sums(points: &[DenseVector], assignments: &[usize], k: usize, dim: usize) -> (Vec<f64>, Vec<usize>) {
    let partials: Vec<(Vec<f64>, Vec<usize>)> = points
        .par_chunks(REDUCE_CHUNK)
        .zip(assignments.par_chunks(REDUCE_CHUNK))
        .map(|(pts, asg)| {
            let mut sums = vec![0.0; k * dim];
            let mut counts = vec![0usize; k];
            for (p, &a) in pts.iter().zip(asg) {
                counts[a] += 1;
                for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p.iter()) {
                    *s += v;
                }
            }
            (sums, counts)
        })
        .collect();
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (s, c) in partials {
        for (acc, v) in sums.iter_mut().zip(s) {
            *acc += v;
        }
        for (acc, v) in counts.iter_mut().zip(c) {
            *acc += v;
        }
    }
    (sums, counts)
}

/// Moves each empty cluster's centroid onto the worst-fit point, worst first,
/// skipping points that coincide with a centroid chosen earlier in the repair.
fn repair_empty(points: &[DenseVector], centroids: &mut [DenseVector], counts: &[usize], dists: &[f64]) {
    let empty: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] == 0).collect();
    if empty.is_empty() {
        return;
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
    let mut taken: Vec<usize> = Vec::new();
    let mut cursor = order.into_iter();
    for j in empty {
        for i in cursor.by_ref() {
            if taken.iter().all(|&t| points[t] != points[i]) {
                centroids[j] = points[i].clone();
                taken.push(i);
                break;
            }
        }
    }
}

pub fn train_kmeans(points: &[DenseVector], config: &KMeansConfig) -> Result<KMeansResult> {
    config.validate()?;
    let first = points.first().ok_or(Error::Empty("k-means input"))?;
    let dim = first.dim();
    if let Some(p) = points.iter().find(|p| p.dim() != dim) {
        return Err(Error::dims(dim, p.dim()));
    }
    let k = config.k;
    if k > points.len() {
        return Err(Error::invalid(format!("k = {k} exceeds the number of points ({})", points.len())));
    }
    let distinct = count_distinct(points);
    if k > distinct {
        return Err(Error::invalid(format!("k = {k} exceeds the number of distinct points ({distinct})")));
    }

    let mut best: Option<KMeansResult> = None;
    for restart in 0..config.n_init {
        let rng = if restart == 0 { Rng::new(config.seed) } else { Rng::with_stream(config.seed, restart as u64) };
        let run = lloyd(points, config, dim, rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

fn lloyd(points: &[DenseVector], config: &KMeansConfig, dim: usize, mut rng: Rng) -> KMeansResult {
    let k = config.k;
    let mut centroids = match config.init {
        KMeansInit::KMeansPlusPlus => init_plus_plus(points, k, &mut rng),
        KMeansInit::RandomPoints => init_random(points, k, &mut rng),
    };
    debug_assert_eq!(centroids.len(), k);

    let mut history = Vec::new();
    let mut iters_run = 0;
    for _ in 0..config.max_iters {
        iters_run += 1;
        let (assignments, dists) = assign(points, &centroids);
        history.push(dists.iter().sum());

        let (sums, counts) = cluster_sums(points, &assignments, k, dim);
        let mut updated: Vec<DenseVector> = (0..k)
            .map(|j| {
                if counts[j] == 0 {
                    centroids[j].clone()
                } else {
                    let n = counts[j] as f64;
                    DenseVector::from_finite(sums[j * dim..(j + 1) * dim].iter().map(|s| s / n).collect())
                }
            })
            .collect();
        repair_empty(points, &mut updated, &counts, &dists);

        let movement = centroids.iter().zip(&updated).map(|(a, b)| sq_dist(a, b).sqrt()).fold(0.0, f64::max);
        centroids = updated;
        if movement < config.tol {
            break;
        }
    }

    let (mut assignments, mut dists) = assign(points, &centroids);
    // Guarantees every centroid owns a point; terminates because k <= distinct.
    for _ in 0..k {
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            break;
        }
        repair_empty(points, &mut centroids, &counts, &dists);
        (assignments, dists) = assign(points, &centroids);
    }
    let inertia = dists.iter().sum();
    history.push(inertia);

    KMeansResult { centroids, assignments, inertia, iters_run, inertia_history: history }
}
