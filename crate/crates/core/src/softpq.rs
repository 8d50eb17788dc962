//! Differentiable centroid assignment.
//!
//! Each sub-vector `x_m` (optionally normalized to unit length) is assigned
//! softly with logits `2·alpha·⟨x_m, c_mk⟩`:
//!
//! ```text
//! a_mk = exp(2α⟨x_m, c_mk⟩) / Σ_k' exp(2α⟨x_m, c_mk'⟩)
//! s_m  = Σ_k a_mk c_mk
//! ```
//!
//! `alpha = 0.5` gives the plain softmax over inner products used by the
//! attack losses; `alpha → ∞` recovers hard assignment. Gradients are exact
//! and flow to both the input and the centroids.

use crate::error::{Error, Result};
use crate::numkit::{argmax, dot, softmax_in_place, DenseVector, NORM_EPS};
use crate::pq::{Codebook, PqCode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftPqConfig {
    pub alpha: f64,
    pub normalize_subvectors: bool,
}

impl Default for SoftPqConfig {
    fn default() -> Self {
        SoftPqConfig { alpha: 0.5, normalize_subvectors: true }
    }
}

impl SoftPqConfig {
    pub fn new(alpha: f64, normalize_subvectors: bool) -> Result<Self> {
        let cfg = SoftPqConfig { alpha, normalize_subvectors };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_alpha(self, alpha: f64) -> Self {
        SoftPqConfig { alpha, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be finite and > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Row-stochastic `m × k` assignment probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidDistribution {
    m: usize,
    k: usize,
    probs: Vec<f64>,
    temperature: f64,
}

impl CentroidDistribution {
    /// Wraps explicit probabilities. Rows must be non-negative and sum to 1
    /// within 1e-9; zero entries are allowed so one-hot targets fit.
    pub fn from_probs(m: usize, k: usize, probs: Vec<f64>, temperature: f64) -> Result<Self> {
        if m == 0 || k == 0 {
            return Err(Error::invalid("distribution shape must be positive"));
        }
        if probs.len() != m * k {
            return Err(Error::dims(m * k, probs.len()));
        }
        for (i, row) in probs.chunks_exact(k).enumerate() {
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::invalid(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("row {i} sums to {s}")));
            }
        }
        Ok(CentroidDistribution { m, k, probs, temperature })
    }

    /// One-hot rows at `code`.
    pub fn one_hot(code: &PqCode, k: usize) -> Result<Self> {
        let m = code.indices().len();
        let mut probs = vec![0.0; m * k];
        for (sub, &b) in code.indices().iter().enumerate() {
            if b as usize >= k {
                return Err(Error::invalid(format!("code index {b} out of range (k = {k})")));
            }
            probs[sub * k + b as usize] = 1.0;
        }
        CentroidDistribution::from_probs(m, k, probs, f64::INFINITY)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, sub: usize) -> &[f64] {
        &self.probs[sub * self.k..(sub + 1) * self.k]
    }

    /// The `alpha` that produced the distribution.
    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn argmax(&self, sub: usize) -> usize {
        argmax(self.row(sub))
    }
}

/// Forward state shared by the value and gradient paths.
struct SoftState {
    /// Sub-vectors after optional normalization, concatenated.
    xs: Vec<f64>,
    /// Pre-normalization sub-vector norms.
    norms: Vec<f64>,
    probs: Vec<f64>,
}

fn forward(z: &[f64], cb: &Codebook, cfg: &SoftPqConfig) -> Result<SoftState> {
    cfg.validate()?;
    cb.check_dim(z.len())?;
    let (m, k, d) = (cb.m(), cb.k(), cb.sub_dim());
    let mut xs = z.to_vec();
    let mut norms = vec![1.0; m];
    if cfg.normalize_subvectors {
        for (sub, chunk) in xs.chunks_exact_mut(d).enumerate() {
            let n = dot(chunk, chunk).sqrt();
            norms[sub] = n;
            let scale = n.max(NORM_EPS);
            chunk.iter_mut().for_each(|v| *v /= scale);
        }
    }
    let scale = 2.0 * cfg.alpha;
    let mut probs = Vec::with_capacity(m * k);
    for sub in 0..m {
        let x = &xs[sub * d..(sub + 1) * d];
        let start = probs.len();
        probs.extend((0..k).map(|j| scale * dot(x, cb.centroid(sub, j))));
        softmax_in_place(&mut probs[start..]);
    }
    Ok(SoftState { xs, norms, probs })
}

/// Back through `x̃ = x / max(‖x‖, eps)` for one sub-vector.
fn normalize_backward(xs: &[f64], norm: f64, g: &mut [f64]) {
    if norm >= NORM_EPS {
        let proj = dot(xs, g);
        for (gi, xi) in g.iter_mut().zip(xs) {
            *gi = (*gi - xi * proj) / norm;
        }
    } else {
        g.iter_mut().for_each(|gi| *gi /= NORM_EPS);
    }
}

/// Gradient wrt the input given `dL/dlogit` for every (m, k).
fn logits_to_input(state: &SoftState, cb: &Codebook, cfg: &SoftPqConfig, dlogits: &[f64]) -> Vec<f64> {
    let (m, k, d) = (cb.m(), cb.k(), cb.sub_dim());
    let scale = 2.0 * cfg.alpha;
    let mut grad = vec![0.0; m * d];
    for sub in 0..m {
        let g = &mut grad[sub * d..(sub + 1) * d];
        for j in 0..k {
            let w = scale * dlogits[sub * k + j];
            if w != 0.0 {
                for (gi, ci) in g.iter_mut().zip(cb.centroid(sub, j)) {
                    *gi += w * ci;
                }
            }
        }
        if cfg.normalize_subvectors {
            normalize_backward(&state.xs[sub * d..(sub + 1) * d], state.norms[sub], g);
        }
    }
    grad
}

/// `b_m = argmax_k ⟨z_m, c_mk⟩`, ties to the lowest index.
pub fn hard_assign_cosine(z: &[f64], codebook: &Codebook) -> Result<PqCode> {
    codebook.check_dim(z.len())?;
    let d = codebook.sub_dim();
    let indices = (0..codebook.m())
        .map(|sub| {
            let x = &z[sub * d..(sub + 1) * d];
            let mut best = (0usize, dot(x, codebook.centroid(sub, 0)));
            for j in 1..codebook.k() {
                let s = dot(x, codebook.centroid(sub, j));
                if s > best.1 {
                    best = (j, s);
                }
            }
            best.0 as u16
        })
        .collect();
    Ok(PqCode::new(indices))
}

pub fn soft_distribution(z: &[f64], codebook: &Codebook, config: &SoftPqConfig) -> Result<CentroidDistribution> {
    let state = forward(z, codebook, config)?;
    Ok(CentroidDistribution { m: codebook.m(), k: codebook.k(), probs: state.probs, temperature: config.alpha })
}

fn mix(probs: &[f64], cb: &Codebook) -> Vec<f64> {
    let (k, d) = (cb.k(), cb.sub_dim());
    let mut out = vec![0.0; cb.dim()];
    for sub in 0..cb.m() {
        let s = &mut out[sub * d..(sub + 1) * d];
        for j in 0..k {
            let a = probs[sub * k + j];
            for (si, ci) in s.iter_mut().zip(cb.centroid(sub, j)) {
                *si += a * ci;
            }
        }
    }
    out
}

/// `s = (Σ_k a_1k c_1k, …, Σ_k a_Mk c_Mk)`.
pub fn soft_quantize(z: &[f64], codebook: &Codebook, config: &SoftPqConfig) -> Result<DenseVector> {
    let state = forward(z, codebook, config)?;
    Ok(DenseVector::from_finite(mix(&state.probs, codebook)))
}

/// Soft distribution together with its log-probabilities, computed with a
/// log-sum-exp so that saturated entries keep a finite logarithm.
pub fn log_soft_distribution(
    z: &[f64],
    codebook: &Codebook,
    config: &SoftPqConfig,
) -> Result<(CentroidDistribution, Vec<f64>)> {
    let state = forward(z, codebook, config)?;
    let (k, d) = (codebook.k(), codebook.sub_dim());
    let scale = 2.0 * config.alpha;
    let mut logp = Vec::with_capacity(state.probs.len());
    for sub in 0..codebook.m() {
        let x = &state.xs[sub * d..(sub + 1) * d];
        let start = logp.len();
        logp.extend((0..k).map(|j| scale * dot(x, codebook.centroid(sub, j))));
        let row = &mut logp[start..];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|l| *l -= lse);
    }
    let dist = CentroidDistribution { m: codebook.m(), k, probs: state.probs, temperature: config.alpha };
    Ok((dist, logp))
}

/// Gradient wrt `z` given `dL/dlogit` for every (m, k), where the logits
/// are `2α⟨x_m, c_mk⟩`.
pub fn logit_input_gradient(
    z: &[f64],
    codebook: &Codebook,
    config: &SoftPqConfig,
    dlogits: &[f64],
) -> Result<Vec<f64>> {
    let state = forward(z, codebook, config)?;
    if dlogits.len() != codebook.m() * codebook.k() {
        return Err(Error::dims(codebook.m() * codebook.k(), dlogits.len()));
    }
    Ok(logits_to_input(&state, codebook, config, dlogits))
}

/// Vector-Jacobian product of `soft_distribution` wrt `z`, given
/// `upstream = dL/dp` laid out `m × k`.
pub fn input_gradient(z: &[f64], codebook: &Codebook, config: &SoftPqConfig, upstream: &[f64]) -> Result<Vec<f64>> {
    let state = forward(z, codebook, config)?;
    let k = codebook.k();
    if upstream.len() != codebook.m() * k {
        return Err(Error::dims(codebook.m() * k, upstream.len()));
    }
    let mut dlogits = vec![0.0; upstream.len()];
    for sub in 0..codebook.m() {
        let p = &state.probs[sub * k..(sub + 1) * k];
        let u = &upstream[sub * k..(sub + 1) * k];
        let mean = dot(p, u);
        for j in 0..k {
            dlogits[sub * k + j] = p[j] * (u[j] - mean);
        }
    }
    Ok(logits_to_input(&state, codebook, config, &dlogits))
}

/// Gradients of a loss through `soft_quantize`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftQuantizeGrads {
    /// `dL/dz`, length `D`.
    pub input: Vec<f64>,
    /// `dL/dc_mk`, flat `m × k × sub_dim` like the codebook.
    pub centroids: Vec<f64>,
}

/// Backward pass of `soft_quantize` given `upstream = dL/ds`.
///
/// The centroid part follows the two-term rule
/// `dL/dc_mk = a_mk·g_m + Σ_k' (da_mk'/dc_mk)·⟨c_mk', g_m⟩` with
/// `da_mk'/dc_mk = 2α·x_m·a_mk(1 − a_mk)` for `k' = k` and
/// `−2α·x_m·a_mk'·a_mk` otherwise.
pub fn soft_quantize_backward(
    z: &[f64],
    codebook: &Codebook,
    config: &SoftPqConfig,
    upstream: &[f64],
) -> Result<SoftQuantizeGrads> {
    let state = forward(z, codebook, config)?;
    codebook.check_dim(upstream.len())?;
    let (m, k, d) = (codebook.m(), codebook.k(), codebook.sub_dim());
    let scale = 2.0 * config.alpha;
    let mut centroids = vec![0.0; m * k * d];
    let mut dlogits = vec![0.0; m * k];
    for sub in 0..m {
        let g = &upstream[sub * d..(sub + 1) * d];
        let x = &state.xs[sub * d..(sub + 1) * d];
        let a = &state.probs[sub * k..(sub + 1) * k];
        // ⟨ds_m/da_mk', g_m⟩ = ⟨c_mk', g_m⟩
        let ga: Vec<f64> = (0..k).map(|j| dot(codebook.centroid(sub, j), g)).collect();
        let total = dot(a, &ga);
        for j in 0..k {
            let same = a[j] * (1.0 - a[j]) * ga[j];
            let others = -a[j] * (total - a[j] * ga[j]);
            let coef = scale * (same + others);
            let out = &mut centroids[(sub * k + j) * d..(sub * k + j + 1) * d];
            for ((o, gi), xi) in out.iter_mut().zip(g).zip(x) {
                *o = a[j] * gi + coef * xi;
            }
            dlogits[sub * k + j] = a[j] * (ga[j] - total);
        }
    }
    let input = logits_to_input(&state, codebook, config, &dlogits);
    Ok(SoftQuantizeGrads { input, centroids })
}

/// `dL/dc_mk` for every centroid, given `upstream = dL/ds`.
pub fn centroid_gradient(x: &[f64], codebook: &Codebook, config: &SoftPqConfig, upstream: &[f64]) -> Result<Vec<f64>> {
    Ok(soft_quantize_backward(x, codebook, config, upstream)?.centroids)
}
