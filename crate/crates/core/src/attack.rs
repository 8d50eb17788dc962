//! Adversarial queries against quantized retrieval.
//!
//! Three objectives are minimized over the perturbed input `ŷ`:
//!
//! * `Basic`: `−‖F(y) − F(ŷ)‖²`, pushing the feature away from the clean one.
//! * `Apd`: `Σ_m log p̂_{m,b_m}`, lowering the probability of the clean
//!   query's hard code `b`.
//! * `Aod`: `Σ_m Σ_k p_mk log p̂_mk`, where `p` is the clean soft
//!   distribution. Since this equals `−Σ_m H(p_m) − KL(p ‖ p̂)`, minimizing it
//!   maximizes the divergence from the clean assignment.
//!
//! [`pgd_attack`] runs projected descent inside the L∞ ball of radius `eta`
//! around `y`, intersected with the input box.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featnet::FeatureNet;
use crate::numkit::{derive_seed, next_down, next_up, DenseVector, Rng};
use crate::pq::{Codebook, PqCode};
use crate::softpq::{
    hard_assign_cosine, log_soft_distribution, logit_input_gradient, CentroidDistribution, SoftPqConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackLoss {
    Basic,
    Apd,
    Aod,
}

impl AttackLoss {
    pub const ALL: [AttackLoss; 3] = [AttackLoss::Basic, AttackLoss::Apd, AttackLoss::Aod];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackLoss::Basic => "basic",
            AttackLoss::Apd => "apd",
            AttackLoss::Aod => "aod",
        }
    }
}

impl fmt::Display for AttackLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "basic" => Ok(AttackLoss::Basic),
            "apd" => Ok(AttackLoss::Apd),
            "aod" => Ok(AttackLoss::Aod),
            _ => Err(Error::invalid(format!("unknown attack loss {s:?} (expected basic, apd or aod)"))),
        }
    }
}

/// How a PGD iteration turns the gradient into a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepRule {
    /// `ŷ ← ŷ − step_size · sign(g)`
    #[default]
    Sign,
    /// `ŷ ← ŷ − step_size · g`
    Gradient,
}

impl FromStr for StepRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sign" => Ok(StepRule::Sign),
            "gradient" | "raw" => Ok(StepRule::Gradient),
            _ => Err(Error::invalid(format!("unknown step rule {s:?} (expected sign or gradient)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub loss: AttackLoss,
    pub eta: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub clip_min: f64,
    pub clip_max: f64,
    pub seed: u64,
    /// Start from a uniform point in the eta-ball. Ignored when `iterations` is 0.
    pub random_start: bool,
    pub step_rule: StepRule,
}

impl AttackConfig {
    /// `eta = 8`, five iterations, box `[0, 255]`, sign steps of
    /// `1.25 · eta / iterations`, no random start.
    pub fn new(loss: AttackLoss) -> Self {
        AttackConfig {
            loss,
            eta: 8.0,
            step_size: default_step_size(8.0, 5),
            iterations: 5,
            clip_min: 0.0,
            clip_max: 255.0,
            seed: 0,
            random_start: false,
            step_rule: StepRule::Sign,
        }
    }

    /// Sets the budget and iteration count and resets the step size to its
    /// default for that pair.
    pub fn with_budget(mut self, eta: f64, iterations: usize) -> Self {
        self.eta = eta;
        self.iterations = iterations;
        self.step_size = default_step_size(eta, iterations);
        self
    }

    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.step_size = step_size;
        self
    }

    pub fn with_box(mut self, clip_min: f64, clip_max: f64) -> Self {
        self.clip_min = clip_min;
        self.clip_max = clip_max;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_random_start(mut self, on: bool) -> Self {
        self.random_start = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be finite and > 0, got {}", self.eta)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!("step_size must be finite and > 0, got {}", self.step_size)));
        }
        if !(self.clip_min.is_finite() && self.clip_max.is_finite() && self.clip_min < self.clip_max) {
            return Err(Error::invalid(format!("input box [{}, {}] is empty", self.clip_min, self.clip_max)));
        }
        if self.eta > self.clip_max - self.clip_min {
            return Err(Error::invalid(format!(
                "eta {} exceeds the input box width {}",
                self.eta,
                self.clip_max - self.clip_min
            )));
        }
        Ok(())
    }
}

pub fn default_step_size(eta: f64, iterations: usize) -> f64 {
    eta / iterations.max(1) as f64 * 1.25
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub adversarial: DenseVector,
    /// Loss at the starting point followed by the loss after each iteration.
    pub loss_trace: Vec<f64>,
    pub kl_to_clean: f64,
    pub linf_norm: f64,
}

impl AttackReport {
    pub fn loss_init(&self) -> f64 {
        self.loss_trace[0]
    }

    pub fn loss_final(&self) -> f64 {
        *self.loss_trace.last().unwrap()
    }
}

#[derive(Debug, Clone)]
enum Target {
    Basic(DenseVector),
    Apd(PqCode),
    Aod(CentroidDistribution),
}

/// An attack loss with the clean-query quantities computed once.
#[derive(Debug, Clone)]
pub struct AttackObjective<'a> {
    net: &'a FeatureNet,
    codebook: &'a Codebook,
    soft: SoftPqConfig,
    target: Target,
}

impl<'a> AttackObjective<'a> {
    pub fn new(
        y: &[f64],
        net: &'a FeatureNet,
        codebook: &'a Codebook,
        soft: &SoftPqConfig,
        loss: AttackLoss,
    ) -> Result<Self> {
        soft.validate()?;
        if net.output_dim() != codebook.dim() {
            return Err(Error::dims(codebook.dim(), net.output_dim()));
        }
        let z = net.features(y)?;
        let target = match loss {
            AttackLoss::Basic => Target::Basic(z),
            AttackLoss::Apd => Target::Apd(hard_assign_cosine(&z, codebook)?),
            AttackLoss::Aod => Target::Aod(crate::softpq::soft_distribution(&z, codebook, soft)?),
        };
        Ok(AttackObjective { net, codebook, soft: *soft, target })
    }

    /// AOD objective against an explicit target distribution.
    pub fn with_target(
        net: &'a FeatureNet,
        codebook: &'a Codebook,
        soft: &SoftPqConfig,
        p: CentroidDistribution,
    ) -> Result<Self> {
        soft.validate()?;
        if p.m() != codebook.m() || p.k() != codebook.k() {
            return Err(Error::invalid(format!(
                "target distribution is {}x{}, codebook is {}x{}",
                p.m(),
                p.k(),
                codebook.m(),
                codebook.k()
            )));
        }
        Ok(AttackObjective { net, codebook, soft: *soft, target: Target::Aod(p) })
    }

    /// Loss at `y_hat` and its gradient wrt `y_hat`.
    pub fn evaluate(&self, y_hat: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (z, cache) = self.net.forward(y_hat)?;
        let upstream = match &self.target {
            Target::Basic(clean) => {
                let (loss, g) = basic_upstream(clean, &z);
                return Ok((loss, self.net.backward_input(&cache, &g)?));
            }
            Target::Apd(code) => {
                let (p_hat, logp) = log_soft_distribution(&z, self.codebook, &self.soft)?;
                let k = self.codebook.k();
                let mut loss = 0.0;
                let mut dlogits: Vec<f64> = p_hat.probs().iter().map(|p| -p).collect();
                for (sub, &b) in code.indices().iter().enumerate() {
                    loss += logp[sub * k + b as usize];
                    dlogits[sub * k + b as usize] += 1.0;
                }
                (loss, dlogits)
            }
            Target::Aod(p) => {
                let (p_hat, logp) = log_soft_distribution(&z, self.codebook, &self.soft)?;
                let k = self.codebook.k();
                let mut loss = 0.0;
                let mut dlogits = vec![0.0; logp.len()];
                for sub in 0..self.codebook.m() {
                    let row = p.row(sub);
                    let mass: f64 = row.iter().sum();
                    for j in 0..k {
                        let i = sub * k + j;
                        if row[j] != 0.0 {
                            loss += row[j] * logp[i];
                        }
                        dlogits[i] = row[j] - p_hat.probs()[i] * mass;
                    }
                }
                (loss, dlogits)
            }
        };
        let (loss, dlogits) = upstream;
        let gz = logit_input_gradient(&z, self.codebook, &self.soft, &dlogits)?;
        Ok((loss, self.net.backward_input(&cache, &gz)?))
    }
}

/// Loss `−‖clean − z‖²` and its gradient wrt `z`.
fn basic_upstream(clean: &[f64], z: &[f64]) -> (f64, Vec<f64>) {
    let loss = -clean.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    (loss, clean.iter().zip(z).map(|(a, b)| 2.0 * (a - b)).collect())
}

/// `(−‖F(y) − F(ŷ)‖², ∂/∂ŷ)`.
pub fn basic_loss(y: &[f64], y_hat: &[f64], net: &FeatureNet) -> Result<(f64, DenseVector)> {
    if y.len() != y_hat.len() {
        return Err(Error::dims(y.len(), y_hat.len()));
    }
    let clean = net.features(y)?;
    let (z, cache) = net.forward(y_hat)?;
    let (loss, g) = basic_upstream(&clean, &z);
    Ok((loss, DenseVector::new(net.backward_input(&cache, &g)?)?))
}

fn loss_with(
    loss: AttackLoss,
    y: &[f64],
    y_hat: &[f64],
    net: &FeatureNet,
    codebook: &Codebook,
    config: &SoftPqConfig,
) -> Result<(f64, DenseVector)> {
    if y.len() != y_hat.len() {
        return Err(Error::dims(y.len(), y_hat.len()));
    }
    let (l, g) = AttackObjective::new(y, net, codebook, config, loss)?.evaluate(y_hat)?;
    Ok((l, DenseVector::new(g)?))
}

/// `(Σ_m log p̂_{m,b_m}, ∂/∂ŷ)` with `b` the clean hard code.
pub fn apd_loss(
    y: &[f64],
    y_hat: &[f64],
    net: &FeatureNet,
    codebook: &Codebook,
    config: &SoftPqConfig,
) -> Result<(f64, DenseVector)> {
    loss_with(AttackLoss::Apd, y, y_hat, net, codebook, config)
}

/// `(Σ_m Σ_k p_mk log p̂_mk, ∂/∂ŷ)` with `p` the clean soft distribution.
pub fn aod_loss(
    y: &[f64],
    y_hat: &[f64],
    net: &FeatureNet,
    codebook: &Codebook,
    config: &SoftPqConfig,
) -> Result<(f64, DenseVector)> {
    loss_with(AttackLoss::Aod, y, y_hat, net, codebook, config)
}

fn check_shapes(p: &CentroidDistribution, p_hat: &CentroidDistribution) -> Result<()> {
    if p.m() != p_hat.m() || p.k() != p_hat.k() {
        return Err(Error::invalid(format!(
            "distribution shapes differ: {}x{} vs {}x{}",
            p.m(),
            p.k(),
            p_hat.m(),
            p_hat.k()
        )));
    }
    Ok(())
}

/// `Σ_m Σ_k p_mk log(p_mk / p̂_mk)`, with `0 · log 0 = 0`.
pub fn kl_divergence(p: &CentroidDistribution, p_hat: &CentroidDistribution) -> Result<f64> {
    check_shapes(p, p_hat)?;
    let mut total = 0.0;
    for (a, b) in p.probs().iter().zip(p_hat.probs()) {
        if *a > 0.0 {
            if *b <= 0.0 {
                return Err(Error::invalid("p_hat has a zero entry where p is positive"));
            }
            total += a * (a / b).ln();
        }
    }
    Ok(total.max(0.0))
}

/// Summed entropy `Σ_m H(p_m)` in nats.
pub fn entropy(p: &CentroidDistribution) -> f64 {
    -p.probs().iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn kl_from_logs(p: &CentroidDistribution, logp: &[f64], logq: &[f64]) -> f64 {
    let kl: f64 =
        p.probs().iter().zip(logp.iter().zip(logq)).filter(|(a, _)| **a > 0.0).map(|(a, (lp, lq))| a * (lp - lq)).sum();
    kl.max(0.0)
}

/// Moves `x` onto the nearest point of `[y − eta, y + eta] ∩ [lo, hi]`,
/// exactly in floating point.
fn project(x: f64, y: f64, eta: f64, lo: f64, hi: f64) -> f64 {
    let mut v = x.clamp(y - eta, y + eta);
    while v - y > eta {
        v = next_down(v);
    }
    while y - v > eta {
        v = next_up(v);
    }
    v.clamp(lo, hi)
}

/// Projected descent on an arbitrary `(loss, gradient)` oracle.
pub fn pgd_minimize<F>(y: &[f64], config: &AttackConfig, mut objective: F) -> Result<(DenseVector, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    config.validate()?;
    if let Some((i, v)) = y.iter().enumerate().find(|(_, v)| !(**v >= config.clip_min && **v <= config.clip_max)) {
        return Err(Error::invalid(format!(
            "input coordinate {i} = {v} lies outside [{}, {}]",
            config.clip_min, config.clip_max
        )));
    }
    let mut x = y.to_vec();
    if config.random_start && config.iterations > 0 {
        let mut rng = Rng::new(derive_seed(config.seed, "attack/random-start"));
        for (xi, yi) in x.iter_mut().zip(y) {
            let r = rng.uniform_range(-config.eta, config.eta);
            *xi = project(yi + r, *yi, config.eta, config.clip_min, config.clip_max);
        }
    }
    let mut trace = Vec::with_capacity(config.iterations + 1);
    for it in 0..config.iterations {
        let (loss, grad) = objective(&x)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss or gradient at attack iteration {it}")));
        }
        if grad.len() != x.len() {
            return Err(Error::dims(x.len(), grad.len()));
        }
        trace.push(loss);
        for ((xi, gi), yi) in x.iter_mut().zip(&grad).zip(y) {
            let delta = match config.step_rule {
                StepRule::Sign => {
                    if *gi > 0.0 {
                        config.step_size
                    } else if *gi < 0.0 {
                        -config.step_size
                    } else {
                        0.0
                    }
                }
                StepRule::Gradient => config.step_size * gi,
            };
            *xi = project(*xi - delta, *yi, config.eta, config.clip_min, config.clip_max);
        }
    }
    let (last, _) = objective(&x)?;
    if !last.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss after attack iteration {}", config.iterations)));
    }
    trace.push(last);
    Ok((DenseVector::new(x)?, trace))
}

/// Crafts an adversarial version of `y` under `attack_config`.
pub fn pgd_attack(
    y: &[f64],
    net: &FeatureNet,
    codebook: &Codebook,
    soft_config: &SoftPqConfig,
    attack_config: &AttackConfig,
) -> Result<AttackReport> {
    let objective = AttackObjective::new(y, net, codebook, soft_config, attack_config.loss)?;
    let (adversarial, loss_trace) = pgd_minimize(y, attack_config, |x| objective.evaluate(x))?;
    let (p, logp) = log_soft_distribution(&net.features(y)?, codebook, soft_config)?;
    let (_, logq) = log_soft_distribution(&net.features(&adversarial)?, codebook, soft_config)?;
    let kl_to_clean = kl_from_logs(&p, &logp, &logq);
    let linf_norm = adversarial.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(AttackReport { adversarial, loss_trace, kl_to_clean, linf_norm })
}

/// Attacks every query in parallel. Query `ids[i]` gets its own seed derived
/// from `attack_config.seed`, so results do not depend on batch order.
pub fn attack_batch(
    queries: &[DenseVector],
    ids: &[u32],
    net: &FeatureNet,
    codebook: &Codebook,
    soft_config: &SoftPqConfig,
    attack_config: &AttackConfig,
) -> Result<Vec<AttackReport>> {
    if queries.len() != ids.len() {
        return Err(Error::dims(queries.len(), ids.len()));
    }
    queries
        .par_iter()
        .zip(ids)
        .map(|(q, id)| {
            let cfg = attack_config.clone().with_seed(derive_seed(attack_config.seed, &format!("query/{id}")));
            pgd_attack(q, net, codebook, soft_config, &cfg)
        })
        .collect()
}
