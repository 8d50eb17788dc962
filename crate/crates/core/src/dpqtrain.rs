//! Joint training of a [`FeatureNet`] and a [`Codebook`] through the soft
//! quantizer with an asymmetric triplet objective.
//!
//! For a triplet (anchor, relevant, irrelevant) the anchor keeps its raw
//! feature `x` while the other two pass through [`soft_quantize`], giving
//! `s_pos` and `s_neg`. Training minimizes
//!
//! ```text
//! σ(⟨x, s_neg⟩ − ⟨x, s_pos⟩) = 1 / (1 + e^{⟨x, s_pos⟩ − ⟨x, s_neg⟩})
//! ```
//!
//! with plain SGD on network weights and centroids, re-normalizing the
//! centroids to unit length after every step.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featnet::{FeatureNet, ParamGrads};
use crate::kmeans::KMeansConfig;
use crate::numkit::{derive_seed, dot, DenseVector, Rng};
use crate::pq::{train_codebooks, Codebook};
use crate::softpq::{soft_quantize, soft_quantize_backward, SoftPqConfig};

/// Record positions into the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor_id: u32,
    pub positive_id: u32,
    pub negative_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_net: f64,
    pub lr_codebook: f64,
    pub alpha: f64,
    pub seed: u64,
    pub triplets_per_epoch: usize,
    pub normalize_subvectors: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr_net: 0.05,
            lr_codebook: 0.01,
            alpha: 5.0,
            seed: 0,
            triplets_per_epoch: 1024,
            normalize_subvectors: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.triplets_per_epoch == 0 {
            return Err(Error::invalid("batch_size and triplets_per_epoch must be positive"));
        }
        for (name, lr) in [("lr_net", self.lr_net), ("lr_codebook", self.lr_codebook)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {lr}")));
            }
        }
        self.soft_config().validate()
    }

    pub fn soft_config(&self) -> SoftPqConfig {
        SoftPqConfig { alpha: self.alpha, normalize_subvectors: self.normalize_subvectors }
    }
}

fn check_same_dim(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    Ok(())
}

/// `1 / (1 + e^{⟨x, s_neg⟩ − ⟨x, s_pos⟩})`, always in `(0, 1)` up to
/// floating-point saturation.
pub fn asymmetric_triplet_loss(x_anchor: &[f64], s_pos: &[f64], s_neg: &[f64]) -> Result<f64> {
    check_same_dim(x_anchor, s_pos)?;
    check_same_dim(x_anchor, s_neg)?;
    Ok(logistic(dot(x_anchor, s_pos) - dot(x_anchor, s_neg)))
}

/// The raw margin `⟨x, s_neg⟩ − ⟨x, s_pos⟩`.
pub fn triplet_margin(x_anchor: &[f64], s_pos: &[f64], s_neg: &[f64]) -> Result<f64> {
    check_same_dim(x_anchor, s_pos)?;
    check_same_dim(x_anchor, s_neg)?;
    Ok(dot(x_anchor, s_neg) - dot(x_anchor, s_pos))
}

/// The quantity minimized during training, `σ(margin)`.
pub fn training_loss(x_anchor: &[f64], s_pos: &[f64], s_neg: &[f64]) -> Result<f64> {
    Ok(logistic(triplet_margin(x_anchor, s_pos, s_neg)?))
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Samples `count` triplets: the anchor uniformly among records that have
/// both a relevant and an irrelevant partner, then the positive uniformly
/// among records sharing a label and the negative uniformly among records
/// sharing none.
pub fn sample_triplets(labels: &[Vec<u32>], count: usize, rng: &mut Rng) -> Result<Vec<Triplet>> {
    let n = labels.len();
    if u32::try_from(n).is_err() {
        return Err(Error::invalid("too many records"));
    }
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, ls) in labels.iter().enumerate() {
        for &l in ls {
            let list = members.entry(l).or_default();
            if list.last() != Some(&i) {
                list.push(i);
            }
        }
    }
    let positives = |i: usize| -> Vec<usize> {
        let mut out: Vec<usize> =
            labels[i].iter().flat_map(|l| members[l].iter().copied()).filter(|&j| j != i).collect();
        out.sort_unstable();
        out.dedup();
        out
    };
    let disjoint = |i: usize, j: usize| labels[j].iter().all(|l| !labels[i].contains(l));

    let mut anchors = Vec::new();
    let mut pos_lists = Vec::new();
    for i in 0..n {
        let pos = positives(i);
        if !pos.is_empty() && (0..n).any(|j| disjoint(i, j)) {
            anchors.push(i);
            pos_lists.push(pos);
        }
    }
    if anchors.is_empty() {
        let singletons: Vec<String> = members.iter().filter(|(_, m)| m.len() < 2).map(|(l, _)| l.to_string()).collect();
        let covering: Vec<String> = members.iter().filter(|(_, m)| m.len() == n).map(|(l, _)| l.to_string()).collect();
        let mut why = Vec::new();
        if !singletons.is_empty() {
            why.push(format!("classes with fewer than two records: {}", singletons.join(", ")));
        }
        if !covering.is_empty() {
            why.push(format!("classes covering every record (no negatives): {}", covering.join(", ")));
        }
        if why.is_empty() {
            why.push(format!("{} records and {} classes admit no valid triplet", n, members.len()));
        }
        return Err(Error::Infeasible(why.join("; ")));
    }

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let a = rng.index(anchors.len());
        let anchor = anchors[a];
        let positive = pos_lists[a][rng.index(pos_lists[a].len())];
        let negative = loop {
            let j = rng.index(n);
            if disjoint(anchor, j) {
                break j;
            }
        };
        out.push(Triplet { anchor_id: anchor as u32, positive_id: positive as u32, negative_id: negative as u32 });
    }
    Ok(out)
}

/// Loss value and gradients for one triplet.
#[derive(Debug, Clone)]
pub struct TripletGrads {
    pub loss: f64,
    pub margin: f64,
    pub net: ParamGrads,
    pub centroids: Vec<f64>,
}

/// Training loss of one triplet and its gradient wrt every network
/// parameter and centroid.
pub fn triplet_gradients(
    net: &FeatureNet,
    codebook: &Codebook,
    soft: &SoftPqConfig,
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
) -> Result<TripletGrads> {
    if net.output_dim() != codebook.dim() {
        return Err(Error::dims(codebook.dim(), net.output_dim()));
    }
    let (x, cache_a) = net.forward(anchor)?;
    let (zp, cache_p) = net.forward(positive)?;
    let (zn, cache_n) = net.forward(negative)?;
    let sp = soft_quantize(&zp, codebook, soft)?;
    let sn = soft_quantize(&zn, codebook, soft)?;
    let margin = triplet_margin(&x, &sp, &sn)?;
    let loss = logistic(margin);
    let w = loss * (1.0 - loss);

    let gx: Vec<f64> = sn.iter().zip(sp.iter()).map(|(n, p)| w * (n - p)).collect();
    let gs_neg: Vec<f64> = x.iter().map(|v| w * v).collect();
    let gs_pos: Vec<f64> = x.iter().map(|v| -w * v).collect();
    let bp = soft_quantize_backward(&zp, codebook, soft, &gs_pos)?;
    let bn = soft_quantize_backward(&zn, codebook, soft, &gs_neg)?;

    let mut grads = net.backward_params(&cache_a, &gx)?;
    grads.add_scaled(&net.backward_params(&cache_p, &bp.input)?, 1.0);
    grads.add_scaled(&net.backward_params(&cache_n, &bn.input)?, 1.0);
    let centroids = bp.centroids.iter().zip(&bn.centroids).map(|(a, b)| a + b).collect();
    Ok(TripletGrads { loss, margin, net: grads, centroids })
}

/// Summary of one SGD step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub mean_loss: f64,
    pub mean_margin: f64,
}

/// One SGD step on the mean loss over `batch`. Zero learning rates leave
/// the corresponding parameters bit-identical.
pub fn sgd_step_batch(
    net: &mut FeatureNet,
    codebook: &mut Codebook,
    config: &TrainConfig,
    vectors: &[DenseVector],
    batch: &[Triplet],
) -> Result<BatchStats> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let soft = config.soft_config();
    let get = |id: u32| vectors.get(id as usize).ok_or(Error::UnknownId(id));
    let per: Vec<TripletGrads> = batch
        .par_iter()
        .map(|t| triplet_gradients(net, codebook, &soft, get(t.anchor_id)?, get(t.positive_id)?, get(t.negative_id)?))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut net_grad = ParamGrads::zeros_like(net);
    let mut cb_grad = vec![0.0; codebook.as_flat().len()];
    let (mut loss, mut margin) = (0.0, 0.0);
    for g in &per {
        loss += g.loss * scale;
        margin += g.margin * scale;
        net_grad.add_scaled(&g.net, scale);
        cb_grad.iter_mut().zip(&g.centroids).for_each(|(a, b)| *a += scale * b);
    }
    if !loss.is_finite() || !net_grad.is_finite() || cb_grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss or gradient (loss = {loss})")));
    }
    net.sgd_step(&net_grad, config.lr_net)?;
    if config.lr_codebook != 0.0 {
        codebook.step(&cb_grad, config.lr_codebook);
        codebook.normalize_centroids();
    }
    Ok(BatchStats { mean_loss: loss, mean_margin: margin })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: FeatureNet,
    pub codebook: Codebook,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    /// Mean raw margin per epoch.
    pub margin_history: Vec<f64>,
}

/// Runs `config.epochs` epochs of freshly sampled triplets.
pub fn train(
    vectors: &[DenseVector],
    labels: &[Vec<u32>],
    net: FeatureNet,
    codebook: Codebook,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if vectors.len() != labels.len() {
        return Err(Error::dims(vectors.len(), labels.len()));
    }
    if net.output_dim() != codebook.dim() {
        return Err(Error::dims(codebook.dim(), net.output_dim()));
    }
    if let Some(v) = vectors.iter().find(|v| v.dim() != net.input_dim()) {
        return Err(Error::dims(net.input_dim(), v.dim()));
    }
    let (mut net, mut codebook) = (net, codebook);
    let root = Rng::new(derive_seed(config.seed, "dpqtrain/triplets"));
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut margin_history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = root.child(epoch as u64);
        let triplets = sample_triplets(labels, config.triplets_per_epoch, &mut rng)?;
        let (mut loss_sum, mut margin_sum) = (0.0, 0.0);
        for (b, batch) in triplets.chunks(config.batch_size).enumerate() {
            let stats = sgd_step_batch(&mut net, &mut codebook, config, vectors, batch).map_err(|e| match e {
                Error::Numeric(msg) | Error::NonFinite(msg) => {
                    Error::Numeric(format!("epoch {epoch}, batch {b}: non-finite {msg}"))
                }
                other => other,
            })?;
            loss_sum += stats.mean_loss * batch.len() as f64;
            margin_sum += stats.mean_margin * batch.len() as f64;
        }
        loss_history.push(loss_sum / triplets.len() as f64);
        margin_history.push(margin_sum / triplets.len() as f64);
    }
    Ok(TrainOutcome { net, codebook, loss_history, margin_history })
}

/// Unit-norm codebook from k-means over the initial network features.
pub fn init_codebook(
    net: &FeatureNet,
    vectors: &[DenseVector],
    m: usize,
    k: usize,
    kmeans: &KMeansConfig,
) -> Result<Codebook> {
    let feats = net.features_batch(vectors)?;
    train_codebooks(&feats, m, k, kmeans)
}

/// Writes `epoch,mean_loss` rows, epochs counted from 1.
pub fn write_loss_history(path: impl AsRef<Path>, history: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "mean_loss"])?;
    for (i, l) in history.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
