//! Retrieval metrics and attack experiment protocols.
//!
//! Average precision is computed over the full ranking:
//! `AP = (1/R) Σ_{i relevant} (relevant in top i) / i`, with `AP = 0` when
//! the ranking holds no relevant item. PR curves use interpolated precision,
//! the best precision reached at any recall at or above each level.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::attack::{attack_batch, AttackConfig, AttackReport};
use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::featnet::FeatureNet;
use crate::pq::{search, Codebook, PqIndex, SearchMode};
use crate::softpq::SoftPqConfig;
use crate::DenseVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelevanceMode {
    /// Relevant iff the database record has the query's class.
    SingleLabel,
    /// Relevant iff the label sets intersect.
    MultiLabel,
}

#[derive(Debug, Clone)]
pub struct RelevanceJudge {
    mode: RelevanceMode,
    labels: HashMap<u32, Vec<u32>>,
}

impl RelevanceJudge {
    pub fn new(mode: RelevanceMode, ids: &[u32], labels: &[Vec<u32>]) -> Result<Self> {
        if ids.len() != labels.len() {
            return Err(Error::dims(ids.len(), labels.len()));
        }
        let mut map = HashMap::with_capacity(ids.len());
        for (&id, ls) in ids.iter().zip(labels) {
            if mode == RelevanceMode::SingleLabel && ls.len() != 1 {
                return Err(Error::invalid(format!("record {id} has {} labels in single-label mode", ls.len())));
            }
            if map.insert(id, ls.clone()).is_some() {
                return Err(Error::invalid(format!("duplicate id {id}")));
            }
        }
        Ok(RelevanceJudge { mode, labels: map })
    }

    /// Single-label mode when every record has exactly one label.
    pub fn from_dataset(ds: &LabeledDataset) -> Result<Self> {
        let mode = if ds.is_multi_label() { RelevanceMode::MultiLabel } else { RelevanceMode::SingleLabel };
        RelevanceJudge::new(mode, ds.ids(), ds.labels())
    }

    pub fn mode(&self) -> RelevanceMode {
        self.mode
    }

    pub fn labels_of(&self, id: u32) -> Result<&[u32]> {
        self.labels.get(&id).map(Vec::as_slice).ok_or(Error::UnknownId(id))
    }

    pub fn is_relevant(&self, id: u32, query_labels: &[u32]) -> Result<bool> {
        let ls = self.labels_of(id)?;
        Ok(match self.mode {
            RelevanceMode::SingleLabel => query_labels.first() == ls.first(),
            RelevanceMode::MultiLabel => ls.iter().any(|l| query_labels.contains(l)),
        })
    }
}

pub fn relevance_flags(ranked_ids: &[u32], judge: &RelevanceJudge, query_labels: &[u32]) -> Result<Vec<bool>> {
    ranked_ids.iter().map(|&id| judge.is_relevant(id, query_labels)).collect()
}

/// AP of a relevance pattern in rank order.
pub fn ap_from_flags(flags: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in flags.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn average_precision(ranked_ids: &[u32], judge: &RelevanceJudge, query_labels: &[u32]) -> Result<f64> {
    if ranked_ids.is_empty() {
        return Err(Error::Empty("ranked list"));
    }
    Ok(ap_from_flags(&relevance_flags(ranked_ids, judge, query_labels)?))
}

/// Full-database ranking of every query, in query order.
pub fn rank_all(queries: &[DenseVector], index: &PqIndex, mode: SearchMode) -> Result<Vec<Vec<u32>>> {
    queries
        .par_iter()
        .map(|q| Ok(search(q, index, index.len().max(1), mode)?.into_iter().map(|h| h.id).collect()))
        .collect()
}

/// AP of every query against the full ranking of `index`.
pub fn per_query_ap(
    queries: &[DenseVector],
    query_labels: &[Vec<u32>],
    index: &PqIndex,
    mode: SearchMode,
    judge: &RelevanceJudge,
) -> Result<Vec<f64>> {
    if queries.len() != query_labels.len() {
        return Err(Error::dims(queries.len(), query_labels.len()));
    }
    if index.is_empty() {
        return Err(Error::Empty("index"));
    }
    queries
        .par_iter()
        .zip(query_labels)
        .map(|(q, ls)| {
            let ranked: Vec<u32> = search(q, index, index.len(), mode)?.into_iter().map(|h| h.id).collect();
            average_precision(&ranked, judge, ls)
        })
        .collect()
}

pub fn mean_average_precision(
    queries: &[DenseVector],
    query_labels: &[Vec<u32>],
    index: &PqIndex,
    mode: SearchMode,
    judge: &RelevanceJudge,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let aps = per_query_ap(queries, query_labels, index, mode, judge)?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` at equally spaced recall levels.
    pub points: Vec<(f64, f64)>,
    /// Set when the ranking holds no relevant item; `points` is then empty.
    pub no_relevant: bool,
}

/// Interpolated precision at `points` recall levels `0, 1/(points-1), …, 1`.
pub fn pr_from_flags(flags: &[bool], points: usize) -> Result<PrCurve> {
    if points < 2 {
        return Err(Error::invalid(format!("a PR curve needs at least 2 points, got {points}")));
    }
    let total = flags.iter().filter(|f| **f).count();
    if total == 0 {
        return Ok(PrCurve { points: Vec::new(), no_relevant: true });
    }
    // (recall, precision) after each rank
    let mut hits = 0usize;
    let raw: Vec<(f64, f64)> = flags
        .iter()
        .enumerate()
        .map(|(i, &rel)| {
            hits += usize::from(rel);
            (hits as f64 / total as f64, hits as f64 / (i + 1) as f64)
        })
        .collect();
    // best precision from each rank onwards
    let mut best_after = vec![0.0; raw.len()];
    let mut best = 0.0f64;
    for i in (0..raw.len()).rev() {
        best = best.max(raw[i].1);
        best_after[i] = best;
    }
    let out = (0..points)
        .map(|j| {
            let level = j as f64 / (points - 1) as f64;
            let first = raw.iter().position(|(r, _)| *r >= level - 1e-12).unwrap_or(raw.len() - 1);
            (level, best_after[first])
        })
        .collect();
    Ok(PrCurve { points: out, no_relevant: false })
}

pub fn pr_curve(ranked_ids: &[u32], judge: &RelevanceJudge, query_labels: &[u32], points: usize) -> Result<PrCurve> {
    pr_from_flags(&relevance_flags(ranked_ids, judge, query_labels)?, points)
}

/// Per-level mean precision over the curves that have relevant items.
pub fn mean_pr_curve(curves: &[PrCurve]) -> Result<Vec<(f64, f64)>> {
    let usable: Vec<&PrCurve> = curves.iter().filter(|c| !c.no_relevant).collect();
    let first = usable.first().ok_or(Error::Empty("PR curves with relevant items"))?;
    let n = first.points.len();
    if usable.iter().any(|c| c.points.len() != n) {
        return Err(Error::invalid("PR curves have different numbers of points"));
    }
    Ok((0..n)
        .map(|j| (first.points[j].0, usable.iter().map(|c| c.points[j].1).sum::<f64>() / usable.len() as f64))
        .collect())
}

pub fn write_pr_csv(path: impl AsRef<Path>, curve: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["recall", "precision"])?;
    for (r, p) in curve {
        w.write_record([r.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// A feature network with codebooks at one or more code lengths.
#[derive(Debug, Clone)]
pub struct TargetModel {
    pub name: String,
    pub net: FeatureNet,
    pub codebooks: Vec<Codebook>,
}

impl TargetModel {
    pub fn codebook_for_bits(&self, bits: usize) -> Result<&Codebook> {
        self.codebooks.iter().find(|c| c.bits() == bits).ok_or_else(|| {
            Error::invalid(format!(
                "model {} has no {bits}-bit codebook (available: {:?})",
                self.name,
                self.codebooks.iter().map(Codebook::bits).collect::<Vec<_>>()
            ))
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentGrid {
    pub bit_lengths: Vec<usize>,
    pub models: Vec<TargetModel>,
    pub attacks: Vec<AttackConfig>,
    pub modes: Vec<SearchMode>,
    pub soft: SoftPqConfig,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.bit_lengths.is_empty() || self.models.is_empty() || self.attacks.is_empty() || self.modes.is_empty() {
            return Err(Error::invalid("every experiment grid axis must be non-empty"));
        }
        for m in &self.models {
            for &b in &self.bit_lengths {
                m.codebook_for_bits(b)?;
            }
        }
        self.attacks.iter().try_for_each(AttackConfig::validate)?;
        self.soft.validate()
    }
}

/// Database and query records in input space.
#[derive(Debug, Clone, Copy)]
pub struct EvalData<'a> {
    pub database: &'a LabeledDataset,
    pub queries: &'a LabeledDataset,
}

impl EvalData<'_> {
    pub fn judge(&self) -> Result<RelevanceJudge> {
        RelevanceJudge::from_dataset(self.database)
    }
}

/// Summary of a batch of attack reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackStats {
    pub count: usize,
    pub max_linf: f64,
    pub mean_kl: f64,
    pub kl_positive: usize,
    pub loss_decreased: usize,
}

impl AttackStats {
    pub fn from_reports(reports: &[AttackReport]) -> Self {
        let n = reports.len().max(1) as f64;
        AttackStats {
            count: reports.len(),
            max_linf: reports.iter().map(|r| r.linf_norm).fold(0.0, f64::max),
            mean_kl: reports.iter().map(|r| r.kl_to_clean).sum::<f64>() / n,
            kl_positive: reports.iter().filter(|r| r.kl_to_clean > 0.0).count(),
            loss_decreased: reports.iter().filter(|r| r.loss_final() < r.loss_init()).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteboxCell {
    pub model: String,
    pub bits: usize,
    pub mode: SearchMode,
    /// `clean` or the attack loss name.
    pub attack: String,
    pub map: f64,
    pub stats: Option<AttackStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferCell {
    pub source: String,
    pub target: String,
    pub mode: SearchMode,
    pub clean_map: f64,
    pub map: f64,
}

/// Attaches experiment coordinates to an error while keeping its kind.
fn in_cell(e: Error, ctx: &str) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
        Error::NonFinite(m) => Error::Numeric(format!("{ctx}: non-finite {m}")),
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{ctx}: {m}")),
        Error::Infeasible(m) => Error::Infeasible(format!("{ctx}: {m}")),
        other => other,
    }
}

/// Database index of one (net, codebook) pair plus the clean query features.
pub struct PreparedTarget<'a> {
    pub net: &'a FeatureNet,
    pub codebook: &'a Codebook,
    pub index: PqIndex,
}

impl<'a> PreparedTarget<'a> {
    pub fn new(net: &'a FeatureNet, codebook: &'a Codebook, database: &LabeledDataset) -> Result<Self> {
        let feats = net.features_batch(database.vectors())?;
        Self::from_features(net, codebook, database, feats)
    }

    fn from_features(
        net: &'a FeatureNet,
        codebook: &'a Codebook,
        database: &LabeledDataset,
        feats: Vec<DenseVector>,
    ) -> Result<Self> {
        let index = PqIndex::build(codebook.clone(), &feats, database.ids().to_vec(), database.single_labels())?;
        Ok(PreparedTarget { net, codebook, index })
    }

    /// mAP of raw `queries` pushed through this target's net.
    pub fn map(
        &self,
        queries: &[DenseVector],
        labels: &[Vec<u32>],
        mode: SearchMode,
        judge: &RelevanceJudge,
    ) -> Result<f64> {
        let feats = self.net.features_batch(queries)?;
        mean_average_precision(&feats, labels, &self.index, mode, judge)
    }
}

fn adversarial_inputs(reports: &[AttackReport]) -> Vec<DenseVector> {
    reports.iter().map(|r| r.adversarial.clone()).collect()
}

/// White-box table: for every model, bit length and attack, queries are
/// attacked against that exact (net, codebook) and evaluated in each mode.
/// A `clean` row precedes the attacks of each (model, bits) block.
pub fn whitebox_experiment(grid: &ExperimentGrid, data: EvalData<'_>) -> Result<Vec<WhiteboxCell>> {
    grid.validate()?;
    let judge = data.judge()?;
    let (queries, qlabels, qids) = (data.queries.vectors(), data.queries.labels(), data.queries.ids());
    let mut cells = Vec::new();
    for model in &grid.models {
        let db_feats = model.net.features_batch(data.database.vectors())?;
        for &bits in &grid.bit_lengths {
            let cb = model.codebook_for_bits(bits)?;
            let target = PreparedTarget::from_features(&model.net, cb, data.database, db_feats.clone())?;
            for &mode in &grid.modes {
                let map = target.map(queries, qlabels, mode, &judge)?;
                cells.push(WhiteboxCell {
                    model: model.name.clone(),
                    bits,
                    mode,
                    attack: "clean".into(),
                    map,
                    stats: None,
                });
            }
            for attack in &grid.attacks {
                let ctx = format!("model {}, {bits} bits, attack {}", model.name, attack.loss);
                let reports =
                    attack_batch(queries, qids, &model.net, cb, &grid.soft, attack).map_err(|e| in_cell(e, &ctx))?;
                let stats = AttackStats::from_reports(&reports);
                let adv = adversarial_inputs(&reports);
                for &mode in &grid.modes {
                    let map = target.map(&adv, qlabels, mode, &judge).map_err(|e| in_cell(e, &ctx))?;
                    cells.push(WhiteboxCell {
                        model: model.name.clone(),
                        bits,
                        mode,
                        attack: attack.loss.to_string(),
                        map,
                        stats: Some(stats),
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Queries attacked against the `source_bits` codebook of `model`, then
/// evaluated against each target code length of the same net.
pub fn bits_transfer_experiment(
    source_bits: usize,
    target_bits: &[usize],
    model: &TargetModel,
    data: EvalData<'_>,
    attack: &AttackConfig,
    soft: &SoftPqConfig,
    modes: &[SearchMode],
) -> Result<Vec<TransferCell>> {
    if target_bits.is_empty() || modes.is_empty() {
        return Err(Error::invalid("target bit lengths and modes must be non-empty"));
    }
    let judge = data.judge()?;
    let src = model.codebook_for_bits(source_bits)?;
    let ctx = format!("model {}, source {source_bits} bits", model.name);
    let reports = attack_batch(data.queries.vectors(), data.queries.ids(), &model.net, src, soft, attack)
        .map_err(|e| in_cell(e, &ctx))?;
    let adv = adversarial_inputs(&reports);
    let db_feats = model.net.features_batch(data.database.vectors())?;
    let mut cells = Vec::new();
    for &bits in target_bits {
        let target =
            PreparedTarget::from_features(&model.net, model.codebook_for_bits(bits)?, data.database, db_feats.clone())?;
        for &mode in modes {
            cells.push(TransferCell {
                source: format!("{source_bits}"),
                target: format!("{bits}"),
                mode,
                clean_map: target.map(data.queries.vectors(), data.queries.labels(), mode, &judge)?,
                map: target.map(&adv, data.queries.labels(), mode, &judge)?,
            });
        }
    }
    Ok(cells)
}

/// Queries attacked against each source model evaluated on each target
/// model, all at `bits`.
pub fn model_transfer_experiment(
    sources: &[TargetModel],
    targets: &[TargetModel],
    bits: usize,
    data: EvalData<'_>,
    attack: &AttackConfig,
    soft: &SoftPqConfig,
    modes: &[SearchMode],
) -> Result<Vec<TransferCell>> {
    if sources.is_empty() || targets.is_empty() || modes.is_empty() {
        return Err(Error::invalid("source models, target models and modes must be non-empty"));
    }
    let judge = data.judge()?;
    let prepared: Vec<PreparedTarget> = targets
        .iter()
        .map(|t| PreparedTarget::new(&t.net, t.codebook_for_bits(bits)?, data.database))
        .collect::<Result<_>>()?;
    let mut clean = Vec::with_capacity(targets.len());
    for p in &prepared {
        let per_mode = modes
            .iter()
            .map(|&m| p.map(data.queries.vectors(), data.queries.labels(), m, &judge))
            .collect::<Result<Vec<_>>>()?;
        clean.push(per_mode);
    }
    let mut cells = Vec::new();
    for s in sources {
        let ctx = format!("source model {}", s.name);
        let reports =
            attack_batch(data.queries.vectors(), data.queries.ids(), &s.net, s.codebook_for_bits(bits)?, soft, attack)
                .map_err(|e| in_cell(e, &ctx))?;
        let adv = adversarial_inputs(&reports);
        for (t, (p, clean_t)) in targets.iter().zip(prepared.iter().zip(&clean)) {
            for (mi, &mode) in modes.iter().enumerate() {
                cells.push(TransferCell {
                    source: s.name.clone(),
                    target: t.name.clone(),
                    mode,
                    clean_map: clean_t[mi],
                    map: p.map(&adv, data.queries.labels(), mode, &judge)?,
                });
            }
        }
    }
    Ok(cells)
}

fn finite_cell(v: f64, what: &str) -> Result<String> {
    if v.is_finite() {
        Ok(v.to_string())
    } else {
        Err(Error::NonFinite(format!("{what} in results table")))
    }
}

pub fn write_whitebox_csv(path: impl AsRef<Path>, cells: &[WhiteboxCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "bits", "mode", "attack", "map", "mean_kl", "max_linf"])?;
    for c in cells {
        let (kl, linf) = match &c.stats {
            Some(s) => (finite_cell(s.mean_kl, "mean_kl")?, finite_cell(s.max_linf, "max_linf")?),
            None => ("0".into(), "0".into()),
        };
        w.write_record([
            c.model.clone(),
            c.bits.to_string(),
            c.mode.to_string(),
            c.attack.clone(),
            finite_cell(c.map, "map")?,
            kl,
            linf,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_transfer_csv(path: impl AsRef<Path>, cells: &[TransferCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source", "target", "mode", "clean_map", "map"])?;
    for c in cells {
        w.write_record([
            c.source.clone(),
            c.target.clone(),
            c.mode.to_string(),
            finite_cell(c.clean_map, "clean_map")?,
            finite_cell(c.map, "map")?,
        ])?;
    }
    w.flush()?;
    Ok(())
}
