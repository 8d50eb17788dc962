//! TOML run manifest. Every section and field is optional; missing fields
//! take the defaults below.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub data: DataSection,
    pub net: NetSection,
    pub train: TrainSection,
    pub codebook: CodebookSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub transfer: TransferSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub classes: Option<usize>,
    pub per_class: Option<usize>,
    pub dim: Option<usize>,
    pub separation: f64,
    pub sigma: f64,
    pub queries: usize,
    pub stratified: bool,
    /// `fvecs` or `csv`.
    pub format: String,
    /// Existing database file to use instead of `gen-data` output.
    pub database_path: Option<PathBuf>,
    /// Existing query file to use instead of `gen-data` output.
    pub queries_path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            classes: None,
            per_class: None,
            dim: None,
            separation: 20.0,
            sigma: 1.0,
            queries: 200,
            stratified: true,
            format: "fvecs".into(),
            database_path: None,
            queries_path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection { hidden: vec![64, 32], feature_dim: 24 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_net: f64,
    pub lr_codebook: f64,
    pub triplets_per_epoch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = pqlab::dpqtrain::TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr_net: d.lr_net,
            lr_codebook: d.lr_codebook,
            triplets_per_epoch: d.triplets_per_epoch,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookSection {
    /// Subspace count of the codebook trained jointly with the net.
    pub m: usize,
    pub k: usize,
    pub alpha: f64,
    pub normalize_subvectors: bool,
    /// Further subspace counts fitted by k-means on the trained features.
    pub extra_m: Vec<usize>,
    pub kmeans_iters: usize,
}

impl Default for CodebookSection {
    fn default() -> Self {
        CodebookSection { m: 4, k: 256, alpha: 5.0, normalize_subvectors: true, extra_m: Vec::new(), kmeans_iters: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub losses: Vec<String>,
    pub eta: f64,
    pub iterations: usize,
    /// Defaults to `1.25 · eta / iterations`.
    pub step_size: Option<f64>,
    /// `sign` or `gradient`.
    pub step_rule: String,
    pub random_start: bool,
    /// Input box; defaults to the data range widened by `eta` on both sides.
    pub clip: Option<[f64; 2]>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            losses: vec!["basic".into(), "apd".into(), "aod".into()],
            eta: 2.0,
            iterations: 20,
            step_size: None,
            step_rule: "sign".into(),
            random_start: true,
            clip: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub modes: Vec<String>,
    pub pr_points: usize,
    pub top_n: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { modes: vec!["sdc".into(), "adc".into()], pr_points: 11, top_n: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub loss: String,
    /// Code length the queries are crafted against; defaults to the shortest.
    pub source_bits: Option<usize>,
    /// Defaults to every trained code length.
    pub target_bits: Vec<usize>,
    pub models: Vec<ModelEntry>,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            loss: "aod".into(),
            source_bits: None,
            target_bits: Vec::new(),
            models: vec![ModelEntry { name: "a".into(), seed: 1 }, ModelEntry { name: "b".into(), seed: 2 }],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub seed: u64,
}

impl Manifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Failure::Missing(format!("manifest {}: {e}", path.display())))?;
        let m: Manifest =
            toml::from_str(&text).map_err(|e| Failure::Usage(format!("manifest {}: {e}", path.display())))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = toml::to_string_pretty(self).context("serializing manifest")?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Every subspace count to train, primary first.
    pub fn all_m(&self) -> Vec<usize> {
        let mut out = vec![self.codebook.m];
        for &m in &self.codebook.extra_m {
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let usage = |msg: String| Err(Failure::Usage(msg));
        let feat = self.net.feature_dim;
        for m in self.all_m() {
            if m == 0 || feat % m != 0 {
                return usage(format!("codebook m = {m} does not divide net.feature_dim = {feat}"));
            }
        }
        if self.codebook.k < 1 || self.codebook.k > 65536 {
            return usage(format!("codebook.k = {} must be in 1..=65536", self.codebook.k));
        }
        if self.eval.modes.is_empty() {
            return usage("eval.modes is empty".into());
        }
        if self.attack.losses.is_empty() {
            return usage("attack.losses is empty".into());
        }
        let mut names: Vec<&str> = self.transfer.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return usage("transfer.models has duplicate names".into());
        }
        if let Some(n) = names.iter().find(|n| n.is_empty() || n.contains(['/', '\\']) || **n == "." || **n == "..") {
            return usage(format!("transfer model name {n:?} is not a plain directory name"));
        }
        Ok(())
    }
}
