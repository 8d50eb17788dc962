//! Product quantization: Cartesian codebooks, encode/decode, and the SDC/ADC
//! lookup tables.
//!
//! A `D`-dimensional vector is split into `m` contiguous sub-vectors of
//! `sub_dim = D / m` coordinates; sub-vector `i` is replaced by the index of
//! its nearest centroid in sub-codebook `i`. Centroids are stored flat,
//! subspace-major: `centroids[(i * k + j) * sub_dim ..][.. sub_dim]`.

mod index;
mod io;

pub use index::{encode_residual, reconstruct_residual, search, CoarseQuantizer, PqIndex, SearchHit, SearchMode};
pub use io::{
    load_codebook, load_index, read_codebook, read_index, save_codebook, save_index, write_codebook, write_index,
};

use crate::error::{Error, Result};
use crate::kmeans::{train_kmeans, KMeansConfig, KMeansResult};
use crate::numkit::{derive_seed, normalize_in_place, sq_dist, DenseVector, NORM_EPS};

/// Upper bound on centroids per subspace (two-byte code width).
pub const MAX_K: usize = 65536;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    m: usize,
    k: usize,
    sub_dim: usize,
    centroids: Vec<f64>,
}

impl Codebook {
    pub fn new(m: usize, k: usize, sub_dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if m == 0 || k == 0 || sub_dim == 0 {
            return Err(Error::invalid(format!("codebook shape must be positive, got m={m} k={k} sub_dim={sub_dim}")));
        }
        if k > MAX_K {
            return Err(Error::invalid(format!("k = {k} exceeds the code width bound {MAX_K}")));
        }
        if centroids.len() != m * k * sub_dim {
            return Err(Error::dims(m * k * sub_dim, centroids.len()));
        }
        if let Some(i) = centroids.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("codebook entry {i}")));
        }
        Ok(Codebook { m, k, sub_dim, centroids })
    }

    /// Builds from `subspaces[i][j]`, the `j`-th centroid of subspace `i`.
    pub fn from_subspaces(subspaces: &[Vec<DenseVector>]) -> Result<Self> {
        let m = subspaces.len();
        let k = subspaces.first().map_or(0, Vec::len);
        let sub_dim = subspaces.first().and_then(|s| s.first()).map_or(0, DenseVector::dim);
        let mut flat = Vec::with_capacity(m * k * sub_dim);
        for (i, sub) in subspaces.iter().enumerate() {
            if sub.len() != k {
                return Err(Error::invalid(format!("subspace {i} has {} centroids, expected {k}", sub.len())));
            }
            for c in sub {
                if c.dim() != sub_dim {
                    return Err(Error::dims(sub_dim, c.dim()));
                }
                flat.extend_from_slice(c);
            }
        }
        Codebook::new(m, k, sub_dim, flat)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    /// Total vector dimension `m * sub_dim`.
    pub fn dim(&self) -> usize {
        self.m * self.sub_dim
    }

    pub fn centroid(&self, sub: usize, j: usize) -> &[f64] {
        let start = (sub * self.k + j) * self.sub_dim;
        &self.centroids[start..start + self.sub_dim]
    }

    /// All centroids of one subspace, `k * sub_dim` values.
    pub fn subspace(&self, sub: usize) -> &[f64] {
        let len = self.k * self.sub_dim;
        &self.centroids[sub * len..(sub + 1) * len]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.centroids
    }

    /// Bytes per sub-index in the on-disk code layout.
    pub fn code_width(&self) -> usize {
        if self.k <= 256 {
            1
        } else {
            2
        }
    }

    /// Code length in bits, `m * ceil(log2 k)`.
    pub fn bits(&self) -> usize {
        let per = usize::BITS - (self.k - 1).leading_zeros();
        self.m * per as usize
    }

    pub fn normalize_centroids(&mut self) {
        for c in self.centroids.chunks_exact_mut(self.sub_dim) {
            normalize_in_place(c, NORM_EPS);
        }
    }

    /// Gradient step `c -= lr * grad` over the flat centroid layout.
    pub(crate) fn step(&mut self, grad: &[f64], lr: f64) {
        debug_assert_eq!(grad.len(), self.centroids.len());
        for (c, g) in self.centroids.iter_mut().zip(grad) {
            *c -= lr * g;
        }
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim() {
            return Err(Error::dims(self.dim(), dim));
        }
        Ok(())
    }
}

/// The `m` sub-centroid indices of one encoded vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PqCode {
    indices: Vec<u16>,
}

impl PqCode {
    pub fn new(indices: Vec<u16>) -> Self {
        PqCode { indices }
    }

    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    pub fn validate(&self, codebook: &Codebook) -> Result<()> {
        if self.indices.len() != codebook.m {
            return Err(Error::dims(codebook.m, self.indices.len()));
        }
        if let Some((i, &b)) = self.indices.iter().enumerate().find(|(_, &b)| b as usize >= codebook.k) {
            return Err(Error::invalid(format!("code index {b} in subspace {i} is out of range (k = {})", codebook.k)));
        }
        Ok(())
    }
}

/// Config for subspace `sub`: same settings, seed mixed with the subspace id.
pub fn subspace_config(config: &KMeansConfig, sub: usize) -> KMeansConfig {
    let mut c = config.clone();
    c.seed = derive_seed(config.seed, &format!("pq/subspace/{sub}"));
    c
}

fn check_split(vectors: &[DenseVector], m: usize) -> Result<usize> {
    let first = vectors.first().ok_or(Error::Empty("codebook training set"))?;
    let dim = first.dim();
    if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(Error::dims(dim, v.dim()));
    }
    if m == 0 || dim % m != 0 {
        return Err(Error::invalid(format!("dimension {dim} is not divisible by m = {m}")));
    }
    Ok(dim / m)
}

/// Runs k-means independently on each subspace slice (`config.k` clusters).
pub fn train_subspace_kmeans(vectors: &[DenseVector], m: usize, config: &KMeansConfig) -> Result<Vec<KMeansResult>> {
    let sub_dim = check_split(vectors, m)?;
    (0..m)
        .map(|sub| {
            let slices: Vec<DenseVector> = vectors
                .iter()
                .map(|v| DenseVector::from_finite(v[sub * sub_dim..(sub + 1) * sub_dim].to_vec()))
                .collect();
            train_kmeans(&slices, &subspace_config(config, sub))
                .map_err(|e| Error::invalid(format!("subspace {sub}: {e}")))
        })
        .collect()
}

/// Trains sub-codebooks without the unit-norm projection (residual coding,
/// plain Euclidean PQ).
pub fn train_codebooks_unnormalized(
    vectors: &[DenseVector],
    m: usize,
    k: usize,
    config: &KMeansConfig,
) -> Result<Codebook> {
    let mut cfg = config.clone();
    cfg.k = k;
    let results = train_subspace_kmeans(vectors, m, &cfg)?;
    let subspaces: Vec<Vec<DenseVector>> = results.into_iter().map(|r| r.centroids).collect();
    Codebook::from_subspaces(&subspaces)
}

/// Trains sub-codebooks and projects every centroid onto the unit sphere, so
/// Euclidean argmin and cosine argmax assignment agree.
pub fn train_codebooks(vectors: &[DenseVector], m: usize, k: usize, config: &KMeansConfig) -> Result<Codebook> {
    let mut cb = train_codebooks_unnormalized(vectors, m, k, config)?;
    cb.normalize_centroids();
    Ok(cb)
}

pub(crate) fn encode_slice(vector: &[f64], codebook: &Codebook) -> PqCode {
    let d = codebook.sub_dim;
    let indices = (0..codebook.m)
        .map(|sub| {
            let x = &vector[sub * d..(sub + 1) * d];
            let mut best = (0usize, f64::INFINITY);
            for j in 0..codebook.k {
                let dist = sq_dist(x, codebook.centroid(sub, j));
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            best.0 as u16
        })
        .collect();
    PqCode { indices }
}

/// Per-subspace nearest centroid, ties to the lowest index.
pub fn encode(vector: &[f64], codebook: &Codebook) -> Result<PqCode> {
    codebook.check_dim(vector.len())?;
    Ok(encode_slice(vector, codebook))
}

pub(crate) fn decode_into(code: &PqCode, codebook: &Codebook, out: &mut Vec<f64>) {
    out.clear();
    for (sub, &b) in code.indices.iter().enumerate() {
        out.extend_from_slice(codebook.centroid(sub, b as usize));
    }
}

pub fn decode(code: &PqCode, codebook: &Codebook) -> Result<DenseVector> {
    code.validate(codebook)?;
    let mut out = Vec::with_capacity(codebook.dim());
    decode_into(code, codebook, &mut out);
    Ok(DenseVector::from_finite(out))
}

/// Squared distances from one query's sub-vectors to every centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcTable {
    m: usize,
    k: usize,
    entries: Vec<f64>,
}

impl AdcTable {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entry(&self, sub: usize, j: usize) -> f64 {
        self.entries[sub * self.k + j]
    }

    #[inline]
    pub(crate) fn squared(&self, code: &[u16]) -> f64 {
        code.iter().enumerate().map(|(sub, &b)| self.entries[sub * self.k + b as usize]).sum()
    }
}

pub(crate) fn adc_table_slice(query: &[f64], codebook: &Codebook) -> AdcTable {
    let d = codebook.sub_dim;
    let mut entries = Vec::with_capacity(codebook.m * codebook.k);
    for sub in 0..codebook.m {
        let q = &query[sub * d..(sub + 1) * d];
        for j in 0..codebook.k {
            entries.push(sq_dist(q, codebook.centroid(sub, j)));
        }
    }
    AdcTable { m: codebook.m, k: codebook.k, entries }
}

pub fn build_adc_table(query: &[f64], codebook: &Codebook) -> Result<AdcTable> {
    codebook.check_dim(query.len())?;
    Ok(adc_table_slice(query, codebook))
}

fn check_code_shape(code: &PqCode, m: usize, k: usize) -> Result<()> {
    if code.indices.len() != m {
        return Err(Error::dims(m, code.indices.len()));
    }
    if let Some(&b) = code.indices.iter().find(|&&b| b as usize >= k) {
        return Err(Error::invalid(format!("code index {b} out of range (k = {k})")));
    }
    Ok(())
}

/// Asymmetric distance: `sqrt(Σ_m table[m][code_m])`.
pub fn adc_distance(code: &PqCode, table: &AdcTable) -> Result<f64> {
    check_code_shape(code, table.m, table.k)?;
    Ok(table.squared(&code.indices).sqrt())
}

/// Pairwise squared centroid distances per subspace, `m × k × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdcTable {
    m: usize,
    k: usize,
    entries: Vec<f64>,
}

impl SdcTable {
    pub fn entry(&self, sub: usize, a: usize, b: usize) -> f64 {
        self.entries[(sub * self.k + a) * self.k + b]
    }

    #[inline]
    pub(crate) fn squared(&self, a: &[u16], b: &[u16]) -> f64 {
        let k = self.k;
        a.iter().zip(b).enumerate().map(|(sub, (&x, &y))| self.entries[(sub * k + x as usize) * k + y as usize]).sum()
    }
}

pub fn build_sdc_table(codebook: &Codebook) -> SdcTable {
    let (m, k) = (codebook.m, codebook.k);
    let mut entries = vec![0.0; m * k * k];
    for sub in 0..m {
        for a in 0..k {
            for b in a + 1..k {
                let d = sq_dist(codebook.centroid(sub, a), codebook.centroid(sub, b));
                entries[(sub * k + a) * k + b] = d;
                entries[(sub * k + b) * k + a] = d;
            }
        }
    }
    SdcTable { m, k, entries }
}

/// Symmetric distance between two codes: `sqrt(Σ_m table[m][a_m][b_m])`.
pub fn sdc_distance(a: &PqCode, b: &PqCode, table: &SdcTable) -> Result<f64> {
    check_code_shape(a, table.m, table.k)?;
    check_code_shape(b, table.m, table.k)?;
    Ok(table.squared(&a.indices, &b.indices).sqrt())
}

/// Float count of the codebook and float operations for one assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StorageStats {
    pub memory_floats: usize,
    pub assign_ops: usize,
}

pub fn storage_stats(codebook: &Codebook) -> StorageStats {
    let n = codebook.m * codebook.k * codebook.sub_dim;
    StorageStats { memory_floats: n, assign_ops: n }
}
