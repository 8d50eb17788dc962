//! Labeled vector datasets: synthetic generation, splitting and file I/O.
//!
//! Two on-disk formats are supported.
//!
//! * fvecs: per record an `i32` dimension followed by that many `f32`
//!   values, all little-endian. Labels live in a sidecar next to the vector
//!   file: `<stem>.labels` holds one `u32` per record when every record has
//!   exactly one label, otherwise `<stem>.mlabels` holds a `u8` count and
//!   that many `u32`s per record. Ids other than `0..N` are kept in a
//!   `<stem>.ids` sidecar of `u32`s.
//! * CSV: header `id,label,v0,…,v{d-1}`; multiple labels are joined by `;`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numkit::{derive_seed, dot, DenseVector, Rng, NORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    ids: Vec<u32>,
    vectors: Vec<DenseVector>,
    labels: Vec<Vec<u32>>,
    dim: usize,
}

impl LabeledDataset {
    pub fn new(ids: Vec<u32>, vectors: Vec<DenseVector>, labels: Vec<Vec<u32>>) -> Result<Self> {
        let dim = vectors.first().map(DenseVector::dim).ok_or(Error::Empty("dataset"))?;
        LabeledDataset::with_dim(dim, ids, vectors, labels)
    }

    /// Like [`LabeledDataset::new`] but allows zero records.
    pub fn with_dim(dim: usize, ids: Vec<u32>, vectors: Vec<DenseVector>, labels: Vec<Vec<u32>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dataset dimension must be positive"));
        }
        if ids.len() != vectors.len() {
            return Err(Error::dims(vectors.len(), ids.len()));
        }
        if labels.len() != vectors.len() {
            return Err(Error::dims(vectors.len(), labels.len()));
        }
        if let Some((i, v)) = vectors.iter().enumerate().find(|(_, v)| v.dim() != dim) {
            return Err(Error::invalid(format!("record {i} has dimension {} but the dataset has {dim}", v.dim())));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::invalid(format!("duplicate id {dup}")));
        }
        Ok(LabeledDataset { ids, vectors, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn vectors(&self) -> &[DenseVector] {
        &self.vectors
    }

    pub fn labels(&self) -> &[Vec<u32>] {
        &self.labels
    }

    /// True when some record has zero or several labels.
    pub fn is_multi_label(&self) -> bool {
        self.labels.iter().any(|l| l.len() != 1)
    }

    /// The single label of each record, if every record has exactly one.
    pub fn single_labels(&self) -> Option<Vec<u32>> {
        self.labels.iter().map(|l| if l.len() == 1 { Some(l[0]) } else { None }).collect()
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<u32> {
        self.labels.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Records at `positions`, in that order.
    pub fn subset(&self, positions: &[usize]) -> LabeledDataset {
        LabeledDataset {
            ids: positions.iter().map(|&i| self.ids[i]).collect(),
            vectors: positions.iter().map(|&i| self.vectors[i].clone()).collect(),
            labels: positions.iter().map(|&i| self.labels[i].clone()).collect(),
            dim: self.dim,
        }
    }

    /// Same ids and labels with new vectors.
    pub fn with_vectors(&self, vectors: Vec<DenseVector>) -> Result<LabeledDataset> {
        let dim = vectors.first().map_or(self.dim, DenseVector::dim);
        LabeledDataset::with_dim(dim, self.ids.clone(), vectors, self.labels.clone())
    }

    /// Smallest and largest coordinate over all records.
    pub fn value_range(&self) -> Option<(f64, f64)> {
        let mut it = self.vectors.iter().flat_map(|v| v.iter().copied());
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Minimum distance between class means, in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.per_class == 0 || self.dim == 0 {
            return Err(Error::invalid("per_class and dim must be positive"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite() && self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("separation and sigma must be finite and > 0"));
        }
        if self.dim < self.classes {
            return Err(Error::invalid(format!(
                "dim {} is smaller than the number of classes {}; an orthogonal frame needs dim >= classes",
                self.dim, self.classes
            )));
        }
        if (self.classes * self.per_class) as u64 > u64::from(u32::MAX) {
            return Err(Error::invalid("too many records"));
        }
        Ok(())
    }
}

/// Class means: a random orthonormal frame scaled so every pair of means is
/// at least `separation · sigma` apart.
pub fn synthetic_means(spec: &SyntheticSpec) -> Result<Vec<DenseVector>> {
    spec.validate()?;
    let mut rng = Rng::new(derive_seed(spec.seed, "dataio/frame"));
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    while frame.len() < spec.classes {
        let mut v: Vec<f64> = (0..spec.dim).map(|_| rng.gaussian()).collect();
        // two Gram-Schmidt passes keep the frame orthogonal to rounding error
        for _ in 0..2 {
            for e in &frame {
                let p = dot(&v, e);
                v.iter_mut().zip(e).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > NORM_EPS.sqrt() {
            v.iter_mut().for_each(|a| *a /= n);
            frame.push(v);
        }
    }
    let target = spec.separation * spec.sigma;
    let mut radius = target / std::f64::consts::SQRT_2;
    loop {
        let means: Vec<Vec<f64>> = frame.iter().map(|e| e.iter().map(|v| v * radius).collect()).collect();
        let closest = (0..means.len())
            .flat_map(|i| (i + 1..means.len()).map(move |j| (i, j)))
            .map(|(i, j)| crate::numkit::sq_dist(&means[i], &means[j]).sqrt())
            .fold(f64::INFINITY, f64::min);
        if closest >= target {
            return means.into_iter().map(DenseVector::new).collect();
        }
        radius *= 1.0 + 1e-12;
    }
}

/// `per_class` Gaussian samples around each class mean. Records are laid
/// out class by class and get ids `0..N`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    let means = synthetic_means(spec)?;
    let mut rng = Rng::new(derive_seed(spec.seed, "dataio/noise"));
    let n = spec.classes * spec.per_class;
    let mut vectors = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            vectors.push(DenseVector::new(mean.iter().map(|m| m + spec.sigma * rng.gaussian()).collect())?);
            labels.push(vec![c as u32]);
        }
    }
    LabeledDataset::new((0..n as u32).collect(), vectors, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub database: LabeledDataset,
    pub queries: LabeledDataset,
    /// Classes present in the input but absent from the database.
    pub missing_from_database: Vec<u32>,
}

impl Split {
    pub fn has_warning(&self) -> bool {
        !self.missing_from_database.is_empty()
    }
}

/// Seeded partition into database and `n_queries` queries. In stratified
/// mode each class (keyed by its first label) contributes a share of queries
/// within one record of the global fraction. Both parts keep the input
/// order.
pub fn split(dataset: &LabeledDataset, n_queries: usize, seed: u64, stratified: bool) -> Result<Split> {
    let n = dataset.len();
    if n_queries >= n.max(1) {
        return Err(Error::invalid(format!("n_queries {n_queries} must be smaller than the dataset size {n}")));
    }
    let mut rng = Rng::new(derive_seed(seed, "dataio/split"));
    let mut is_query = vec![false; n];
    if stratified {
        let mut groups: BTreeMap<Option<u32>, Vec<usize>> = BTreeMap::new();
        for (i, l) in dataset.labels.iter().enumerate() {
            groups.entry(l.first().copied()).or_default().push(i);
        }
        let frac = n_queries as f64 / n as f64;
        let mut quotas: Vec<(usize, f64)> = groups
            .values()
            .map(|g| {
                let exact = g.len() as f64 * frac;
                (exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let mut remaining = n_queries - quotas.iter().map(|q| q.0).sum::<usize>();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
        for &g in order.iter().cycle() {
            if remaining == 0 {
                break;
            }
            let size = groups.values().nth(g).unwrap().len();
            if quotas[g].0 < size {
                quotas[g].0 += 1;
                remaining -= 1;
            }
        }
        for (members, (quota, _)) in groups.values().zip(&quotas) {
            let mut m = members.clone();
            rng.shuffle(&mut m);
            m.iter().take(*quota).for_each(|&i| is_query[i] = true);
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        order.iter().take(n_queries).for_each(|&i| is_query[i] = true);
    }
    let (q, db): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_query[i]);
    let database = dataset.subset(&db);
    let queries = dataset.subset(&q);
    let present: BTreeSet<u32> = database.labels.iter().flatten().copied().collect();
    let missing_from_database = dataset.classes().into_iter().filter(|c| !present.contains(c)).collect();
    Ok(Split { database, queries, missing_from_database })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorFormat {
    Fvecs,
    Csv,
}

impl VectorFormat {
    /// `.csv` means CSV, anything else fvecs.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => VectorFormat::Csv,
            _ => VectorFormat::Fvecs,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            VectorFormat::Fvecs => "fvecs",
            VectorFormat::Csv => "csv",
        }
    }
}

impl FromStr for VectorFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fvecs" => Ok(VectorFormat::Fvecs),
            "csv" => Ok(VectorFormat::Csv),
            _ => Err(Error::invalid(format!("unknown vector format {s:?} (expected fvecs or csv)"))),
        }
    }
}

/// Sidecar file paths used by the fvecs format.
pub fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (path.with_extension("labels"), path.with_extension("mlabels"), path.with_extension("ids"))
}

pub fn save_vectors(dataset: &LabeledDataset, path: impl AsRef<Path>, format: VectorFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        VectorFormat::Fvecs => save_fvecs(dataset, path),
        VectorFormat::Csv => save_csv(dataset, path),
    }
}

pub fn load_vectors(path: impl AsRef<Path>, format: VectorFormat) -> Result<LabeledDataset> {
    let path = path.as_ref();
    match format {
        VectorFormat::Fvecs => load_fvecs(path),
        VectorFormat::Csv => load_csv(path),
    }
}

/// Raw fvecs bytes for the vectors alone.
pub fn write_fvecs(vectors: &[DenseVector]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    for v in vectors {
        w.i32(i32::try_from(v.dim()).map_err(|_| Error::format("dimension does not fit in i32"))?);
        v.iter().for_each(|&x| w.f32(x));
    }
    Ok(w.into_inner())
}

/// Parses fvecs bytes; every record must have the same positive dimension.
pub fn read_fvecs(bytes: &[u8]) -> Result<Vec<DenseVector>> {
    let mut r = ByteReader::new(bytes, "fvecs file");
    let mut out: Vec<DenseVector> = Vec::new();
    while !r.is_empty() {
        let rec = out.len();
        let d = r.i32(&format!("record {rec} dimension header"))?;
        if d <= 0 {
            return Err(Error::format(format!("fvecs file: record {rec} has bad dimension header {d}")));
        }
        if let Some(first) = out.first() {
            if first.dim() != d as usize {
                return Err(Error::format(format!(
                    "fvecs file: record {rec} has dimension {d}, expected {}",
                    first.dim()
                )));
            }
        }
        out.push(DenseVector::from_finite(r.f32s(d as usize, &format!("record {rec} values"))?));
    }
    Ok(out)
}

fn save_fvecs(ds: &LabeledDataset, path: &Path) -> Result<()> {
    fs::write(path, write_fvecs(&ds.vectors)?)?;
    let (single, multi, ids) = sidecar_paths(path);
    let mut w = ByteWriter::new();
    if let Some(labels) = ds.single_labels() {
        labels.iter().for_each(|&l| w.u32(l));
        fs::write(&single, w.into_inner())?;
        remove_if_exists(&multi)?;
    } else {
        for ls in &ds.labels {
            w.u8(u8::try_from(ls.len()).map_err(|_| Error::format("more than 255 labels on one record"))?);
            ls.iter().for_each(|&l| w.u32(l));
        }
        fs::write(&multi, w.into_inner())?;
        remove_if_exists(&single)?;
    }
    if ds.ids.iter().enumerate().all(|(i, &id)| id as usize == i) {
        remove_if_exists(&ids)?;
    } else {
        let mut w = ByteWriter::new();
        ds.ids.iter().for_each(|&id| w.u32(id));
        fs::write(&ids, w.into_inner())?;
    }
    Ok(())
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
        _ => Ok(()),
    }
}

fn load_fvecs(path: &Path) -> Result<LabeledDataset> {
    let vectors = read_fvecs(&fs::read(path)?)?;
    let n = vectors.len();
    let (single, multi, ids_path) = sidecar_paths(path);
    let labels = if single.exists() {
        let bytes = fs::read(&single)?;
        let mut r = ByteReader::new(&bytes, "label sidecar");
        let out =
            (0..n).map(|i| r.u32(&format!("label of record {i}")).map(|l| vec![l])).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        out
    } else if multi.exists() {
        let bytes = fs::read(&multi)?;
        let mut r = ByteReader::new(&bytes, "multi-label sidecar");
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let c = r.u8(&format!("label count of record {i}"))?;
            out.push((0..c).map(|_| r.u32(&format!("labels of record {i}"))).collect::<Result<Vec<_>>>()?);
        }
        r.finish()?;
        out
    } else {
        vec![Vec::new(); n]
    };
    let ids = if ids_path.exists() {
        let bytes = fs::read(&ids_path)?;
        let mut r = ByteReader::new(&bytes, "id sidecar");
        let out = (0..n).map(|i| r.u32(&format!("id of record {i}"))).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        out
    } else {
        (0..n as u32).collect()
    };
    match vectors.first() {
        Some(v) => LabeledDataset::with_dim(v.dim(), ids, vectors, labels),
        None => Err(Error::format(format!("{}: no records", path.display()))),
    }
}

fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..ds.dim).map(|i| format!("v{i}")));
    w.write_record(&header)?;
    for ((id, v), ls) in ds.ids.iter().zip(&ds.vectors).zip(&ds.labels) {
        let mut row = vec![id.to_string(), ls.iter().map(u32::to_string).collect::<Vec<_>>().join(";")];
        row.extend(v.iter().map(|x| (*x as f32).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let header = rdr.headers()?.clone();
    let dim = header.len().saturating_sub(2);
    let expected = (0..dim).map(|i| format!("v{i}"));
    if header.len() < 3
        || &header[0] != "id"
        || &header[1] != "label"
        || !header.iter().skip(2).zip(expected).all(|(h, e)| h == e)
    {
        return Err(Error::format(format!(
            "{}: header must be id,label,v0..v{{d-1}}, got {:?}",
            path.display(),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut ids = Vec::new();
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::format(format!("line {line}: expected {} fields, found {}", header.len(), rec.len())));
        }
        let bad = |what: &str, cell: &str| Error::format(format!("line {line}: {what} {cell:?} is not a valid number"));
        ids.push(rec[0].trim().parse::<u32>().map_err(|_| bad("id", &rec[0]))?);
        let ls = rec[1].trim();
        labels.push(if ls.is_empty() {
            Vec::new()
        } else {
            ls.split(';').map(|l| l.trim().parse::<u32>().map_err(|_| bad("label", l))).collect::<Result<Vec<_>>>()?
        });
        let vals = rec
            .iter()
            .skip(2)
            .map(|c| c.trim().parse::<f32>().map(f64::from).map_err(|_| bad("value", c)))
            .collect::<Result<Vec<_>>>()?;
        vectors.push(DenseVector::new(vals).map_err(|e| Error::format(format!("line {line}: {e}")))?);
    }
    LabeledDataset::with_dim(dim, ids, vectors, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kmeans::{train_kmeans, KMeansConfig};

    fn spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec { classes: 10, per_class: 50, dim: 16, separation: 20.0, sigma: 1.0, seed }
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let a = generate_synthetic(&spec(7)).unwrap();
        assert_eq!(a.len(), 500);
        for c in 0..10u32 {
            assert_eq!(a.labels().iter().filter(|l| l[0] == c).count(), 50);
        }
        let b = generate_synthetic(&spec(7)).unwrap();
        assert!(a
            .vectors()
            .iter()
            .zip(b.vectors())
            .all(|(x, y)| x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits())));
        assert_ne!(a, generate_synthetic(&spec(8)).unwrap());

        let means = synthetic_means(&spec(7)).unwrap();
        for i in 0..10 {
            for j in i + 1..10 {
                let d = crate::numkit::sq_dist(&means[i], &means[j]).sqrt();
                assert!(d >= 20.0, "{d}");
            }
        }
        let bad = SyntheticSpec { dim: 5, ..spec(1) };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn kmeans_recovers_synthetic_means() {
        // 200 points per class keeps the sample-mean error near sqrt(16/200)
        let s = SyntheticSpec { per_class: 200, ..spec(11) };
        let ds = generate_synthetic(&s).unwrap();
        let means = synthetic_means(&s).unwrap();
        let res = train_kmeans(ds.vectors(), &KMeansConfig::new(10).with_seed(3).with_restarts(5)).unwrap();
        let mut correct = 0;
        for c in 0..10 {
            let members: Vec<usize> = (0..ds.len()).filter(|&i| res.assignments[i] == c).collect();
            let mut counts = [0usize; 10];
            members.iter().for_each(|&i| counts[ds.labels()[i][0] as usize] += 1);
            let (best, n) = counts.iter().enumerate().max_by_key(|(_, n)| **n).unwrap();
            correct += n;
            let d = crate::numkit::sq_dist(&res.centroids[c], &means[best]).sqrt();
            assert!(d < 0.5, "cluster {c} is {d} from its mean");
        }
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn split_cases() {
        let ds = generate_synthetic(&SyntheticSpec { per_class: 23, ..spec(3) }).unwrap();
        let s = split(&ds, 0, 1, true).unwrap();
        assert!(s.queries.is_empty());
        assert_eq!(s.database, ds);
        assert!(split(&ds, ds.len(), 1, false).is_err());

        for stratified in [false, true] {
            let s = split(&ds, 37, 5, stratified).unwrap();
            assert_eq!(s.queries.len(), 37);
            assert_eq!(s.database.len() + s.queries.len(), ds.len());
            let mut all: Vec<u32> = s.database.ids().iter().chain(s.queries.ids()).copied().collect();
            all.sort_unstable();
            assert_eq!(all, ds.ids());
            assert_eq!(s, split(&ds, 37, 5, stratified).unwrap());
            if stratified {
                let frac = 37.0 / ds.len() as f64;
                for c in 0..10u32 {
                    let q = s.queries.labels().iter().filter(|l| l[0] == c).count() as f64;
                    assert!((q - 23.0 * frac).abs() <= 1.0, "class {c}: {q}");
                }
                assert!(!s.has_warning());
            }
        }

        let tiny = LabeledDataset::new(
            vec![0, 1, 2],
            (0..3).map(|i| DenseVector::new(vec![i as f64]).unwrap()).collect(),
            vec![vec![0], vec![1], vec![1]],
        )
        .unwrap();
        // a one-record database cannot hold both classes
        let s = split(&tiny, 2, 0, false).unwrap();
        assert!(s.has_warning());
        assert_eq!(s.missing_from_database.len(), 1);
    }

    #[test]
    fn fvecs_roundtrip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut vecs = Vec::new();
        for r in 0..2 {
            vecs.push(DenseVector::new((0..4).map(|i| (r * 4 + i) as f64 * 0.5).collect()).unwrap());
        }
        let bytes = write_fvecs(&vecs).unwrap();
        assert_eq!(bytes.len(), 2 * (4 + 16));
        assert_eq!(i32::from_le_bytes(bytes[0..4].try_into().unwrap()), 4);
        let back = read_fvecs(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].dim(), 4);

        let ds = generate_synthetic(&SyntheticSpec { per_class: 5, ..spec(2) }).unwrap();
        let s = split(&ds, 10, 3, true).unwrap();
        for (name, d) in [("db.fvecs", &s.database), ("q.fvecs", &s.queries)] {
            let path = dir.path().join(name);
            save_vectors(d, &path, VectorFormat::Fvecs).unwrap();
            let loaded = load_vectors(&path, VectorFormat::Fvecs).unwrap();
            assert_eq!(loaded.ids(), d.ids());
            assert_eq!(loaded.labels(), d.labels());
            for (a, b) in loaded.vectors().iter().zip(d.vectors()) {
                assert!(a.iter().zip(b.iter()).all(|(x, y)| *x == f64::from(*y as f32)));
            }
            let first = fs::read(&path).unwrap();
            save_vectors(&loaded, &path, VectorFormat::Fvecs).unwrap();
            assert_eq!(fs::read(&path).unwrap(), first);
        }

        let multi = LabeledDataset::new(vec![0, 1], vecs.clone(), vec![vec![1, 4], vec![]]).unwrap();
        let path = dir.path().join("m.fvecs");
        save_vectors(&multi, &path, VectorFormat::Fvecs).unwrap();
        assert!(path.with_extension("mlabels").exists());
        assert_eq!(load_vectors(&path, VectorFormat::Fvecs).unwrap().labels(), multi.labels());
    }

    #[test]
    fn fvecs_errors() {
        let vecs = vec![DenseVector::new(vec![1.0; 4]).unwrap(), DenseVector::new(vec![2.0; 3]).unwrap()];
        let bytes = write_fvecs(&vecs).unwrap();
        assert!(read_fvecs(&bytes).unwrap_err().to_string().contains("record 1"));
        let ok = write_fvecs(&vecs[..1]).unwrap();
        assert!(read_fvecs(&ok[..ok.len() - 2]).unwrap_err().to_string().contains("truncated"));
        let mut bad = ok.clone();
        bad[0..4].copy_from_slice(&(-3i32).to_le_bytes());
        assert!(read_fvecs(&bad).unwrap_err().to_string().contains("bad dimension header"));
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = LabeledDataset::new(
            vec![5, 9, 2],
            vec![
                DenseVector::new(vec![0.1, -2.5, 3.0]).unwrap(),
                DenseVector::new(vec![1e-3, 7.25, -0.0]).unwrap(),
                DenseVector::new(vec![1.0, 2.0, 3.0]).unwrap(),
            ],
            vec![vec![1], vec![2, 3], vec![]],
        )
        .unwrap();
        let path = dir.path().join("d.csv");
        save_vectors(&ds, &path, VectorFormat::Csv).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,label,v0,v1,v2\n"));
        let back = load_vectors(&path, VectorFormat::Csv).unwrap();
        assert_eq!(back.ids(), ds.ids());
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.vectors().iter().zip(ds.vectors()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| *x == f64::from(*y as f32)));
        }

        fs::write(&path, "label,id,v0\n1,0,0.5\n").unwrap();
        assert!(load_vectors(&path, VectorFormat::Csv).unwrap_err().to_string().contains("header"));
        fs::write(&path, "id,label,v1,v0\n0,1,0.5,0.2\n").unwrap();
        assert!(load_vectors(&path, VectorFormat::Csv).is_err());
        fs::write(&path, "id,label,v0,v1\n0,1,0.5,0.2\n1,1,0.5\n").unwrap();
        let err = load_vectors(&path, VectorFormat::Csv).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        fs::write(&path, "id,label,v0,v1\n0,1,0.5,abc\n").unwrap();
        let err = load_vectors(&path, VectorFormat::Csv).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("abc"), "{err}");
    }
}
