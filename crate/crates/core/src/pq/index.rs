use std::sync::OnceLock;

use rayon::prelude::*;

use super::{adc_table_slice, build_sdc_table, decode_into, encode_slice, Codebook, PqCode, SdcTable};
use crate::error::{Error, Result};
use crate::kmeans::{nearest_centroid, train_kmeans, KMeansConfig};
use crate::numkit::{sq_dist, DenseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SearchMode {
    Sdc,
    Adc,
}

impl SearchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SearchMode::Sdc => "sdc",
            SearchMode::Adc => "adc",
        }
    }
}

impl std::fmt::Display for SearchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sdc" => Ok(SearchMode::Sdc),
            "adc" => Ok(SearchMode::Adc),
            other => Err(Error::invalid(format!("unknown search mode {other:?}"))),
        }
    }
}

/// Full-dimensional first-stage quantizer for residual encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseQuantizer {
    centroids: Vec<DenseVector>,
}

impl CoarseQuantizer {
    pub fn new(centroids: Vec<DenseVector>) -> Result<Self> {
        let first = centroids.first().ok_or(Error::Empty("coarse quantizer"))?;
        if let Some(c) = centroids.iter().find(|c| c.dim() != first.dim()) {
            return Err(Error::dims(first.dim(), c.dim()));
        }
        Ok(CoarseQuantizer { centroids })
    }

    pub fn train(vectors: &[DenseVector], config: &KMeansConfig) -> Result<Self> {
        CoarseQuantizer::new(train_kmeans(vectors, config)?.centroids)
    }

    pub fn centroids(&self) -> &[DenseVector] {
        &self.centroids
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].dim()
    }
}

/// `q(x) = q_c(x) + q_p(x − q_c(x))`: returns the coarse cell and the PQ
/// code of the residual.
pub fn encode_residual(vector: &[f64], coarse: &CoarseQuantizer, codebook: &Codebook) -> Result<(usize, PqCode)> {
    if coarse.dim() != codebook.dim() {
        return Err(Error::dims(codebook.dim(), coarse.dim()));
    }
    codebook.check_dim(vector.len())?;
    let cell = nearest_centroid(vector, &coarse.centroids)?;
    let residual: Vec<f64> = vector.iter().zip(coarse.centroids[cell].iter()).map(|(x, c)| x - c).collect();
    Ok((cell, encode_slice(&residual, codebook)))
}

pub fn reconstruct_residual(
    cell: usize,
    code: &PqCode,
    coarse: &CoarseQuantizer,
    codebook: &Codebook,
) -> Result<DenseVector> {
    let base = coarse
        .centroids
        .get(cell)
        .ok_or_else(|| Error::invalid(format!("coarse cell {cell} out of range ({} cells)", coarse.len())))?;
    let fine = super::decode(code, codebook)?;
    Ok(DenseVector::from_finite(base.iter().zip(fine.iter()).map(|(a, b)| a + b).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub id: u32,
    pub distance: f64,
}

/// Exhaustive-scan PQ index. Immutable once built; the SDC table is built
/// lazily on first symmetric search.
#[derive(Debug, Clone)]
pub struct PqIndex {
    codebook: Codebook,
    codes: Vec<PqCode>,
    ids: Vec<u32>,
    labels: Option<Vec<u32>>,
    coarse: Option<(CoarseQuantizer, Vec<u32>)>,
    sdc: OnceLock<SdcTable>,
}

impl PartialEq for PqIndex {
    fn eq(&self, other: &Self) -> bool {
        self.codebook == other.codebook
            && self.codes == other.codes
            && self.ids == other.ids
            && self.labels == other.labels
            && self.coarse == other.coarse
    }
}

impl PqIndex {
    pub fn from_parts(codebook: Codebook, codes: Vec<PqCode>, ids: Vec<u32>, labels: Option<Vec<u32>>) -> Result<Self> {
        if codes.len() != ids.len() {
            return Err(Error::invalid(format!("{} codes but {} ids", codes.len(), ids.len())));
        }
        if let Some(l) = &labels {
            if l.len() != ids.len() {
                return Err(Error::invalid(format!("{} labels but {} ids", l.len(), ids.len())));
            }
        }
        for (i, c) in codes.iter().enumerate() {
            c.validate(&codebook).map_err(|e| Error::invalid(format!("record {i}: {e}")))?;
        }
        Ok(PqIndex { codebook, codes, ids, labels, coarse: None, sdc: OnceLock::new() })
    }

    /// Encodes `vectors` with `codebook`.
    pub fn build(codebook: Codebook, vectors: &[DenseVector], ids: Vec<u32>, labels: Option<Vec<u32>>) -> Result<Self> {
        for v in vectors {
            codebook.check_dim(v.dim())?;
        }
        let codes = vectors.par_iter().map(|v| encode_slice(v, &codebook)).collect();
        PqIndex::from_parts(codebook, codes, ids, labels)
    }

    /// Encodes residuals against `coarse`; the scan stays exhaustive.
    pub fn build_residual(
        codebook: Codebook,
        coarse: CoarseQuantizer,
        vectors: &[DenseVector],
        ids: Vec<u32>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        let encoded: Vec<(usize, PqCode)> =
            vectors.iter().map(|v| encode_residual(v, &coarse, &codebook)).collect::<Result<_>>()?;
        let (cells, codes): (Vec<usize>, Vec<PqCode>) = encoded.into_iter().unzip();
        let mut index = PqIndex::from_parts(codebook, codes, ids, labels)?;
        index.coarse = Some((coarse, cells.into_iter().map(|c| c as u32).collect()));
        Ok(index)
    }

    pub(crate) fn with_coarse(mut self, coarse: CoarseQuantizer, cells: Vec<u32>) -> Result<Self> {
        if coarse.dim() != self.codebook.dim() {
            return Err(Error::dims(self.codebook.dim(), coarse.dim()));
        }
        if cells.len() != self.codes.len() {
            return Err(Error::invalid(format!("{} coarse cells for {} records", cells.len(), self.codes.len())));
        }
        if let Some(&c) = cells.iter().find(|&&c| c as usize >= coarse.len()) {
            return Err(Error::invalid(format!("coarse cell {c} out of range")));
        }
        self.coarse = Some((coarse, cells));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn codes(&self) -> &[PqCode] {
        &self.codes
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn coarse(&self) -> Option<(&CoarseQuantizer, &[u32])> {
        self.coarse.as_ref().map(|(q, c)| (q, c.as_slice()))
    }

    pub fn sdc_table(&self) -> &SdcTable {
        self.sdc.get_or_init(|| build_sdc_table(&self.codebook))
    }

    /// Reconstruction of record `i`.
    pub fn reconstruct(&self, i: usize) -> DenseVector {
        let mut out = Vec::with_capacity(self.codebook.dim());
        decode_into(&self.codes[i], &self.codebook, &mut out);
        if let Some((q, cells)) = &self.coarse {
            for (o, c) in out.iter_mut().zip(q.centroids[cells[i] as usize].iter()) {
                *o += c;
            }
        }
        DenseVector::from_finite(out)
    }

    fn squared_distances(&self, query: &[f64], mode: SearchMode) -> Vec<f64> {
        match (&self.coarse, mode) {
            (None, SearchMode::Adc) => {
                let table = adc_table_slice(query, &self.codebook);
                self.codes.par_iter().map(|c| table.squared(c.indices())).collect()
            }
            (None, SearchMode::Sdc) => {
                let q = encode_slice(query, &self.codebook);
                let table = self.sdc_table();
                self.codes.par_iter().map(|c| table.squared(q.indices(), c.indices())).collect()
            }
            (Some((coarse, cells)), SearchMode::Adc) => {
                // one table per coarse cell on the shifted query y − c_j
                let tables: Vec<_> = coarse
                    .centroids
                    .iter()
                    .map(|c| {
                        let shifted: Vec<f64> = query.iter().zip(c.iter()).map(|(y, c)| y - c).collect();
                        adc_table_slice(&shifted, &self.codebook)
                    })
                    .collect();
                self.codes
                    .par_iter()
                    .zip(cells.par_iter())
                    .map(|(c, &cell)| tables[cell as usize].squared(c.indices()))
                    .collect()
            }
            (Some((coarse, _)), SearchMode::Sdc) => {
                let (cell, code) = encode_residual(query, coarse, &self.codebook).expect("dimension checked by caller");
                let q = reconstruct_residual(cell, &code, coarse, &self.codebook).expect("valid code");
                (0..self.codes.len()).into_par_iter().map(|i| sq_dist(&q, &self.reconstruct(i))).collect()
            }
        }
    }
}

/// Exhaustive scan; ascending distance, ties by ascending id. In ADC mode the
/// query is used raw, in SDC mode it is encoded first.
pub fn search(query: &[f64], index: &PqIndex, top_n: usize, mode: SearchMode) -> Result<Vec<SearchHit>> {
    if top_n == 0 {
        return Err(Error::invalid("top_n must be at least 1"));
    }
    index.codebook.check_dim(query.len())?;
    if index.is_empty() {
        return Ok(Vec::new());
    }
    let d2 = index.squared_distances(query, mode);
    let mut order: Vec<(f64, u32)> = d2.into_iter().zip(index.ids.iter().copied()).collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.truncate(top_n);
    Ok(order.into_iter().map(|(d, id)| SearchHit { id, distance: d.sqrt() }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use crate::pq::{decode, encode, train_codebooks_unnormalized};

    fn random_codebook(rng: &mut Rng, m: usize, k: usize, d: usize) -> Codebook {
        Codebook::new(m, k, d, (0..m * k * d).map(|_| rng.gaussian()).collect()).unwrap()
    }

    fn random_vecs(rng: &mut Rng, n: usize, d: usize) -> Vec<DenseVector> {
        (0..n).map(|_| DenseVector::new((0..d).map(|_| rng.gaussian()).collect()).unwrap()).collect()
    }

    #[test]
    fn full_ranking_sorted() {
        let mut rng = Rng::new(1);
        let cb = random_codebook(&mut rng, 2, 8, 3);
        let data = random_vecs(&mut rng, 40, 6);
        let index = PqIndex::build(cb, &data, (0..40).collect(), None).unwrap();
        for mode in [SearchMode::Sdc, SearchMode::Adc] {
            let hits = search(&data[0], &index, 40, mode).unwrap();
            assert_eq!(hits.len(), 40);
            for w in hits.windows(2) {
                assert!(w[0].distance < w[1].distance || (w[0].distance == w[1].distance && w[0].id < w[1].id));
            }
            assert_eq!(search(&data[0], &index, 1000, mode).unwrap().len(), 40);
        }
        assert!(search(&data[0], &index, 0, SearchMode::Adc).is_err());
        assert!(search(&[0.0; 5], &index, 3, SearchMode::Adc).is_err());
    }

    #[test]
    fn decoded_query_ranks_its_record_first() {
        let mut rng = Rng::new(2);
        let cb = random_codebook(&mut rng, 4, 16, 2);
        let data = random_vecs(&mut rng, 100, 8);
        let ids: Vec<u32> = (0..100).map(|i| 1000 - i).collect();
        let index = PqIndex::build(cb.clone(), &data, ids.clone(), None).unwrap();
        for j in [0usize, 17, 99] {
            let q = decode(&index.codes()[j], &cb).unwrap();
            let hits = search(&q, &index, 5, SearchMode::Adc).unwrap();
            assert_eq!(hits[0].distance, 0.0);
            // duplicates of code j tie at zero; the smallest id among them wins
            let min_id = (0..100).filter(|&i| index.codes()[i] == index.codes()[j]).map(|i| ids[i]).min().unwrap();
            assert_eq!(hits[0].id, min_id);
        }
    }

    #[test]
    fn empty_index_returns_nothing() {
        let mut rng = Rng::new(3);
        let cb = random_codebook(&mut rng, 1, 2, 2);
        let index = PqIndex::build(cb, &[], vec![], None).unwrap();
        assert!(search(&[0.0, 1.0], &index, 3, SearchMode::Sdc).unwrap().is_empty());
    }

    #[test]
    fn from_parts_validates() {
        let mut rng = Rng::new(4);
        let cb = random_codebook(&mut rng, 2, 4, 1);
        assert!(PqIndex::from_parts(cb.clone(), vec![PqCode::new(vec![0, 4])], vec![0], None).is_err());
        assert!(PqIndex::from_parts(cb.clone(), vec![PqCode::new(vec![0, 3])], vec![0, 1], None).is_err());
        assert!(PqIndex::from_parts(cb, vec![PqCode::new(vec![0, 3])], vec![0], Some(vec![])).is_err());
    }

    #[test]
    fn residual_on_coarse_centroid_is_exact() {
        let mut rng = Rng::new(5);
        let coarse = CoarseQuantizer::new(random_vecs(&mut rng, 3, 4)).unwrap();
        // sub-codebook 0 of each subspace is the zero sub-vector
        let mut flat = Vec::new();
        for _ in 0..2 {
            flat.extend([0.0, 0.0]);
            flat.extend((0..6).map(|_| rng.gaussian()));
        }
        let cb = Codebook::new(2, 4, 2, flat).unwrap();
        let v = coarse.centroids()[1].clone();
        let (cell, code) = encode_residual(&v, &coarse, &cb).unwrap();
        assert_eq!(cell, 1);
        let r = reconstruct_residual(cell, &code, &coarse, &cb).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn origin_coarse_matches_plain_encode() {
        let mut rng = Rng::new(6);
        let coarse = CoarseQuantizer::new(vec![DenseVector::zeros(6)]).unwrap();
        let cb = random_codebook(&mut rng, 3, 5, 2);
        for v in random_vecs(&mut rng, 20, 6) {
            let (cell, code) = encode_residual(&v, &coarse, &cb).unwrap();
            assert_eq!(cell, 0);
            assert_eq!(code, encode(&v, &cb).unwrap());
        }
        assert!(encode_residual(&[0.0; 4], &coarse, &cb).is_err());
    }

    #[test]
    fn residual_search_matches_reconstruction_oracle() {
        let mut rng = Rng::new(7);
        let data = random_vecs(&mut rng, 200, 8);
        let coarse = CoarseQuantizer::train(&data, &KMeansConfig::new(4).with_seed(1)).unwrap();
        let residuals: Vec<DenseVector> = data
            .iter()
            .map(|v| {
                let c = &coarse.centroids()[nearest_centroid(v, coarse.centroids()).unwrap()];
                DenseVector::new(v.iter().zip(c.iter()).map(|(a, b)| a - b).collect()).unwrap()
            })
            .collect();
        let cb = train_codebooks_unnormalized(&residuals, 2, 8, &KMeansConfig::new(8).with_seed(2)).unwrap();
        let index = PqIndex::build_residual(cb, coarse.clone(), &data, (0..200).collect(), None).unwrap();
        let q = random_vecs(&mut rng, 1, 8).remove(0);
        let hits = search(&q, &index, 200, SearchMode::Adc).unwrap();
        let mut oracle: Vec<(f64, u32)> = (0..200).map(|i| (sq_dist(&q, &index.reconstruct(i)), i as u32)).collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (h, o) in hits.iter().zip(&oracle) {
            assert_eq!(h.id, o.1);
            assert!((h.distance - o.0.sqrt()).abs() < 1e-9);
        }
        let (cell, code) = encode_residual(&q, &coarse, index.codebook()).unwrap();
        let qr = reconstruct_residual(cell, &code, &coarse, index.codebook()).unwrap();
        let hits = search(&q, &index, 3, SearchMode::Sdc).unwrap();
        let mut oracle: Vec<(f64, u32)> = (0..200).map(|i| (sq_dist(&qr, &index.reconstruct(i)), i as u32)).collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        assert_eq!(hits.iter().map(|h| h.id).collect::<Vec<_>>(), oracle[..3].iter().map(|o| o.1).collect::<Vec<_>>());
    }

    #[test]
    fn search_mode_parses() {
        assert_eq!("ADC".parse::<SearchMode>().unwrap(), SearchMode::Adc);
        assert_eq!("sdc".parse::<SearchMode>().unwrap(), SearchMode::Sdc);
        assert!("l2".parse::<SearchMode>().is_err());
    }
}
