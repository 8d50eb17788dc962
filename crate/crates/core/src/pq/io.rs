//! `PQCB` codebook and `PQIX` index files. All integers little-endian,
//! all reals `f32`.
//!
//! ```text
//! PQCB: "PQCB" u16 version, u32 D, u32 M, u32 K, M*K*(D/M) f32 (m, k, dim)
//! PQIX: "PQIX" u16 version, u32 N, u8 code_width, <PQCB block>,
//!       N*M*code_width code bytes, N u32 ids,
//!       u8 label flag [, N u32 labels]
//!       [u8 coarse flag, u32 k', k'*D f32 centroids, N u32 cells]
//! ```
//!
//! Plain indexes are version 1. Residual indexes are version 2 and must
//! carry the trailing coarse block.

use std::fs;
use std::path::Path;

use super::{CoarseQuantizer, Codebook, PqCode, PqIndex};
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numkit::DenseVector;

const CODEBOOK_MAGIC: &[u8; 4] = b"PQCB";
const INDEX_MAGIC: &[u8; 4] = b"PQIX";
const VERSION: u16 = 1;
const RESIDUAL_VERSION: u16 = 2;

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(format!("{what} = {v} does not fit in u32")))
}

fn put_codebook(w: &mut ByteWriter, cb: &Codebook) -> Result<()> {
    w.bytes(CODEBOOK_MAGIC);
    w.u16(VERSION);
    w.u32(u32_field(cb.dim(), "D")?);
    w.u32(u32_field(cb.m(), "M")?);
    w.u32(u32_field(cb.k(), "K")?);
    for &v in cb.as_flat() {
        w.f32(v);
    }
    Ok(())
}

fn get_codebook(r: &mut ByteReader) -> Result<Codebook> {
    r.magic(CODEBOOK_MAGIC)?;
    r.version(VERSION)?;
    let d = r.u32("codebook D")? as usize;
    let m = r.u32("codebook M")? as usize;
    let k = r.u32("codebook K")? as usize;
    if m == 0 || d == 0 || k == 0 || d % m != 0 {
        return Err(Error::format(format!("codebook header: D={d} M={m} K={k} is not a valid shape")));
    }
    if k > super::MAX_K {
        return Err(Error::format(format!("codebook header: K={k} exceeds {}", super::MAX_K)));
    }
    let sub_dim = d / m;
    let values = r.f32s(m * k * sub_dim, "codebook centroids")?;
    Codebook::new(m, k, sub_dim, values)
}

pub fn write_codebook(cb: &Codebook) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    put_codebook(&mut w, cb)?;
    Ok(w.into_inner())
}

pub fn read_codebook(bytes: &[u8]) -> Result<Codebook> {
    let mut r = ByteReader::new(bytes, "codebook file");
    let cb = get_codebook(&mut r)?;
    r.finish()?;
    Ok(cb)
}

pub fn save_codebook(cb: &Codebook, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_codebook(cb)?)?;
    Ok(())
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    read_codebook(&fs::read(path)?)
}

pub fn write_index(index: &PqIndex) -> Result<Vec<u8>> {
    let cb = index.codebook();
    let width = cb.code_width();
    let mut w = ByteWriter::new();
    w.bytes(INDEX_MAGIC);
    w.u16(if index.coarse().is_some() { RESIDUAL_VERSION } else { VERSION });
    w.u32(u32_field(index.len(), "N")?);
    w.u8(width as u8);
    put_codebook(&mut w, cb)?;
    for code in index.codes() {
        for &b in code.indices() {
            if width == 1 {
                w.u8(b as u8);
            } else {
                w.u16(b);
            }
        }
    }
    for &id in index.ids() {
        w.u32(id);
    }
    match index.labels() {
        Some(labels) => {
            w.u8(1);
            for &l in labels {
                w.u32(l);
            }
        }
        None => w.u8(0),
    }
    if let Some((coarse, cells)) = index.coarse() {
        w.u8(1);
        w.u32(u32_field(coarse.len(), "coarse k'")?);
        for c in coarse.centroids() {
            for &v in c.iter() {
                w.f32(v);
            }
        }
        for &c in cells {
            w.u32(c);
        }
    }
    Ok(w.into_inner())
}

pub fn read_index(bytes: &[u8]) -> Result<PqIndex> {
    let mut r = ByteReader::new(bytes, "index file");
    r.magic(INDEX_MAGIC)?;
    let version = r.u16("version")?;
    if version != VERSION && version != RESIDUAL_VERSION {
        return Err(Error::format(format!(
            "index file: unsupported version {version} (supported: {VERSION}, {RESIDUAL_VERSION})"
        )));
    }
    let n = r.u32("record count")? as usize;
    let width = r.u8("code width")? as usize;
    let cb = get_codebook(&mut r)?;
    if width != cb.code_width() {
        return Err(Error::format(format!(
            "index header: code width {width} does not match K={} (expected {})",
            cb.k(),
            cb.code_width()
        )));
    }
    let raw = r.take(n * cb.m() * width, "codes")?;
    let codes: Vec<PqCode> = raw
        .chunks_exact(cb.m() * width)
        .map(|rec| {
            let indices = if width == 1 {
                rec.iter().map(|&b| u16::from(b)).collect()
            } else {
                rec.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
            };
            PqCode::new(indices)
        })
        .collect();
    let ids = (0..n).map(|_| r.u32("ids")).collect::<Result<Vec<_>>>()?;
    let labels = match r.u8("label flag")? {
        0 => None,
        1 => Some((0..n).map(|_| r.u32("labels")).collect::<Result<Vec<_>>>()?),
        f => return Err(Error::format(format!("index file: bad label flag {f}"))),
    };
    let mut index =
        PqIndex::from_parts(cb, codes, ids, labels).map_err(|e| Error::format(format!("index file: {e}")))?;
    if version == RESIDUAL_VERSION {
        match r.u8("coarse flag")? {
            1 => {
                let kc = r.u32("coarse k'")? as usize;
                let d = index.codebook().dim();
                let flat = r.f32s(kc * d, "coarse centroids")?;
                let centroids = flat.chunks_exact(d).map(|c| DenseVector::from_finite(c.to_vec())).collect();
                let cells = (0..n).map(|_| r.u32("coarse cells")).collect::<Result<Vec<_>>>()?;
                index = index
                    .with_coarse(CoarseQuantizer::new(centroids)?, cells)
                    .map_err(|e| Error::format(format!("index file: {e}")))?;
            }
            f => return Err(Error::format(format!("index file: bad coarse flag {f}"))),
        }
    }
    r.finish()?;
    Ok(index)
}

pub fn save_index(index: &PqIndex, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_index(index)?)?;
    Ok(())
}

pub fn load_index(path: impl AsRef<Path>) -> Result<PqIndex> {
    read_index(&fs::read(path)?)
}
