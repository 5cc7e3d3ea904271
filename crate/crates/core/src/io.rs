//! Embedding (`PEMB`) and generated-sample (`PSMP`) containers.
//!
//! ```text
//! PEMB: "PEMB" | version u32 | cohort_len u32 | cohort UTF-8 | rows u64 | dim u32
//!       | rows*dim f32 LE | rows * (len u32 | UTF-8 patch ref)
//! PSMP: "PSMP" | version u32 | tag_len u32 | tag UTF-8 | rows u64 | dim u32
//!       | rows*dim f32 LE | rows * prototype id u32
//! ```
//!
//! Values are widened to `f64` in memory and narrowed to `f32` on disk.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{write_str, Cursor};
use crate::error::{contract, Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"PEMB";
pub const SAMPLE_MAGIC: &[u8; 4] = b"PSMP";
pub const FORMAT_VERSION: u32 = 1;

/// Patch embeddings from one cohort, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCollection {
    pub cohort_id: String,
    dim: usize,
    data: Vec<f64>,
    patch_refs: Vec<String>,
}

impl EmbeddingCollection {
    pub fn new(
        cohort_id: impl Into<String>,
        dim: usize,
        data: Vec<f64>,
        patch_refs: Vec<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(contract("embedding dimension must be positive"));
        }
        if data.len() != dim * patch_refs.len() {
            return Err(Error::Dimension {
                left: vec![patch_refs.len(), dim],
                right: vec![data.len()],
                context: "embedding payload vs rows*dim",
            });
        }
        if patch_refs.is_empty() {
            return Err(contract("embedding collection needs at least one row"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding value".into()));
        }
        Ok(Self {
            cohort_id: cohort_id.into(),
            dim,
            data,
            patch_refs,
        })
    }

    /// Builds a collection from rows, naming patches `"{cohort}:{index}"`.
    pub fn from_rows(cohort_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let cohort_id = cohort_id.into();
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::Dimension {
                    left: vec![dim],
                    right: vec![r.len()],
                    context: "ragged embedding rows",
                });
            }
            data.extend_from_slice(r);
        }
        let refs = (0..rows.len()).map(|i| format!("{cohort_id}:{i}")).collect();
        Self::new(cohort_id, dim, data, refs)
    }

    pub fn rows(&self) -> usize {
        self.patch_refs.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn patch_refs(&self) -> &[String] {
        &self.patch_refs
    }

    /// New collection made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut refs = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.rows() {
                return Err(crate::error::bounds(format!("row {i} of {}", self.rows())));
            }
            data.extend_from_slice(self.row(i));
            refs.push(self.patch_refs[i].clone());
        }
        Self::new(self.cohort_id.clone(), self.dim, data, refs)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(32 + self.data.len() * 4);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_str(&mut out, &self.cohort_id)?;
        out.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for r in &self.patch_refs {
            write_str(&mut out, r)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        if r.take(4)? != EMBEDDING_MAGIC {
            return Err(Error::Format("bad embedding magic".into()));
        }
        check_version(r.u32()?)?;
        let cohort = r.string()?;
        let rows = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let data = read_f32s(&mut r, rows * dim)?;
        let refs = (0..rows).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        if !r.at_end() {
            return Err(Error::Format("trailing bytes after embedding payload".into()));
        }
        Self::new(cohort, dim, data, refs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Loads every `*.pemb` file in a directory, sorted by file name.
pub fn load_embedding_dir(dir: impl AsRef<Path>) -> Result<Vec<EmbeddingCollection>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pemb"))
        .collect();
    paths.sort();
    paths.iter().map(EmbeddingCollection::load).collect()
}

/// Generated samples with the prototype each was conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub tag: String,
    pub dim: usize,
    pub data: Vec<f64>,
    pub prototypes: Vec<u32>,
}

impl SampleSet {
    pub fn rows(&self) -> usize {
        self.prototypes.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.data.len() != self.dim * self.prototypes.len() {
            return Err(contract("sample payload does not match rows*dim"));
        }
        let mut out = Vec::with_capacity(32 + self.data.len() * 4 + self.prototypes.len() * 4);
        out.extend_from_slice(SAMPLE_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_str(&mut out, &self.tag)?;
        out.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &p in &self.prototypes {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        if r.take(4)? != SAMPLE_MAGIC {
            return Err(Error::Format("bad sample magic".into()));
        }
        check_version(r.u32()?)?;
        let tag = r.string()?;
        let rows = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let data = read_f32s(&mut r, rows * dim)?;
        let prototypes = (0..rows).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if !r.at_end() {
            return Err(Error::Format("trailing bytes after sample payload".into()));
        }
        Ok(Self {
            tag,
            dim,
            data,
            prototypes,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_version(v: u32) -> Result<()> {
    if v == FORMAT_VERSION {
        Ok(())
    } else {
        Err(Error::Format(format!("unsupported format version {v}")))
    }
}

fn read_f32s(r: &mut Cursor<'_>, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| r.f32().map(f64::from)).collect()
}
