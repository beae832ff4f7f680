//! Named parameter storage and the on-disk checkpoint format.
//!
//! A checkpoint is a directory holding `header.json` plus one little-endian
//! `f64` blob per tensor under `tensors/`. The header lists names, shapes,
//! dtype, the owning config hash and a per-tensor SHA-256; reload is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{Grads, Graph, Var};
use super::tensor::Mat;
use crate::error::{AsukaError, Result};

pub const CHECKPOINT_FORMAT: &str = "asuka-ckpt-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "set: shape change for {}", self.names[id.0]);
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Places every parameter on `g`, as gradient leaves when `trainable`.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Params<'g> {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { g.param(v.clone()) } else { g.constant(v.clone()) })
            .collect();
        Params { vars }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((v.rows as u64).to_le_bytes());
            h.update((v.cols as u64).to_le_bytes());
            h.update(mat_bytes(v));
        }
        hex(&h.finalize())
    }

    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        let tdir = dir.join("tensors");
        fs::create_dir_all(&tdir).map_err(|e| AsukaError::io(&tdir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, (name, v)) in self.names.iter().zip(&self.values).enumerate() {
            let file = format!("t{i:05}.bin");
            let bytes = mat_bytes(v);
            let path = tdir.join(&file);
            fs::write(&path, &bytes).map_err(|e| AsukaError::io(&path, e))?;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [v.rows, v.cols],
                file,
                sha256: hex(&Sha256::digest(&bytes)),
            });
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            dtype: "f64".to_string(),
            config_hash: config_hash.to_string(),
            digest: self.digest(),
            tensors: entries,
        };
        let path = dir.join("header.json");
        let text = serde_json::to_string_pretty(&header).expect("header serializes");
        fs::write(&path, text).map_err(|e| AsukaError::io(&path, e))
    }

    /// Loads a checkpoint; returns the store and the header's config hash.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let path = dir.join("header.json");
        let text = fs::read_to_string(&path).map_err(|e| AsukaError::io(&path, e))?;
        let header: CheckpointHeader = serde_json::from_str(&text)
            .map_err(|e| AsukaError::Checkpoint(format!("{}: {e}", path.display())))?;
        if header.format != CHECKPOINT_FORMAT || header.dtype != "f64" {
            return Err(AsukaError::Checkpoint(format!(
                "{}: unsupported format {} / dtype {}",
                path.display(),
                header.format,
                header.dtype
            )));
        }
        let mut store = ParamStore::new();
        for t in &header.tensors {
            let tpath = dir.join("tensors").join(&t.file);
            let bytes = fs::read(&tpath).map_err(|e| AsukaError::io(&tpath, e))?;
            if hex(&Sha256::digest(&bytes)) != t.sha256 {
                return Err(AsukaError::Checkpoint(format!("{}: checksum mismatch", tpath.display())));
            }
            let [rows, cols] = t.shape;
            if bytes.len() != rows * cols * 8 {
                return Err(AsukaError::Checkpoint(format!("{}: size does not match shape", tpath.display())));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.add(t.name.clone(), Mat::from_vec(rows, cols, data));
        }
        if store.digest() != header.digest {
            return Err(AsukaError::Checkpoint(format!("{}: digest mismatch", dir.display())));
        }
        Ok((store, header.config_hash))
    }

    /// Copies values from `other` for every name present in both stores.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for (name, v) in other.names.iter().zip(&other.values) {
            if let Some(id) = self.id(name) {
                if self.values[id.0].shape() == v.shape() {
                    self.values[id.0] = v.clone();
                    n += 1;
                }
            }
        }
        n
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    dtype: String,
    config_hash: String,
    digest: String,
    tensors: Vec<TensorEntry>,
}

fn mat_bytes(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 8);
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A [`ParamStore`] placed on a graph.
pub struct Params<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Params<'g> {
    #[inline]
    pub fn v(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// Gradients for every parameter, zeros where none arrived.
    pub fn grads(&self, grads: &Grads) -> Vec<Mat> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}
