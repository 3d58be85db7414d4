//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `VISOLOCK` |
//! | 4 | format version, `u32` |
//! | 8 | header length `n`, `u64` |
//! | n | UTF-8 JSON [`CheckpointHeader`] |
//! | rest | parameter values as `f64`, in header order |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::differing_keys;
use crate::data::PixelNorm;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VisoloModel};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VISOLOCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub norm: PixelNorm,
    /// Optimizer steps taken when the file was written.
    pub step: usize,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<Tensor>,
}

pub fn save_checkpoint(path: &Path, model: &ModelConfig, norm: &PixelNorm, step: usize, store: &ParamStore) -> Result<()> {
    let header = CheckpointHeader {
        model: model.clone(),
        norm: norm.clone(),
        step,
        params: store
            .ids()
            .map(|id| ParamEntry {
                name: store.name(id).to_string(),
                shape: store.get(id).shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for id in store.ids() {
            for v in store.get(id).data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_exact::<8>(&mut r, "magic")? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, "version")?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let len = u64::from_le_bytes(read_exact(&mut r, "header length")?) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut values = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated data for {}: {e}", p.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks are 8 bytes")))
            .collect();
        values.push(Tensor::from_vec(&p.shape, data));
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
    }
    Ok(Checkpoint { header, values })
}

impl Checkpoint {
    /// Fails with the list of differing keys when the checkpoint was written
    /// for another model or normalisation.
    pub fn check_compatible(&self, model: &ModelConfig, norm: &PixelNorm) -> Result<()> {
        let ours = serde_json::json!({"model": self.header.model, "norm": self.header.norm});
        let theirs = serde_json::json!({"model": model, "norm": norm});
        let diff = differing_keys(&ours, &theirs);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "checkpoint does not match the configuration; differing keys: {}",
                diff.join(", ")
            )))
        }
    }

    /// Copies values into a store with the same parameter names and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, the model has {}",
                self.values.len(),
                store.len()
            )));
        }
        for (entry, value) in self.header.params.iter().zip(&self.values) {
            let id = store
                .find(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter {}", entry.name)))?;
            if store.get(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} in the checkpoint and {:?} in the model",
                    entry.name,
                    value.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = value.clone();
        }
        Ok(())
    }

    /// Builds the model described by the header and loads its weights.
    pub fn instantiate(&self) -> Result<(VisoloModel, ParamStore)> {
        let (model, mut store) = VisoloModel::init(&self.header.model, 0)?;
        self.load_into(&mut store)?;
        Ok((model, store))
    }
}
