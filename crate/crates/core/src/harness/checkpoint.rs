//! On-disk checkpoints: a JSON manifest plus one little-endian tensor blob.
//!
//! `manifest.json` holds the format version, run config text, model
//! extents, logit scale, region map, and an index of every tensor
//! (name, shape, precision, byte offset, byte length) in `tensors.bin`.
//! Optimizer moments are indexed the same way, with their step counters.
//! The manifest is written last, so a directory without one is incomplete.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::FORMAT_VERSION;
use crate::error::{Error, Result};
use crate::expansion::RegionMap;
use crate::model::{Model, ModelConfig, TensorMap};
use crate::numerics::{NumArray, Precision};
use crate::optim::{Moments, OptimizerKind, OptimizerState, ParamState};

pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";

/// Everything needed to resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Optimizer steps taken.
    pub step: usize,
    /// Run config in its text form; empty when unknown.
    pub config_text: String,
    pub model: Model,
    pub regions: RegionMap,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub precision: Precision,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateEntry {
    pub param: String,
    pub step: u64,
    pub new_step: u64,
    pub moments: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerIndex {
    pub kind: OptimizerKind,
    pub params: Vec<StateEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: usize,
    pub config: String,
    pub model: ModelConfig,
    pub logit_scale: f64,
    pub regions: RegionMap,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerIndex>,
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: &str, a: &NumArray) -> TensorEntry {
        let offset = self.bytes.len();
        match a.precision() {
            Precision::Double => a.data().iter().for_each(|x| self.bytes.extend_from_slice(&x.to_le_bytes())),
            Precision::Single => a
                .data()
                .iter()
                .for_each(|&x| self.bytes.extend_from_slice(&(x as f32).to_le_bytes())),
        }
        TensorEntry {
            name: name.to_string(),
            shape: a.shape().to_vec(),
            precision: a.precision(),
            offset,
            nbytes: self.bytes.len() - offset,
        }
    }
}

fn read_tensor(blob: &[u8], e: &TensorEntry) -> Result<NumArray> {
    let count: usize = e.shape.iter().product();
    let width = e.precision.bytes();
    if e.nbytes != count * width {
        return Err(Error::Format(format!(
            "tensor `{}` declares {} bytes for {count} elements",
            e.name, e.nbytes
        )));
    }
    let bytes = e
        .offset
        .checked_add(e.nbytes)
        .and_then(|end| blob.get(e.offset..end))
        .ok_or_else(|| Error::Format(format!("tensor `{}` lies outside the blob", e.name)))?;
    let data = match e.precision {
        Precision::Double => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        Precision::Single => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
    };
    Ok(NumArray::from_vec(&e.shape, data)?.to_precision(e.precision))
}

impl Checkpoint {
    /// Fresh-run checkpoint with an all-original region map.
    pub fn new(step: usize, config_text: String, model: Model, optimizer: Option<OptimizerState>) -> Self {
        let regions = RegionMap::fresh(&model);
        Self {
            step,
            config_text,
            model,
            regions,
            optimizer,
        }
    }

    /// Manifest and blob bytes, without touching the filesystem.
    pub fn encode(&self) -> Result<(String, Vec<u8>)> {
        self.regions.check_covers(&self.model)?;
        let mut blob = BlobWriter { bytes: Vec::new() };
        let tensors = self
            .model
            .params()
            .iter()
            .map(|(name, a)| blob.push(name, a))
            .collect();
        let optimizer = self.optimizer.as_ref().map(|st| OptimizerIndex {
            kind: st.kind(),
            params: st
                .iter()
                .map(|(name, ps)| StateEntry {
                    param: name.clone(),
                    step: ps.step,
                    new_step: ps.new_step,
                    moments: ps
                        .moments
                        .arrays()
                        .into_iter()
                        .map(|(which, a)| blob.push(which, a))
                        .collect(),
                })
                .collect(),
        });
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            step: self.step,
            config: self.config_text.clone(),
            model: self.model.config().clone(),
            logit_scale: self.model.logit_scale(),
            regions: self.regions.clone(),
            tensors,
            optimizer,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        Ok((text, blob.bytes))
    }

    pub fn decode(manifest_text: &str, blob: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_str(manifest_text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format version {}",
                m.format_version
            )));
        }
        let mut params = TensorMap::new();
        for e in &m.tensors {
            if params.insert(e.name.clone(), read_tensor(blob, e)?).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{}`", e.name)));
            }
        }
        let model = Model::from_parts(m.model, params, m.logit_scale)?;
        m.regions.check_covers(&model)?;
        let optimizer = match m.optimizer {
            Some(idx) => Some(decode_optimizer(idx, blob, &model, &m.regions)?),
            None => None,
        };
        Ok(Self {
            step: m.step,
            config_text: m.config,
            model,
            regions: m.regions,
            optimizer,
        })
    }

    /// Writes `manifest.json` and `tensors.bin` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (manifest, blob) = self.encode()?;
        fs::create_dir_all(dir)?;
        let _ = fs::remove_file(dir.join(MANIFEST));
        write_atomic(&dir.join(TENSORS), &blob)?;
        write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join(MANIFEST))?;
        let blob = fs::read(dir.join(TENSORS))?;
        Self::decode(&manifest, &blob)
    }
}

fn decode_optimizer(idx: OptimizerIndex, blob: &[u8], model: &Model, regions: &RegionMap) -> Result<OptimizerState> {
    let mut states = BTreeMap::new();
    for e in idx.params {
        let shape = model.param(&e.param)?.shape().to_vec();
        let mut arrays = BTreeMap::new();
        for t in &e.moments {
            if t.shape != shape {
                return Err(Error::Format(format!(
                    "state `{}` of `{}` has shape {:?}, parameter {shape:?}",
                    t.name, e.param, t.shape
                )));
            }
            arrays.insert(t.name.as_str(), read_tensor(blob, t)?);
        }
        let mut take = |k: &str| {
            arrays
                .remove(k)
                .ok_or_else(|| Error::Format(format!("missing state `{k}` for `{}`", e.param)))
        };
        let moments = if e.moments.len() == 1 {
            Moments::Muon { b: take("b")? }
        } else {
            Moments::Adam {
                m: take("m")?,
                v: take("v")?,
            }
        };
        states.insert(
            e.param.clone(),
            ParamState {
                moments,
                step: e.step,
                new_step: e.new_step,
                new_mask: regions.get(&e.param)?.new_mask(),
            },
        );
    }
    if states.len() != model.params().len() {
        return Err(Error::Format(format!(
            "optimizer state covers {} of {} parameters",
            states.len(),
            model.params().len()
        )));
    }
    Ok(OptimizerState::from_parts(idx.kind, states))
}

/// Writes through a temporary sibling and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
