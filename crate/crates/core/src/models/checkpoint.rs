//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `CCEPCKPT`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, then every block listed in the
//! header as little-endian `f64` values in header order (parameters first, then optimizer
//! moments). Values are stored as raw bits, so a save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CnnArch, CnnModel, Parameterized, VaeArch, VaeModel};
use crate::error::{Error, Result};
use crate::training::{OptimizerKind, OptimizerState, RngState};

const MAGIC: &[u8; 8] = b"CCEPCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "snake_case")]
pub enum ModelKind {
    Vae(VaeArch),
    Cnn(CnnArch),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelKind,
    pub config_hash: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub params: Vec<NamedBlock>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    kind: OptimizerKind,
    learning_rate: f64,
    decay_rate: f64,
    decay_steps: f64,
    step_count: u64,
    /// Lengths of the first- and second-moment blocks (Adam only).
    moment_lengths: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    model: ModelKind,
    config_hash: String,
    epoch: usize,
    params: Vec<BlockHeader>,
    optimizer: Option<OptimizerHeader>,
    rng: Option<RngState>,
}

fn snapshot<M: Parameterized>(model: &M) -> Vec<NamedBlock> {
    model
        .param_views()
        .into_iter()
        .map(|v| NamedBlock {
            name: v.name,
            shape: v.shape,
            values: v.values.to_vec(),
        })
        .collect()
}

fn restore<M: Parameterized>(model: &mut M, blocks: &[NamedBlock]) -> Result<()> {
    let views: Vec<(String, Vec<usize>)> = model
        .param_views()
        .into_iter()
        .map(|v| (v.name, v.shape))
        .collect();
    if views.len() != blocks.len() {
        return Err(Error::format(
            "checkpoint",
            format!("expected {} parameter blocks, found {}", views.len(), blocks.len()),
        ));
    }
    for ((name, shape), block) in views.iter().zip(blocks) {
        if *name != block.name || *shape != block.shape {
            return Err(Error::format(
                "checkpoint",
                format!("block {} {:?} does not match model block {name} {shape:?}", block.name, block.shape),
            ));
        }
    }
    for (dst, block) in model.param_blocks_mut().into_iter().zip(blocks) {
        dst.copy_from_slice(&block.values);
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_vae(model: &VaeModel, config_hash: &str, epoch: usize) -> Self {
        Self {
            model: ModelKind::Vae(model.arch),
            config_hash: config_hash.to_owned(),
            epoch,
            params: snapshot(model),
            optimizer: None,
            rng: None,
        }
    }

    pub fn from_cnn(model: &CnnModel, config_hash: &str, epoch: usize) -> Self {
        Self {
            model: ModelKind::Cnn(model.arch),
            config_hash: config_hash.to_owned(),
            epoch,
            params: snapshot(model),
            optimizer: None,
            rng: None,
        }
    }

    pub fn vae(&self) -> Result<VaeModel> {
        let ModelKind::Vae(arch) = self.model else {
            return Err(Error::format("checkpoint", "expected a VAE checkpoint"));
        };
        let mut model = VaeModel::new(arch, 0)?;
        restore(&mut model, &self.params)?;
        Ok(model)
    }

    pub fn cnn(&self) -> Result<CnnModel> {
        let ModelKind::Cnn(arch) = self.model else {
            return Err(Error::format("checkpoint", "expected a CNN checkpoint"));
        };
        let mut model = CnnModel::new(arch, 0)?;
        restore(&mut model, &self.params)?;
        Ok(model)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let optimizer = self.optimizer.as_ref().map(|o| OptimizerHeader {
            kind: o.kind,
            learning_rate: o.learning_rate,
            decay_rate: o.decay_rate,
            decay_steps: o.decay_steps,
            step_count: o.step_count,
            moment_lengths: o.first_moment.iter().map(Vec::len).collect(),
        });
        let header = Header {
            model: self.model.clone(),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            params: self
                .params
                .iter()
                .map(|b| BlockHeader {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                })
                .collect(),
            optimizer,
            rng: self.rng.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format("checkpoint header", e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let moments = self
            .optimizer
            .iter()
            .flat_map(|o| o.first_moment.iter().chain(&o.second_moment));
        for values in self.params.iter().map(|b| &b.values).chain(moments) {
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)?;
        let mut json = vec![0u8; u64::from_le_bytes(u64b) as usize];
        r.read_exact(&mut json)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::format("checkpoint header", e.to_string()))?;

        let mut read_block = |len: usize| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; len * 8];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };
        let mut params = Vec::with_capacity(header.params.len());
        for b in header.params {
            let values = read_block(b.shape.iter().product())?;
            params.push(NamedBlock {
                name: b.name,
                shape: b.shape,
                values,
            });
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let mut first_moment = Vec::new();
                for &len in &o.moment_lengths {
                    first_moment.push(read_block(len)?);
                }
                let mut second_moment = Vec::new();
                for &len in &o.moment_lengths {
                    second_moment.push(read_block(len)?);
                }
                Some(OptimizerState {
                    kind: o.kind,
                    learning_rate: o.learning_rate,
                    decay_rate: o.decay_rate,
                    decay_steps: o.decay_steps,
                    step_count: o.step_count,
                    first_moment,
                    second_moment,
                })
            }
        };
        Ok(Self {
            model: header.model,
            config_hash: header.config_hash,
            epoch: header.epoch,
            params,
            optimizer,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
