//! Binary checkpoints: magic, format version, a JSON header describing the
//! layout, then every parameter and optimizer value as little-endian f64.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, UpdateCounts};
use crate::config::TrainingConfig;
use crate::error::{Error, Result};
use crate::model::DualMotionGan;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DMGANCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub model: DualMotionGan,
    pub optimizer: OptimizerState,
    /// Completed generator updates; the next step's random stream is a pure
    /// function of the seed and this counter.
    pub step: u64,
    pub counts: UpdateCounts,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    counts: [u64; 4],
    config: TrainingConfig,
    groups: Vec<GroupLayout>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct GroupLayout {
    name: String,
    tensors: Vec<(String, Vec<usize>)>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = self.counts;
        let header = Header {
            step: self.step,
            counts: [c.frame_critic, c.flow_critic, c.critic, c.generator],
            config: self.config.clone(),
            groups: layout(&self.model),
        };
        let json = serde_json::to_vec(&header).map_err(|e| err(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parameters then optimizer accumulators, group by group.
    fn values(&self) -> impl Iterator<Item = &Tensor> {
        let params = self.model.groups().into_iter().flat_map(|(_, p)| p.tensors().iter());
        let opt = self.optimizer.groups.iter().flat_map(|g| g.square_avg.iter());
        params.chain(opt)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |at: usize, n: usize| -> Result<&[u8]> {
            bytes
                .get(at..at + n)
                .ok_or_else(|| err(format!("truncated at byte {at}")))
        };
        if take(0, 8)? != CHECKPOINT_MAGIC {
            return Err(err("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(err(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let json_len = u64::from_le_bytes(take(12, 8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(20, json_len)?).map_err(|e| err(format!("header: {e}")))?;
        header.config.validate()?;
        let mut model = DualMotionGan::new(&header.config.model, 0)?;
        if layout(&model) != header.groups {
            return Err(err("parameter layout does not match the model described by its config"));
        }
        let mut optimizer = OptimizerState::new(&model);
        let mut at = 20 + json_len;
        let mut read_into = |t: &mut Tensor| -> Result<()> {
            for v in t.data_mut() {
                *v = f64::from_le_bytes(take(at, 8)?.try_into().expect("8 bytes"));
                at += 8;
            }
            Ok(())
        };
        for (_, p) in model.groups_mut() {
            for t in p.tensors_mut() {
                read_into(t)?;
            }
        }
        for g in &mut optimizer.groups {
            for t in &mut g.square_avg {
                read_into(t)?;
            }
        }
        if at != bytes.len() {
            return Err(err(format!("{} trailing bytes", bytes.len() - at)));
        }
        let [frame_critic, flow_critic, critic, generator] = header.counts;
        Ok(Self {
            config: header.config,
            model,
            optimizer,
            step: header.step,
            counts: UpdateCounts {
                frame_critic,
                flow_critic,
                critic,
                generator,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn layout(model: &DualMotionGan) -> Vec<GroupLayout> {
    model
        .groups()
        .iter()
        .map(|(name, p)| GroupLayout {
            name: name.to_string(),
            tensors: p.iter().map(|(n, t)| (n.to_string(), t.dims().to_vec())).collect(),
        })
        .collect()
}
