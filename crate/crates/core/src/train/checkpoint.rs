//! Binary checkpoint format.
//!
//! ```text
//! "S4MT" | u32 version | u64 header length | JSON header
//! per tensor: u16 name length | name | u8 rank | u64 dims… | f32 payload
//! ```
//!
//! Integers and floats are little-endian. Optimizer moments are stored as
//! extra records named `optim.m.<param>` and `optim.v.<param>`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainerConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"S4MT";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

/// Where a run stands: enough to resume it exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Batches consumed in the current epoch.
    pub cursor: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    #[serde(default)]
    pub trainer: Option<TrainerConfig>,
    pub progress: Progress,
    /// Number of checkpoints averaged into this one, if any.
    #[serde(default)]
    pub averaged_from: Option<usize>,
    pub tensors: usize,
}

/// Adam moments aligned with the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
    pub moments: Option<Moments>,
}

impl Checkpoint {
    pub fn new(model: &Model, trainer: Option<TrainerConfig>, progress: Progress, moments: Option<Moments>) -> Self {
        let n = model.params().len() * if moments.is_some() { 3 } else { 1 };
        Checkpoint {
            header: CheckpointHeader {
                model: model.config().clone(),
                trainer,
                progress,
                averaged_from: None,
                tensors: n,
            },
            params: model.params().clone(),
            moments,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(&self.header.model, &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 16 + 4 * self.params.count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (name, t) in self.params.iter() {
            write_record(&mut out, name, t)?;
        }
        if let Some(mv) = &self.moments {
            for (prefix, tensors) in [(M_PREFIX, &mv.m), (V_PREFIX, &mv.v)] {
                for (name, t) in self.params.names().iter().zip(tensors) {
                    write_record(&mut out, &format!("{prefix}{name}"), t)?;
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing S4MT magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        let mut records = 0;
        while r.pos < bytes.len() {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let numel: usize = dims.iter().product();
            let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&dims, data)?;
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                m.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                v.push((p.to_string(), t));
            } else {
                params.insert(name, t).map_err(|e| Error::Format(e.to_string()))?;
            }
            records += 1;
        }
        if records != header.tensors {
            return Err(Error::Format(format!(
                "header announces {} tensors, found {records}",
                header.tensors
            )));
        }
        let moments = if m.is_empty() && v.is_empty() {
            None
        } else {
            let order = |list: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
                if list.len() != params.len() {
                    return Err(Error::Format("optimizer moments do not cover every parameter".into()));
                }
                let mut out = Vec::with_capacity(list.len());
                for ((name, t), expected) in list.into_iter().zip(params.names()) {
                    if &name != expected || t.shape() != params.by_name(expected).unwrap().shape() {
                        return Err(Error::Format(format!("optimizer moment for `{name}` out of place")));
                    }
                    out.push(t);
                }
                Ok(out)
            };
            Some(Moments {
                m: order(m)?,
                v: order(v)?,
            })
        };
        Ok(Checkpoint {
            header,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(&bytes)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too large: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// First differing top-level field of two model headers.
fn differing_field(a: &ModelConfig, b: &ModelConfig) -> Option<String> {
    let (va, vb) = (serde_json::to_value(a).ok()?, serde_json::to_value(b).ok()?);
    let (oa, ob) = (va.as_object()?, vb.as_object()?);
    oa.iter().find(|(k, v)| ob.get(*k) != Some(v)).map(|(k, _)| k.clone())
}

/// Element-wise mean of checkpoints sharing one architecture, accumulated in
/// `f64` in input order. The result carries the largest step and no moments.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Argument("no checkpoints to average".into()))?;
    for c in &checkpoints[1..] {
        if let Some(field) = differing_field(&first.header.model, &c.header.model) {
            return Err(Error::Incompatible { field });
        }
        if c.params.names() != first.params.names() {
            return Err(Error::Incompatible {
                field: "parameter names".into(),
            });
        }
    }
    let k = checkpoints.len() as f64;
    let mut params = first.params.clone();
    for (i, out) in params.tensors_mut().iter_mut().enumerate() {
        let mut acc = vec![0.0f64; out.numel()];
        for c in checkpoints {
            for (a, &x) in acc.iter_mut().zip(c.params.tensors()[i].data()) {
                *a += x as f64;
            }
        }
        for (o, a) in out.data_mut().iter_mut().zip(acc) {
            *o = (a / k) as f32;
        }
    }
    let progress = checkpoints
        .iter()
        .map(|c| &c.header.progress)
        .max_by_key(|p| p.step)
        .cloned()
        .unwrap_or_default();
    Ok(Checkpoint {
        header: CheckpointHeader {
            model: first.header.model.clone(),
            trainer: first.header.trainer.clone(),
            progress,
            averaged_from: Some(checkpoints.len()),
            tensors: params.len(),
        },
        params,
        moments: None,
    })
}

/// Loads and averages checkpoint files.
pub fn average_checkpoint_files(paths: &[&Path]) -> Result<Checkpoint> {
    let cks = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    average_checkpoints(&cks)
}
