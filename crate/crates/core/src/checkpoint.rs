//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ACLSRWM\0" | version u32
//! config: len u32, JSON bytes, sha256(JSON)
//! meta:   len u32, JSON bytes
//! tensors: count u32, then per tensor
//!          name len u32, name, ndim u32, dims u64…, width u8, values
//! sha256 of everything above
//! ```
//!
//! Parameters are stored under their model names, Adam moments under
//! `adam.m.<name>` and `adam.v.<name>`. Any truncation, corruption or version
//! change is rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::Adam;
use crate::tensor::{Real, Tensor, REAL_BITS};

const MAGIC: &[u8; 8] = b"ACLSRWM\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    /// Seed of the episode stream; with `step` it fixes the next batch.
    pub train_seed: u64,
    pub val_acc: Option<Real>,
    pub best_step: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub optimizer: Option<Adam>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<&Adam>, meta: CheckpointMeta) -> Self {
        Self {
            config: model.config().clone(),
            names: model.params().names().to_vec(),
            params: model.params().tensors().to_vec(),
            optimizer: optimizer.cloned(),
            meta,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone())?;
        model.params_mut().assign(&self.names, self.params.clone())?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        put_block(&mut out, &cfg);
        out.extend_from_slice(&Sha256::digest(&cfg));
        put_block(&mut out, &serde_json::to_vec(&self.meta)?);

        let n_tensors = self.params.len() + self.optimizer.as_ref().map_or(0, |a| 1 + a.m.len() + a.v.len());
        out.extend_from_slice(&(n_tensors as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.params) {
            put_tensor(&mut out, name, t.shape(), t.data());
        }
        if let Some(adam) = &self.optimizer {
            put_tensor(&mut out, "adam.step", &[1], &[adam.step as Real]);
            for (name, t) in self.names.iter().zip(&adam.m) {
                put_tensor(&mut out, &format!("adam.m.{name}"), t.shape(), t.data());
            }
            for (name, t) in self.names.iter().zip(&adam.v) {
                put_tensor(&mut out, &format!("adam.v.{name}"), t.shape(), t.data());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(bad("file is too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version}, this build reads {FORMAT_VERSION}")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (truncated or corrupted)"));
        }
        let cfg_bytes = r.block()?;
        if Sha256::digest(cfg_bytes).as_slice() != r.take(32)? {
            return Err(bad("config hash mismatch"));
        }
        let config: ModelConfig = serde_json::from_slice(cfg_bytes)?;
        let meta: CheckpointMeta = serde_json::from_slice(r.block()?)?;

        let count = r.u32()? as usize;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut adam_step = None;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let name = String::from_utf8(r.block()?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let width = r.take(1)?[0] as usize;
            if width * 8 != REAL_BITS as usize {
                return Err(bad(format!("tensor {name} stores {}-bit values, this build uses {REAL_BITS}-bit", width * 8)));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(width).ok_or_else(|| bad("tensor size overflow"))?)?;
            let data: Vec<Real> = raw
                .chunks_exact(width)
                .map(|c| Real::from_le_bytes(c.try_into().expect("chunk width")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            if name == "adam.step" {
                adam_step = Some(t.data()[0] as u64);
            } else if let Some(p) = name.strip_prefix("adam.m.") {
                check_order(&names, m.len(), p)?;
                m.push(t);
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                check_order(&names, v.len(), p)?;
                v.push(t);
            } else {
                names.push(name);
                params.push(t);
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after tensor section"));
        }
        let optimizer = match adam_step {
            None => None,
            Some(step) if m.len() == names.len() && v.len() == names.len() => Some(Adam { step, m, v }),
            Some(_) => return Err(bad("incomplete optimizer state")),
        };
        Ok(Self { config, names, params, optimizer, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(d) => Error::Checkpoint(format!("{}: {d}", path.display())),
            other => other,
        })
    }

    /// Loads a checkpoint that must have been written for `expected`'s
    /// architecture. `init_seed` is not compared.
    pub fn load_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let strip = |c: &ModelConfig| ModelConfig { init_seed: 0, ..c.clone() };
        if strip(&ck.config) != strip(expected) {
            return Err(Error::config(format!(
                "checkpoint architecture does not match the run config: {} vs {}",
                serde_json::to_string(&ck.config)?,
                serde_json::to_string(expected)?
            )));
        }
        Ok(ck)
    }
}

fn check_order(names: &[String], i: usize, p: &str) -> Result<()> {
    if names.get(i).map(String::as_str) != Some(p) {
        return Err(bad(format!("optimizer moment for {p} is out of order")));
    }
    Ok(())
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[Real]) {
    put_block(out, name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push((REAL_BITS / 8) as u8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn block(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
