//! Versioned binary checkpoints of a training run.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic "TSCKPT\0\0" | version u32 | config sha256 [32] | seed u64 | step u64
//! | tensor count u32
//! | per tensor: name len u16, name utf-8, rank u8, dims u64 x rank, f64 x numel
//! | sha256 of all preceding bytes [32]
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thinseg_core::model::ToyModel;
use thinseg_core::optim::OptState;
use thinseg_core::peft::LoraLayer;
use thinseg_core::train::{TrainConfig, Trainer};
use thinseg_core::Tensor;

use crate::config::{config_hash, hex};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TSCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let mut tensors: Vec<(String, Tensor)> = t
            .model
            .frozen()
            .into_iter()
            .map(|(n, v)| (n, v.clone()))
            .collect();
        let names = t.model.trainable_names();
        for (n, v) in names.iter().zip(t.model.trainable()) {
            tensors.push((n.clone(), v.clone()));
        }
        for (n, v) in names.iter().zip(&t.opt.m) {
            tensors.push((format!("adam.m.{n}"), v.clone()));
        }
        for (n, v) in names.iter().zip(&t.opt.v) {
            tensors.push((format!("adam.v.{n}"), v.clone()));
        }
        Checkpoint {
            config_hash: config_hash(&t.cfg),
            seed: t.seed,
            step: t.opt.step,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        out
    }

    /// Verifies the checksum before parsing anything else.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 + 8 + 8 + 4 + 32 {
            return Err(Error::malformed(path, "checkpoint too short"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        let digest: [u8; 32] = Sha256::digest(body).into();
        if digest[..] != sum[..] {
            return Err(Error::Checksum { path: path.into() });
        }
        let mut r = Reader { buf: body, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::malformed(path, "not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                path: path.into(),
                found: version,
                expected: VERSION,
            });
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let seed = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::malformed(path, "tensor name is not utf-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.u64()? as usize;
                numel = numel
                    .checked_mul(d)
                    .filter(|&n| n <= r.remaining() / 8)
                    .ok_or_else(|| Error::malformed(path, "tensor larger than file"))?;
                shape.push(d);
            }
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::malformed(path, e.to_string()))?;
            tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(Error::malformed(path, "trailing bytes"));
        }
        Ok(Checkpoint {
            config_hash,
            seed,
            step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }

    /// Rebuilds the trainer. The second value is a warning when the
    /// checkpoint was written under a different configuration.
    pub fn restore(&self, cfg: &TrainConfig, path: &Path) -> Result<(Trainer, Option<String>)> {
        let warning = (self.config_hash != config_hash(cfg)).then(|| {
            format!(
                "warning: {} was written under config {} but is loaded under {}",
                path.display(),
                &hex(&self.config_hash)[..16],
                &hex(&config_hash(cfg))[..16]
            )
        });
        let missing = |n: &str| Error::malformed(path, format!("missing tensor {n}"));
        let get = |n: &str| self.get(n).cloned().ok_or_else(|| missing(n));

        let mut model = ToyModel::new(cfg.model_config(), self.seed)?;
        let names = model.trainable_names();
        model.stem_w = get("stem.w")?;
        model.stem_b = get("stem.b")?;
        for (i, layer) in model.lora.iter_mut().enumerate() {
            *layer = LoraLayer::from_parts(
                get(&format!("lora{i}.w0"))?,
                get(&format!("lora{i}.b0"))?,
                get(&format!("lora{i}.a"))?,
                get(&format!("lora{i}.b"))?,
                layer.alpha(),
            )?;
        }
        for (n, slot) in names.iter().zip(model.trainable_mut()) {
            let t = get(n)?;
            if t.shape() != slot.shape() {
                return Err(Error::malformed(path, format!("{n} has the wrong shape")));
            }
            *slot = t;
        }
        let moments = |prefix: &str| -> Result<Vec<Tensor>> {
            names.iter().map(|n| get(&format!("adam.{prefix}.{n}"))).collect()
        };
        let opt = OptState {
            m: moments("m")?,
            v: moments("v")?,
            step: self.step,
        };
        let trainer = Trainer::from_parts(cfg, self.seed, model, opt)?;
        Ok((trainer, warning))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::malformed(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
