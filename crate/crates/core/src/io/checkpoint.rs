//! Binary checkpoints: magic, version, architecture block, tensor records
//! and a trailing CRC32.

use std::collections::HashMap;
use std::path::Path;

use super::config::{arch_section, parse_arch_section};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, FlowModel};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SRFL";
pub const VERSION: u32 = 1;
/// Record dtype tag for little-endian f64 payloads.
pub const DTYPE_F64: u8 = 0;
const STEP_RECORD: &str = "train.step";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    /// Records in file order.
    pub tensors: Vec<(String, Tensor)>,
}

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return fmt_err(format!("checkpoint truncated at byte {}", self.pos));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("record name is not UTF-8".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
}

impl Checkpoint {
    /// Every parameter and buffer of `model`.
    pub fn from_model(model: &FlowModel) -> Self {
        let tensors = model.store.iter().map(|(_, name, t)| (name.to_string(), t.clone())).collect();
        Checkpoint { arch: model.arch, tensors }
    }

    /// Adds optimizer moments and the step counter so training can resume.
    pub fn with_training_state(mut self, model: &FlowModel, adam: &Adam, step: usize) -> Self {
        self.tensors.extend(adam.export(&model.store));
        self.tensors.push((STEP_RECORD.into(), Tensor::from_vec(vec![step as f64])));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let arch = arch_section(&self.arch);
        put_u32(&mut out, arch.len());
        out.extend_from_slice(arch.as_bytes());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            put_u32(&mut out, t.ndim());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a checkpoint, refusing any file whose CRC does not match.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return fmt_err("checkpoint too short");
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return fmt_err(format!("checkpoint CRC mismatch (stored {stored:08x}, computed {actual:08x})"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return fmt_err("not a checkpoint (bad magic)");
        }
        let version = r.u32()?;
        if version != VERSION {
            return fmt_err(format!("unsupported checkpoint version {version}"));
        }
        let arch_text = r.string()?;
        let arch = parse_arch_section(&arch_text)?;
        let mut tensors = Vec::new();
        while r.pos < body.len() {
            let name = r.string()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return fmt_err(format!("record {name}: unknown dtype tag {dtype}"));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("record too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { arch, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| Error::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn to_model(&self) -> Result<FlowModel> {
        let mut model = FlowModel::build(self.arch, &mut Rng::new(0))?;
        let records: HashMap<&str, &Tensor> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, _) in &self.tensors {
            let known = model.store.id(name).is_some() || name.starts_with("adam.") || name == STEP_RECORD;
            if !known {
                return fmt_err(format!("checkpoint holds unknown tensor '{name}'"));
            }
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let t =
                records.get(name.as_str()).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{name}'")))?;
            if t.shape() != model.store.get(id).shape() {
                return fmt_err(format!(
                    "tensor '{name}' has shape {:?}, model expects {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                ));
            }
            model.store.set(id, (*t).clone())?;
        }
        Ok(model)
    }

    /// Optimizer state and step counter, if the checkpoint carries them.
    pub fn training_state(&self, model: &FlowModel, cfg: AdamConfig) -> Result<Option<(Adam, usize)>> {
        let Some(step) = self.get(STEP_RECORD) else {
            return Ok(None);
        };
        let records: HashMap<String, Tensor> =
            self.tensors.iter().filter(|(n, _)| n.starts_with("adam.")).cloned().collect();
        let adam = Adam::import(cfg, &model.store, &records)?;
        Ok(Some((adam, step.item()? as usize)))
    }
}
