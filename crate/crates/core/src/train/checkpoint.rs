//! Binary checkpoints.
//!
//! Layout (little-endian): `"SATC"`, `u32` version, `u64` iteration, `u32`
//! tensor count, tensors, `u8` optimizer flag, optimizer records, `u32` CRC32
//! of everything before it. A tensor is `u16` name length, UTF-8 name, `u8`
//! rank, `rank x u32` dims and the `f32` values. An optimizer record is the
//! first-moment tensor, the second-moment tensor and a `u64` step count, one
//! record per tensor in the same order.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use super::optim::{Adam, AdamState};
use super::trainer::Trainer;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SATC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        Self { name: name.into(), shape: t.shape().to_vec(), data: t.to_vec() }
    }

    pub fn to_tensor(&self, requires_grad: bool) -> Result<Tensor<f32>> {
        Ok(Tensor::from_vec(self.data.clone(), &self.shape)?.into_leaf(requires_grad))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentRecord {
    pub m: NamedTensor,
    pub v: NamedTensor,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub tensors: Vec<NamedTensor>,
    pub moments: Option<Vec<MomentRecord>>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_tensor(out: &mut Vec<u8>, t: &NamedTensor) -> Result<()> {
    let name = t.name.as_bytes();
    let len = u16::try_from(name.len()).map_err(|_| ckpt_err(format!("name too long: {}", t.name)))?;
    let rank = u8::try_from(t.shape.len()).map_err(|_| ckpt_err("rank exceeds 255"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name);
    out.push(rank);
    for &d in &t.shape {
        let d = u32::try_from(d).map_err(|_| ckpt_err("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| ckpt_err("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<NamedTensor> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?).map_err(|_| ckpt_err("tensor name is not UTF-8"))?.to_string();
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| ckpt_err("shape overflow"))?;
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| ckpt_err("shape overflow"))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(NamedTensor { name, shape, data })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| ckpt_err("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            put_tensor(&mut out, t)?;
        }
        match &self.moments {
            None => out.push(0),
            Some(records) => {
                if records.len() != self.tensors.len() {
                    return Err(ckpt_err("optimizer records must match tensors one to one"));
                }
                out.push(1);
                for r in records {
                    put_tensor(&mut out, &r.m)?;
                    put_tensor(&mut out, &r.v)?;
                    out.extend_from_slice(&r.t.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(ckpt_err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(ckpt_err(format!("unsupported version {version}")));
        }
        if bytes.len() < 12 {
            return Err(ckpt_err("truncated file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(ckpt_err("CRC mismatch (corrupt or truncated file)"));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let iteration = r.u64()?;
        let count = r.u32()? as usize;
        let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let moments = match r.u8()? {
            0 => None,
            1 => Some(
                (0..count)
                    .map(|_| Ok(MomentRecord { m: r.tensor()?, v: r.tensor()?, t: r.u64()? }))
                    .collect::<Result<Vec<_>>>()?,
            ),
            f => return Err(ckpt_err(format!("bad optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(ckpt_err("trailing bytes before checksum"));
        }
        Ok(Self { iteration, tensors, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Every parameter of `module` under `prefix`, in visit order.
pub fn module_tensors<M: Module<f32>>(module: &M, prefix: &str) -> Vec<NamedTensor> {
    module
        .named_parameters()
        .iter()
        .map(|(n, t)| NamedTensor::from_tensor(format!("{prefix}{n}"), t))
        .collect()
}

/// Replaces every parameter of `module` with the stored tensor of the same
/// name; all parameters must be present with matching shapes.
pub fn load_module<M: Module<f32>>(module: &mut M, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
    let index: HashMap<&str, &NamedTensor> = ckpt.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut failure = None;
    module.visit_mut("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        let key = format!("{prefix}{name}");
        match index.get(key.as_str()) {
            None => failure = Some(ckpt_err(format!("missing tensor {key}"))),
            Some(t) if t.shape != p.shape() => {
                failure = Some(ckpt_err(format!("{key}: stored shape {:?}, model expects {:?}", t.shape, p.shape())))
            }
            Some(t) => match t.to_tensor(true) {
                Ok(v) => *p = v,
                Err(e) => failure = Some(e),
            },
        }
    });
    failure.map_or(Ok(()), Err)
}

fn moment_records(opt: &Adam<f32>, prefix: &str, tensors: &[NamedTensor]) -> Vec<MomentRecord> {
    opt.states
        .iter()
        .zip(tensors)
        .map(|(s, t)| MomentRecord {
            m: NamedTensor { name: t.name.clone(), shape: t.shape.clone(), data: s.m.clone() },
            v: NamedTensor { name: t.name.clone(), shape: t.shape.clone(), data: s.v.clone() },
            t: s.t,
        })
        .filter(|r| r.m.name.starts_with(prefix))
        .collect()
}

fn restore_moments(opt: &mut Adam<f32>, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
    let Some(records) = &ckpt.moments else {
        return Err(ckpt_err("checkpoint has no optimizer section"));
    };
    let index: HashMap<&str, &MomentRecord> = records.iter().map(|r| (r.m.name.as_str(), r)).collect();
    for (name, state) in opt.names.iter().zip(opt.states.iter_mut()) {
        let key = format!("{prefix}{name}");
        let r = index.get(key.as_str()).ok_or_else(|| ckpt_err(format!("missing optimizer state {key}")))?;
        if r.m.data.len() != state.m.len() || r.v.data.len() != state.v.len() {
            return Err(ckpt_err(format!("optimizer state {key} has the wrong size")));
        }
        *state = AdamState { m: r.m.data.clone(), v: r.v.data.clone(), t: r.t };
    }
    Ok(())
}

pub const G_PREFIX: &str = "G.";
pub const D_PREFIX: &str = "D.";

impl Trainer {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let g = module_tensors(&self.generator, G_PREFIX);
        let d = module_tensors(&self.discriminator, D_PREFIX);
        let mut moments = moment_records(&self.g_opt, G_PREFIX, &g);
        moments.extend(moment_records(&self.d_opt, D_PREFIX, &d));
        let mut tensors = g;
        tensors.extend(d);
        Checkpoint { iteration: self.iter, tensors, moments: Some(moments) }
    }

    /// Rebuilds a trainer for `config` and overwrites its state from `ckpt`.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        load_module(&mut t.generator, G_PREFIX, ckpt)?;
        load_module(&mut t.discriminator, D_PREFIX, ckpt)?;
        restore_moments(&mut t.g_opt, G_PREFIX, ckpt)?;
        restore_moments(&mut t.d_opt, D_PREFIX, ckpt)?;
        t.iter = ckpt.iteration;
        Ok(t)
    }

    /// Writes the checkpoint and its `.cfg` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)?;
        self.config.write(&config_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config = TrainConfig::read(&config_path(path))?;
        Self::from_checkpoint(config, &Checkpoint::load(path)?)
    }
}

/// `<checkpoint>.cfg`.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}
