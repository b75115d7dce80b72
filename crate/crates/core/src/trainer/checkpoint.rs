use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{AdamW, ParamSet};
use crate::pairsampler::SamplerConfig;
use crate::rewardnet::{ModelConfig, RewardNet};

pub const CKPT_MAGIC: &[u8; 4] = b"RBMC";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    sampler: SamplerConfig,
    train: TrainConfig,
    /// Completed optimizer steps. Sampling and dropout streams are pure
    /// functions of the seeds and this counter.
    step: usize,
}

/// Model, optimizer state and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: RewardNet,
    pub opt: AdamW,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub step: usize,
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let ndim = self.u32()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data = self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, shape, data))
    }
}

impl Checkpoint {
    /// `RBMC`, version, header length, header JSON, then every parameter
    /// followed by `adam.m.*` and `adam.v.*`, each as
    /// `name_len name ndim dims… f32…` in little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.net.cfg.clone(),
            sampler: self.sampler.clone(),
            train: self.train.clone(),
            step: self.step,
        })?;
        let mut buf = Vec::with_capacity(16 + header.len() + 12 * self.net.params.numel());
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        let tensors = self.net.params.tensors();
        for t in tensors {
            put_tensor(&mut buf, &t.name, &t.shape, &t.data);
        }
        for (prefix, moments) in [("adam.m.", &self.opt.m), ("adam.v.", &self.opt.v)] {
            for (t, m) in tensors.iter().zip(moments) {
                put_tensor(&mut buf, &format!("{prefix}{}", t.name), &t.shape, m);
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4).map_err(|_| Error::Checkpoint("corrupt header: file too short".into()))?;
        if magic != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!("corrupt header: bad magic {magic:?}")));
        }
        let version = r.u32().map_err(|_| Error::Checkpoint("corrupt header: missing version".into()))?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32().map_err(|_| Error::Checkpoint("corrupt header: missing length".into()))? as usize;
        let header: Header = serde_json::from_slice(
            r.take(len).map_err(|_| Error::Checkpoint("corrupt header: truncated".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let n_params = crate::rewardnet::param_spec(&header.model).len();
        let mut params = ParamSet::new();
        for _ in 0..n_params {
            let (name, shape, data) = r.tensor()?;
            params.push(&name, &shape, data);
        }
        let net = RewardNet::from_params(header.model, params)?;
        let mut opt = AdamW::new(&net.params, header.train.weight_decay);
        for (prefix, slot) in [("adam.m.", 0), ("adam.v.", 1)] {
            for id in 0..net.params.len() {
                let (name, shape, data) = r.tensor()?;
                let t = net.params.tensor(id);
                if name != format!("{prefix}{}", t.name) || shape != t.shape {
                    return Err(Error::Checkpoint(format!("unexpected tensor {name} {shape:?}")));
                }
                if slot == 0 {
                    opt.m[id] = data;
                } else {
                    opt.v[id] = data;
                }
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            net,
            opt,
            sampler: header.sampler,
            train: header.train,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
