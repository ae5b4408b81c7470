//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! "FARN"  u32 version
//! u32 len, config text (UTF-8)
//! u32 n_params
//!   per param: u32 name_len, name, u32 ndim, u64 dims[ndim], f64 data[numel]
//! u64 optimizer step
//! u32 n_states
//!   per state: u64 len, f64 m[len], f64 v[len]
//! u64 epoch
//! u64 rng seed, u64 rng counter
//! u8 has_running_stats [, f64 mean, f64 std]
//! ```
//!
//! Trailing bytes are rejected.

use std::path::Path;

use thiserror::Error;

use crate::arm::TargetStats;
use crate::numerics::{AdamW, AdamWConfig, AdamWState, Params, Rng, Tensor};

pub const MAGIC: &[u8; 4] = b"FARN";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 4096;
const MAX_NDIM: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: Vec<NamedTensor>,
    pub optimizer_step: u64,
    pub optimizer_states: Vec<AdamWState>,
    pub epoch: u64,
    pub rng_seed: u64,
    pub rng_counter: u64,
    pub running_stats: Option<TargetStats>,
}

impl Checkpoint {
    pub fn capture(
        config: String,
        params: &Params,
        optimizer: &AdamW,
        epoch: u64,
        rng: &Rng,
        running_stats: Option<TargetStats>,
    ) -> Self {
        Self {
            config,
            params: params
                .ids()
                .map(|id| NamedTensor {
                    name: params.name(id).to_string(),
                    tensor: params.value(id).clone(),
                })
                .collect(),
            optimizer_step: optimizer.step,
            optimizer_states: optimizer.states.clone(),
            epoch,
            rng_seed: rng.seed(),
            rng_counter: rng.counter(),
            running_stats,
        }
    }

    /// Copies stored values into `params`; names, order and shapes must match.
    pub fn restore_params(&self, params: &mut Params) -> Result<(), CheckpointError> {
        if self.params.len() != params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} stored parameters, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        let ids: Vec<_> = params.ids().collect();
        for (stored, id) in self.params.iter().zip(ids) {
            if stored.name != params.name(id) || stored.tensor.shape() != params.value(id).shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "stored {} {:?} vs model {} {:?}",
                    stored.name,
                    stored.tensor.shape(),
                    params.name(id),
                    params.value(id).shape()
                )));
            }
            *params.value_mut(id) = stored.tensor.clone();
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, config: AdamWConfig, params: &Params) -> Result<AdamW, CheckpointError> {
        let mut opt = AdamW::new(params, config);
        if self.optimizer_states.len() != opt.states.len()
            || self.optimizer_states.iter().zip(&opt.states).any(|(a, b)| a.m.len() != b.m.len())
        {
            return Err(CheckpointError::Mismatch("optimizer state does not match parameters".into()));
        }
        opt.step = self.optimizer_step;
        opt.states = self.optimizer_states.clone();
        Ok(opt)
    }

    pub fn rng(&self) -> Rng {
        Rng::from_state(self.rng_seed, self.rng_counter)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut w, self.config.as_bytes());
        put_u32(&mut w, self.params.len());
        for p in &self.params {
            put_bytes(&mut w, p.name.as_bytes());
            put_u32(&mut w, p.tensor.shape().len());
            for &d in p.tensor.shape() {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut w, p.tensor.data());
        }
        w.extend_from_slice(&self.optimizer_step.to_le_bytes());
        put_u32(&mut w, self.optimizer_states.len());
        for s in &self.optimizer_states {
            w.extend_from_slice(&(s.m.len() as u64).to_le_bytes());
            put_f64s(&mut w, &s.m);
            put_f64s(&mut w, &s.v);
        }
        w.extend_from_slice(&self.epoch.to_le_bytes());
        w.extend_from_slice(&self.rng_seed.to_le_bytes());
        w.extend_from_slice(&self.rng_counter.to_le_bytes());
        match self.running_stats {
            None => w.push(0),
            Some(s) => {
                w.push(1);
                put_f64s(&mut w, &[s.mean, s.std]);
            }
        }
        w
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                supported: VERSION,
            });
        }
        let config = r.string(usize::MAX)?;
        let n_params = r.u32()? as usize;
        let mut params = Vec::new();
        for _ in 0..n_params {
            let name = r.string(MAX_NAME)?;
            let ndim = r.u32()? as usize;
            if ndim == 0 || ndim > MAX_NDIM {
                return Err(CheckpointError::Malformed(format!("{name}: rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.len_u64()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflows")))?;
            let data = r.f64s(numel)?;
            let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            params.push(NamedTensor { name, tensor });
        }
        let optimizer_step = r.u64()?;
        let n_states = r.u32()? as usize;
        let mut optimizer_states = Vec::new();
        for _ in 0..n_states {
            let len = r.len_u64()?;
            let m = r.f64s(len)?;
            let v = r.f64s(len)?;
            optimizer_states.push(AdamWState { m, v });
        }
        let epoch = r.u64()?;
        let rng_seed = r.u64()?;
        let rng_counter = r.u64()?;
        let running_stats = match r.take(1)?[0] {
            0 => None,
            1 => {
                let s = r.f64s(2)?;
                Some(TargetStats { mean: s[0], std: s[1] })
            }
            other => return Err(CheckpointError::Malformed(format!("running-stats flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            params,
            optimizer_step,
            optimizer_states,
            epoch,
            rng_seed,
            rng_counter,
            running_stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.encode()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

fn put_u32(w: &mut Vec<u8>, n: usize) {
    let n = u32::try_from(n).expect("checkpoint field exceeds u32");
    w.extend_from_slice(&n.to_le_bytes());
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    put_u32(w, b.len());
    w.extend_from_slice(b);
}

fn put_f64s(w: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(self.pos)),
        }
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len_u64(&mut self) -> Result<usize, CheckpointError> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| CheckpointError::Malformed(format!("length {n} too large")))
    }

    fn string(&mut self, max: usize) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        if len > max {
            return Err(CheckpointError::Malformed(format!("string of {len} bytes")));
        }
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Malformed("invalid UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = n.checked_mul(8).ok_or(CheckpointError::Truncated(self.pos))?;
        let b = self.take(bytes)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
