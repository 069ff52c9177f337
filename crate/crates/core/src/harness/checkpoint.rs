//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MUSCLCKPT"  u32 version  u32 len  config (UTF-8 key = value text)
//! u64 step  u32 count  count × (u32 len  name  tensor)
//! ```
//!
//! Tensors use the `MUT0` encoding. Θ_m names carry an `m.` prefix and Θ_c
//! names a `c.` prefix; plain-mode checkpoints have no `c.` tensors.

use std::io::{Read, Write};
use std::path::Path;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::meta::{Mode, TrainState};
use crate::nets::{ModelParams, WeightNetParams};
use crate::tensor::{read_tensor, write_tensor, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"MUSCLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub step: u64,
    pub theta_m: ModelParams,
    pub theta_c: Option<WeightNetParams>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| format_err("truncated checkpoint"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| format_err("truncated checkpoint"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, limit: usize) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > limit {
        return Err(format_err(format!("string of {len} bytes exceeds limit {limit}")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(|_| format_err("truncated checkpoint"))?;
    String::from_utf8(b).map_err(|_| format_err("string is not UTF-8"))
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    w.write_all(b).map_err(|e| Error::io("<checkpoint stream>", e))
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    write_bytes(w, &(s.len() as u32).to_le_bytes())?;
    write_bytes(w, s.as_bytes())
}

impl Checkpoint {
    pub fn from_state(config: &RunConfig, state: &TrainState) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            step: state.step,
            theta_m: state.theta_m.clone(),
            theta_c: (config.optim.mode == Mode::Meta).then(|| state.theta_c.clone()),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_bytes(w, CHECKPOINT_MAGIC)?;
        write_bytes(w, &self.version.to_le_bytes())?;
        write_string(w, &self.config.to_kv())?;
        write_bytes(w, &self.step.to_le_bytes())?;
        let c_len = self.theta_c.as_ref().map_or(0, |c| c.0.len());
        write_bytes(w, &((self.theta_m.0.len() + c_len) as u32).to_le_bytes())?;
        for (name, t) in self.theta_m.0.iter() {
            write_string(w, &format!("m.{name}"))?;
            write_tensor(w, t)?;
        }
        if let Some(c) = &self.theta_c {
            for (name, t) in c.0.iter() {
                write_string(w, &format!("c.{name}"))?;
                write_tensor(w, t)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic).map_err(|_| format_err("truncated checkpoint"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(format_err("not a checkpoint (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config = RunConfig::from_kv(&read_string(r, 1 << 20)?)?;
        let step = read_u64(r)?;
        let count = read_u32(r)? as usize;
        let mut m = ParamSet::new();
        let mut c = ParamSet::new();
        for _ in 0..count {
            let name = read_string(r, 1024)?;
            let t = read_tensor(r)?;
            if let Some(rest) = name.strip_prefix("m.") {
                m.push(rest, t);
            } else if let Some(rest) = name.strip_prefix("c.") {
                c.push(rest, t);
            } else {
                return Err(format_err(format!("unexpected tensor name {name:?}")));
            }
        }
        let theta_m = ModelParams(m);
        theta_m.check(&config.arch)?;
        let theta_c = if c.is_empty() {
            None
        } else {
            let c = WeightNetParams(c);
            c.check(&config.arch)?;
            Some(c)
        };
        Ok(Checkpoint {
            version,
            config,
            step,
            theta_m,
            theta_c,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Θ_c, or an error for plain-mode checkpoints.
    pub fn weight_net(&self) -> Result<&WeightNetParams> {
        self.theta_c
            .as_ref()
            .ok_or_else(|| Error::invalid("checkpoint was trained in plain mode and has no weighting net"))
    }
}
