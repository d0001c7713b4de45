//! Versioned binary checkpoints.
//!
//! Layout: magic `SNNCKPT\0`, u32 format version, the full TOML config
//! (u64 length + bytes), the update counter, a table of named sections
//! (name, length, little-endian f64 payload), and a trailing SHA-256 over
//! everything before it. All integers little-endian. Sections are written
//! in BTreeMap order, so save → load → save is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::optimizer::OptimizerState;
use crate::harness::params::{NamedArrays, ParamSet};

const MAGIC: &[u8; 8] = b"SNNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub update: u64,
    pub sections: NamedArrays,
}

impl Checkpoint {
    /// Bundle parameters, connectivity constants, and optimizer state.
    pub fn assemble(
        config: &TrainConfig,
        update: u64,
        params: &ParamSet,
        opt: &OptimizerState,
    ) -> Self {
        let mut sections: NamedArrays = BTreeMap::new();
        for (name, v) in &params.entries {
            sections.insert(format!("param.{name}"), v.clone());
        }
        sections.insert("mask.dp_mask".into(), params.dp_mask.clone());
        sections.insert("mask.dp_sign".into(), params.dp_sign.clone());
        for (name, v) in &opt.m {
            sections.insert(format!("opt.m.{name}"), v.clone());
        }
        for (name, v) in &opt.v {
            sections.insert(format!("opt.v.{name}"), v.clone());
        }
        sections.insert("opt.t".into(), vec![opt.t as f64]);
        Checkpoint { config: config.clone(), update, sections }
    }

    pub fn params(&self) -> Result<ParamSet> {
        let mut entries: NamedArrays = BTreeMap::new();
        for (name, v) in &self.sections {
            if let Some(stripped) = name.strip_prefix("param.") {
                entries.insert(stripped.to_string(), v.clone());
            }
        }
        let dp_mask = self
            .sections
            .get("mask.dp_mask")
            .ok_or_else(|| Error::CheckpointCorrupt("missing mask.dp_mask".into()))?
            .clone();
        let dp_sign = self
            .sections
            .get("mask.dp_sign")
            .ok_or_else(|| Error::CheckpointCorrupt("missing mask.dp_sign".into()))?
            .clone();
        if entries.is_empty() {
            return Err(Error::CheckpointCorrupt("no parameter sections".into()));
        }
        Ok(ParamSet { entries, dp_mask, dp_sign })
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        let mut st = OptimizerState::default();
        for (name, v) in &self.sections {
            if let Some(n) = name.strip_prefix("opt.m.") {
                st.m.insert(n.to_string(), v.clone());
            } else if let Some(n) = name.strip_prefix("opt.v.") {
                st.v.insert(n.to_string(), v.clone());
            }
        }
        st.t = self.sections.get("opt.t").map(|v| v[0] as u64).unwrap_or(0);
        st
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = self.config.to_toml()?;
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.update.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u64).to_le_bytes());
        for (name, data) in &self.sections {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::CheckpointCorrupt("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let expect = Sha256::digest(body);
        if digest != expect.as_slice() {
            return Err(Error::CheckpointCorrupt("checksum mismatch".into()));
        }
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(Error::CheckpointCorrupt("truncated section".into()));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(Error::CheckpointCorrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
        }
        let cfg_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let cfg_text = std::str::from_utf8(take(&mut pos, cfg_len)?)
            .map_err(|_| Error::CheckpointCorrupt("config is not utf-8".into()))?
            .to_string();
        let config = TrainConfig::from_toml(&cfg_text)?;
        let update = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let n_sections = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut sections: NamedArrays = BTreeMap::new();
        for _ in 0..n_sections {
            let name_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| Error::CheckpointCorrupt("section name is not utf-8".into()))?
                .to_string();
            let data_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let raw = take(&mut pos, data_len * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            sections.insert(name, data);
        }
        if pos != body.len() {
            return Err(Error::CheckpointCorrupt("trailing bytes".into()));
        }
        Ok(Checkpoint { config, update, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::decode(&bytes)
    }
}
