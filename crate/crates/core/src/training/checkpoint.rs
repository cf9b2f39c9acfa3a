//! Single-file container: magic, format version, JSON metadata, then named
//! little-endian f32 blocks.
//!
//! ```text
//! "SGLDMCKP" | u32 version | u64 meta_len | meta JSON | u32 n_blocks
//! per block: u16 name_len | name | u8 ndim | u64 dims[ndim] | u64 byte_len | f32 data
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::conditioning::{MultiAeConfig, RegionLayout, TauConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image_ae::ImageAeConfig;
use crate::nn::Params;
use crate::unet::UNetConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SGLDMCKP";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    ImageAe,
    Stage1,
    Stage2,
}

/// Mean loss over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub config: TrainConfig,
    pub layout: Option<RegionLayout>,
    pub schedule: Option<NoiseSchedule>,
    pub image_ae: Option<ImageAeConfig>,
    pub latent_scale: Option<f64>,
    pub multi_ae: Option<MultiAeConfig>,
    pub tau: Option<TauConfig>,
    pub unet: Option<UNetConfig>,
    #[serde(default)]
    pub metrics: Vec<EpochMetrics>,
    /// Fingerprints of frozen parameter groups this checkpoint was trained
    /// against.
    #[serde(default)]
    pub frozen: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub blocks: BTreeMap<String, Block>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            blocks: BTreeMap::new(),
        }
    }

    pub fn insert_params(&mut self, params: &Params) -> Result<()> {
        for (name, (dims, data)) in params.to_blocks()? {
            self.blocks.insert(name, Block { dims, data });
        }
        Ok(())
    }

    /// Parameters under `root` (e.g. `"unet"`), excluding optimizer state.
    pub fn params(&self, root: &str, dtype: DType) -> Result<Params> {
        let prefix = format!("{root}.");
        let selected: Vec<_> = self
            .blocks
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(k, b)| (k.as_str(), b.dims.as_slice(), b.data.as_slice()))
            .collect();
        if selected.is_empty() {
            return Err(Error::Checkpoint(format!("checkpoint has no {root} parameters")));
        }
        Params::from_blocks(selected, dtype)
    }

    pub fn has_params(&self, root: &str) -> bool {
        let prefix = format!("{root}.");
        self.blocks.keys().any(|k| k.starts_with(&prefix))
    }

    pub fn insert_optimizer(&mut self, state: Vec<(String, Vec<usize>, Vec<f32>, Vec<f32>)>) {
        for (name, dims, m, v) in state {
            self.blocks.insert(
                format!("{ADAM_M}{name}"),
                Block {
                    dims: dims.clone(),
                    data: m,
                },
            );
            self.blocks.insert(format!("{ADAM_V}{name}"), Block { dims, data: v });
        }
    }

    /// Adam moments keyed by parameter name.
    pub fn optimizer_state(&self) -> BTreeMap<String, (Vec<f32>, Vec<f32>)> {
        let mut out = BTreeMap::new();
        for (k, b) in &self.blocks {
            if let Some(name) = k.strip_prefix(ADAM_M) {
                if let Some(v) = self.blocks.get(&format!("{ADAM_V}{name}")) {
                    out.insert(name.to_string(), (b.data.clone(), v.data.clone()));
                }
            }
        }
        out
    }

    pub fn strip_optimizer(&mut self) {
        self.blocks.retain(|k, _| !k.starts_with(ADAM_M) && !k.starts_with(ADAM_V));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(
            64 + meta.len() + self.blocks.values().map(|b| b.data.len() * 4 + 64).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, b) in &self.blocks {
            let expected: usize = b.dims.iter().product();
            if expected != b.data.len() {
                return Err(Error::Checkpoint(format!(
                    "block {name}: dims {:?} do not match {} values",
                    b.dims,
                    b.data.len()
                )));
            }
            let name_bytes = name.as_bytes();
            let name_len = u16::try_from(name_bytes.len())
                .map_err(|_| Error::Checkpoint(format!("block name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(b.dims.len() as u8);
            for d in &b.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((b.data.len() * 4) as u64).to_le_bytes());
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "header")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("header")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = r.u64("metadata")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let n = r.u32("block count")?;
        let mut blocks = BTreeMap::new();
        for i in 0..n {
            let name_len = r.u16(&format!("block #{i}"))? as usize;
            let name = String::from_utf8(r.take(name_len, &format!("block #{i}"))?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("block #{i}: name is not utf-8")))?;
            let ndim = r.take(1, &name)?[0] as usize;
            let dims = (0..ndim)
                .map(|_| r.u64(&name).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let byte_len = r.u64(&name)? as usize;
            let count: usize = dims.iter().product();
            if byte_len != count * 4 {
                return Err(Error::Checkpoint(format!(
                    "block {name}: length {byte_len} bytes does not match dims {dims:?}"
                )));
            }
            let data = r
                .take(byte_len, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if blocks.insert(name.clone(), Block { dims, data }).is_some() {
                return Err(Error::Checkpoint(format!("block {name}: duplicated")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last block",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, blocks })
    }

    /// SHA-256 of the serialized file, hex.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("{what}: truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
