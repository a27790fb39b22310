//! Binary checkpoints of named tensors.
//!
//! Layout (little-endian): magic `MTLC`, u32 version, 32-byte SHA-256 of the
//! model config, u64 step, then records until end of file. A record is a u16
//! name length, the name bytes, a u8 rank, one u32 per dimension and the f32
//! payload. The config itself is echoed as TOML in a sidecar file next to the
//! checkpoint (`<name>.config.toml`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::model::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MTLC";
const VERSION: u32 = 1;

/// Record-name prefixes that hold training state rather than model parameters.
const EXTRA_PREFIXES: [&str; 4] = ["momentum.", "velocity.", "best.", "state."];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParamStore,
    /// Optimizer buffers and other resumable state.
    pub extras: ParamStore,
}

fn is_extra(name: &str) -> bool {
    EXTRA_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Sidecar path holding the config echo of `path`.
pub fn config_path(path: &Path) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(".config.toml");
    path.with_file_name(name)
}

impl Checkpoint {
    pub fn new(config: ModelConfig, step: u64, params: ParamStore, extras: ParamStore) -> Self {
        Checkpoint {
            config,
            step,
            params,
            extras,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.config.hash())?;
        w.write_all(&self.step.to_le_bytes())?;
        for (name, t) in self.params.iter().chain(self.extras.iter()) {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::InvalidArgument(format!("record name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Parse the binary part; returns the stored hash, step and records.
    pub fn read_records<R: Read>(mut r: R) -> Result<([u8; 32], u64, ParamStore, ParamStore)> {
        let bad = |reason: &str| Error::format("checkpoint", reason.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("missing header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(|_| bad("missing version"))?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash).map_err(|_| bad("missing config hash"))?;
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(|_| bad("missing step"))?;
        let step = u64::from_le_bytes(u64b);

        let mut params = ParamStore::new();
        let mut extras = ParamStore::new();
        loop {
            let mut lenb = [0u8; 2];
            match r.read(&mut lenb[..1])? {
                0 => break,
                _ => r.read_exact(&mut lenb[1..]).map_err(|_| bad("truncated record"))?,
            }
            let mut name = vec![0u8; u16::from_le_bytes(lenb) as usize];
            r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("record name is not UTF-8"))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank).map_err(|_| bad("truncated rank"))?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                r.read_exact(&mut u32b).map_err(|_| bad("truncated dims"))?;
                shape.push(u32::from_le_bytes(u32b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut payload = vec![0u8; numel * 4];
            r.read_exact(&mut payload).map_err(|_| bad("truncated payload"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
            if is_extra(&name) {
                extras.insert(name, t);
            } else {
                params.insert(name, t);
            }
        }
        Ok((hash, step, params, extras))
    }

    /// Write the checkpoint and its config sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        self.write_to(BufWriter::new(File::create(path)?))?;
        std::fs::write(config_path(path), self.config.to_toml())?;
        Ok(())
    }

    /// Read a checkpoint and its sidecar config, checking they agree.
    pub fn load(path: &Path) -> Result<Self> {
        let (hash, step, params, extras) = Self::read_records(BufReader::new(File::open(path)?))?;
        let text = std::fs::read_to_string(config_path(path))?;
        let config = ModelConfig::from_toml(&text)?;
        if config.hash() != hash {
            return Err(Error::ConfigHashMismatch);
        }
        Ok(Checkpoint {
            config,
            step,
            params,
            extras,
        })
    }

    /// [`Checkpoint::load`], additionally requiring the stored config to be
    /// `runtime`.
    pub fn load_for(path: &Path, runtime: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config.hash() != runtime.hash() {
            return Err(Error::ConfigHashMismatch);
        }
        Ok(ck)
    }

    /// Model holding this checkpoint's parameters.
    pub fn model(&self) -> Result<super::model::Model> {
        super::model::Model::from_params(&self.config, self.params.clone())
    }
}
