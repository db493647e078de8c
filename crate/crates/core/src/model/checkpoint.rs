//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `PNTH`, u32 version, u32 config length,
//! config JSON, 64 ASCII bytes of vocab hash, u64 parameter count, then
//! every parameter tensor as raw f32 in declaration order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, ModelParams};
use crate::error::{PantherError, Result};
use crate::tensor::Tensor;
use crate::tokenizer::hex_digest;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PNTH";
const HASH_LEN: usize = 64;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    /// Hash of the vocabulary the model was trained with.
    pub vocab_hash: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.model.config)?;
        if self.vocab_hash.len() != HASH_LEN || !self.vocab_hash.is_ascii() {
            return Err(PantherError::Format(format!("vocab hash `{}` is not a sha256 hex digest", self.vocab_hash)));
        }
        let n = self.model.num_parameters();
        let mut out = Vec::with_capacity(64 + config.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(self.vocab_hash.as_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for t in self.model.params.slots() {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut bytes, &mut magic)?;
        if &magic != MAGIC {
            return Err(PantherError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut bytes)?;
        if version != CHECKPOINT_VERSION {
            return Err(PantherError::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u32(&mut bytes)? as usize;
        let mut config = vec![0u8; len];
        read_exact(&mut bytes, &mut config)?;
        let config: ModelConfig = serde_json::from_slice(&config)?;
        config.validate()?;
        let mut hash = [0u8; HASH_LEN];
        read_exact(&mut bytes, &mut hash)?;
        let vocab_hash = String::from_utf8(hash.to_vec())
            .map_err(|_| PantherError::Format("vocab hash is not ASCII".into()))?;
        let count = read_u64(&mut bytes)? as usize;
        let shapes = ModelParams::shapes(&config);
        if count != shapes.num_elements() {
            return Err(PantherError::Format(format!(
                "checkpoint holds {count} parameters, configuration needs {}",
                shapes.num_elements()
            )));
        }
        let mut fail = None;
        let params = shapes.map(&mut |shape| {
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; 4 * n];
            if let Err(e) = read_exact(&mut bytes, &mut raw) {
                fail.get_or_insert(e);
            }
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(shape.clone(), data).expect("shape from configuration")
        });
        if let Some(e) = fail {
            return Err(e);
        }
        if !bytes.is_empty() {
            return Err(PantherError::Format(format!("{} trailing bytes after parameters", bytes.len())));
        }
        Ok(Self {
            model: Model::from_params(config, params)?,
            vocab_hash,
        })
    }
}

fn read_exact(src: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    src.read_exact(buf)
        .map_err(|_| PantherError::Format("checkpoint is truncated".into()))
}

fn read_u32(src: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(src, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(src: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(src, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn save_checkpoint(path: &Path, model: &Model, vocab_hash: &str) -> Result<()> {
    let bytes = Checkpoint {
        model: model.clone(),
        vocab_hash: vocab_hash.to_string(),
    }
    .to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// sha256 of a checkpoint file, used to tie caches to the weights that
/// produced them.
pub fn checkpoint_digest(path: &Path) -> Result<String> {
    Ok(hex_digest(&fs::read(path)?))
}
