// Binary checkpoint layout, all integers little-endian:
//
//   "FLW3" | u32 version | config block | u8 initialized
//   | u64 FNV-1a hash of the config block
//   | u32 tensor count | per tensor: u32 name length, name, u32 rank,
//   rank x u32 dims, f64 data
//
// Config block: u32 levels, depth, width, 4 x u32 input shape, u8 learn_top,
// u8 learn_split_prior; then u8 initialized (not hashed).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FlowModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLW3";
pub const CHECKPOINT_VERSION: u32 = 1;

fn config_block(cfg: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(30);
    for v in [cfg.levels, cfg.depth, cfg.width] {
        out.extend((v as u32).to_le_bytes());
    }
    for v in cfg.input_shape {
        out.extend((v as u32).to_le_bytes());
    }
    out.push(cfg.learn_top as u8);
    out.push(cfg.learn_split_prior as u8);
    out
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Hash identifying an architecture, as stored in checkpoints.
pub fn config_hash(cfg: &ModelConfig) -> u64 {
    fnv1a(&config_block(cfg))
}

/// Writes `model` to `path` (via a temporary file renamed into place).
pub fn save_checkpoint(model: &FlowModel, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&config_block(model.config()))?;
        w.write_all(&[model.is_initialized() as u8])?;
        w.write_all(&config_hash(model.config()).to_le_bytes())?;
        let params = model.params();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, t) in params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn flag(&mut self) -> Result<bool> {
        match self.bytes::<1>()?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("bad flag byte {b}"))),
        }
    }
}

/// Reads a checkpoint. With `expected`, the stored architecture must match
/// it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<FlowModel> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    if &r.bytes::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{} is not a model checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(r.bytes()?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let (levels, depth, width) = (r.u32()?, r.u32()?, r.u32()?);
    let input_shape = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
    let config = ModelConfig {
        levels,
        depth,
        width,
        input_shape,
        learn_top: r.flag()?,
        learn_split_prior: r.flag()?,
    };
    let initialized = r.flag()?;
    let stored_hash = u64::from_le_bytes(r.bytes()?);
    if stored_hash != config_hash(&config) {
        return Err(Error::Format("checkpoint config hash mismatch".into()));
    }
    if let Some(want) = expected {
        if config_hash(want) != stored_hash || want != &config {
            return Err(Error::Format(format!(
                "checkpoint config hash mismatch: file holds {config:?}, expected {want:?}"
            )));
        }
    }
    config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut model = FlowModel::new(config, 0)?;
    let count = r.u32()?;
    let mut slots = model.params_mut();
    if count != slots.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, model declares {}",
            slots.len()
        )));
    }
    for (name, slot) in slots.iter_mut() {
        let len = r.u32()?;
        let mut buf = vec![0u8; len];
        r.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        let stored = String::from_utf8(buf).map_err(|_| Error::Format("non-UTF-8 tensor name".into()))?;
        if &stored != name {
            return Err(Error::Format(format!("expected tensor `{name}`, found `{stored}`")));
        }
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {shape:?}, model declares {:?}",
                slot.shape()
            )));
        }
        let data = (0..slot.len())
            .map(|_| Ok(f64::from_le_bytes(r.bytes()?)))
            .collect::<Result<Vec<_>>>()?;
        **slot = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
    }
    drop(slots);
    if r.inner.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    if initialized {
        model.mark_initialized();
    }
    Ok(model)
}
