//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "EWASCKPT"
//! version    u32 LE   (1)
//! precision  u8       4 = f32 payloads, 8 = f64 payloads
//! epoch      u64 LE
//! seed       u64 LE
//! digest     32 bytes (SHA-256 of the training config, zero if none)
//! config     u32 LE length + UTF-8 JSON model config
//! records    u32 LE count, then per record:
//!              kind u8 (0 parameter, 1 buffer)
//!              name u32 LE length + UTF-8
//!              rank u32 LE, dims u64 LE each
//!              payload little-endian floats
//! checksum   32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{CheckpointError, Error, Result};

const MAGIC: &[u8; 8] = b"EWASCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub seed: u64,
    pub config_digest: [u8; 32],
}

impl CheckpointMeta {
    pub fn with_config_digest(epoch: u64, seed: u64, config_json: &str) -> Self {
        Self {
            epoch,
            seed,
            config_digest: Sha256::digest(config_json.as_bytes()).into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
    pub precision: Precision,
}

fn encode(model: &Model, meta: &CheckpointMeta, precision: Precision) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(precision.tag());
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&meta.config_digest);
    let config = serde_json::to_vec(model.config()).map_err(|e| Error::Config(e.to_string()))?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let records: Vec<(u8, &super::NamedTensor)> = model
        .params()
        .iter()
        .map(|p| (0u8, p))
        .chain(model.buffers().iter().map(|b| (1u8, b)))
        .collect();
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (kind, rec) in records {
        out.push(kind);
        out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(rec.name.as_bytes());
        let shape = rec.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in rec.tensor.data() {
            match precision {
                Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let checksum = Sha256::digest(&out);
    out.extend_from_slice(&checksum);
    Ok(out)
}

/// Writes `model` to `path`.
pub fn save_checkpoint(
    model: &Model,
    meta: &CheckpointMeta,
    precision: Precision,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = encode(model, meta, precision)?;
    fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Record {
    kind: u8,
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Parses a checkpoint from memory.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let precision = match r.u8("precision")? {
        4 => Precision::F32,
        8 => Precision::F64,
        other => return Err(CheckpointError::Malformed(format!("precision tag {other}")).into()),
    };
    let epoch = r.u64("epoch")?;
    let seed = r.u64("seed")?;
    let config_digest: [u8; 32] = r.take(32, "config digest")?.try_into().unwrap();
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.take(config_len, "model config")?;
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let kind = r.u8("record kind")?;
        let name_len = r.u32("record name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "record name")?.to_vec())
            .map_err(|_| CheckpointError::Malformed("record name is not UTF-8".into()));
        let rank = r.u32("record rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("record dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let width = precision.tag() as usize;
        let Some(bytes_needed) = numel.and_then(|n| n.checked_mul(width)) else {
            return Err(CheckpointError::Malformed("record size overflows".into()).into());
        };
        let payload = r.take(bytes_needed, "record payload")?;
        let data = match precision {
            Precision::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Precision::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        records.push(Record {
            kind,
            name: name?,
            shape,
            data,
        });
    }
    let body_end = r.pos;
    let stored = r.take(32, "checksum")?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes after checksum".into()).into());
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != stored {
        return Err(CheckpointError::Checksum.into());
    }

    let config: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| CheckpointError::Malformed(format!("model config: {e}")))?;
    let mut model = Model::build(&config, seed)?;
    let expected = model.params().len() + model.buffers().len();
    if records.len() != expected {
        return Err(CheckpointError::Malformed(format!(
            "{} records for a model with {expected} tensors",
            records.len()
        ))
        .into());
    }
    for rec in records {
        let slot = match rec.kind {
            0 => model.params_mut().iter_mut().find(|p| p.name == rec.name),
            1 => model.buffers_mut().iter_mut().find(|b| b.name == rec.name),
            k => return Err(CheckpointError::Malformed(format!("record kind {k}")).into()),
        };
        let Some(slot) = slot else {
            return Err(
                CheckpointError::Malformed(format!("unknown tensor `{}`", rec.name)).into(),
            );
        };
        if slot.tensor.shape() != rec.shape.as_slice() {
            return Err(CheckpointError::Malformed(format!(
                "`{}` has shape {:?}, model expects {:?}",
                rec.name,
                rec.shape,
                slot.tensor.shape()
            ))
            .into());
        }
        slot.tensor.data_mut().copy_from_slice(&rec.data);
    }
    Ok(Checkpoint {
        model,
        meta: CheckpointMeta {
            epoch,
            seed,
            config_digest,
        },
        precision,
    })
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes)
}
