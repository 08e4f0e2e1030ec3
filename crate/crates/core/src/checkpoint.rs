//! Model checkpoint file.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "MILT" | version | config_len | config JSON (config_len bytes)
//! tensor_count | per tensor: rank, dims..., f32 values (row-major)
//! slot_count   | per prototype: class, rank, dims..., f32 values
//! ```
//!
//! Tensors follow the declaration order of [`Params::tensors`](crate::encoder::Params::tensors).

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::loss::PrototypeBank;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MILT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: ModelParams,
    pub bank: PrototypeBank,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        push_u32(&mut out, CHECKPOINT_VERSION);
        let config = serde_json::to_vec(&self.config)?;
        push_u32(&mut out, config.len() as u32);
        out.extend_from_slice(&config);

        let tensors = self.params.tensors();
        push_u32(&mut out, tensors.len() as u32);
        for t in tensors {
            push_u32(&mut out, 2);
            push_u32(&mut out, t.nrows() as u32);
            push_u32(&mut out, t.ncols() as u32);
            push_values(&mut out, t.iter())?;
        }

        let slots: Vec<_> = self.bank.slots().collect();
        push_u32(&mut out, slots.len() as u32);
        for (class, proto) in slots {
            push_u32(&mut out, class as u32);
            push_u32(&mut out, 1);
            push_u32(&mut out, proto.len() as u32);
            push_values(&mut out, proto.iter())?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: "<checkpoint>".into(),
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let config_len = r.u32()? as usize;
        let config: EncoderConfig = serde_json::from_slice(r.take(config_len)?)?;
        config.validate()?;

        let mut params = ModelParams::zeros(&config);
        let count = r.u32()? as usize;
        let mut slots = params.tensors_mut();
        if count != slots.len() {
            return Err(Error::Checkpoint(format!(
                "{count} tensors stored, configuration needs {}",
                slots.len()
            )));
        }
        for (index, slot) in slots.iter_mut().enumerate() {
            let dims = r.dims()?;
            let expected = [slot.nrows(), slot.ncols()];
            if dims != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor {index} has shape {dims:?}, expected {expected:?}"
                )));
            }
            let values = r.values(slot.len())?;
            **slot = Array2::from_shape_vec((expected[0], expected[1]), values)
                .expect("checked shape");
        }

        let mut bank = PrototypeBank::new(config.class_count);
        let slot_count = r.u32()? as usize;
        for _ in 0..slot_count {
            let class = r.u32()? as usize;
            let dims = r.dims()?;
            if class >= config.class_count || dims != [config.model_width] {
                return Err(Error::Checkpoint(format!(
                    "prototype for class {class} with shape {dims:?}"
                )));
            }
            bank.set(class, Array1::from(r.values(config.model_width)?));
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        Ok(Self {
            config,
            params,
            bank,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::BadMagic {
                expected, found, ..
            } => Error::BadMagic {
                path: path.to_path_buf(),
                expected,
                found,
            },
            other => other,
        })
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_values<'a>(out: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite("checkpoint tensor".into()));
        }
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            Error::Truncated {
                expected: (self.at + n) as u64,
                available: self.bytes.len() as u64,
            },
        )?;
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
        }
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }
}
