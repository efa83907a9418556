//! Binary checkpoint files.
//!
//! Layout (little-endian): magic `ADIF`, `u32` version, `u32` array count,
//! then per array `{u32 name length, UTF-8 name, u32 rank, u64 dims…, u8
//! dtype, raw payload}`, then a `u32`-length-prefixed UTF-8 JSON config echo.
//! Dtype codes: 0 = f32, 1 = f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TauScaler;
use crate::dit::{Dit, DitConfig};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::schedule::ScheduleKind;
use crate::tensor::Tensor;
use crate::vae::{Vae, VaeConfig};

pub const MAGIC: [u8; 4] = *b"ADIF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype_code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => f32::DTYPE_CODE,
            ArrayData::F64(_) => f64::DTYPE_CODE,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bitwise equality, so NaN payloads compare equal to themselves.
    pub fn bits_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ArrayData::F32(a), ArrayData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (ArrayData::F64(a), ArrayData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        if T::DTYPE_CODE == f32::DTYPE_CODE {
            ArrayData::F32(t.data().iter().map(|v| v.to_f32().unwrap()).collect())
        } else {
            ArrayData::F64(t.data().iter().map(|v| v.f64()).collect())
        }
    }

    fn to_vec<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.dtype_code() != T::DTYPE_CODE {
            return Err(Error::Validation(format!(
                "checkpoint stores dtype code {}, requested {}",
                self.dtype_code(),
                T::NAME
            )));
        }
        Ok(match self {
            ArrayData::F32(v) => v.iter().map(|&x| T::from_f32(x).unwrap()).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// JSON echo of everything needed to rebuild and use the stored model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub model: String,
    pub dtype: String,
    pub seed: u64,
    pub tau_scaler: TauScaler,
    #[serde(default)]
    pub vae: Option<VaeConfig>,
    #[serde(default)]
    pub dit: Option<DitConfig>,
    #[serde(default)]
    pub schedule: Option<ScheduleKind>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub arrays: Vec<NamedArray>,
    pub config: ConfigEcho,
}

impl Checkpoint {
    fn push_params<T: Scalar>(arrays: &mut Vec<NamedArray>, params: &ParamSet<T>) {
        for (name, t) in params.names().iter().zip(params.tensors()) {
            arrays.push(NamedArray { name: name.clone(), shape: t.shape().to_vec(), data: ArrayData::from_tensor(t) });
        }
    }

    pub fn from_vae<T: Scalar>(vae: &Vae<T>, tau_scaler: TauScaler, seed: u64) -> Self {
        let mut arrays = Vec::new();
        Self::push_params(&mut arrays, &vae.params);
        Self {
            version: VERSION,
            arrays,
            config: ConfigEcho {
                model: "vae".into(),
                dtype: T::NAME.into(),
                seed,
                tau_scaler,
                vae: Some(vae.config),
                dit: None,
                schedule: None,
                extra: serde_json::Value::Null,
            },
        }
    }

    pub fn from_dit<T: Scalar>(dit: &Dit<T>, schedule: ScheduleKind, tau_scaler: TauScaler, seed: u64) -> Self {
        let mut arrays = Vec::new();
        Self::push_params(&mut arrays, &dit.params);
        Self {
            version: VERSION,
            arrays,
            config: ConfigEcho {
                model: "dit".into(),
                dtype: T::NAME.into(),
                seed,
                tau_scaler,
                vae: None,
                dit: Some(dit.config),
                schedule: Some(schedule),
                extra: serde_json::Value::Null,
            },
        }
    }

    /// All arrays whose names start with `prefix`, in file order.
    pub fn params<T: Scalar>(&self, prefix: &str) -> Result<ParamSet<T>> {
        let mut p = ParamSet::new();
        for a in self.arrays.iter().filter(|a| a.name.starts_with(prefix)) {
            p.push(&a.name, Tensor::new(a.shape.clone(), a.data.to_vec()?)?);
        }
        Ok(p)
    }

    pub fn to_vae<T: Scalar>(&self) -> Result<Vae<T>> {
        let cfg = self
            .config
            .vae
            .ok_or_else(|| Error::Validation(format!("checkpoint holds a {} model, not a VAE", self.config.model)))?;
        Vae::from_params(cfg, self.params("vae.")?)
    }

    pub fn to_dit<T: Scalar>(&self) -> Result<Dit<T>> {
        let cfg = self
            .config
            .dit
            .ok_or_else(|| Error::Validation(format!("checkpoint holds a {} model, not a denoiser", self.config.model)))?;
        Dit::from_params(cfg, self.params("dit.")?)
    }

    /// True when every array matches `other` bit for bit and the config
    /// echoes are equal.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.config == other.config
            && self.arrays.len() == other.arrays.len()
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.data.bits_eq(&b.data))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&len_u32(self.arrays.len(), "array count")?.to_le_bytes());
        for a in &self.arrays {
            let expect: usize = a.shape.iter().product();
            if expect != a.data.len() {
                return Err(Error::Shape(format!("array {} has shape {:?} but {} values", a.name, a.shape, a.data.len())));
            }
            out.extend_from_slice(&len_u32(a.name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&len_u32(a.shape.len(), "rank")?.to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(a.data.dtype_code());
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                ArrayData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            }
        }
        let json = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&len_u32(json.len(), "config length")?.to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return if MAGIC.starts_with(bytes) && !bytes.is_empty() {
                Err(Error::Truncated("file ends inside the magic bytes".into()))
            } else {
                Err(Error::NotCheckpoint("file too short for the magic bytes".into()))
            };
        }
        if bytes[..4] != MAGIC {
            return Err(Error::NotCheckpoint(format!("bad magic bytes {:?}", &bytes[..4])));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch { found: version, expected: VERSION });
        }
        let count = r.u32("array count")? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "array name")?.to_vec())
                .map_err(|_| Error::Validation("array name is not UTF-8".into()))?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                let d = r.u64("dimension")?;
                shape.push(usize::try_from(d).map_err(|_| Error::Validation(format!("dimension {d} too large")))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Validation(format!("array {name} is too large")))?;
            let dtype = r.take(1, "dtype")?[0];
            let data = match dtype {
                0 => {
                    let raw = r.take(numel.saturating_mul(4), &format!("payload of {name}"))?;
                    ArrayData::F32(raw.chunks_exact(4).map(f32::read_le).collect())
                }
                1 => {
                    let raw = r.take(numel.saturating_mul(8), &format!("payload of {name}"))?;
                    ArrayData::F64(raw.chunks_exact(8).map(f64::read_le).collect())
                }
                other => return Err(Error::Validation(format!("array {name}: unknown dtype code {other}"))),
            };
            arrays.push(NamedArray { name, shape, data });
        }
        let json_len = r.u32("config length")? as usize;
        let json = r.take(json_len, "config echo")?;
        let config: ConfigEcho = serde_json::from_slice(json)?;
        if r.pos != bytes.len() {
            return Err(Error::Validation(format!("{} trailing bytes after the config echo", bytes.len() - r.pos)));
        }
        Ok(Self { version, arrays, config })
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Validation(format!("{what} {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("file ends while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
