//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "SCAE"  u32 version
//! u32 spec_len, spec_len bytes of canonical network spec text
//! u32 tensor_count, then tensor_count tensors
//! u8 has_optimizer; if 1: u64 step, u32 count, count tensors
//!     named "m:<param>" and "v:<param>"
//!
//! tensor: u32 name_len, name (UTF-8), u8 rank, rank × u32 dims,
//!         u8 dtype (0 = f32, 1 = f64), raw payload
//! ```
//!
//! The main section holds every network tensor in store order followed by
//! `norm.mean` and `norm.std` (always f32). Nothing may follow the last
//! section.

use std::fs;
use std::path::Path;

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::net::graph::Network;
use crate::net::spec::NetworkSpec;
use crate::net::store::ParameterStore;
use crate::optim::AdamState;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"SCAE";
pub const VERSION: u32 = 1;
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Element = f32> {
    pub spec: NetworkSpec,
    pub params: ParameterStore<T>,
    pub norm: NormStats,
    pub optimizer: Option<AdamState<T>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor<T: Element>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    out.push(T::DTYPE.tag());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    fn into<T: Element>(self, name: &str) -> Result<Tensor<T>> {
        match self {
            AnyTensor::F32(t) if T::DTYPE == DType::F32 => Ok(t.cast()),
            AnyTensor::F64(t) if T::DTYPE == DType::F64 => Ok(t.cast()),
            other => Err(Error::Checkpoint(format!(
                "`{name}` is stored as {:?}, expected {:?}",
                other.dtype(),
                T::DTYPE
            ))),
        }
    }
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)?;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn tensor(&mut self) -> Result<(String, AnyTensor)> {
        let name = self.string("tensor name")?;
        let rank = self.u8("rank")? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::Checkpoint(format!("`{name}`: rank {rank} outside 1..=4")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("dims")?);
        }
        let dtype = self.u8("dtype")?;
        let dtype = DType::from_tag(dtype)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: unknown dtype tag {dtype}")))?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c > 0)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: invalid dims {shape:?}")))?;
        let bytes = count
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: dims {shape:?} overflow")))?;
        let payload = self.take(bytes, &format!("payload of `{name}`"))?;
        let t = match dtype {
            DType::F32 => AnyTensor::F32(Tensor::new(&shape, payload.chunks_exact(4).map(f32::read_le).collect())?),
            DType::F64 => AnyTensor::F64(Tensor::new(&shape, payload.chunks_exact(8).map(f64::read_le).collect())?),
        };
        Ok((name, t))
    }
}

impl<T: Element> Checkpoint<T> {
    pub fn new(spec: NetworkSpec, params: ParameterStore<T>, norm: NormStats) -> Self {
        Checkpoint {
            spec,
            params,
            norm,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let spec = self.spec.to_canonical_text();
        put_u32(&mut out, spec.len())?;
        out.extend_from_slice(spec.as_bytes());
        put_u32(&mut out, self.params.len() + 2)?;
        for (name, t) in self.params.iter() {
            put_tensor(&mut out, name, t)?;
        }
        let c = self.norm.channels();
        put_tensor(&mut out, NORM_MEAN, &Tensor::new(&[c], self.norm.mean.clone())?)?;
        put_tensor(&mut out, NORM_STD, &Tensor::new(&[c], self.norm.std.clone())?)?;
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                put_u32(&mut out, opt.m.len() + opt.v.len())?;
                for (name, t) in opt.m.iter() {
                    put_tensor(&mut out, &format!("m:{name}"), t)?;
                }
                for (name, t) in opt.v.iter() {
                    put_tensor(&mut out, &format!("v:{name}"), t)?;
                }
            }
        }
        Ok(out)
    }

    /// Decodes and validates tensor names and shapes against the embedded
    /// network spec.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let spec = NetworkSpec::from_canonical_text(&r.string("network spec")?)?;
        let net = Network::new(spec.clone())?;

        let count = r.u32("tensor count")?;
        let mut params = ParameterStore::new();
        let (mut mean, mut std) = (None, None);
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            match name.as_str() {
                NORM_MEAN => mean = Some(t.into::<f32>(&name)?),
                NORM_STD => std = Some(t.into::<f32>(&name)?),
                _ => {
                    let t = t.into::<T>(&name)?;
                    params.insert(name, t)?;
                }
            }
        }
        net.check_params(&params)?;
        let (mean, std) = match (mean, std) {
            (Some(m), Some(s)) if m.shape() == s.shape() && m.rank() == 1 => (m, s),
            _ => return Err(Error::Checkpoint("missing or malformed normalization statistics".into())),
        };
        let norm = NormStats {
            mean: mean.into_data(),
            std: std.into_data(),
        };
        if norm.channels() != spec.input_shape[0] {
            return Err(Error::Checkpoint(format!(
                "normalization has {} channels, network input has {}",
                norm.channels(),
                spec.input_shape[0]
            )));
        }

        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let count = r.u32("optimizer tensor count")?;
                let (mut m, mut v) = (ParameterStore::new(), ParameterStore::new());
                for _ in 0..count {
                    let (name, t) = r.tensor()?;
                    let t = t.into::<T>(&name)?;
                    if let Some(p) = name.strip_prefix("m:") {
                        m.insert(p, t)?;
                    } else if let Some(p) = name.strip_prefix("v:") {
                        v.insert(p, t)?;
                    } else {
                        return Err(Error::Checkpoint(format!("unexpected optimizer tensor `{name}`")));
                    }
                }
                Some(AdamState::from_parts(&params, step, m, v)?)
            }
            flag => return Err(Error::Checkpoint(format!("bad optimizer flag {flag}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            spec,
            params,
            norm,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::graph::build_autoencoder;
    use crate::net::spec::Head;
    use crate::rng::Rng;

    fn sample() -> Checkpoint {
        let spec = NetworkSpec::from_layer_counts(&[1, 1], 3, [3, 9, 9], Head::Autoencoder);
        let (_, params) = build_autoencoder(&spec, &mut Rng::new(1)).unwrap();
        Checkpoint::new(spec, params, NormStats::identity(3))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ckpt = sample();
        let mut opt = AdamState::new(&ckpt.params);
        let grads = ckpt.params.clone();
        opt.step(&mut ckpt.params, &grads, 1e-3).unwrap();
        ckpt.optimizer = Some(opt);
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert!(back.params.bit_eq(&ckpt.params));
        let (a, b) = (back.optimizer.as_ref().unwrap(), ckpt.optimizer.as_ref().unwrap());
        assert!(a.m.bit_eq(&b.m) && a.v.bit_eq(&b.v));
        assert_eq!(a.step, 1);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn bad_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = sample().to_bytes().unwrap();
        for cut in (0..bytes.len()).step_by(7) {
            assert!(Checkpoint::<f32>::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&extra).is_err());
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn spec_mismatch_rejected() {
        let mut ckpt = sample();
        ckpt.spec.stages[0].width = 4;
        let bytes = ckpt.to_bytes().unwrap();
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::ParameterMismatch(_))));
    }
}
