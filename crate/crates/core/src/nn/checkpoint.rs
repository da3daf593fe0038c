//! Binary checkpoint encoding.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FMDW"  u32 version  u32 tensor_count
//! repeated: u32 name_len, name (UTF-8), u32 rank, u32 dims[rank], f64 data[Π dims]
//! ```
//!
//! Parameters are stored under `param/`, the EMA shadow under `ema/`, Adam
//! moments under `adam.m/` and `adam.v/`, and scalars/descriptors under
//! `meta/`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::optim::{AdamState, EmaState};
use super::tensor::Tensor;
use super::unet::{Arch, DenoiserParams};
use crate::error::{bail, Error, Result};

pub const MAGIC: &[u8; 4] = b"FMDW";
pub const VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub ema: EmaState,
    pub adam: AdamState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.dims.len() as u32);
    for &d in &t.dims {
        put_u32(out, d as u32);
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let p = &ck.params;
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    let arch = Tensor::new(vec![7], p.arch.to_values());
    let adam_meta = Tensor::new(
        vec![5],
        vec![ck.adam.step as f64, ck.adam.lr, ck.adam.beta1, ck.adam.beta2, ck.adam.eps],
    );
    let ema_meta = Tensor::scalar(ck.ema.decay);
    entries.push(("meta/arch".into(), &arch));
    entries.push(("meta/adam".into(), &adam_meta));
    entries.push(("meta/ema".into(), &ema_meta));
    for (prefix, list) in [
        ("param/", &p.tensors),
        ("ema/", &ck.ema.shadow),
        ("adam.m/", &ck.adam.m),
        ("adam.v/", &ck.adam.v),
    ] {
        for (name, t) in p.names.iter().zip(list.iter()) {
            entries.push((format!("{prefix}{name}"), t));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, entries.len() as u32);
    for (name, t) in entries {
        put_tensor(&mut out, &name, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(Format, "truncated at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = core::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        if rank > 8 {
            bail!(Format, "tensor {name} has rank {rank}");
        }
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = match count {
            Some(c) if c <= (self.bytes.len() - self.pos) / 8 => c,
            _ => bail!(Format, "truncated data for tensor {name}"),
        };
        let raw = self.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(dims, data)))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        bail!(Format, "bad magic bytes");
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        entries.push(r.tensor()?);
    }
    if r.pos != bytes.len() {
        bail!(Format, "{} trailing bytes", bytes.len() - r.pos);
    }
    let find = |name: &str| -> Result<&Tensor> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    };
    let arch = Arch::from_values(&find("meta/arch")?.data)?;
    let adam_meta = find("meta/adam")?;
    let ema_meta = find("meta/ema")?;
    if adam_meta.len() != 5 || ema_meta.len() != 1 {
        bail!(Format, "malformed optimizer metadata");
    }
    let template = DenoiserParams::init(arch, &mut crate::rng::SeededRng::new(0))?;
    let collect = |prefix: &str| -> Result<Vec<Tensor>> {
        template
            .names
            .iter()
            .zip(&template.tensors)
            .map(|(name, like)| {
                let t = find(&format!("{prefix}{name}"))?;
                if t.dims != like.dims {
                    bail!(Format, "{prefix}{name} has dims {:?}, descriptor implies {:?}", t.dims, like.dims);
                }
                Ok(t.clone())
            })
            .collect()
    };
    let params = DenoiserParams {
        arch,
        names: template.names.clone(),
        tensors: collect("param/")?,
    };
    let ema = EmaState {
        decay: ema_meta.data[0],
        shadow: collect("ema/")?,
    };
    let adam = AdamState {
        step: adam_meta.data[0] as u64,
        lr: adam_meta.data[1],
        beta1: adam_meta.data[2],
        beta2: adam_meta.data[3],
        eps: adam_meta.data[4],
        m: collect("adam.m/")?,
        v: collect("adam.v/")?,
    };
    Ok(Checkpoint { params, ema, adam })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageBuffer;
    use crate::rng::SeededRng;

    fn sample() -> Checkpoint {
        let arch = Arch {
            levels: 2,
            base_width: 4,
            time_dim: 8,
            groups: 2,
            ..Arch::default()
        };
        let params = DenoiserParams::init(arch, &mut SeededRng::new(1)).unwrap();
        let mut adam = AdamState::new(&params.tensors, 2e-5);
        let mut ema = EmaState::new(&params.tensors, 0.999).unwrap();
        let mut p = params.clone();
        let grads: Vec<Tensor> = p.tensors.iter().map(|t| Tensor::new(t.dims.clone(), vec![0.5; t.len()])).collect();
        adam.step(&mut p.tensors, &grads).unwrap();
        ema.update(&p.tensors).unwrap();
        Checkpoint {
            params: p,
            ema,
            adam,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let bytes = encode(&ck);
        assert_eq!(&bytes[..4], MAGIC);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, ck);
        let x = ImageBuffer::gaussian(8, 8, 3, &mut SeededRng::new(2));
        assert_eq!(
            ck.params.predict(&x, &x, 5).unwrap(),
            back.params.predict(&x, &x, 5).unwrap()
        );
    }

    #[test]
    fn corrupt_inputs_fail() {
        let bytes = encode(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::Version { found: 2, expected: 1 })));
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
        assert!(decode(&[]).is_err());
    }
}
