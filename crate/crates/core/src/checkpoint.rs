//! Binary checkpoints: named parameters plus optional Adam state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MVSCKPT\0"
//! version    u32      1
//! count      u32      number of parameters
//! per parameter:
//!   name_len u32, name (UTF-8), rank u32, dims u32 × rank,
//!   values   f32 × prod(dims)
//! has_opt    u8       0 or 1
//! if has_opt:
//!   step u64, then per parameter in the same order:
//!   m f32 × numel, v f32 × numel
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::training::{Adam, AdamConfig};

pub const MAGIC: &[u8; 8] = b"MVSCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerRecord {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<TensorRecord>,
    pub optimizer: Option<OptimizerRecord>,
}

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.as_f64() as f32).collect()
}

impl Checkpoint {
    pub fn capture<T: Scalar>(store: &ParamStore<T>, opt: Option<&Adam<T>>) -> Self {
        let params = store
            .params()
            .iter()
            .map(|p| {
                let t = p.get();
                TensorRecord {
                    name: p.name().to_string(),
                    shape: t.shape().to_vec(),
                    data: to_f32(t.data()),
                }
            })
            .collect();
        let optimizer = opt.map(|o| OptimizerRecord {
            step: o.step as u64,
            m: o.m.iter().map(|m| to_f32(m)).collect(),
            v: o.v.iter().map(|v| to_f32(v)).collect(),
        });
        Self { params, optimizer }
    }

    /// Copies values into `store`; names and shapes must match exactly.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let params = store.params();
        if params.len() != self.params.len() {
            return Err(Error::Parse(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (p, r) in params.iter().zip(&self.params) {
            if p.name() != r.name || p.shape() != r.shape {
                return Err(Error::Parse(format!(
                    "checkpoint entry {} {:?} does not match parameter {} {:?}",
                    r.name,
                    r.shape,
                    p.name(),
                    p.shape()
                )));
            }
            p.set_data(r.data.iter().map(|&v| T::lit(v as f64)).collect())?;
        }
        Ok(())
    }

    /// Optimizer with the stored moments, or a fresh one when none were saved.
    pub fn restore_optimizer<T: Scalar>(
        &self,
        config: AdamConfig,
        store: &ParamStore<T>,
    ) -> Result<Adam<T>> {
        let mut opt = Adam::new(config, store)?;
        if let Some(o) = &self.optimizer {
            let conv = |v: &Vec<Vec<f32>>| -> Vec<Vec<T>> {
                v.iter()
                    .map(|x| x.iter().map(|&y| T::lit(y as f64)).collect())
                    .collect()
            };
            opt.step = o.step as usize;
            opt.m = conv(&o.m);
            opt.v = conv(&o.v);
        }
        Ok(opt)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for r in &self.params {
            w.write_all(&(r.name.len() as u32).to_le_bytes())?;
            w.write_all(r.name.as_bytes())?;
            w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
            for &d in &r.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            write_f32s(w, &r.data)?;
        }
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(o) => {
                w.write_all(&[1])?;
                w.write_all(&o.step.to_le_bytes())?;
                for (m, v) in o.m.iter().zip(&o.v) {
                    write_f32s(w, m)?;
                    write_f32s(w, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u32(r)? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Parse("parameter name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = read_f32s(r, shape.iter().product())?;
            params.push(TensorRecord { name, shape, data });
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let optimizer = match flag[0] {
            0 => None,
            1 => {
                let mut step = [0u8; 8];
                r.read_exact(&mut step)?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for p in &params {
                    m.push(read_f32s(r, p.data.len())?);
                    v.push(read_f32s(r, p.data.len())?);
                }
                Some(OptimizerRecord {
                    step: u64::from_le_bytes(step),
                    m,
                    v,
                })
            }
            f => return Err(Error::Parse(format!("bad optimizer flag {f}"))),
        };
        Ok(Self { params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_f32s(w: &mut impl Write, v: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    w.write_all(&bytes)?;
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, Linear};

    #[test]
    fn round_trip_with_optimizer() {
        let store = ParamStore::<f32>::new(3);
        let lin = Linear::new(&store.root().pp("lin"), 3, 2, 1.0).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &store).unwrap();
        lin.weight.get().sum().backward().unwrap();
        opt.update(&store).unwrap();
        let ck = Checkpoint::capture(&store, Some(&opt));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);

        let other = ParamStore::<f32>::new(99);
        let lin2 = Linear::new(&other.root().pp("lin"), 3, 2, 1.0).unwrap();
        back.apply(&other).unwrap();
        assert_eq!(lin2.weight.get().to_vec(), lin.weight.get().to_vec());
        let opt2 = back
            .restore_optimizer(AdamConfig::default(), &other)
            .unwrap();
        assert_eq!(opt2, opt);
    }

    #[test]
    fn mismatch_and_garbage_rejected() {
        let store = ParamStore::<f32>::new(0);
        store.root().param("a", &[2], Init::Zeros).unwrap();
        let ck = Checkpoint::capture(&store, None);
        let other = ParamStore::<f32>::new(0);
        other.root().param("a", &[3], Init::Zeros).unwrap();
        assert!(ck.apply(&other).is_err());
        assert!(Checkpoint::read_from(&mut &b"NOTACKPT...."[..]).is_err());
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
