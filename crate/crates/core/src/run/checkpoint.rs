//! Binary checkpoint, little-endian.
//!
//! ```text
//! b"CXCK", version u32
//! config:  len u32, TOML bytes
//! iteration u64
//! params:  count u32, then per tensor: name (len u32, bytes), rank u32, dims u32[rank], data f64[..]
//! adam:    t u64, lr f64, beta1 f64, beta2 f64, eps f64, slots u32, then m and v tensors per slot
//! ```

use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::autodiff::Array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::meta::{Adam, MetaKnowledge};

const MAGIC: &[u8; 4] = b"CXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: u64,
    pub meta: MetaKnowledge,
    pub adam: Adam,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(buf: &mut Vec<u8>, a: &Array) -> Result<()> {
    put_u32(buf, a.shape().len())?;
    for &d in a.shape() {
        put_u32(buf, d)?;
    }
    for &v in a.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(buf, s.len())?;
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut buf, &self.config.to_toml())?;
        buf.extend_from_slice(&self.iteration.to_le_bytes());
        let named = self.meta.named();
        put_u32(&mut buf, named.len())?;
        for (name, a) in named {
            put_str(&mut buf, &name)?;
            put_tensor(&mut buf, a)?;
        }
        let o = &self.adam;
        buf.extend_from_slice(&o.t.to_le_bytes());
        for v in [o.lr, o.beta1, o.beta2, o.eps] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut buf, o.m.len())?;
        for (m, v) in o.m.iter().zip(&o.v) {
            put_tensor(&mut buf, m)?;
            put_tensor(&mut buf, v)?;
        }
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let mut f = fs::File::create(path).map_err(Error::io(path))?;
        f.write_all(&self.to_bytes()?).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(Error::io(path))?;
        let mut bytes = Vec::new();
        BufReader::new(f).read_to_end(&mut bytes).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config = RunConfig::from_toml(&r.string()?)?;
        let iteration = r.u64()?;
        let count = r.u32()?;
        let mut stored = Vec::with_capacity(count);
        for _ in 0..count {
            stored.push((r.string()?, r.tensor()?));
        }
        // Build a template of the right structure, then fill it by name.
        let template = MetaKnowledge::init(config.learner, &config.model, &mut ChaCha8Rng::seed_from_u64(0));
        let names = template.named();
        if names.len() != stored.len() {
            return Err(bad(format!("expected {} tensors, found {}", names.len(), stored.len())));
        }
        for ((want, t), (got, a)) in names.iter().zip(&stored) {
            if want != got || t.shape() != a.shape() {
                return Err(bad(format!(
                    "tensor `{got}` {:?} does not match `{want}` {:?}",
                    a.shape(),
                    t.shape()
                )));
            }
        }
        let mut values = stored.into_iter().map(|(_, a)| a);
        let n_theta = template.theta.params().len();
        let theta = template.theta.with_values(values.by_ref().take(n_theta).collect())?;
        let phi = match &template.phi {
            Some(p) => Some(p.with_values(values.collect())?),
            None => None,
        };
        let meta = MetaKnowledge {
            model: config.model.clone(),
            theta,
            phi,
        };
        let mut adam = Adam::new(0.0);
        adam.t = r.u64()?;
        adam.lr = r.f64()?;
        adam.beta1 = r.f64()?;
        adam.beta2 = r.f64()?;
        adam.eps = r.f64()?;
        let slots = r.u32()?;
        for _ in 0..slots {
            adam.m.push(r.tensor()?);
            adam.v.push(r.tensor()?);
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config,
            iteration,
            meta,
            adam,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid utf-8"))
    }

    fn tensor(&mut self) -> Result<Array> {
        let rank = self.u32()?;
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Array::new(dims, data).map_err(|e| bad(e.to_string()))
    }
}
