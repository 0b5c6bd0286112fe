//! Byte-deterministic checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OXCK" | u32 version | u32 parameter count (all stores)
//! u32 meta length | meta bytes (UTF-8 JSON)
//! u64 step | u64 seed | u32 store count
//! per store:     u32 tag | u64 seed | u32 params
//!   per param:   u32 name length | name | u32×4 shape
//!                u8 init kind | f64 init value | u64 init seed | f32 data…
//! u32 optimizer count
//! per optimizer: u64 step | per param: f32 m… | f32 v…
//! ```

use std::path::Path;

use super::{AdamState, Init, ParamStore, Parameter, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OXCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form JSON describing the model configuration.
    pub meta: String,
    pub step: u64,
    pub seed: u64,
    pub stores: Vec<ParamStore<f32>>,
    /// Either empty or one per store.
    pub optimizers: Vec<AdamState<f32>>,
}

impl Checkpoint {
    pub fn parameter_count(&self) -> usize {
        self.stores.iter().map(|s| s.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(self.parameter_count() as u32);
        w.bytes(self.meta.as_bytes());
        w.u64(self.step);
        w.u64(self.seed);
        w.u32(self.stores.len() as u32);
        for store in &self.stores {
            w.u32(store.tag);
            w.u64(store.seed);
            w.u32(store.len() as u32);
            for p in &store.params {
                w.bytes(p.name.as_bytes());
                for d in p.value.shape {
                    w.u32(d as u32);
                }
                match p.init {
                    Init::Normal { std, seed } => {
                        w.0.push(0);
                        w.f64(std);
                        w.u64(seed);
                    }
                    Init::Constant { value } => {
                        w.0.push(1);
                        w.f64(value);
                        w.u64(0);
                    }
                }
                w.f32s(&p.value.data);
            }
        }
        w.u32(self.optimizers.len() as u32);
        for opt in &self.optimizers {
            w.u64(opt.step);
            for (m, v) in opt.m.iter().zip(&opt.v) {
                w.f32s(m);
                w.f32s(v);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let declared = r.u32()? as usize;
        let meta = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("meta is not UTF-8".into()))?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let n_stores = r.u32()? as usize;
        let mut stores = Vec::with_capacity(n_stores);
        for _ in 0..n_stores {
            let tag = r.u32()?;
            let store_seed = r.u64()?;
            let n = r.u32()? as usize;
            let mut params = Vec::with_capacity(n);
            for _ in 0..n {
                let name = String::from_utf8(r.bytes()?.to_vec())
                    .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
                let shape = [
                    r.u32()? as usize,
                    r.u32()? as usize,
                    r.u32()? as usize,
                    r.u32()? as usize,
                ];
                let kind = r.take(1)?[0];
                let a = r.f64()?;
                let b = r.u64()?;
                let init = match kind {
                    0 => Init::Normal { std: a, seed: b },
                    1 => Init::Constant { value: a },
                    k => return Err(Error::Checkpoint(format!("unknown init kind {k}"))),
                };
                let data = r.f32s(shape.iter().product())?;
                params.push(Parameter {
                    name,
                    value: Tensor { shape, data },
                    init,
                });
            }
            stores.push(ParamStore {
                tag,
                seed: store_seed,
                params,
            });
        }
        let n_opt = r.u32()? as usize;
        if n_opt != 0 && n_opt != stores.len() {
            return Err(Error::Checkpoint(format!(
                "{n_opt} optimizer states for {} stores",
                stores.len()
            )));
        }
        let mut optimizers = Vec::with_capacity(n_opt);
        for store in stores.iter().take(n_opt) {
            let opt_step = r.u64()?;
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for p in &store.params {
                m.push(r.f32s(p.value.len())?);
                v.push(r.f32s(p.value.len())?);
            }
            optimizers.push(AdamState {
                step: opt_step,
                m,
                v,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let ckpt = Self {
            meta,
            step,
            seed,
            stores,
            optimizers,
        };
        if ckpt.parameter_count() != declared {
            return Err(Error::Checkpoint(format!(
                "header declares {declared} parameters, found {}",
                ckpt.parameter_count()
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }

    fn f32s(&mut self, data: &[f32]) {
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}
