//! `MOCA1` checkpoints: little-endian, a config echo, named tensors, then
//! step/optimizer/codebook/temperature/RNG records.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::TrainConfig;
use super::model::Moca;
use super::rng::RngRecord;
use crate::codebook::{Codebook, TemperatureState};
use crate::error::{MocaError, Result};
use crate::numerics::{DType, Scalar, Tensor};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 5] = b"MOCA1";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
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
    fn tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.bytes(name.as_bytes());
        self.u8(T::DTYPE as u8);
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            v.write_le(&mut self.0);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(MocaError::Format {
            offset: self.at as u64,
            msg: format!("checkpoint ends early (wanted {n} more bytes)"),
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        let at = self.at;
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| MocaError::Format {
            offset: at as u64,
            msg: "string is not UTF-8".into(),
        })
    }
    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = self.string()?;
        let at = self.at;
        let dtype = DType::from_byte(self.u8()?).ok_or(MocaError::Format {
            offset: at as u64,
            msg: format!("unknown dtype for {name}"),
        })?;
        if dtype != T::DTYPE {
            return Err(MocaError::Format {
                offset: at as u64,
                msg: format!("{name} stored as {dtype:?}, expected {:?}", T::DTYPE),
            });
        }
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n * dtype.size())?;
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

fn store_tensors<'a, T: Scalar>(prefix: &'a str, s: &'a ParamStore<T>) -> impl Iterator<Item = (String, &'a Tensor<T>)> + 'a {
    s.entries().iter().map(move |e| (format!("{prefix}/{}", e.name), &e.value))
}

impl<T: Scalar> Moca<T> {
    /// Every named tensor of the state, in file order.
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.extend(store_tensors("student", &self.student));
        out.extend(store_tensors("heads", &self.heads));
        out.extend(store_tensors("teacher", &self.teacher));
        for (store, prefix, mom) in [
            (&self.student, "student", &self.opt.moments[0]),
            (&self.heads, "heads", &self.opt.moments[1]),
        ] {
            for (e, (m, v)) in store.entries().iter().zip(mom) {
                out.push((format!("adam.m/{prefix}/{}", e.name), m));
                out.push((format!("adam.v/{prefix}/{}", e.name), v));
            }
        }
        out.push(("codebook/entries".into(), self.codebook.entries()));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.bytes(self.cfg.to_text().as_bytes());
        let tensors = self.named_tensors();
        w.u32(tensors.len() as u32);
        for (name, t) in &tensors {
            w.tensor(name, t);
        }
        w.u64(self.step);
        w.u64(self.opt.t);
        w.f64(self.temperature.msd_ema);
        w.f64(self.temperature.momentum);
        w.f64(self.temperature.floor);
        w.u64(self.codebook.write_ptr() as u64);
        w.u64(self.codebook.k_new() as u64);
        w.u32(self.codebook.ages().len() as u32);
        for &a in self.codebook.ages() {
            w.u64(a);
        }
        let rngs = [
            RngRecord::capture("mask", &self.mask_rng),
            RngRecord::capture("codebook", &self.codebook_rng),
        ];
        w.u32(rngs.len() as u32);
        for r in &rngs {
            w.0.extend_from_slice(&r.to_bytes());
        }
        w.0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| MocaError::io(path, e))
    }

    pub fn load(path: &Path, expect: Option<&TrainConfig>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MocaError::io(path, e))?;
        Self::from_bytes(&bytes, expect)
    }

    /// Restores a state. With `expect`, the checkpoint must carry tensors of
    /// exactly the shapes that config builds; differences are listed.
    pub fn from_bytes(bytes: &[u8], expect: Option<&TrainConfig>) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(MocaError::Format {
                offset: 0,
                msg: "not a MOCA1 checkpoint".into(),
            });
        }
        let mut r = Reader {
            buf: bytes,
            at: MAGIC.len(),
        };
        let cfg_at = r.at;
        let text = r.string()?;
        let saved_cfg = TrainConfig::parse(&text).map_err(|e| MocaError::Format {
            offset: cfg_at as u64,
            msg: format!("embedded config: {e}"),
        })?;
        let mut model = Moca::<T>::new(expect.cloned().unwrap_or(saved_cfg))?;

        let count = r.u32()? as usize;
        let mut found = BTreeMap::new();
        for _ in 0..count {
            let at = r.at;
            let (name, t) = r.tensor::<T>()?;
            if found.insert(name.clone(), t).is_some() {
                return Err(MocaError::Format {
                    offset: at as u64,
                    msg: format!("duplicate tensor {name}"),
                });
            }
        }
        let mut diffs = Vec::new();
        let expected: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for (name, shape) in &expected {
            match found.get(name) {
                None => diffs.push(format!("{name}: missing from checkpoint (config wants {shape:?})")),
                Some(t) if t.shape() != shape.as_slice() => {
                    diffs.push(format!("{name}: checkpoint {:?} vs config {shape:?}", t.shape()))
                }
                _ => {}
            }
        }
        for name in found.keys() {
            if !expected.iter().any(|(n, _)| n == name) {
                diffs.push(format!("{name}: not part of the configured model"));
            }
        }
        if !diffs.is_empty() {
            return Err(MocaError::Config(format!(
                "checkpoint does not match the model shape:\n  {}",
                diffs.join("\n  ")
            )));
        }
        let mut take = |name: String| found.remove(&name).expect("presence checked");
        for (prefix, store) in [
            ("student", &mut model.student),
            ("heads", &mut model.heads),
            ("teacher", &mut model.teacher),
        ] {
            for e in store.entries_mut() {
                e.value = take(format!("{prefix}/{}", e.name));
            }
        }
        for (si, prefix) in ["student", "heads"].into_iter().enumerate() {
            let names: Vec<String> = [&model.student, &model.heads][si]
                .entries()
                .iter()
                .map(|e| e.name.clone())
                .collect();
            for (name, (m, v)) in names.iter().zip(model.opt.moments[si].iter_mut()) {
                *m = take(format!("adam.m/{prefix}/{name}"));
                *v = take(format!("adam.v/{prefix}/{name}"));
            }
        }
        let entries = take("codebook/entries".into());

        model.step = r.u64()?;
        model.opt.t = r.u64()?;
        model.temperature = TemperatureState {
            msd_ema: r.f64()?,
            momentum: r.f64()?,
            floor: r.f64()?,
        };
        let write_ptr = r.u64()? as usize;
        let k_new = r.u64()? as usize;
        let n_ages = r.u32()? as usize;
        let ages = (0..n_ages).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        model.codebook = Codebook::from_parts(entries, ages, write_ptr, k_new)?;
        let n_rng = r.u32()? as usize;
        for _ in 0..n_rng {
            let base = r.at as u64;
            let (rec, used) = RngRecord::from_bytes(&r.buf[r.at..], base)?;
            r.at += used;
            match rec.name.as_str() {
                "mask" => model.mask_rng = rec.restore(),
                "codebook" => model.codebook_rng = rec.restore(),
                other => {
                    return Err(MocaError::Format {
                        offset: base,
                        msg: format!("unknown RNG stream {other}"),
                    })
                }
            }
        }
        if r.at != bytes.len() {
            return Err(MocaError::Format {
                offset: r.at as u64,
                msg: format!("{} trailing bytes", bytes.len() - r.at),
            });
        }
        Ok(model)
    }
}
