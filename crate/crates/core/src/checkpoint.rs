//! Checkpoint persistence and portable array export.
//!
//! The checkpoint is a framed little-endian binary: magic and version, the
//! model configuration as a JSON text block, length-prefixed named f32
//! tensors, optional optimizer moments, and a metrics snapshot. Bad magic,
//! version drift, truncation, and tensor/config shape mismatches are all
//! rejected with explicit errors; loads never apply a partial file. Writes
//! go through a temp file and a rename.
//!
//! Array export (`.sarr`) is a bare shape header plus f32 values, readable
//! by any analysis stack.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SpikingMoe};
use crate::optim::AdamW;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"SMOE";
const VERSION: u32 = 1;
const ARRAY_MAGIC: &[u8; 4] = b"SARR";
const ARRAY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    /// Per-parameter first and second moments.
    pub moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub optimizer: Option<OptimizerState>,
    pub metrics: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Snapshot a model's parameters (including buffers) in name order.
    pub fn from_model<S: Scalar>(model: &SpikingMoe<S>, metrics: BTreeMap<String, String>) -> Self {
        let mut tensors = Vec::new();
        for (name, p) in model.parameters().iter() {
            let pb = p.borrow();
            tensors.push((name.clone(), pb.shape.clone(), pb.data.iter().map(|v| v.to_f32_s()).collect()));
        }
        Checkpoint { config: model.cfg.clone(), tensors, optimizer: None, metrics }
    }

    pub fn with_optimizer<S: Scalar>(mut self, opt: &AdamW<S>) -> Self {
        let moments = opt
            .moments()
            .iter()
            .map(|(name, (m, v))| {
                (
                    name.clone(),
                    m.iter().map(|x| x.to_f32_s()).collect(),
                    v.iter().map(|x| x.to_f32_s()).collect(),
                )
            })
            .collect();
        self.optimizer = Some(OptimizerState { step_count: opt.step_count, moments });
        self
    }

    /// Overwrite a model's parameters from this checkpoint. The model must
    /// have been built with a matching configuration; mismatches name the
    /// offending tensor.
    pub fn apply_to<S: Scalar>(&self, model: &SpikingMoe<S>) -> Result<()> {
        let converted: Vec<(String, Vec<usize>, Vec<S>)> = self
            .tensors
            .iter()
            .map(|(n, s, d)| (n.clone(), s.clone(), d.iter().map(|&v| S::from_f32_s(v)).collect()))
            .collect();
        model.parameters().load_values(&converted)
    }

    /// Rebuild a model from the stored config and tensors.
    pub fn build_model<S: Scalar>(&self) -> Result<SpikingMoe<S>> {
        let model = SpikingMoe::new(self.config.clone(), 0)?;
        self.apply_to(&model)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());

        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::contract(format!("config serialisation failed: {e}")))?;
        buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
        buf.extend_from_slice(&config);

        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.tensors {
            write_name(&mut buf, name);
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        match &self.optimizer {
            None => buf.push(0),
            Some(state) => {
                buf.push(1);
                buf.extend_from_slice(&state.step_count.to_le_bytes());
                buf.extend_from_slice(&(state.moments.len() as u32).to_le_bytes());
                for (name, m, v) in &state.moments {
                    write_name(&mut buf, name);
                    buf.extend_from_slice(&(m.len() as u32).to_le_bytes());
                    for &x in m {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                    for &x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }

        let metrics = serde_json::to_vec(&self.metrics)
            .map_err(|e| Error::contract(format!("metrics serialisation failed: {e}")))?;
        buf.extend_from_slice(&(metrics.len() as u32).to_le_bytes());
        buf.extend_from_slice(&metrics);

        atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        let mut r = Reader::new(&bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("checkpoint version {version}, expected {VERSION}")));
        }
        let config_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
            .map_err(|e| Error::format(r.pos as u64, format!("bad config block: {e}")))?;

        let tensor_count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let name = r.name()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let len = r.u32()? as usize;
            if len != shape.iter().product::<usize>() {
                return Err(Error::format(
                    r.pos as u64,
                    format!("tensor '{name}' length {len} does not match shape {shape:?}"),
                ));
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.f32()?);
            }
            tensors.push((name, shape, data));
        }

        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step_count = r.u64()?;
                let count = r.u32()? as usize;
                let mut moments = Vec::with_capacity(count);
                for _ in 0..count {
                    let name = r.name()?;
                    let len = r.u32()? as usize;
                    let mut m = Vec::with_capacity(len);
                    for _ in 0..len {
                        m.push(r.f32()?);
                    }
                    let mut v = Vec::with_capacity(len);
                    for _ in 0..len {
                        v.push(r.f32()?);
                    }
                    moments.push((name, m, v));
                }
                Some(OptimizerState { step_count, moments })
            }
            other => return Err(Error::format(r.pos as u64 - 1, format!("bad optimizer flag {other}"))),
        };

        let metrics_len = r.u32()? as usize;
        let metrics: BTreeMap<String, String> = serde_json::from_slice(r.take(metrics_len)?)
            .map_err(|e| Error::format(r.pos as u64, format!("bad metrics block: {e}")))?;

        Ok(Checkpoint { config, tensors, optimizer, metrics })
    }
}

/// Portable dense array: magic, version, dims, f32 little-endian values.
pub fn write_array(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    if data.len() != shape.iter().product::<usize>() {
        return Err(Error::dim(format!("array data length {} does not match {shape:?}", data.len())));
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(ARRAY_MAGIC);
    buf.extend_from_slice(&ARRAY_VERSION.to_le_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &buf)
}

pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(4)? != ARRAY_MAGIC {
        return Err(Error::format(0, "bad array magic"));
    }
    let version = r.u32()?;
    if version != ARRAY_VERSION {
        return Err(Error::format(4, format!("array version {version}, expected {ARRAY_VERSION}")));
    }
    let ndim = r.u32()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.f32()?);
    }
    Ok((shape, data))
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.pos as u64, "unexpected end of file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
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

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let start = self.pos as u64;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::format(start, "tensor name is not utf-8"))
    }
}
