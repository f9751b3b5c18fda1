//! Binary model checkpoints.
//!
//! Layout: magic `FLNE`, `u32` format version, then records until end of
//! file. A record is `u32` name length, UTF-8 name, `u32` rank, `rank` x
//! `u32` dims, and `prod(dims)` little-endian `f32` values. All integers
//! are little-endian.
//!
//! Record names are `config/<key>`, `param/<name>`, `buffer/<name>`,
//! `opt/<param>/<state>` and `opt_steps`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"FLNE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl Record {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f32>) -> Self {
        Self { name: name.into(), dims, values }
    }
}

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
        for &d in &r.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated { path: self.origin.to_string(), offset: self.bytes.len() as u64 });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn corrupt(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Corrupt { path: self.origin.to_string(), offset: offset as u64, detail: detail.into() }
    }
}

/// Parses checkpoint bytes; `origin` only labels errors.
pub fn decode_records(bytes: &[u8], origin: &str) -> Result<Vec<Record>> {
    let mut rd = Reader { bytes, pos: 0, origin };
    let magic = rd.take(4)?;
    if magic != MAGIC {
        return Err(rd.corrupt(0, format!("bad magic {magic:?}")));
    }
    let version = rd.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let mut out = Vec::new();
    while rd.pos < bytes.len() {
        let start = rd.pos;
        let len = rd.u32()? as usize;
        let name = std::str::from_utf8(rd.take(len)?)
            .map_err(|_| rd.corrupt(start + 4, "record name is not UTF-8"))?
            .to_string();
        let rank = rd.u32()? as usize;
        if rank > 8 {
            return Err(rd.corrupt(rd.pos - 4, format!("record `{name}` has rank {rank}")));
        }
        let dims = (0..rank).map(|_| rd.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes_needed = numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| rd.corrupt(start, "record too large"))?;
        let payload = rd.take(bytes_needed)?;
        let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(Record { name, dims, values });
    }
    Ok(out)
}

/// Records for the model configuration, parameters, batch-norm buffers and,
/// optionally, optimizer state.
pub fn model_records<T: Real>(model: &Model<T>, include_optimizer: bool) -> Vec<Record> {
    let f = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
    let mut out: Vec<Record> = model
        .config()
        .to_records()
        .into_iter()
        .map(|(k, v)| Record::new(format!("config/{k}"), vec![v.len()], v.iter().map(|&x| x as f32).collect()))
        .collect();
    for (name, t) in model.store().params() {
        out.push(Record::new(format!("param/{name}"), t.shape().to_vec(), f(&t.data())));
    }
    for (name, t) in model.store().buffers() {
        out.push(Record::new(format!("buffer/{name}"), t.shape().to_vec(), f(&t.data())));
    }
    if include_optimizer {
        let state = model.store().optimizer_state();
        if !state.is_empty() {
            out.push(Record::new("opt_steps", vec![1], vec![model.store().adam_steps() as f32]));
        }
        for (name, kind, values) in state {
            out.push(Record::new(format!("opt/{name}/{kind}"), vec![values.len()], f(&values)));
        }
    }
    out
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path, include_optimizer: bool) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_records(&model_records(model, include_optimizer))).map_err(|e| Error::io(path, e))
}

/// Rebuilds a model from records. Every parameter and buffer of the
/// configured architecture must be present with a matching shape.
pub fn model_from_records<T: Real>(records: &[Record]) -> Result<Model<T>> {
    let find = |name: &str| records.iter().find(|r| r.name == name);
    let config = ModelConfig::from_records(|k| find(&format!("config/{k}")).map(|r| r.values.iter().map(|&v| v as f64).collect()))?;
    let mut model = Model::<T>::new(config, 0)?;
    let to_t = |r: &Record| r.values.iter().map(|&v| T::of(v as f64)).collect::<Vec<T>>();
    let mut expected = 0usize;
    for (kind, items) in [("param", model.store().params().collect::<Vec<_>>()), ("buffer", model.store().buffers().collect())] {
        for (name, t) in items {
            let r = find(&format!("{kind}/{name}")).ok_or_else(|| Error::Config(format!("checkpoint lacks {kind} `{name}`")))?;
            if r.dims != t.shape() {
                return Err(Error::shape("checkpoint", format!("`{name}` is {:?} in file, model expects {:?}", r.dims, t.shape())));
            }
            t.set_data(to_t(r))?;
            expected += 1;
        }
    }
    let stored = records.iter().filter(|r| r.name.starts_with("param/") || r.name.starts_with("buffer/")).count();
    if stored != expected {
        let known: std::collections::BTreeSet<String> = model
            .store()
            .params()
            .map(|(n, _)| format!("param/{n}"))
            .chain(model.store().buffers().map(|(n, _)| format!("buffer/{n}")))
            .collect();
        let extra = records
            .iter()
            .find(|r| (r.name.starts_with("param/") || r.name.starts_with("buffer/")) && !known.contains(&r.name))
            .map(|r| r.name.clone())
            .unwrap_or_default();
        return Err(Error::UnknownParameter(extra));
    }
    let steps = find("opt_steps").map_or(0, |r| r.values.first().copied().unwrap_or(0.0) as u64);
    for r in records.iter().filter(|r| r.name.starts_with("opt/")) {
        let rest = &r.name[4..];
        let (param, state) = rest
            .rsplit_once('/')
            .ok_or_else(|| Error::Config(format!("malformed optimizer record `{}`", r.name)))?;
        model.store_mut().restore_optimizer_state(param, state, to_t(r), steps)?;
    }
    Ok(model)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_records(&decode_records(&bytes, &path.display().to_string())?)
}
