//! Versioned binary checkpoint container.
//!
//! A checkpoint is a config hash plus named binary sections (parameters,
//! optimizer moments, RNG positions, counters). Files are written to a
//! temporary sibling and renamed into place so an interrupted save never
//! leaves a truncated checkpoint behind.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::CoreError;
use crate::nn::ParamStore;
use crate::optimizer::Adam;
use crate::rng::RngState;

const MAGIC: &[u8; 4] = b"GVCK";
const VERSION: u32 = 1;

/// In-memory checkpoint: a config hash and ordered named sections.
#[derive(Debug)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    sections: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32]) -> Self {
        Checkpoint {
            config_hash,
            sections: Vec::new(),
        }
    }

    /// Add or replace a section.
    pub fn insert(&mut self, name: &str, payload: Vec<u8>) {
        if let Some(slot) = self.sections.iter_mut().find(|(n, _)| n == name) {
            slot.1 = payload;
        } else {
            self.sections.push((name.to_string(), payload));
        }
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[u8], CoreError> {
        self.get(name)
            .ok_or_else(|| CoreError::format(format!("missing checkpoint section {name:?}")))
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.extend_from_slice(&self.config_hash);
        out.write_u32::<LittleEndian>(self.sections.len() as u32).unwrap();
        for (name, payload) in &self.sections {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u64::<LittleEndian>(payload.len() as u64).unwrap();
            out.extend_from_slice(payload);
        }
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self, CoreError> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt_err)?;
        if &magic != MAGIC {
            return Err(CoreError::format("not a checkpoint file (bad magic)"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt_err)?;
        if version != VERSION {
            return Err(CoreError::format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash).map_err(fmt_err)?;
        let n = r.read_u32::<LittleEndian>().map_err(fmt_err)?;
        let mut sections = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name_len = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(fmt_err)?;
            let name = String::from_utf8(name)
                .map_err(|_| CoreError::format("section name is not utf-8"))?;
            let payload_len = r.read_u64::<LittleEndian>().map_err(fmt_err)? as usize;
            let mut payload = vec![0u8; payload_len];
            r.read_exact(&mut payload).map_err(fmt_err)?;
            sections.push((name, payload));
        }
        Ok(Checkpoint {
            config_hash,
            sections,
        })
    }

    /// Serialize to `path` atomically (temp file + rename).
    pub fn write_atomic(&self, path: &Path) -> Result<(), CoreError> {
        let bytes = self.encode();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| CoreError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, CoreError> {
        let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn fmt_err(e: std::io::Error) -> CoreError {
    CoreError::format(format!("truncated checkpoint: {e}"))
}

// ---- section payload encodings ----

fn write_tensor(out: &mut Vec<u8>, t: &ArrayD<f32>) {
    out.write_u32::<LittleEndian>(t.ndim() as u32).unwrap();
    for &d in t.shape() {
        out.write_u64::<LittleEndian>(d as u64).unwrap();
    }
    for &x in t.iter() {
        out.write_f32::<LittleEndian>(x).unwrap();
    }
}

fn read_tensor(r: &mut Cursor<&[u8]>) -> Result<ArrayD<f32>, CoreError> {
    let ndim = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u64::<LittleEndian>().map_err(fmt_err)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.read_f32::<LittleEndian>().map_err(fmt_err)?);
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| CoreError::format(format!("bad tensor shape: {e}")))
}

/// A single tensor as a stand-alone section payload.
pub fn encode_tensor_section(t: &ArrayD<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, t);
    out
}

pub fn decode_tensor_section(bytes: &[u8]) -> Result<ArrayD<f32>, CoreError> {
    read_tensor(&mut Cursor::new(bytes))
}

/// Parameters: names, shapes and values.
pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.write_u32::<LittleEndian>(store.len() as u32).unwrap();
    for (name, value) in store.iter() {
        out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        out.extend_from_slice(name.as_bytes());
        write_tensor(&mut out, value);
    }
    out
}

/// Restore parameter values into a store built with the same architecture.
/// Names and shapes must match exactly.
pub fn decode_params_into(bytes: &[u8], store: &mut ParamStore) -> Result<(), CoreError> {
    let mut r = Cursor::new(bytes);
    let n = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
    if n != store.len() {
        return Err(CoreError::format(format!(
            "checkpoint has {n} parameters, model expects {}",
            store.len()
        )));
    }
    let mut values = Vec::with_capacity(n);
    let expected: Vec<(String, Vec<usize>)> = store
        .iter()
        .map(|(name, v)| (name.to_string(), v.shape().to_vec()))
        .collect();
    for (name, shape) in &expected {
        let name_len = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
        let mut got = vec![0u8; name_len];
        r.read_exact(&mut got).map_err(fmt_err)?;
        let got = String::from_utf8(got)
            .map_err(|_| CoreError::format("parameter name is not utf-8"))?;
        if &got != name {
            return Err(CoreError::format(format!(
                "parameter name mismatch: checkpoint {got:?}, model {name:?}"
            )));
        }
        let t = read_tensor(&mut r)?;
        if t.shape() != shape.as_slice() {
            return Err(CoreError::format(format!(
                "parameter {name:?} shape mismatch: checkpoint {:?}, model {:?}",
                t.shape(),
                shape
            )));
        }
        values.push(t);
    }
    store.restore_values(values);
    Ok(())
}

/// Optimizer state: step counter plus first/second moments.
pub fn encode_adam(opt: &Adam) -> Vec<u8> {
    let mut out = Vec::new();
    out.write_u64::<LittleEndian>(opt.t()).unwrap();
    let (m, v) = opt.moments();
    out.write_u32::<LittleEndian>(m.len() as u32).unwrap();
    for t in m.iter().chain(v.iter()) {
        write_tensor(&mut out, t);
    }
    out
}

pub fn decode_adam_into(bytes: &[u8], opt: &mut Adam) -> Result<(), CoreError> {
    let mut r = Cursor::new(bytes);
    let t = r.read_u64::<LittleEndian>().map_err(fmt_err)?;
    let n = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        m.push(read_tensor(&mut r)?);
    }
    for _ in 0..n {
        v.push(read_tensor(&mut r)?);
    }
    opt.restore(t, m, v);
    Ok(())
}

/// RNG position: seed, stream and word position.
pub fn encode_rng(state: &RngState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&state.seed);
    out.write_u64::<LittleEndian>(state.stream).unwrap();
    out.write_u128::<LittleEndian>(state.word_pos).unwrap();
    out
}

pub fn decode_rng(bytes: &[u8]) -> Result<RngState, CoreError> {
    let mut r = Cursor::new(bytes);
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed).map_err(fmt_err)?;
    let stream = r.read_u64::<LittleEndian>().map_err(fmt_err)?;
    let word_pos = r.read_u128::<LittleEndian>().map_err(fmt_err)?;
    Ok(RngState {
        seed,
        stream,
        word_pos,
    })
}

/// Little-endian u64 sequence (iteration counters and similar).
pub fn encode_u64s(values: &[u64]) -> Vec<u8> {
    let mut out = Vec::new();
    for &v in values {
        out.write_u64::<LittleEndian>(v).unwrap();
    }
    out
}

pub fn decode_u64s(bytes: &[u8], count: usize) -> Result<Vec<u64>, CoreError> {
    let mut r = Cursor::new(bytes);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(r.read_u64::<LittleEndian>().map_err(fmt_err)?);
    }
    Ok(out)
}
