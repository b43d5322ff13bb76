//! `ADVD` model files.
//!
//! Layout (little endian): magic `ADVD`, version `u32`, descriptor as `u32`
//! length + UTF-8 JSON (`architecture`, `seed`, `epochs_trained`), tensor
//! count `u32`, then per parameter tensor its rank `u32`, extents `u32` each
//! and values as `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{put_f64s, put_u32, read, write_atomic, Cursor};
use crate::error::{Error, Result};
use crate::network::{ArchitectureSpec, Model};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ADVD";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    architecture: ArchitectureSpec,
    seed: u64,
    epochs_trained: usize,
}

pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let descriptor = serde_json::to_string(&Descriptor {
        architecture: model.spec().clone(),
        seed: model.seed,
        epochs_trained: model.epochs_trained,
    })?;
    let mut out = Vec::with_capacity(16 + descriptor.len() + model.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, descriptor.len())?;
    out.extend_from_slice(descriptor.as_bytes());
    put_u32(&mut out, model.params().len())?;
    for p in model.params() {
        put_u32(&mut out, p.shape().len())?;
        for &e in p.shape() {
            put_u32(&mut out, e)?;
        }
        put_f64s(&mut out, p.data());
    }
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let bad = |detail: String| Error::Format { what: "model file", detail };
    let mut cur = Cursor::new(bytes, "model file");
    if cur.take(4)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = cur.u32()? as usize;
    let descriptor: Descriptor = serde_json::from_slice(cur.take(len)?)?;
    let count = cur.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = cur.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| cur.u32().map(|e| e as usize)).collect::<Result<_>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| bad("tensor too large".into()))?;
        params.push(Tensor::new(shape, cur.f64s(n)?)?);
    }
    cur.finish()?;
    Model::from_parts(descriptor.architecture, params, descriptor.seed, descriptor.epochs_trained)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &model_to_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<Model> {
    model_from_bytes(&read(path)?)
}
