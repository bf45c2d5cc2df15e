//! Binary checkpoints: magic, version, JSON header, named f64 tensors.
//!
//! Layout (little endian): `HMCK` · u32 version · u32 header length · header
//! JSON · u32 tensor count · per tensor { u32 name length · name · u32 rows ·
//! u32 cols · rows·cols f64 }.

use super::config::ModelConfig;
use super::model::HierModel;
use super::optim::AdamW;
use super::ModelError;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"HMCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    optimizer: Option<AdamW>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: HierModel,
    pub optimizer: Option<AdamW>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), ModelError> {
    let v = u32::try_from(v).map_err(|_| ModelError::Checkpoint("field exceeds u32".into()))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Array2<f64>) -> Result<(), ModelError> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.nrows())?;
    put_u32(out, t.ncols())?;
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn to_bytes(model: &HierModel, optimizer: Option<&AdamW>) -> Result<Vec<u8>, ModelError> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        optimizer: optimizer.cloned(),
    })
    .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    let mut tensors: Vec<(String, &Array2<f64>)> = model.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    if let Some(opt) = optimizer {
        for (i, (name, _)) in model.params.iter().enumerate() {
            if let Some(m) = opt.m.get(i).and_then(Option::as_ref) {
                tensors.push((format!("adam.m/{name}"), m));
            }
            if let Some(v) = opt.v.get(i).and_then(Option::as_ref) {
                tensors.push((format!("adam.v/{name}"), v));
            }
        }
    }
    put_u32(&mut out, tensors.len())?;
    for (n, t) in &tensors {
        put_tensor(&mut out, n, t)?;
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        if self.buf.len() - self.at < n {
            return Err(ModelError::Checkpoint(format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint, ModelError> {
    let mut r = Reader { buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let hl = r.u32()?;
    let header: Header =
        serde_json::from_slice(r.take(hl)?).map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    let mut model = HierModel::new(header.config)?;
    let mut optimizer = header.optimizer;
    if let Some(o) = optimizer.as_mut() {
        o.m = vec![None; model.params.len()];
        o.v = vec![None; model.params.len()];
    }
    let count = r.u32()?;
    let mut seen = 0;
    for _ in 0..count {
        let nl = r.u32()?;
        let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|_| ModelError::Checkpoint("tensor name".into()))?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        let data = r.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| {
            ModelError::Checkpoint(format!("tensor {name} too large"))
        })?)?;
        let vals: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Array2::from_shape_vec((rows, cols), vals).expect("shape matches length");
        let (slot, base) = match name.split_once('/') {
            Some(("adam.m", b)) => (Some(0), b),
            Some(("adam.v", b)) => (Some(1), b),
            _ => (None, name.as_str()),
        };
        let idx = model
            .params
            .find(base)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown tensor {name}")))?;
        if model.params.value(idx).dim() != t.dim() {
            return Err(ModelError::Checkpoint(format!("tensor {name} has shape {:?}", t.dim())));
        }
        match (slot, optimizer.as_mut()) {
            (None, _) => {
                *model.params.value_mut(idx) = t;
                seen += 1;
            }
            (Some(0), Some(o)) => o.m[idx] = Some(t),
            (Some(_), Some(o)) => o.v[idx] = Some(t),
            (Some(_), None) => return Err(ModelError::Checkpoint("optimizer state without header".into())),
        }
    }
    if seen != model.params.len() {
        return Err(ModelError::Checkpoint(format!(
            "{seen} of {} parameters present",
            model.params.len()
        )));
    }
    Ok(Checkpoint { model, optimizer })
}

pub fn save_checkpoint(path: &Path, model: &HierModel, optimizer: Option<&AdamW>) -> Result<(), ModelError> {
    std::fs::write(path, to_bytes(model, optimizer)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    from_bytes(&std::fs::read(path)?)
}

