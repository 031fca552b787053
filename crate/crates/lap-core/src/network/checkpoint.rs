//! Model checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic  b"LAPCKPT1"
//! offset 8   u32    container version (currently 1)
//! offset 12  u64    header length in bytes
//! offset 20  JSON   header: architecture, seed, named parameter index,
//!                   batch-norm channel counts and hyperparameters
//! then       f64[]  parameter arrays in header order, then per BN layer
//!                   its running mean and running variance
//! ```
//!
//! The header names every array, so the payload is self-describing and the
//! format stays stable as long as entries are only appended.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Architecture, Model, ParamMeta};

const MAGIC: &[u8; 8] = b"LAPCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt header: {0}")]
    Header(String),
    #[error("payload mismatch: {0}")]
    Payload(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct BnHeader {
    channels: usize,
    momentum: f64,
    epsilon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: Architecture,
    seed: u64,
    params: Vec<ParamHeader>,
    bn: Vec<BnHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let header = Header {
        format_version: VERSION,
        arch: model.arch,
        seed: model.seed,
        params: model
            .metas()
            .iter()
            .enumerate()
            .map(|(i, m)| ParamHeader {
                name: m.name.clone(),
                shape: model.param_shape(i),
                trainable: m.trainable,
            })
            .collect(),
        bn: model
            .bn_states()
            .iter()
            .map(|s| BnHeader {
                channels: s.channels(),
                momentum: s.momentum,
                epsilon: s.epsilon,
            })
            .collect(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for i in 0..model.param_count() {
            for v in model.param_values(i) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for s in model.bn_states() {
            for v in s.running_mean.iter().chain(s.running_var.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })()
    .map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err(path))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(io_err(path))?;
    let header_len = u64::from_le_bytes(u64buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(io_err(path))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut model = Model::construct(header.arch, None, header.seed);
    if header.params.len() != model.param_count() {
        return Err(CheckpointError::Payload(format!(
            "architecture implies {} parameters, header lists {}",
            model.param_count(),
            header.params.len()
        )));
    }
    let mut read_f64s = |n: usize| -> Result<Vec<f64>, CheckpointError> {
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(io_err(path))?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    for i in 0..header.params.len() {
        let ph = &header.params[i];
        let expect: &ParamMeta = model.meta(i);
        if ph.name != expect.name || ph.shape != model.param_shape(i) {
            return Err(CheckpointError::Payload(format!(
                "parameter {i}: file has {} {:?}, architecture expects {} {:?}",
                ph.name,
                ph.shape,
                expect.name,
                model.param_shape(i)
            )));
        }
        let n: usize = ph.shape.iter().product();
        let values = read_f64s(n)?;
        model.param_values_mut(i).copy_from_slice(&values);
    }
    if header.bn.len() != model.bn_states().len() {
        return Err(CheckpointError::Payload(format!(
            "architecture implies {} BN layers, header lists {}",
            model.bn_states().len(),
            header.bn.len()
        )));
    }
    for (bi, bh) in header.bn.iter().enumerate() {
        let n = bh.channels;
        if model.bn_states()[bi].channels() != n {
            return Err(CheckpointError::Payload(format!(
                "BN layer {bi}: channel mismatch"
            )));
        }
        let mean = read_f64s(n)?;
        let var = read_f64s(n)?;
        let state = &mut model.bn_states_mut()[bi];
        state.running_mean = mean;
        state.running_var = var;
        state.momentum = bh.momentum;
        state.epsilon = bh.epsilon;
    }
    Ok(model)
}
