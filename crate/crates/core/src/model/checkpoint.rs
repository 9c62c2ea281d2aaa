//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "NAWV1"
//! u32 parameter count
//! per parameter: u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
//!                numel x f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, ModelError, Result};
use crate::tensor::{ParamStore, Parameter, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"NAWV1";

/// Prefix for parameters that live outside the model (the trainable loss weight).
const EXTRA_PREFIX: &str = "loss.";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn u32_of(n: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| ModelError::Checkpoint(format!("{what} {n} does not fit in u32")))
}

pub fn write_checkpoint<'a, W: Write>(
    mut w: W,
    params: impl IntoIterator<Item = &'a Parameter>,
) -> std::io::Result<()> {
    let params: Vec<&Parameter> = params.into_iter().collect();
    let enc = |e: ModelError| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string());
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&u32_of(params.len(), "parameter count").map_err(enc)?)?;
    for p in params {
        let name = p.name().as_bytes();
        w.write_all(&u32_of(name.len(), "name length").map_err(enc)?)?;
        w.write_all(name)?;
        let shape = p.value().shape();
        w.write_all(&u32_of(shape.len(), "rank").map_err(enc)?)?;
        for &d in shape {
            w.write_all(&u32_of(d, "dimension").map_err(enc)?)?;
        }
        for v in p.value().data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| ModelError::Checkpoint(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|e| ModelError::Checkpoint(format!("truncated header: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| ModelError::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| ModelError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)
            .map_err(|e| ModelError::Checkpoint(format!("truncated data for `{name}`: {e}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(Parameter::new(name, Tensor::new(shape, data)?))?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| ModelError::Checkpoint(e.to_string()))? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok(store)
}

/// Writes the model parameters followed by any `extra` (loss-weight) parameters.
pub fn save_checkpoint(path: &Path, model: &Model, extra: &ParamStore) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    write_checkpoint(BufWriter::new(file), model.params().iter().chain(extra.iter()))
        .map_err(io_err(path))
}

/// Loads a checkpoint, validating names and shapes against `config`.
/// Returns the model and any trailing loss-weight parameters.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<(Model, ParamStore)> {
    let file = File::open(path).map_err(io_err(path))?;
    let all = read_checkpoint(BufReader::new(file))?;
    let n_model = Model::layout(config).len();
    if all.len() < n_model {
        return Err(ModelError::Checkpoint(format!(
            "{} parameters in file, config needs {n_model}",
            all.len()
        )));
    }
    let mut model_params = ParamStore::new();
    let mut extra = ParamStore::new();
    for (i, p) in all.iter().enumerate() {
        if i < n_model {
            model_params.insert(p.clone())?;
        } else if p.name().starts_with(EXTRA_PREFIX) {
            extra.insert(p.clone())?;
        } else {
            return Err(ModelError::Checkpoint(format!(
                "unexpected parameter `{}` for this config",
                p.name()
            )));
        }
    }
    Ok((Model::from_params(config.clone(), model_params)?, extra))
}
