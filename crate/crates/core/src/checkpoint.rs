//! Model checkpoints: one binary file holding the model configuration as
//! canonical key-value text plus every named parameter array.
//!
//! Layout (all integers little-endian u64, data f64 little-endian):
//!
//! ```text
//! magic   b"RDCK0001"
//! u64     config byte length, then that many UTF-8 bytes (model.* lines)
//! u64     parameter count
//! repeat  u64 name length | name bytes | u64 ndim | u64 dims... | f64 data
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;

const MAGIC: &[u8; 8] = b"RDCK0001";

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let cfg_text = RunConfig::model_flat_text(&model.cfg);
    buf.extend_from_slice(&(cfg_text.len() as u64).to_le_bytes());
    buf.extend_from_slice(cfg_text.as_bytes());
    let params = model.named_params();
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, p) in params {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Schema("checkpoint truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { data: &data, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Schema("not a checkpoint file (bad magic)".into()));
    }
    let cfg_len = r.u64()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Schema("config block is not UTF-8".into()))?;
    let cfg = RunConfig::model_from_flat_text(cfg_text)?;
    let mut model = Model::build(&cfg, 0)?;
    let n_params = r.u64()? as usize;
    let mut loaded: std::collections::HashMap<String, ArrayD<f64>> =
        std::collections::HashMap::new();
    for _ in 0..n_params {
        let name_len = r.u64()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Schema("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u64()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let count: usize = dims.iter().product();
        let bytes = r.take(count * 8)?;
        let mut values = Vec::with_capacity(count);
        for chunk in bytes.chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| Error::Schema(format!("parameter {name}: {e}")))?;
        loaded.insert(name, arr);
    }
    let mut params = model.named_params_mut();
    if params.len() != loaded.len() {
        return Err(Error::Schema(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            params.len()
        )));
    }
    for (name, p) in params.iter_mut() {
        let arr = loaded
            .remove(name)
            .ok_or_else(|| Error::Schema(format!("checkpoint missing parameter `{name}`")))?;
        if arr.shape() != p.value.shape() {
            return Err(Error::Schema(format!(
                "parameter `{name}` shape {:?} does not match model {:?}",
                arr.shape(),
                p.value.shape()
            )));
        }
        p.value = arr;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use ndarray::Array4;

    fn small_cfg() -> ModelConfig {
        ModelConfig { input_size: 64, stage_channels: vec![8, 16, 32], ..ModelConfig::default() }
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rdck");
        let model = Model::build(&small_cfg(), 11).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        for ((na, pa), (nb, pb)) in model.named_params().iter().zip(loaded.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.value, pb.value, "param {na}");
        }
        // identical forward behaviour
        let x = Array4::from_shape_fn((1, 3, 64, 64), |(_, c, i, j)| {
            ((c * 64 + i + j) % 7) as f64 * 0.05
        });
        let a = model.forward(&x).unwrap();
        let b = loaded.forward(&x).unwrap();
        for (sa, sb) in a.scales.iter().zip(b.scales.iter()) {
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn corrupted_magic_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rdck");
        std::fs::write(&path, b"NOTACKPT________").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Schema(_))));
    }
}
