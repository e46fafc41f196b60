//! Single-file checkpoint: magic, format version, a JSON config header and
//! named tensors stored as little-endian f32.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{NnlmConfig, NnlmError, NnlmModel};

const MAGIC: &[u8; 4] = b"NNLM";
const VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> NnlmError {
    NnlmError::Checkpoint(msg.into())
}

pub fn save_checkpoint(model: &NnlmModel, path: impl AsRef<Path>) -> Result<(), NnlmError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(model.config()).map_err(|e| corrupt(e.to_string()))?;
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, p) in model.parameters() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(p.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(p.ncols() as u32).to_le_bytes());
        for &x in p.iter() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NnlmError> {
        if self.0.len() < n {
            return Err(corrupt("truncated file"));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, NnlmError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NnlmModel, NnlmError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader(&bytes);
    if r.take(4)? != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let config: NnlmConfig = serde_json::from_slice(r.take(hlen)?).map_err(|e| corrupt(e.to_string()))?;
    config.validate()?;
    let expected = config.shapes();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(corrupt(format!("expected {} tensors, found {count}", expected.len())));
    }
    let mut names = Vec::with_capacity(count);
    let mut params = Vec::with_capacity(count);
    for (want_name, want_shape) in expected {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| corrupt("tensor name not UTF-8"))?;
        let shape = (r.u32()? as usize, r.u32()? as usize);
        if name != want_name || shape != want_shape {
            return Err(corrupt(format!("tensor `{name}` {shape:?} where `{want_name}` {want_shape:?} expected")));
        }
        let data = r.take(shape.0 * shape.1 * 4)?;
        let values = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.push(Array2::from_shape_vec(shape, values).expect("shape matches length"));
        names.push(name);
    }
    if !r.0.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(NnlmModel::from_parts(config, names, params))
}
