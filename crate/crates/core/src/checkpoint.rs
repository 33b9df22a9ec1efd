//! Checkpoint container: a text header of `key = value` lines followed by a
//! binary block of named little-endian `f64` tensors.
//!
//! ```text
//! advtext-checkpoint 1
//! vocab_size = 200
//! ...
//! ---
//! u32 count, then per tensor: u32 name_len, name, u32 ndim, u64 dims, f64 values
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Tensor;

const MAGIC: &str = "advtext-checkpoint 1";
const HEADER_END: &str = "---";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("header is missing {key:?}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value {raw:?} for {key:?}")))
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    /// Removes and returns every tensor whose name starts with `prefix`,
    /// with the prefix stripped.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, Tensor)> {
        let (hit, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.tensors)
            .into_iter()
            .partition(|(n, _)| n.starts_with(prefix));
        self.tensors = keep;
        hit.into_iter()
            .map(|(n, t)| (n[prefix.len()..].to_string(), t))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.header {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(HEADER_END);
        out.push('\n');
        let mut bytes = out.into_bytes();
        bytes.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut pos = 0;
        let mut first = true;
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Checkpoint("unterminated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
            pos += end + 1;
            if first {
                if line != MAGIC {
                    return Err(Error::Checkpoint(format!(
                        "not a checkpoint (starts {line:?})"
                    )));
                }
                first = false;
                continue;
            }
            if line == HEADER_END {
                break;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Checkpoint(format!("bad header line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }

        let mut r = Reader { bytes, pos };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated tensor block".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn write_model_config(ck: &mut Checkpoint, c: &ModelConfig) {
    ck.set("vocab_size", c.vocab_size);
    ck.set("embed_dim", c.embed_dim);
    ck.set("hidden_dim", c.hidden_dim);
    ck.set("num_classes", c.num_classes);
    ck.set("max_len", c.max_len);
    ck.set("reconstructor", c.reconstructor);
}

pub fn read_model_config(ck: &Checkpoint) -> Result<ModelConfig> {
    Ok(ModelConfig {
        vocab_size: ck.parse("vocab_size")?,
        embed_dim: ck.parse("embed_dim")?,
        hidden_dim: ck.parse("hidden_dim")?,
        num_classes: ck.parse("num_classes")?,
        max_len: ck.parse("max_len")?,
        reconstructor: ck.parse("reconstructor")?,
    })
}

pub fn model_checkpoint(params: &ModelParams) -> Checkpoint {
    let mut ck = Checkpoint::default();
    write_model_config(&mut ck, &params.config);
    for (name, t) in params.named() {
        ck.push(name, t.clone());
    }
    ck
}

/// Reads the parameters back from a checkpoint that may also carry other
/// (prefixed) tensors.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<ModelParams> {
    let config = read_model_config(ck)?;
    ModelParams::from_named(config, ck.tensors.clone())
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    model_checkpoint(params).save(path)
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}
