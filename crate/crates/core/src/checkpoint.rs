//! Versioned binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic   b"HCONCKPT"
//! version u32
//! config  u32 length + UTF-8 `key = value` text of the training config
//! epoch   u64   epochs completed
//! step    u64   optimizer steps taken
//! adam_t  u64
//! m       f64   current EMA momentum
//! best    f64   best epoch-mean loss so far
//! count   u32   tensors
//! tensor  u16 name length, name, u8 rank, rank × u32 dims, f32 values
//! ```
//!
//! Tensor names are prefixed `q/`, `k/`, `adam_m/` and `adam_v/`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"HCONCKPT";
pub const VERSION: u32 = 1;

pub const QUERY: &str = "q/";
pub const KEY: &str = "k/";
pub const ADAM_M: &str = "adam_m/";
pub const ADAM_V: &str = "adam_v/";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: usize,
    pub global_step: usize,
    pub adam_t: usize,
    pub momentum: f64,
    pub best_loss: f64,
    pub tensors: BTreeMap<String, StoredTensor>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn new(config_text: String) -> Self {
        Self {
            config_text,
            epoch: 0,
            global_step: 0,
            adam_t: 0,
            momentum: 0.0,
            best_loss: f64::INFINITY,
            tensors: BTreeMap::new(),
        }
    }

    /// Copies every parameter of `store` under `prefix`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, var) in store.iter() {
            let values = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(candle_core::DType::F32)?
                .to_vec1::<f32>()?;
            self.tensors.insert(
                format!("{prefix}{name}"),
                StoredTensor {
                    dims: var.dims().to_vec(),
                    values,
                },
            );
        }
        Ok(())
    }

    /// Writes the `prefix` tensors into the same-named parameters of `store`.
    /// Every parameter must be present with a matching shape.
    pub fn load_store(&self, prefix: &str, store: &ParamStore) -> Result<()> {
        let expected = store.len();
        let found = self.tensors.keys().filter(|k| k.starts_with(prefix)).count();
        if found != expected {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint holds {found} `{prefix}` tensors, model has {expected}"
            )));
        }
        for (name, var) in store.iter() {
            let t = self
                .tensors
                .get(&format!("{prefix}{name}"))
                .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks {prefix}{name}")))?;
            if t.dims != var.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: {:?} vs {:?}",
                    t.dims,
                    var.dims()
                )));
            }
            let values: Vec<f64> = t.values.iter().map(|&v| v as f64).collect();
            store.set_values(name, &values)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
            self.write_to(&mut w).map_err(io)?;
            w.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_u32::<LE>(self.config_text.len() as u32)?;
        w.write_all(self.config_text.as_bytes())?;
        w.write_u64::<LE>(self.epoch as u64)?;
        w.write_u64::<LE>(self.global_step as u64)?;
        w.write_u64::<LE>(self.adam_t as u64)?;
        w.write_f64::<LE>(self.momentum)?;
        w.write_f64::<LE>(self.best_loss)?;
        w.write_u32::<LE>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.write_u16::<LE>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(t.dims.len() as u8)?;
            for &d in &t.dims {
                w.write_u32::<LE>(d as u32)?;
            }
            for &v in &t.values {
                w.write_f32::<LE>(v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        Self::read_from(&mut r).map_err(|e| match e {
            ReadErr::Io(e) => format_err(path, format!("truncated or unreadable: {e}")),
            ReadErr::Bad(m) => format_err(path, m),
        })
    }

    fn read_from<R: Read>(r: &mut R) -> std::result::Result<Self, ReadErr> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ReadErr::Bad("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LE>()?;
        if version != VERSION {
            return Err(ReadErr::Bad(format!("unsupported checkpoint version {version}")));
        }
        let config_text = read_string(r, r_len32)?;
        let epoch = r.read_u64::<LE>()? as usize;
        let global_step = r.read_u64::<LE>()? as usize;
        let adam_t = r.read_u64::<LE>()? as usize;
        let momentum = r.read_f64::<LE>()?;
        let best_loss = r.read_f64::<LE>()?;
        let count = r.read_u32::<LE>()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = read_string(r, r_len16)?;
            let rank = r.read_u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.read_u32::<LE>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut values = vec![0f32; n];
            r.read_f32_into::<LE>(&mut values)?;
            tensors.insert(name, StoredTensor { dims, values });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(ReadErr::Bad("trailing bytes after last tensor".into()));
        }
        Ok(Self {
            config_text,
            epoch,
            global_step,
            adam_t,
            momentum,
            best_loss,
            tensors,
        })
    }
}

enum ReadErr {
    Io(std::io::Error),
    Bad(String),
}

impl From<std::io::Error> for ReadErr {
    fn from(e: std::io::Error) -> Self {
        ReadErr::Io(e)
    }
}

fn r_len32<R: Read>(r: &mut R) -> std::io::Result<usize> {
    r.read_u32::<LE>().map(|v| v as usize)
}

fn r_len16<R: Read>(r: &mut R) -> std::io::Result<usize> {
    r.read_u16::<LE>().map(|v| v as usize)
}

fn read_string<R: Read>(r: &mut R, len: fn(&mut R) -> std::io::Result<usize>) -> std::result::Result<String, ReadErr> {
    let n = len(r)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| ReadErr::Bad("string is not UTF-8".into()))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new(DType::F32);
        store.insert("a.w", &[1.0, -2.5, 3.25, 0.0], &[2, 2]).unwrap();
        store.insert("b", &[7.0], &[1]).unwrap();
        let mut ck = Checkpoint::new("epochs = 3\n".into());
        ck.epoch = 2;
        ck.global_step = 17;
        ck.adam_t = 17;
        ck.momentum = 0.99;
        ck.best_loss = 1.5;
        ck.put_store(QUERY, &store).unwrap();
        let p = dir.path().join("x.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);

        let other = ParamStore::new(DType::F32);
        let mut other = other;
        other.insert("a.w", &[0.0; 4], &[2, 2]).unwrap();
        other.insert("b", &[0.0], &[1]).unwrap();
        back.load_store(QUERY, &other).unwrap();
        assert_eq!(other.values("a.w").unwrap(), vec![1.0, -2.5, 3.25, 0.0]);
        assert!(back.load_store(KEY, &other).is_err());

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format { .. })));
        std::fs::write(&p, b"garbage!garbage!").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format { .. })));
    }
}
