//! Frozen-encoder feature extraction and the per-slide feature files.
//!
//! File layout, little-endian:
//!
//! ```text
//! magic    b"HCONFEAT"
//! version  u32
//! slide_id u16 length + UTF-8
//! mode     u16 length + UTF-8
//! ckpt     u16 length + UTF-8 hex hash of the source checkpoint
//! dim      u32
//! n        u32
//! values   n × dim f32, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use candle_core::DType;

use crate::checkpoint::{file_hash, Checkpoint};
use crate::data::augment::FloatImage;
use crate::data::dataset::{write, Dataset};
use crate::encoder::{ExtractMode, StageEncoder};
use crate::error::{Error, Result};
use crate::trainer::{images_to_tensor, pair_from_checkpoint};

pub const MAGIC: &[u8; 8] = b"HCONFEAT";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "feat";
pub const SKIP_LIST: &str = "skipped.txt";
/// Patches encoded per forward pass.
pub const EXTRACT_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub slide_id: String,
    pub mode: String,
    pub checkpoint_hash: String,
    pub dim: usize,
    pub n: usize,
    pub values: Vec<f32>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u16::<LE>(s.len() as u16)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let n = r.read_u16::<LE>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

impl FeatureFile {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        (|| -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_u32::<LE>(VERSION)?;
            write_str(&mut w, &self.slide_id)?;
            write_str(&mut w, &self.mode)?;
            write_str(&mut w, &self.checkpoint_hash)?;
            w.write_u32::<LE>(self.dim as u32)?;
            w.write_u32::<LE>(self.n as u32)?;
            for &v in &self.values {
                w.write_f32::<LE>(v)?;
            }
            w.flush()
        })()
        .map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut magic = [0u8; 8];
        let header = (|| -> std::io::Result<_> {
            r.read_exact(&mut magic)?;
            let version = r.read_u32::<LE>()?;
            Ok(version)
        })()
        .map_err(|e| format_err(path, e.to_string()))?;
        if &magic != MAGIC {
            return Err(format_err(path, "not a feature file (bad magic)"));
        }
        if header != VERSION {
            return Err(format_err(path, format!("unsupported feature file version {header}")));
        }
        let out = (|| -> std::io::Result<_> {
            let slide_id = read_str(&mut r)?;
            let mode = read_str(&mut r)?;
            let checkpoint_hash = read_str(&mut r)?;
            let dim = r.read_u32::<LE>()? as usize;
            let n = r.read_u32::<LE>()? as usize;
            let mut values = vec![0f32; n * dim];
            r.read_f32_into::<LE>(&mut values)?;
            Ok(FeatureFile {
                slide_id,
                mode,
                checkpoint_hash,
                dim,
                n,
                values,
            })
        })()
        .map_err(|e| format_err(path, format!("truncated or unreadable: {e}")))?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
            return Err(format_err(path, "trailing bytes"));
        }
        Ok(out)
    }
}

/// Directory of feature files for one checkpoint and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub dir: PathBuf,
    pub mode: ExtractMode,
    pub dim: usize,
    pub checkpoint_hash: String,
    pub slides: Vec<String>,
    pub skipped: Vec<String>,
}

impl FeatureStore {
    pub fn path_for(dir: &Path, slide_id: &str) -> PathBuf {
        dir.join(format!("{slide_id}.{EXTENSION}"))
    }

    /// Scans a directory; every file must agree on mode, dimension and checkpoint.
    pub fn open(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == EXTENSION))
            .collect();
        paths.sort();
        let mut first: Option<FeatureFile> = None;
        let mut slides = Vec::new();
        for p in &paths {
            let f = FeatureFile::load(p)?;
            if let Some(h) = &first {
                if f.dim != h.dim {
                    return Err(Error::ModeMismatch(h.dim, f.dim));
                }
                if f.mode != h.mode || f.checkpoint_hash != h.checkpoint_hash {
                    return Err(format_err(p, "feature store mixes modes or checkpoints"));
                }
            }
            slides.push(f.slide_id.clone());
            if first.is_none() {
                first = Some(f);
            }
        }
        let head = first.ok_or_else(|| Error::Data(format!("no feature files in {}", dir.display())))?;
        let skip_path = dir.join(SKIP_LIST);
        let skipped = if skip_path.exists() {
            std::fs::read_to_string(&skip_path)
                .map_err(|e| Error::io(&skip_path, e))?
                .lines()
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            mode: head.mode.parse()?,
            dim: head.dim,
            checkpoint_hash: head.checkpoint_hash,
            slides,
            skipped,
        })
    }

    pub fn load(&self, slide_id: &str) -> Result<FeatureFile> {
        let f = FeatureFile::load(&Self::path_for(&self.dir, slide_id))?;
        if f.dim != self.dim {
            return Err(Error::ModeMismatch(self.dim, f.dim));
        }
        Ok(f)
    }
}

/// `(n, D)` features for a list of patches, in order.
pub fn encode_patches(encoder: &StageEncoder, patches: &[FloatImage], mode: ExtractMode) -> Result<(usize, Vec<f32>)> {
    let size = encoder.config().input_size;
    let mut values = Vec::new();
    let mut dim = 0;
    for chunk in patches.chunks(EXTRACT_BATCH) {
        let resized: Vec<FloatImage> = chunk.iter().map(|p| p.resize(size)).collect();
        let x = images_to_tensor(&resized, encoder.dtype())?;
        let f = encoder.extract_features(&x, mode)?;
        dim = f.dims()[1];
        values.extend(f.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
    }
    Ok((dim, values))
}

/// Writes one feature file per slide of `dataset` using the checkpoint's query encoder.
/// Slides without accepted patches are skipped and listed in `skipped.txt`.
pub fn extract_cohort_features(
    checkpoint: &Path,
    mode: ExtractMode,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<FeatureStore> {
    let hash = file_hash(checkpoint)?;
    let ck = Checkpoint::load(checkpoint)?;
    let (_, pair) = pair_from_checkpoint(&ck, DType::F32)?;
    let encoder = &pair.query.encoder;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut slides = Vec::new();
    let mut skipped = Vec::new();
    let mut dim = 0;
    for record in &dataset.slides {
        let patches = dataset.load_patches(record)?;
        if patches.is_empty() {
            log::warn!("slide {} has no accepted patches; skipped", record.slide_id);
            skipped.push(record.slide_id.clone());
            continue;
        }
        let images: Vec<FloatImage> = patches.iter().map(FloatImage::from_rgb).collect();
        let (d, values) = encode_patches(encoder, &images, mode)?;
        dim = d;
        FeatureFile {
            slide_id: record.slide_id.clone(),
            mode: mode.name().to_string(),
            checkpoint_hash: hash.clone(),
            dim: d,
            n: images.len(),
            values,
        }
        .save(&FeatureStore::path_for(out_dir, &record.slide_id))?;
        slides.push(record.slide_id.clone());
    }
    let mut skip_text = skipped.join("\n");
    if !skip_text.is_empty() {
        skip_text.push('\n');
    }
    write(&out_dir.join(SKIP_LIST), skip_text)?;
    if slides.is_empty() {
        return Err(Error::Data("no slide produced features".into()));
    }
    Ok(FeatureStore {
        dir: out_dir.to_path_buf(),
        mode,
        dim,
        checkpoint_hash: hash,
        slides,
        skipped,
    })
}
