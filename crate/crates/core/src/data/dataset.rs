//! On-disk dataset layout.
//!
//! ```text
//! <root>/slides.tsv                     slide index (one row per slide)
//! <root>/manifests/<slide_id>.tsv       tessellation grid with accept flags
//! <root>/patches/<slide_id>/<x>_<y>.png accepted patches, lossless
//! ```
//!
//! `slides.tsv` columns: `slide_id patient_id cohort mpp source` followed by
//! one `label:<target>` column per classification target. Manifests carry
//! `slide_id x y w h accepted` with coordinates in source pixels.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::tessellate::{PatchRect, SlideManifest};
use crate::error::{Error, Result};

pub const SLIDE_INDEX: &str = "slides.tsv";
const MANIFEST_HEADER: &str = "slide_id\tx\ty\tw\th\taccepted";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cohort {
    Internal,
    External,
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cohort::Internal => "internal",
            Cohort::External => "external",
        })
    }
}

impl FromStr for Cohort {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "internal" => Ok(Cohort::Internal),
            "external" => Ok(Cohort::External),
            other => Err(Error::Data(format!("unknown cohort `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideRecord {
    pub slide_id: String,
    pub patient_id: String,
    pub cohort: Cohort,
    pub mpp: f64,
    pub source: String,
    pub labels: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub slides: Vec<SlideRecord>,
    pub targets: Vec<String>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let index = root.join(SLIDE_INDEX);
        let text = read(&index)?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| format_err(&index, "empty slide index"))?
            .split('\t')
            .collect();
        if header.len() < 5 || header[..5] != ["slide_id", "patient_id", "cohort", "mpp", "source"] {
            return Err(format_err(&index, "unexpected slide index header"));
        }
        let targets: Vec<String> = header[5..]
            .iter()
            .map(|h| {
                h.strip_prefix("label:")
                    .map(str::to_string)
                    .ok_or_else(|| format_err(&index, format!("bad label column `{h}`")))
            })
            .collect::<Result<_>>()?;
        let mut slides = Vec::new();
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != header.len() {
                return Err(format_err(&index, format!("line {}: {} fields", ln + 2, f.len())));
            }
            let bad = |what: &str| format_err(&index, format!("line {}: bad {what}", ln + 2));
            let mut labels = BTreeMap::new();
            for (t, v) in targets.iter().zip(&f[5..]) {
                labels.insert(t.clone(), v.parse().map_err(|_| bad("label"))?);
            }
            slides.push(SlideRecord {
                slide_id: f[0].to_string(),
                patient_id: f[1].to_string(),
                cohort: f[2].parse()?,
                mpp: f[3].parse().map_err(|_| bad("mpp"))?,
                source: f[4].to_string(),
                labels,
            });
        }
        Ok(Self { root, slides, targets })
    }

    pub fn write_index(&self) -> Result<()> {
        let mut s = String::from("slide_id\tpatient_id\tcohort\tmpp\tsource");
        for t in &self.targets {
            s.push_str("\tlabel:");
            s.push_str(t);
        }
        s.push('\n');
        for r in &self.slides {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}",
                r.slide_id, r.patient_id, r.cohort, r.mpp, r.source
            ));
            for t in &self.targets {
                s.push_str(&format!("\t{}", r.labels.get(t).copied().unwrap_or(0)));
            }
            s.push('\n');
        }
        write(&self.root.join(SLIDE_INDEX), s)
    }

    pub fn manifest_path(&self, slide_id: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{slide_id}.tsv"))
    }

    pub fn patch_path(&self, slide_id: &str, rect: &PatchRect) -> PathBuf {
        self.root
            .join("patches")
            .join(slide_id)
            .join(format!("{}_{}.png", rect.x, rect.y))
    }

    pub fn slides_in(&self, cohort: Cohort) -> impl Iterator<Item = &SlideRecord> {
        self.slides.iter().filter(move |s| s.cohort == cohort)
    }

    pub fn manifest(&self, record: &SlideRecord) -> Result<SlideManifest> {
        let mut m = read_manifest(&self.manifest_path(&record.slide_id))?;
        m.source_path = record.source.clone();
        m.mpp_source = record.mpp;
        Ok(m)
    }

    /// Writes a manifest and its accepted patches (in manifest order).
    pub fn write_slide(&self, manifest: &SlideManifest, accepted: &[RgbImage]) -> Result<()> {
        write_manifest(&self.manifest_path(&manifest.slide_id), manifest)?;
        if accepted.len() != manifest.num_accepted() {
            return Err(Error::Data(format!(
                "{}: {} accepted patches but {} images",
                manifest.slide_id,
                manifest.num_accepted(),
                accepted.len()
            )));
        }
        for (rect, img) in manifest.accepted_patches().zip(accepted) {
            let path = self.patch_path(&manifest.slide_id, rect);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            img.save(&path)?;
        }
        Ok(())
    }

    pub fn load_patches(&self, record: &SlideRecord) -> Result<Vec<RgbImage>> {
        let m = self.manifest(record)?;
        m.accepted_patches()
            .map(|r| Ok(image::open(self.patch_path(&record.slide_id, r))?.to_rgb8()))
            .collect()
    }

    /// SHA-256 over the slide index, every manifest and every patch file.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        let index = self.root.join(SLIDE_INDEX);
        h.update(fs::read(&index).map_err(|e| Error::io(&index, e))?);
        for r in &self.slides {
            let mp = self.manifest_path(&r.slide_id);
            h.update(fs::read(&mp).map_err(|e| Error::io(&mp, e))?);
            for rect in self.manifest(r)?.accepted_patches() {
                let p = self.patch_path(&r.slide_id, rect);
                h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

pub fn write_manifest(path: &Path, m: &SlideManifest) -> Result<()> {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for (p, a) in m.patches.iter().zip(&m.accepted) {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            m.slide_id, p.x, p.y, p.w, p.h, *a as u8
        ));
    }
    write(path, s)
}

pub fn read_manifest(path: &Path) -> Result<SlideManifest> {
    let text = read(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(format_err(path, "unexpected manifest header"));
    }
    let mut slide_id = None;
    let mut patches = Vec::new();
    let mut accepted = Vec::new();
    for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || format_err(path, format!("line {}", ln + 2));
        if f.len() != 6 {
            return Err(bad());
        }
        slide_id.get_or_insert_with(|| f[0].to_string());
        let n = |i: usize| f[i].parse::<u32>().map_err(|_| bad());
        patches.push(PatchRect {
            x: n(1)?,
            y: n(2)?,
            w: n(3)?,
            h: n(4)?,
        });
        accepted.push(match f[5] {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        });
    }
    let slide_id = slide_id.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    Ok(SlideManifest {
        slide_id,
        source_path: String::new(),
        mpp_source: 0.0,
        patches,
        accepted,
    })
}

/// Slide-level sample of `⌈fraction·n⌉` ids without replacement.
///
/// Ids are ranked by a seeded shuffle of their sorted order, so for one seed
/// smaller fractions always pick a prefix of larger ones. Output keeps the
/// input order.
pub fn subsample_fraction(slide_ids: &[String], fraction: f64, seed: u64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let mut order: Vec<&String> = slide_ids.iter().collect();
    order.sort();
    order.dedup();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = ((fraction * order.len() as f64) - 1e-9).ceil() as usize;
    let chosen: std::collections::HashSet<&String> = order.into_iter().take(keep).collect();
    let out: Vec<String> = slide_ids.iter().filter(|s| chosen.contains(s)).cloned().collect();
    if out.is_empty() {
        return Err(Error::EmptyResult);
    }
    Ok(out)
}
