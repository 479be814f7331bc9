//! Synthetic texture "slides" standing in for real whole-slide images.
//!
//! Every tissue tile is drawn from a class texture: a stained background with
//! faint stripes plus randomly placed dark "nuclei". Classes differ in
//! palette, nucleus density and size, and stripe frequency. Label-0 slides
//! contain only class-0 tissue; a slide with label `y > 0` has a fraction
//! `tumor_fraction` of its tissue tiles drawn from class `y`. Each slide also
//! gets near-white background tiles, which the Canny filter rejects.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{write, Cohort, Dataset, SlideRecord};
use super::tessellate::{tessellate_image, BackgroundParams};
use crate::error::{Error, Result};
use crate::kv::{render, KvFile};

pub const TARGET: &str = "tumor";
pub const SPEC_FILE: &str = "synth.cfg";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureParams {
    pub background: [f32; 3],
    pub nucleus: [f32; 3],
    /// Nuclei per 1000 px².
    pub density: f32,
    pub radius: (f32, f32),
    /// Stripe frequency band in cycles per pixel.
    pub stripe_freq: (f32, f32),
    pub stripe_amp: f32,
}

pub const TEXTURES: [TextureParams; 4] = [
    TextureParams {
        background: [0.94, 0.72, 0.82],
        nucleus: [0.58, 0.34, 0.62],
        density: 3.0,
        radius: (2.0, 3.5),
        stripe_freq: (0.03, 0.06),
        stripe_amp: 0.05,
    },
    TextureParams {
        background: [0.78, 0.55, 0.76],
        nucleus: [0.28, 0.12, 0.45],
        density: 8.0,
        radius: (3.0, 5.0),
        stripe_freq: (0.10, 0.20),
        stripe_amp: 0.05,
    },
    TextureParams {
        background: [0.90, 0.80, 0.68],
        nucleus: [0.42, 0.26, 0.22],
        density: 5.0,
        radius: (2.0, 4.0),
        stripe_freq: (0.06, 0.10),
        stripe_amp: 0.05,
    },
    TextureParams {
        background: [0.85, 0.85, 0.90],
        nucleus: [0.20, 0.22, 0.40],
        density: 6.0,
        radius: (1.5, 3.0),
        stripe_freq: (0.15, 0.25),
        stripe_amp: 0.05,
    },
];

const BACKGROUND_WHITE: f32 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasetSpec {
    /// Internal-cohort slides.
    pub num_slides: usize,
    pub external_slides: usize,
    pub classes: usize,
    /// Tissue tiles per slide.
    pub patches_per_slide: usize,
    pub patch_size: u32,
    /// Fraction of slides (per cohort) with a nonzero label.
    pub balance: f64,
    pub tumor_fraction: f64,
    /// Fraction of grid tiles that are background.
    pub background_fraction: f64,
    pub noise: f32,
    pub slides_per_patient: usize,
    /// Additive colour shift applied to the external cohort.
    pub external_shift: f32,
    /// Per-slide, per-channel stain offset drawn uniformly from `±stain_jitter`.
    pub stain_jitter: f32,
    pub mpp: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            num_slides: 40,
            external_slides: 20,
            classes: 2,
            patches_per_slide: 200,
            patch_size: 64,
            balance: 0.5,
            tumor_fraction: 0.3,
            background_fraction: 0.15,
            noise: 0.04,
            slides_per_patient: 1,
            external_shift: 0.02,
            stain_jitter: 0.06,
            mpp: 0.5,
            seed: 7,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn from_kv(mut kv: KvFile) -> Result<Self> {
        let mut s = Self::default();
        kv.set("num_slides", &mut s.num_slides)?;
        kv.set("external_slides", &mut s.external_slides)?;
        kv.set("classes", &mut s.classes)?;
        kv.set("patches_per_slide", &mut s.patches_per_slide)?;
        kv.set("patch_size", &mut s.patch_size)?;
        kv.set("balance", &mut s.balance)?;
        kv.set("tumor_fraction", &mut s.tumor_fraction)?;
        kv.set("background_fraction", &mut s.background_fraction)?;
        kv.set("noise", &mut s.noise)?;
        kv.set("slides_per_patient", &mut s.slides_per_patient)?;
        kv.set("external_shift", &mut s.external_shift)?;
        kv.set("stain_jitter", &mut s.stain_jitter)?;
        kv.set("mpp", &mut s.mpp)?;
        kv.set("seed", &mut s.seed)?;
        kv.finish()?;
        s.validate()?;
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(KvFile::read(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        render(&[
            ("num_slides", self.num_slides.to_string()),
            ("external_slides", self.external_slides.to_string()),
            ("classes", self.classes.to_string()),
            ("patches_per_slide", self.patches_per_slide.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("balance", self.balance.to_string()),
            ("tumor_fraction", self.tumor_fraction.to_string()),
            ("background_fraction", self.background_fraction.to_string()),
            ("noise", self.noise.to_string()),
            ("slides_per_patient", self.slides_per_patient.to_string()),
            ("external_shift", self.external_shift.to_string()),
            ("stain_jitter", self.stain_jitter.to_string()),
            ("mpp", self.mpp.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.classes < 2 || self.classes > TEXTURES.len() {
            return bad("classes must be between 2 and 4");
        }
        if self.num_slides == 0 || self.patches_per_slide == 0 || self.patch_size < 8 {
            return bad("need slides, patches and a patch size of at least 8");
        }
        if !(0.0..1.0).contains(&self.background_fraction)
            || !(0.0..=1.0).contains(&self.balance)
            || !(0.0..=1.0).contains(&self.tumor_fraction)
        {
            return bad("fractions out of range");
        }
        if self.slides_per_patient == 0 {
            return bad("slides_per_patient must be positive");
        }
        Ok(())
    }

    /// Grid side lengths `(cols, rows)` for one slide.
    pub fn grid(&self) -> (u32, u32) {
        let tiles = (self.patches_per_slide as f64 / (1.0 - self.background_fraction)).ceil() as u32;
        let cols = (tiles as f64).sqrt().ceil() as u32;
        (cols, tiles.div_ceil(cols))
    }
}

fn draw_tile(tex: &TextureParams, size: u32, noise: f32, shift: [f32; 3], rng: &mut ChaCha8Rng) -> RgbImage {
    let n = size as usize;
    let theta = rng.random_range(0.0..std::f32::consts::PI);
    let freq = rng.random_range(tex.stripe_freq.0..tex.stripe_freq.1);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let mut buf = vec![[0f32; 3]; n * n];
    for y in 0..n {
        for x in 0..n {
            let s = (std::f32::consts::TAU * freq * (x as f32 * dx + y as f32 * dy) + phase).sin();
            let px = &mut buf[y * n + x];
            for c in 0..3 {
                px[c] = tex.background[c] + shift[c] - tex.stripe_amp * (0.5 + 0.5 * s);
            }
        }
    }
    let area = (n * n) as f32;
    let mean = tex.density * area / 1000.0;
    let count = rng.random_range((mean * 0.8)..=(mean * 1.2)).round() as usize;
    for _ in 0..count {
        let cx = rng.random_range(0.0..n as f32);
        let cy = rng.random_range(0.0..n as f32);
        let r = rng.random_range(tex.radius.0..tex.radius.1);
        let shade = rng.random_range(0.9..1.1f32);
        let (x0, x1) = (
            (cx - r).floor().max(0.0) as usize,
            ((cx + r).ceil() as usize).min(n - 1),
        );
        let (y0, y1) = (
            (cy - r).floor().max(0.0) as usize,
            ((cy + r).ceil() as usize).min(n - 1),
        );
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                if d2 <= r * r {
                    let px = &mut buf[y * n + x];
                    for c in 0..3 {
                        px[c] = tex.nucleus[c] * shade + shift[c];
                    }
                }
            }
        }
    }
    RgbImage::from_fn(size, size, |x, y| {
        let px = buf[y as usize * n + x as usize];
        let mut out = [0u8; 3];
        for c in 0..3 {
            let v = px[c] + rng.random_range(-noise..=noise);
            out[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(out)
    })
}

fn draw_background(size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::from_fn(size, size, |_, _| {
        let v = BACKGROUND_WHITE + rng.random_range(-0.01..=0.01f32);
        let g = (v * 255.0).round() as u8;
        Rgb([g, g, g])
    })
}

/// One tissue tile of the given texture class.
pub fn texture_tile(class: usize, size: u32, noise: f32, rng: &mut ChaCha8Rng) -> RgbImage {
    draw_tile(&TEXTURES[class], size, noise, [0.0; 3], rng)
}

/// Renders a whole slide: tissue tiles of `label`'s composition plus background tiles.
pub fn render_slide(spec: &SyntheticDatasetSpec, label: usize, shift: f32, rng: &mut ChaCha8Rng) -> RgbImage {
    let (cols, rows) = spec.grid();
    let ps = spec.patch_size;
    let total = (cols * rows) as usize;
    let tissue = spec.patches_per_slide.min(total);
    let tumor = if label > 0 {
        (spec.tumor_fraction * tissue as f64).round() as usize
    } else {
        0
    };
    // tile kinds: None = background, Some(class)
    let mut kinds: Vec<Option<usize>> = (0..total)
        .map(|i| match i {
            i if i < tumor => Some(label),
            i if i < tissue => Some(0),
            _ => None,
        })
        .collect();
    kinds.shuffle(rng);
    let j = spec.stain_jitter;
    let stain: [f32; 3] = std::array::from_fn(|_| shift + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 });
    let mut slide = RgbImage::new(cols * ps, rows * ps);
    for (i, kind) in kinds.iter().enumerate() {
        let tile = match kind {
            Some(c) => draw_tile(&TEXTURES[*c], ps, spec.noise, stain, rng),
            None => draw_background(ps, rng),
        };
        let (gx, gy) = (i as u32 % cols, i as u32 / cols);
        image::imageops::replace(&mut slide, &tile, (gx * ps) as i64, (gy * ps) as i64);
    }
    slide
}

fn cohort_labels(n: usize, spec: &SyntheticDatasetSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let patients = n.div_ceil(spec.slides_per_patient);
    let positives = (spec.balance * patients as f64).round() as usize;
    let mut labels: Vec<usize> = (0..patients)
        .map(|i| if i < positives { 1 + i % (spec.classes - 1) } else { 0 })
        .collect();
    labels.shuffle(rng);
    labels
}

/// Generates the dataset under `out`: slide index, manifests, patches and a spec echo.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec, out: &Path) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut dataset = Dataset {
        root: out.to_path_buf(),
        slides: Vec::new(),
        targets: vec![TARGET.to_string()],
    };
    let params = BackgroundParams::default();
    for (cohort, n, prefix, shift) in [
        (Cohort::Internal, spec.num_slides, "I", 0.0),
        (Cohort::External, spec.external_slides, "X", spec.external_shift),
    ] {
        let labels = cohort_labels(n, spec, &mut rng);
        for i in 0..n {
            let patient = i / spec.slides_per_patient;
            let label = labels[patient];
            let slide_id = format!("{prefix}{i:04}");
            let mut slide_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let img = render_slide(spec, label, shift, &mut slide_rng);
            let (manifest, patches) =
                tessellate_image(&slide_id, "-", &img, Some(spec.mpp), spec.mpp, spec.patch_size, &params)?;
            dataset.write_slide(&manifest, &patches)?;
            dataset.slides.push(SlideRecord {
                slide_id,
                patient_id: format!("{prefix}P{patient:04}"),
                cohort,
                mpp: spec.mpp,
                source: "-".into(),
                labels: [(TARGET.to_string(), label)].into_iter().collect(),
            });
        }
    }
    dataset.write_index()?;
    write(&out.join(SPEC_FILE), spec.to_kv_string())?;
    Ok(dataset)
}

/// Fisher ratio `(μ0 − μ1)² / (σ0² + σ1²)` of per-tile mean intensity between two texture classes.
pub fn fisher_separation(a: &[RgbImage], b: &[RgbImage]) -> f64 {
    let stats = |tiles: &[RgbImage]| {
        let means: Vec<f64> = tiles
            .iter()
            .map(|t| t.as_raw().iter().map(|&v| v as f64).sum::<f64>() / t.as_raw().len() as f64)
            .collect();
        let mu = means.iter().sum::<f64>() / means.len() as f64;
        let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / means.len() as f64;
        (mu, var)
    };
    let (m0, v0) = stats(a);
    let (m1, v1) = stats(b);
    (m0 - m1).powi(2) / (v0 + v1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tessellate::reject_background;

    #[test]
    fn tissue_accepted_background_and_faded_rejected() {
        let p = BackgroundParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for class in 0..4 {
            for _ in 0..10 {
                let t = texture_tile(class, 64, 0.04, &mut rng);
                assert!(reject_background(&t, &p), "class {class} tile rejected");
                let faded = RgbImage::from_fn(64, 64, |x, y| {
                    let px = t.get_pixel(x, y).0;
                    Rgb(px.map(|v| (0.05 * v as f32 + 0.95 * 255.0).round() as u8))
                });
                assert!(!reject_background(&faded, &p), "class {class} faded tile accepted");
            }
        }
        for _ in 0..10 {
            assert!(!reject_background(&draw_background(64, &mut rng), &p));
        }
    }

    #[test]
    fn class_textures_are_separable() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<_> = (0..50).map(|_| texture_tile(0, 64, 0.04, &mut rng)).collect();
        let b: Vec<_> = (0..50).map(|_| texture_tile(1, 64, 0.04, &mut rng)).collect();
        assert!(fisher_separation(&a, &b) > 1.0);
    }

    #[test]
    fn label_balance() {
        let spec = SyntheticDatasetSpec {
            num_slides: 20,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels = cohort_labels(20, &spec, &mut rng);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 10);
    }

    #[test]
    fn spec_kv_round_trip() {
        let spec = SyntheticDatasetSpec {
            num_slides: 12,
            seed: 99,
            ..Default::default()
        };
        let back = SyntheticDatasetSpec::from_kv(KvFile::parse("x", &spec.to_kv_string()).unwrap()).unwrap();
        assert_eq!(back, spec);
        assert!(SyntheticDatasetSpec::from_kv(KvFile::parse("x", "bogus = 1").unwrap()).is_err());
    }
}
