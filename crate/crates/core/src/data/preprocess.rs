//! Turns a directory of source images into a tessellated dataset.
//!
//! The input directory holds a `slides.tsv` in the dataset schema whose
//! `source` column names an image file relative to that directory and whose
//! `mpp` column gives the source resolution. An `mpp` of 0 marks the
//! resolution as unknown; such slides are skipped.

use std::path::Path;

use super::dataset::{Dataset, SlideRecord};
use super::tessellate::{tessellate_image, BackgroundParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PreprocessReport {
    pub dataset: Dataset,
    /// `(slide_id, reason)` for slides left out.
    pub skipped: Vec<(String, String)>,
}

pub fn preprocess(
    input: &Path,
    out: &Path,
    target_mpp: f64,
    patch_size: u32,
    params: &BackgroundParams,
) -> Result<PreprocessReport> {
    let source = Dataset::open(input)?;
    let mut dataset = Dataset {
        root: out.to_path_buf(),
        slides: Vec::new(),
        targets: source.targets.clone(),
    };
    let mut skipped = Vec::new();
    for record in &source.slides {
        let mpp = (record.mpp > 0.0).then_some(record.mpp);
        let path = input.join(&record.source);
        let outcome = image::open(&path)
            .map_err(Error::from)
            .and_then(|img| {
                tessellate_image(
                    &record.slide_id,
                    &path.to_string_lossy(),
                    &img.to_rgb8(),
                    mpp,
                    target_mpp,
                    patch_size,
                    params,
                )
            })
            .and_then(|(manifest, patches)| dataset.write_slide(&manifest, &patches).map(|_| manifest));
        match outcome {
            Ok(manifest) => {
                log::info!(
                    "{}: {} of {} patches accepted",
                    record.slide_id,
                    manifest.num_accepted(),
                    manifest.patches.len()
                );
                dataset.slides.push(SlideRecord {
                    source: path.to_string_lossy().into_owned(),
                    ..record.clone()
                });
            }
            Err(e @ (Error::UnknownMpp | Error::Image(_) | Error::Io { .. })) => {
                log::warn!("{}: skipped ({e})", record.slide_id);
                skipped.push((record.slide_id.clone(), e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    if dataset.slides.is_empty() {
        return Err(Error::Data(format!(
            "no slide in {} could be tessellated",
            input.display()
        )));
    }
    dataset.write_index()?;
    Ok(PreprocessReport { dataset, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn tessellates_and_skips_unknown_mpp() {
        let input = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let checker = RgbImage::from_fn(96, 64, |x, y| {
            if (x / 4 + y / 4) % 2 == 0 {
                Rgb([0, 0, 0])
            } else {
                Rgb([255, 255, 255])
            }
        });
        checker.save(input.path().join("a.png")).unwrap();
        checker.save(input.path().join("b.png")).unwrap();
        std::fs::write(
            input.path().join("slides.tsv"),
            "slide_id\tpatient_id\tcohort\tmpp\tsource\tlabel:t\nA\tP1\tinternal\t0.5\ta.png\t1\nB\tP2\tinternal\t0\tb.png\t0\n",
        )
        .unwrap();
        let r = preprocess(input.path(), out.path(), 0.5, 32, &BackgroundParams::default()).unwrap();
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.skipped[0].0, "B");
        let ds = Dataset::open(out.path()).unwrap();
        assert_eq!(ds.slides.len(), 1);
        assert_eq!(ds.load_patches(&ds.slides[0]).unwrap().len(), 6);
    }
}
