//! Slide rescaling, grid tessellation and edge-based background rejection.

use image::{imageops, GrayImage, RgbImage};

use crate::error::{Error, Result};

/// Patch rectangle in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideManifest {
    pub slide_id: String,
    pub source_path: String,
    pub mpp_source: f64,
    pub patches: Vec<PatchRect>,
    pub accepted: Vec<bool>,
}

impl SlideManifest {
    pub fn accepted_patches(&self) -> impl Iterator<Item = &PatchRect> {
        self.patches
            .iter()
            .zip(&self.accepted)
            .filter(|(_, a)| **a)
            .map(|(p, _)| p)
    }

    pub fn num_accepted(&self) -> usize {
        self.accepted.iter().filter(|a| **a).count()
    }
}

/// Thresholds for Canny-based background rejection (Gaussian σ is 1.4).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundParams {
    pub low_threshold: f32,
    pub high_threshold: f32,
    pub min_edge_fraction: f64,
}

impl Default for BackgroundParams {
    fn default() -> Self {
        Self {
            low_threshold: 40.0,
            high_threshold: 100.0,
            min_edge_fraction: 0.02,
        }
    }
}

/// Scale factor from source pixels to target-resolution pixels.
pub fn rescale_factor(mpp_source: Option<f64>, target_mpp: f64) -> Result<f64> {
    match mpp_source {
        Some(m) if m > 0.0 && m.is_finite() && target_mpp > 0.0 => Ok(m / target_mpp),
        _ => Err(Error::UnknownMpp),
    }
}

/// Non-overlapping `patch_size` grid over a `width × height` source image
/// after rescaling to `target_mpp`. Partial edge tiles are dropped.
/// Rectangles are reported in source pixels.
pub fn tessellate(
    width: u32,
    height: u32,
    mpp_source: Option<f64>,
    target_mpp: f64,
    patch_size: u32,
) -> Result<Vec<PatchRect>> {
    let scale = rescale_factor(mpp_source, target_mpp)?;
    if patch_size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let (rw, rh) = rescaled_dims(width, height, scale);
    let (nx, ny) = (rw / patch_size, rh / patch_size);
    let src = |v: u32| (v as f64 / scale).round() as u32;
    let mut out = Vec::with_capacity((nx * ny) as usize);
    for gy in 0..ny {
        for gx in 0..nx {
            let (x0, y0) = (src(gx * patch_size), src(gy * patch_size));
            let (x1, y1) = (src((gx + 1) * patch_size), src((gy + 1) * patch_size));
            out.push(PatchRect {
                x: x0,
                y: y0,
                w: x1.min(width) - x0,
                h: y1.min(height) - y0,
            });
        }
    }
    Ok(out)
}

fn rescaled_dims(width: u32, height: u32, scale: f64) -> (u32, u32) {
    (
        (width as f64 * scale).round() as u32,
        (height as f64 * scale).round() as u32,
    )
}

/// Fraction of pixels Canny marks as edges.
pub fn edge_fraction(patch: &RgbImage, params: &BackgroundParams) -> f64 {
    let gray: GrayImage = imageops::grayscale(patch);
    let edges = imageproc::edges::canny(&gray, params.low_threshold, params.high_threshold);
    let total = (edges.width() * edges.height()).max(1) as f64;
    edges.pixels().filter(|p| p.0[0] > 0).count() as f64 / total
}

/// Tissue test: accepted iff the Canny edge fraction reaches the minimum.
pub fn reject_background(patch: &RgbImage, params: &BackgroundParams) -> bool {
    edge_fraction(patch, params) >= params.min_edge_fraction
}

/// Rescales `image` to `target_mpp`, tiles it, and runs background rejection.
/// Returns the manifest and the accepted patches in manifest order.
pub fn tessellate_image(
    slide_id: &str,
    source_path: &str,
    image: &RgbImage,
    mpp_source: Option<f64>,
    target_mpp: f64,
    patch_size: u32,
    params: &BackgroundParams,
) -> Result<(SlideManifest, Vec<RgbImage>)> {
    let scale = rescale_factor(mpp_source, target_mpp)?;
    let rects = tessellate(image.width(), image.height(), mpp_source, target_mpp, patch_size)?;
    let (rw, rh) = rescaled_dims(image.width(), image.height(), scale);
    let resized;
    let scaled = if (rw, rh) == image.dimensions() {
        image
    } else {
        resized = imageops::resize(image, rw, rh, imageops::FilterType::Triangle);
        &resized
    };
    let nx = rw / patch_size;
    let mut accepted = Vec::with_capacity(rects.len());
    let mut patches = Vec::new();
    for i in 0..rects.len() as u32 {
        let (gx, gy) = (i % nx, i / nx);
        let tile = imageops::crop_imm(scaled, gx * patch_size, gy * patch_size, patch_size, patch_size).to_image();
        let keep = reject_background(&tile, params);
        accepted.push(keep);
        if keep {
            patches.push(tile);
        }
    }
    Ok((
        SlideManifest {
            slide_id: slide_id.to_string(),
            source_path: source_path.to_string(),
            mpp_source: mpp_source.unwrap_or_default(),
            patches: rects,
            accepted,
        },
        patches,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn tessellation_examples() {
        let r = tessellate(448, 448, Some(0.25), 0.5, 224).unwrap();
        assert_eq!(
            r,
            vec![PatchRect {
                x: 0,
                y: 0,
                w: 448,
                h: 448
            }]
        );
        let r = tessellate(224, 224, Some(0.5), 0.5, 224).unwrap();
        assert_eq!(
            r,
            vec![PatchRect {
                x: 0,
                y: 0,
                w: 224,
                h: 224
            }]
        );
        let r = tessellate(500, 224, Some(0.5), 0.5, 224).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[1].x, 224);
        assert!(r.iter().all(|p| p.x + p.w <= 448));
        assert!(matches!(tessellate(10, 10, None, 0.5, 4), Err(Error::UnknownMpp)));
        assert!(matches!(tessellate(10, 10, Some(0.0), 0.5, 4), Err(Error::UnknownMpp)));
    }

    #[test]
    fn white_rejected_checkerboard_accepted() {
        let p = BackgroundParams::default();
        let white = RgbImage::from_pixel(64, 64, Rgb([255, 255, 255]));
        assert!(!reject_background(&white, &p));
        let checker = RgbImage::from_fn(64, 64, |x, y| {
            if ((x / 8) + (y / 8)) % 2 == 0 {
                Rgb([0, 0, 0])
            } else {
                Rgb([255, 255, 255])
            }
        });
        assert!(reject_background(&checker, &p));
    }

    #[test]
    fn tessellate_image_crops_rescaled_tiles() {
        let img = RgbImage::from_fn(256, 128, |x, _| Rgb([(x % 256) as u8, 0, 0]));
        let (m, kept) = tessellate_image("s", "-", &img, Some(0.25), 0.5, 32, &BackgroundParams::default()).unwrap();
        assert_eq!(m.patches.len(), 4 * 2);
        assert_eq!(m.accepted.len(), 8);
        assert_eq!(kept.len(), m.num_accepted());
        assert_eq!(
            m.patches[1],
            PatchRect {
                x: 64,
                y: 0,
                w: 64,
                h: 64
            }
        );
    }
}
