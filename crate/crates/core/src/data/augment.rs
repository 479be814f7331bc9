//! Stochastic two-view augmentation on float RGB images.

use image::RgbImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Interleaved RGB, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn from_rgb(img: &RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    fn px(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Appends the image in planar CHW order.
    pub fn write_chw(&self, out: &mut Vec<f32>) {
        for c in 0..3 {
            out.extend(self.data.iter().skip(c).step_by(3));
        }
    }

    /// Bilinear resample of the window `(x0, y0, w, h)` (float source
    /// coordinates) to `size × size`, sampling at pixel centres.
    pub fn crop_resize(&self, x0: f32, y0: f32, w: f32, h: f32, size: usize) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        let sx = w / size as f32;
        let sy = h / size as f32;
        for oy in 0..size {
            let fy = (y0 + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y_lo = fy.floor() as usize;
            let y_hi = (y_lo + 1).min(self.height - 1);
            let ty = fy - y_lo as f32;
            for ox in 0..size {
                let fx = (x0 + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x_lo = fx.floor() as usize;
                let x_hi = (x_lo + 1).min(self.width - 1);
                let tx = fx - x_lo as f32;
                for c in 0..3 {
                    let top = self.px(x_lo, y_lo, c) * (1.0 - tx) + self.px(x_hi, y_lo, c) * tx;
                    let bot = self.px(x_lo, y_hi, c) * (1.0 - tx) + self.px(x_hi, y_hi, c) * tx;
                    data.push(top * (1.0 - ty) + bot * ty);
                }
            }
        }
        Self {
            width: size,
            height: size,
            data,
        }
    }

    /// Whole image resized to `size × size`; the identity when already that size.
    pub fn resize(&self, size: usize) -> Self {
        if self.width == size && self.height == size {
            return self.clone();
        }
        self.crop_resize(0.0, 0.0, self.width as f32, self.height as f32, size)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = (y * self.width + x) * 3;
                data.extend_from_slice(&self.data[i..i + 3]);
            }
        }
        Self { data, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugOp {
    /// Crop covering a random area fraction in `scale` with aspect ratio in `ratio`.
    RandomResizedCrop {
        p: f64,
        scale: (f64, f64),
        ratio: (f64, f64),
    },
    HorizontalFlip {
        p: f64,
    },
    ColorJitter {
        p: f64,
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
    },
    Grayscale {
        p: f64,
    },
    GaussianBlur {
        p: f64,
        sigma: (f64, f64),
    },
    Solarize {
        p: f64,
        threshold: f32,
    },
}

impl AugOp {
    fn probability(&self) -> f64 {
        match *self {
            AugOp::RandomResizedCrop { p, .. }
            | AugOp::HorizontalFlip { p }
            | AugOp::ColorJitter { p, .. }
            | AugOp::Grayscale { p }
            | AugOp::GaussianBlur { p, .. }
            | AugOp::Solarize { p, .. } => p,
        }
    }
}

/// Ordered augmentation ops; output images are `out_size × out_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub ops: Vec<AugOp>,
    pub out_size: usize,
}

impl AugmentationPolicy {
    /// The usual MoCo-v3 recipe with magnitudes halved for small images.
    pub fn desk(out_size: usize) -> Self {
        Self {
            ops: vec![
                AugOp::RandomResizedCrop {
                    p: 1.0,
                    scale: (0.54, 1.0),
                    ratio: (3.0 / 4.0, 4.0 / 3.0),
                },
                AugOp::ColorJitter {
                    p: 0.8,
                    brightness: 0.2,
                    contrast: 0.2,
                    saturation: 0.1,
                    hue: 0.05,
                },
                AugOp::Grayscale { p: 0.2 },
                AugOp::GaussianBlur {
                    p: 0.5,
                    sigma: (0.1, 1.0),
                },
                AugOp::Solarize { p: 0.1, threshold: 0.5 },
                AugOp::HorizontalFlip { p: 0.5 },
            ],
            out_size,
        }
    }

    /// Resize only.
    pub fn identity(out_size: usize) -> Self {
        Self {
            ops: Vec::new(),
            out_size,
        }
    }

    pub fn apply(&self, img: &FloatImage, rng: &mut ChaCha8Rng) -> FloatImage {
        let mut cropped = false;
        let mut out = img.clone();
        for op in &self.ops {
            // draw unconditionally so each op consumes a fixed amount of randomness
            let fire = rng.random::<f64>() < op.probability();
            match *op {
                AugOp::RandomResizedCrop { scale, ratio, .. } => {
                    let (x0, y0, w, h) = sample_crop(img.width, img.height, scale, ratio, rng);
                    if fire {
                        out = out.crop_resize(x0, y0, w, h, self.out_size);
                        cropped = true;
                    }
                }
                AugOp::HorizontalFlip { .. } => {
                    if fire {
                        out = out.flip_horizontal();
                    }
                }
                AugOp::ColorJitter {
                    brightness,
                    contrast,
                    saturation,
                    hue,
                    ..
                } => {
                    let b = 1.0 + rng.random_range(-brightness..=brightness) as f32;
                    let c = 1.0 + rng.random_range(-contrast..=contrast) as f32;
                    let s = 1.0 + rng.random_range(-saturation..=saturation) as f32;
                    let h = rng.random_range(-hue..=hue) as f32;
                    if fire {
                        color_jitter(&mut out, b, c, s, h);
                    }
                }
                AugOp::Grayscale { .. } => {
                    if fire {
                        for px in out.data.chunks_exact_mut(3) {
                            let l = luma(px);
                            px.fill(l);
                        }
                    }
                }
                AugOp::GaussianBlur { sigma, .. } => {
                    let s = rng.random_range(sigma.0..=sigma.1) as f32;
                    if fire {
                        out = gaussian_blur(&out, s);
                    }
                }
                AugOp::Solarize { threshold, .. } => {
                    if fire {
                        for v in &mut out.data {
                            if *v >= threshold {
                                *v = 1.0 - *v;
                            }
                        }
                    }
                }
            }
        }
        if !cropped {
            out = out.resize(self.out_size);
        }
        out
    }
}

fn sample_crop(w: usize, h: usize, scale: (f64, f64), ratio: (f64, f64), rng: &mut ChaCha8Rng) -> (f32, f32, f32, f32) {
    let area = (w * h) as f64;
    let target = area * rng.random_range(scale.0..=scale.1);
    let log_r = rng.random_range(ratio.0.ln()..=ratio.1.ln());
    let aspect = log_r.exp();
    let cw = (target * aspect).sqrt().min(w as f64);
    let ch = (target / aspect).sqrt().min(h as f64);
    let x0 = rng.random_range(0.0..=(w as f64 - cw));
    let y0 = rng.random_range(0.0..=(h as f64 - ch));
    (x0 as f32, y0 as f32, cw as f32, ch as f32)
}

fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn color_jitter(img: &mut FloatImage, brightness: f32, contrast: f32, saturation: f32, hue: f32) {
    let mean = img.data.chunks_exact(3).map(luma).sum::<f32>() / (img.width * img.height) as f32;
    // hue shift as a rotation about the gray axis
    let (sin, cos) = (hue * std::f32::consts::TAU).sin_cos();
    let k = 1.0 / 3.0f32;
    let sq = k.sqrt();
    let rot = [
        [
            cos + (1.0 - cos) * k,
            k * (1.0 - cos) - sq * sin,
            k * (1.0 - cos) + sq * sin,
        ],
        [
            k * (1.0 - cos) + sq * sin,
            cos + k * (1.0 - cos),
            k * (1.0 - cos) - sq * sin,
        ],
        [
            k * (1.0 - cos) - sq * sin,
            k * (1.0 - cos) + sq * sin,
            cos + k * (1.0 - cos),
        ],
    ];
    for px in img.data.chunks_exact_mut(3) {
        for v in px.iter_mut() {
            *v = (*v * brightness).clamp(0.0, 1.0);
        }
        for v in px.iter_mut() {
            *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
        }
        let l = luma(px);
        for v in px.iter_mut() {
            *v = ((*v - l) * saturation + l).clamp(0.0, 1.0);
        }
        let [r, g, b] = [px[0], px[1], px[2]];
        for (c, row) in rot.iter().enumerate() {
            px[c] = (row[0] * r + row[1] * g + row[2] * b).clamp(0.0, 1.0);
        }
    }
}

fn gaussian_blur(img: &FloatImage, sigma: f32) -> FloatImage {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = (img.width as isize, img.height as isize);
    let pass = |src: &[f32], horizontal: bool| {
        let mut dst = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let o = ki as isize - radius;
                        let (sx, sy) = if horizontal {
                            ((x + o).clamp(0, w - 1), y)
                        } else {
                            (x, (y + o).clamp(0, h - 1))
                        };
                        acc += k * src[((sy * w + sx) * 3) as usize + c];
                    }
                    dst[((y * w + x) * 3) as usize + c] = acc;
                }
            }
        }
        dst
    };
    let tmp = pass(&img.data, true);
    FloatImage {
        data: pass(&tmp, false),
        ..*img
    }
}

/// Two independent augmentation draws plus the resize-only original.
pub fn two_views(
    patch: &FloatImage,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> (FloatImage, FloatImage, FloatImage) {
    let a = policy.apply(patch, rng);
    let b = policy.apply(patch, rng);
    (a, b, patch.resize(policy.out_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp(size: usize) -> FloatImage {
        let mut data = Vec::new();
        for y in 0..size {
            for x in 0..size {
                data.extend([x as f32 / size as f32, y as f32 / size as f32, 0.5]);
            }
        }
        FloatImage {
            width: size,
            height: size,
            data,
        }
    }

    #[test]
    fn zero_probability_policy_is_identity() {
        let mut policy = AugmentationPolicy::desk(16);
        for op in &mut policy.ops {
            match op {
                AugOp::RandomResizedCrop { p, .. }
                | AugOp::HorizontalFlip { p }
                | AugOp::ColorJitter { p, .. }
                | AugOp::Grayscale { p }
                | AugOp::GaussianBlur { p, .. }
                | AugOp::Solarize { p, .. } => *p = 0.0,
            }
        }
        let img = ramp(16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b, o) = two_views(&img, &policy, &mut rng);
        assert_eq!(a, img);
        assert_eq!(b, img);
        assert_eq!(o, img);
    }

    #[test]
    fn flip_only_mirrors() {
        let policy = AugmentationPolicy {
            ops: vec![AugOp::HorizontalFlip { p: 1.0 }],
            out_size: 8,
        };
        let img = ramp(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _, o) = two_views(&img, &policy, &mut rng);
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    assert_eq!(a.px(x, y, c), o.px(7 - x, y, c));
                }
            }
        }
    }

    #[test]
    fn seeded_views_are_reproducible() {
        let policy = AugmentationPolicy::desk(12);
        let img = ramp(24);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            two_views(&img, &policy, &mut rng)
        };
        let (a1, b1, _) = run();
        let (a2, b2, _) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_ne!(a1, b1);
        assert!(a1.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a1.width, 12);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = FloatImage {
            width: 10,
            height: 6,
            data: vec![0.25; 180],
        };
        let r = img.resize(4);
        assert!(r.data.iter().all(|v| (v - 0.25).abs() < 1e-6));
        let mut chw = Vec::new();
        r.write_chw(&mut chw);
        assert_eq!(chw.len(), 48);
    }
}
