use std::collections::BTreeSet;

use histocon::data::augment::AugOp;
use histocon::data::dataset::subsample_fraction;
use histocon::data::synth::{generate_synthetic, texture_tile, SyntheticDatasetSpec};
use histocon::data::tessellate::reject_background;
use histocon::data::{tessellate, two_views, AugmentationPolicy, BackgroundParams, FloatImage};
use image::{imageops, Rgb, RgbImage};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn float_image(size: usize, seed: u64) -> FloatImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FloatImage {
        width: size,
        height: size,
        data: (0..size * size * 3)
            .map(|_| rand::Rng::random::<f32>(&mut rng))
            .collect(),
    }
}

proptest! {
    #[test]
    fn grids_stay_in_bounds_and_never_overlap(
        w in 1u32..2000, h in 1u32..2000, mpp in 0.1f64..2.0, patch in 16u32..300,
    ) {
        let rects = tessellate(w, h, Some(mpp), 0.5, patch).unwrap();
        let scale = mpp / 0.5;
        let expect = ((w as f64 * scale).round() as u32 / patch) * ((h as f64 * scale).round() as u32 / patch);
        prop_assert_eq!(rects.len() as u32, expect);
        for r in &rects {
            prop_assert!(r.x + r.w <= w && r.y + r.h <= h);
            prop_assert!(r.w > 0 && r.h > 0);
        }
        for (i, a) in rects.iter().enumerate() {
            for b in &rects[i + 1..] {
                let apart = a.x + a.w <= b.x || b.x + b.w <= a.x || a.y + a.h <= b.y || b.y + b.h <= a.y;
                prop_assert!(apart, "{:?} overlaps {:?}", a, b);
            }
        }
    }

    #[test]
    fn fractions_are_nested(n in 1usize..120, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("S{i:04}")).collect();
        let mut prev: Option<BTreeSet<String>> = None;
        for f in [0.1, 0.25, 0.5, 1.0] {
            let s: BTreeSet<String> = subsample_fraction(&ids, f, seed).unwrap().into_iter().collect();
            prop_assert_eq!(s.len(), ((f * n as f64) - 1e-9).ceil() as usize);
            if let Some(p) = &prev {
                prop_assert!(p.is_subset(&s));
            }
            prev = Some(s);
        }
    }

    #[test]
    fn original_view_is_plain_resize(size in 8usize..40, out in 8usize..40, seed in any::<u64>()) {
        let img = float_image(size, seed);
        let (_, _, original) = two_views(&img, &AugmentationPolicy::desk(out), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(original, img.resize(out));
    }

    #[test]
    fn views_are_reproducible(seed in any::<u64>()) {
        let img = float_image(24, 3);
        let p = AugmentationPolicy::desk(16);
        let a = two_views(&img, &p, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = two_views(&img, &p, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
    }
}

#[test]
fn zero_probability_policy_returns_the_original() {
    let img = float_image(20, 1);
    let mut policy = AugmentationPolicy::desk(20);
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
    let (a, b, o) = two_views(&img, &policy, &mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(a, o);
    assert_eq!(b, o);
    let flip = AugmentationPolicy {
        ops: vec![AugOp::HorizontalFlip { p: 1.0 }],
        out_size: 20,
    };
    let (a, _, o) = two_views(&img, &flip, &mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(a, o.flip_horizontal());
}

#[test]
fn tessellation_examples() {
    assert_eq!(tessellate(448, 448, Some(0.25), 0.5, 224).unwrap().len(), 1);
    let one = tessellate(224, 224, Some(0.5), 0.5, 224).unwrap();
    assert_eq!((one.len(), one[0].x, one[0].y), (1, 0, 0));
    let two = tessellate(500, 224, Some(0.5), 0.5, 224).unwrap();
    assert_eq!(two.len(), 2);
    assert_eq!(two[1].x + two[1].w, 448);
    assert!(tessellate(224, 224, None, 0.5, 224).is_err());
}

#[test]
fn background_rule_boundaries() {
    let params = BackgroundParams::default();
    let white = RgbImage::from_pixel(64, 64, Rgb([255, 255, 255]));
    assert!(!reject_background(&white, &params));
    let checker = RgbImage::from_fn(64, 64, |x, y| {
        if (x / 4 + y / 4) % 2 == 0 {
            Rgb([0, 0, 0])
        } else {
            Rgb([255; 3])
        }
    });
    assert!(reject_background(&checker, &params));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for class in 0..2 {
        let tile = texture_tile(class, 64, 0.04, &mut rng);
        assert!(reject_background(&tile, &params));
        let faded = RgbImage::from_fn(64, 64, |x, y| {
            let p = tile.get_pixel(x, y).0;
            Rgb(p.map(|c| (0.05 * c as f32 + 0.95 * 255.0).round() as u8))
        });
        assert!(!reject_background(&faded, &params));
    }
}

#[test]
fn acceptance_rate_is_stable_under_whole_patch_shifts() {
    // one large stationary texture field, tiled at several whole-patch offsets
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let patch = 32u32;
    let mut field = RgbImage::new(patch * 16, patch * 16);
    for ty in 0..8 {
        for tx in 0..8 {
            let tile = texture_tile((tx + ty) % 2, 64, 0.04, &mut rng);
            imageops::replace(&mut field, &tile, (tx * 64) as i64, (ty * 64) as i64);
        }
    }
    let params = BackgroundParams::default();
    let rate = |dx: u32, dy: u32| {
        let mut accepted = 0;
        let mut total = 0;
        for gy in 0..8 {
            for gx in 0..8 {
                let (x, y) = (dx * patch + gx * patch, dy * patch + gy * patch);
                let tile = imageops::crop_imm(&field, x, y, patch, patch).to_image();
                total += 1;
                if reject_background(&tile, &params) {
                    accepted += 1;
                }
            }
        }
        accepted as f64 / total as f64
    };
    let rates: Vec<f64> = (0..4).map(|s| rate(s, s / 2)).collect();
    let (lo, hi) = rates
        .iter()
        .fold((1.0f64, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    assert!(hi - lo < 0.05, "acceptance rates {rates:?}");
}

#[test]
fn synthetic_generation_is_byte_identical_for_a_seed() {
    let spec = SyntheticDatasetSpec {
        num_slides: 4,
        external_slides: 2,
        patches_per_slide: 6,
        patch_size: 32,
        ..SyntheticDatasetSpec::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = generate_synthetic(&spec, a.path()).unwrap();
    let db = generate_synthetic(&spec, b.path()).unwrap();
    assert_eq!(da.content_hash().unwrap(), db.content_hash().unwrap());
    let labels: Vec<usize> = da
        .slides
        .iter()
        .filter(|s| s.slide_id.starts_with('I'))
        .map(|s| s.labels["tumor"])
        .collect();
    assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 2);
}
