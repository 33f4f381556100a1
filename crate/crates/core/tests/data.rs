mod common;

use std::fs;

use argb::data::{
    augment, extract_patches, flip, grid_origins, rot90, synth_patch, synth_patches, AugmentPolicy, Dataset,
    PatchStore, SynthKind,
};
use argb::io::Image;
use argb::ArgbError;
use argb_nn::Tensor;
use common::{image, rng};
use proptest::prelude::*;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    Image::new(image::<f32>(1, h, w, &mut rng(seed))).unwrap().quantized()
}

#[test]
fn grid_counts() {
    assert_eq!(grid_origins(480, 480, 480, 240).len(), 1);
    assert_eq!(grid_origins(960, 960, 480, 240).len(), 9);
    assert_eq!(grid_origins(100, 100, 480, 240).len(), 0);
    assert_eq!(grid_origins(700, 1000, 480, 240).len(), 3);
}

#[test]
fn extraction_skips_small_images_and_reconstructs_from_origins() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let big = random_image(40, 56, 1);
    big.save_png(&src.path().join("big.png")).unwrap();
    random_image(10, 10, 2).save_png(&src.path().join("small.png")).unwrap();
    fs::write(src.path().join("broken.png"), b"not a png").unwrap();
    let store = extract_patches(src.path(), 16, 8, out.path()).unwrap();
    assert_eq!(store.len(), 4 * 6);
    let reopened = PatchStore::open(out.path()).unwrap();
    assert_eq!(reopened.records(), store.records());
    for (i, rec) in reopened.records().iter().enumerate() {
        assert_eq!(rec.source, "big.png");
        let patch = reopened.load(i).unwrap();
        assert_eq!(patch, big.crop(rec.y, rec.x, 16, 16).unwrap());
    }
}

#[test]
fn extraction_errors() {
    let empty = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    assert!(matches!(
        extract_patches(empty.path(), 16, 8, out.path()),
        Err(ArgbError::MissingInput { .. })
    ));
    random_image(10, 10, 3).save_png(&empty.path().join("a.png")).unwrap();
    assert!(matches!(
        extract_patches(empty.path(), 16, 8, out.path()),
        Err(ArgbError::InvalidInput(_))
    ));
}

#[test]
fn store_with_missing_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let store = synth_patches(SynthKind::Checker, 2, 8, &mut rng(4), dir.path()).unwrap();
    fs::remove_file(dir.path().join(&store.records()[1].file)).unwrap();
    assert!(matches!(
        PatchStore::open(dir.path()),
        Err(ArgbError::MissingInput { .. })
    ));
}

#[test]
fn synthetic_stores_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth_patches(SynthKind::Noise, 3, 16, &mut rng(5), a.path()).unwrap();
    synth_patches(SynthKind::Noise, 3, 16, &mut rng(5), b.path()).unwrap();
    for name in ["noise_00000.png", "noise_00002.png", "manifest.jsonl"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap()
        );
    }
    assert!("stripes".parse::<SynthKind>().is_err());
}

#[test]
fn gradient_patches_are_affine() {
    let p = synth_patch(SynthKind::Gradients, 64, 8, &mut rng(6));
    let t = p.tensor();
    for c in 0..3 {
        for y in 1..63 {
            for x in 1..63 {
                let dx = t.at(0, c, y, x + 1) - 2.0 * t.at(0, c, y, x) + t.at(0, c, y, x - 1);
                let dy = t.at(0, c, y + 1, x) - 2.0 * t.at(0, c, y, x) + t.at(0, c, y - 1, x);
                let mixed = t.at(0, c, y + 1, x + 1) - t.at(0, c, y + 1, x) - t.at(0, c, y, x + 1) + t.at(0, c, y, x);
                assert!(dx.abs() < 1e-5 && dy.abs() < 1e-5 && mixed.abs() < 1e-5);
            }
        }
    }
}

#[test]
fn checkerboard_has_64_alternating_cells() {
    let p = synth_patch(SynthKind::Checker, 64, 8, &mut rng(7));
    let t = p.tensor();
    let color = |cy: usize, cx: usize| [0, 1, 2].map(|c| t.at(0, c, cy * 8 + 3, cx * 8 + 5));
    for cy in 0..8 {
        for cx in 0..8 {
            // Constant inside each cell.
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!([0, 1, 2].map(|c| t.at(0, c, cy * 8 + y, cx * 8 + x)), color(cy, cx));
                }
            }
            let same_parity = if (cy + cx) % 2 == 0 { color(0, 0) } else { color(0, 1) };
            assert_eq!(color(cy, cx), same_parity);
        }
    }
    assert_ne!(color(0, 0), color(0, 1));
}

#[test]
fn noise_patches_have_the_stated_moments() {
    let p = synth_patch(SynthKind::Noise, 128, 8, &mut rng(8));
    let d = p.tensor().data();
    let n = d.len() as f64;
    let mean = d.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    // N(0.5, 0.5^2) clipped to [0, 1] is symmetric about 0.5, with about 31.7%
    // of the mass on the two bounds.
    assert!((mean - 0.5).abs() < 0.01);
    let clipped = d.iter().filter(|&&v| v == 0.0 || v == 1.0).count() as f64 / n;
    assert!((clipped - 0.3173).abs() < 0.01, "{clipped}");
}

#[test]
fn disabled_augmentation_is_the_identity() {
    let img = random_image(12, 12, 9);
    let out = augment(&img, &AugmentPolicy::crop_only(12), &mut rng(0)).unwrap();
    assert_eq!(out, img);
    assert!(augment(&img, &AugmentPolicy::crop_only(13), &mut rng(0)).is_err());
}

#[test]
fn rotation_and_flip_group_laws() {
    let img = random_image(5, 7, 10);
    assert_eq!(rot90(&img, 4), img);
    assert_eq!(rot90(&rot90(&img, 1), 3), img);
    assert_eq!(rot90(&img, 1).height(), 7);
    assert_eq!(flip(&flip(&img, true), true), img);
    assert_eq!(flip(&flip(&img, false), false), img);
    // Two flips make a half turn.
    assert_eq!(flip(&flip(&img, true), false), rot90(&img, 2));
    // Counter-clockwise: the top-right corner moves to the top-left.
    let t = img.tensor();
    assert_eq!(rot90(&img, 1).tensor().at(0, 0, 0, 0), t.at(0, 0, 0, 6));
}

#[test]
fn batches_are_seeded() {
    let data = Dataset::new((0..4).map(|i| random_image(20, 20, 20 + i)).collect());
    let policy = AugmentPolicy {
        crop_size: 8,
        ..AugmentPolicy::default()
    };
    let a = data.sample_batch(3, &policy, &mut rng(1)).unwrap();
    let b = data.sample_batch(3, &policy, &mut rng(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), [3, 3, 8, 8]);
    assert!(Dataset::default().sample_batch(1, &policy, &mut rng(1)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmentation_keeps_range_channels_and_values(seed in any::<u64>(), h in 8usize..20, w in 8usize..20, crop in 1usize..8) {
        let img = random_image(h, w, seed);
        let out = augment(&img, &AugmentPolicy { crop_size: crop, ..AugmentPolicy::default() }, &mut rng(seed)).unwrap();
        let t: &Tensor<f32> = out.tensor();
        prop_assert_eq!(t.shape(), [1, 3, crop, crop]);
        prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // Crops, flips and rotations only move pixels around.
        let src: Vec<u32> = img.tensor().data().iter().map(|v| (v * 255.0).round() as u32).collect();
        for v in t.data() {
            prop_assert!(src.contains(&((v * 255.0).round() as u32)));
        }
    }

    #[test]
    fn grid_count_formula(h in 1usize..300, w in 1usize..300, size in 1usize..100, stride in 1usize..60) {
        let n = grid_origins(h, w, size, stride).len();
        let want = if h < size || w < size { 0 } else { ((h - size) / stride + 1) * ((w - size) / stride + 1) };
        prop_assert_eq!(n, want);
    }
}
