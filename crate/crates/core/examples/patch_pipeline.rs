//! Builds patch stores from the bundled photographs and from the synthetic
//! generators, then saves a strip of augmented training crops.
//!
//! ```text
//! cargo run --release --example patch_pipeline [out_dir]
//! ```

use std::path::PathBuf;

use argb::data::{augment, extract_patches, synth_patches, AugmentPolicy, Dataset, PatchStore, SynthKind};
use argb::desk;
use argb::Image;
use argb_nn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> argb::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| "runs/examples/patch_pipeline".into());
    let photos = extract_patches(&desk::data_dir().join("photos"), 96, 48, &out.join("photos"))?;
    println!("{} photo patches in {}", photos.len(), photos.root().display());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut stores = vec![photos];
    for kind in [SynthKind::Gradients, SynthKind::Checker, SynthKind::Noise] {
        let store = synth_patches(kind, 8, 96, &mut rng, &out.join(kind.name()))?;
        println!("{} {} patches", store.len(), kind.name());
        stores.push(store);
    }
    // Stores are plain directories and can be reopened later.
    let reopened = PatchStore::open(&out.join("checker"))?;
    let first = &reopened.records()[0];
    println!(
        "first checker record: {} from {} at ({}, {})",
        first.file, first.source, first.y, first.x
    );

    let data = Dataset::from_stores(&stores)?;
    let policy = AugmentPolicy {
        crop_size: 64,
        ..AugmentPolicy::default()
    };
    let crops: Vec<Image> = (0..8)
        .map(|i| augment(&data.patches[(i * 13) % data.len()], &policy, &mut rng))
        .collect::<argb::Result<_>>()?;
    let strip = Tensor::from_fn([1, 3, 64, 64 * crops.len()], |_, c, y, x| {
        crops[x / 64].tensor().at(0, c, y, x % 64)
    });
    let path = out.join("augmented.png");
    Image::new(strip)?.save_png(&path)?;
    println!("{} patches in total; augmented crops in {}", data.len(), path.display());
    Ok(())
}
