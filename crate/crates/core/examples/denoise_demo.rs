//! Trains the small denoiser twice, once with an RGB L1 loss and once with
//! the same loss on aRGB embeddings, and compares them on held-out tiles.
//!
//! ```text
//! cargo run --release --example denoise_demo [steps] [out_dir]
//! ```

use std::path::PathBuf;

use argb::desk;
use argb::losses::{LossConfig, LossKind, Space};
use argb::restoration::{evaluate, train_restorer, write_triptychs, RestoreTrainConfig, ValidationSet};
use argb::training::AeTrainConfig;

fn main() -> argb::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let steps: u64 = args
        .next()
        .map(|s| s.parse().expect("steps must be an integer"))
        .unwrap_or(1_000);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| "runs/examples/denoise_demo".into());

    let config = AeTrainConfig::desk();
    let data = desk::training_set(&desk::data_dir(), config.seed)?;
    let encoder = desk::trained_autoencoder(&desk::default_cache_root(), &config, &data)?
        .checkpoint
        .model;
    let tiles = desk::heldout_set(&desk::data_dir(), 0)?;
    let val = ValidationSet::new(&tiles[..16], 0.1, 7)?;

    for space in [Space::Rgb, Space::Argb] {
        let cfg = RestoreTrainConfig {
            loss: LossConfig {
                space,
                kind: LossKind::L1,
                ..LossConfig::default()
            },
            steps,
            val_every: steps / 4,
            ..RestoreTrainConfig::default()
        };
        let enc = (space == Space::Argb).then_some(&encoder);
        let run = train_restorer(&cfg, enc, &data, Some(&val), None)?;
        let m = evaluate(&run.model, &val)?;
        println!(
            "{space:?}: PSNR {:.2} dB (noisy {:.2}), SSIM {:.4}",
            m.psnr, m.input_psnr, m.ssim
        );
        write_triptychs(&run.model, &val, &out.join(format!("{space:?}").to_lowercase()))?;
    }
    println!("triptychs in {}", out.display());
    Ok(())
}
