//! Trains the desk-scale autoencoder (or loads it from the cache under
//! `target/argb-cache`) and reports held-out reconstruction quality.
//!
//! ```text
//! cargo run --release --example train_autoencoder
//! ```

use argb::desk;
use argb::training::{evaluate_reconstruction, AeTrainConfig};

fn main() -> argb::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = AeTrainConfig::desk();
    let data = desk::training_set(&desk::data_dir(), config.seed)?;
    println!("{} training patches, {} steps", data.len(), config.total_steps);

    let run = desk::trained_autoencoder(&desk::default_cache_root(), &config, &data)?;
    let last = run.log.last().expect("non-empty log");
    println!("checkpoint {}", run.dir.join("argb.ckpt").display());
    println!("final l_recon {:.5}, l_balance {:.4}", last.l_recon, last.l_balance);

    let heldout = desk::heldout_set(&desk::data_dir(), 1)?;
    let stats = evaluate_reconstruction(&run.checkpoint.model, &heldout)?;
    println!(
        "held-out PSNR {:.2} dB, mean |diff| {:.3}/255",
        stats.mean_psnr, stats.mean_abs_diff_255
    );
    Ok(())
}
