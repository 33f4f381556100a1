//! Compares every loss kind in RGB and aRGB space on a noisy/clean pair and
//! writes gradient histograms of the L1 pair. Uses the cached desk model
//! (training it first if needed).
//!
//! ```text
//! cargo run --release --example loss_gradients [out_dir]
//! ```

use std::path::PathBuf;

use argb::desk;
use argb::losses::{loss_and_grad, render_histograms, GradStats, LossKind, LossSpec, Space};
use argb::restoration::degrade;
use argb::training::AeTrainConfig;
use argb::Encoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> argb::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| "runs/examples/loss_gradients".into());
    let config = AeTrainConfig::desk();
    let data = desk::training_set(&desk::data_dir(), config.seed)?;
    let model = desk::trained_autoencoder(&desk::default_cache_root(), &config, &data)?
        .checkpoint
        .model;

    let clean = desk::heldout_set(&desk::data_dir(), 0)?[5].tensor().clone();
    let noisy = degrade(&clean, 0.1, &mut ChaCha8Rng::seed_from_u64(1))?;
    println!("{:<12} {:>12} {:>12}", "kind", "rgb", "argb");
    for kind in LossKind::ALL {
        let rgb = loss_and_grad(&LossSpec::new(Space::Rgb, kind), None, &noisy, &clean, false)?.0;
        let enc: &dyn Encoder<f32> = &model;
        let argb = loss_and_grad(&LossSpec::new(Space::Argb, kind), Some(enc), &noisy, &clean, false)?.0;
        println!("{:<12} {rgb:>12.5} {argb:>12.5}", kind.name());
    }

    let grads = |space| -> argb::Result<GradStats> {
        let enc = (space == Space::Argb).then_some(&model as &dyn Encoder<f32>);
        let (_, g) = loss_and_grad(&LossSpec::new(space, LossKind::L1), enc, &noisy, &clean, true)?;
        Ok(GradStats::new(&g.expect("gradient requested"), 101))
    };
    let (rgb, argb) = (grads(Space::Rgb)?, grads(Space::Argb)?);
    println!(
        "mean |grad|: rgb {:.3e}, argb {:.3e}, ratio {:.2}",
        rgb.mean_abs,
        argb.mean_abs,
        argb.mean_abs / rgb.mean_abs
    );
    render_histograms(
        &out.join("grad_hist.png"),
        &[(&rgb, [200, 60, 40]), (&argb, [40, 90, 200])],
    )?;
    println!("histograms in {}", out.display());
    Ok(())
}
