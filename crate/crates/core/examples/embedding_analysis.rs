//! Analyses of the desk encoder on one held-out tile: orthogonal
//! decomposition, inversion of a mixed embedding, the self-reference map,
//! the expert map and the RGB/aRGB metric sweep.
//!
//! ```text
//! cargo run --release --example embedding_analysis [out_dir]
//! ```

use std::path::PathBuf;

use argb::analysis::{
    box_blur, decompose, expert_map, invert, metric_sweep, mix_embeddings, self_reference, write_sweep_csv,
    InversionConfig,
};
use argb::data::{synth_patch, SynthKind, CHECKER_CELL};
use argb::desk;
use argb::restoration::psnr;
use argb::training::AeTrainConfig;
use argb::Image;
use argb_nn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> argb::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| "runs/examples/embedding_analysis".into());
    let config = AeTrainConfig::desk();
    let data = desk::training_set(&desk::data_dir(), config.seed)?;
    let model = desk::trained_autoencoder(&desk::default_cache_root(), &config, &data)?
        .checkpoint
        .model;
    let eff = model.effective_decoder();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let x = desk::heldout_set(&desk::data_dir(), 0)?[9].tensor().clone();
    let xi = model.encode(&x)?;
    let parts = decompose(&xi, &eff)?;
    let energy = |t: &Tensor<f32>| t.data().iter().map(|v| f64::from(v * v)).sum::<f64>();
    println!(
        "decoder rank {}; nullspace share of embedding energy {:.3}",
        eff.rank,
        energy(parts.xi_perp.tensor()) / energy(xi.tensor())
    );

    // Colors of a smooth gradient, structure of the photo.
    let flat = synth_patch(SynthKind::Gradients, 64, CHECKER_CELL, &mut rng).into_tensor();
    let mixed = mix_embeddings(&model.encode(&flat)?, &xi, &eff)?;
    let inv = invert(&model, &mixed, &InversionConfig::default(), None, &mut rng)?;
    let result = inv.image.map(|v| v.clamp(0.0, 1.0));
    let blurred = box_blur(&result, 9);
    println!(
        "mixed inversion: loss {:.3e} -> {:.3e}; blurred PSNR vs gradient {:.2} dB, vs photo {:.2} dB",
        inv.trace[0],
        inv.trace[inv.trace.len() - 1],
        psnr(&blurred, &box_blur(&flat, 9)),
        psnr(&blurred, &box_blur(&x, 9))
    );
    Image::new(result)?.save_png(&out.join("mix_inversion.png"))?;

    let map = self_reference(&model, &x)?;
    println!(
        "self-reference RMS: mean {:.4}, min {:.4}, max {:.4}",
        map.mean(),
        map.min(),
        map.max()
    );

    let experts = expert_map(&model, &x)?;
    println!("pixels per expert {:?}", experts.histogram());
    experts.save_png(&out.join("expert_map.png"))?;

    let rows = metric_sweep(&model, &x, &[0.0, 0.02, 0.05, 0.1], 100, &mut rng)?;
    for r in &rows {
        println!(
            "sigma {:.2}: rgb {:.3e} +- {:.1e}, argb {:.3e} +- {:.1e}",
            r.sigma, r.rgb_mean, r.rgb_std, r.argb_mean, r.argb_std
        );
    }
    write_sweep_csv(&out.join("metric_sweep.csv"), &rows)?;
    println!("outputs in {}", out.display());
    Ok(())
}
