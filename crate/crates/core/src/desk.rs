//! The reduced-scale setup used by the examples and the acceptance suite:
//! training mix, held-out evaluation set and seeds.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{grid_origins, list_images, synth_patch, Dataset, SynthKind, CHECKER_CELL};
use crate::error::{ArgbError, Result};
use crate::io::Image;
use crate::training::{read_log, train_autoencoder, AeTrainConfig, StepRecord, TrainOutputs};

/// Side of the stored training patches; training crops 64x64 out of them.
pub const STORE_PATCH: usize = 96;
pub const STORE_STRIDE: usize = 48;
pub const SYNTH_PER_KIND: usize = 12;
pub const EVAL_TILE: usize = 64;

/// `data/` at the repository root.
pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// Grid crops of every image in `dir`.
pub fn photo_patches(dir: &Path, size: usize, stride: usize) -> Result<Vec<Image>> {
    let mut out = Vec::new();
    for path in list_images(dir)? {
        let img = Image::load(&path)?;
        for (y, x) in grid_origins(img.height(), img.width(), size, stride) {
            out.push(img.crop(y, x, size, size)?);
        }
    }
    if out.is_empty() {
        return Err(ArgbError::missing(dir, "no usable photographs"));
    }
    Ok(out)
}

fn synthetic(count: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [SynthKind::Gradients, SynthKind::Checker, SynthKind::Noise]
        .into_iter()
        .flat_map(|kind| (0..count).map(move |_| kind))
        .map(|kind| synth_patch(kind, size, CHECKER_CELL, &mut rng))
        .collect()
}

/// Photo patches from `data/photos` plus synthetic gradients, checkerboards
/// and noise.
pub fn training_set(data: &Path, seed: u64) -> Result<Dataset> {
    let mut patches = photo_patches(&data.join("photos"), STORE_PATCH, STORE_STRIDE)?;
    patches.extend(synthetic(SYNTH_PER_KIND, STORE_PATCH, seed));
    Ok(Dataset::new(patches))
}

/// Non-overlapping tiles of `data/heldout` plus freshly seeded synthetic
/// patches (four of each kind) never seen in training.
pub fn heldout_set(data: &Path, seed: u64) -> Result<Vec<Image>> {
    let mut out = photo_patches(&data.join("heldout"), EVAL_TILE, EVAL_TILE)?;
    out.extend(synthetic(4, EVAL_TILE, seed ^ 0x5eed_0f_da7a));
    Ok(out)
}

/// A trained desk model together with its step log.
pub struct TrainedDesk {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    pub dir: PathBuf,
}

/// Bump when a change to the training code alters its numeric results.
const TRAINING_REVISION: u32 = 1;

/// Content key of a training run: configuration, training patches and the
/// training code revision.
pub fn run_key(config: &AeTrainConfig, data: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(TRAINING_REVISION.to_le_bytes());
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for p in &data.patches {
        for d in p.tensor().shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.tensor().data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())[..16].to_string()
}

/// Loads the run for `(config, data)` from `cache_root` or trains it and
/// stores it there. Training writes into a temporary directory that is
/// renamed on success, so an interrupted run leaves no partial cache entry.
pub fn trained_autoencoder(cache_root: &Path, config: &AeTrainConfig, data: &Dataset) -> Result<TrainedDesk> {
    let dir = cache_root.join(format!("ae-{}", run_key(config, data)));
    let ckpt = dir.join("argb.ckpt");
    let log_path = dir.join("train_log.jsonl");
    if !(ckpt.is_file() && log_path.is_file()) {
        let tmp = cache_root.join(format!("tmp-{}-{}", run_key(config, data), std::process::id()));
        let outputs = TrainOutputs {
            log: Some(tmp.join("train_log.jsonl")),
            snapshot_dir: Some(tmp.clone()),
        };
        log::info!("training {} steps into {}", config.total_steps, dir.display());
        let (ck, _) = train_autoencoder(config.clone(), data, &outputs)?;
        ck.save(&tmp.join("argb.ckpt"))?;
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::rename(&tmp, &dir)?;
    }
    Ok(TrainedDesk {
        checkpoint: Checkpoint::load(&ckpt)?,
        log: read_log(&log_path)?,
        dir,
    })
}

/// `target/argb-cache` of this workspace.
pub fn default_cache_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/argb-cache")
}
