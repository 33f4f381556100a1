//! Autoencoder training: reconstruction under output noise plus the router
//! load-balancing term, optimised with Adam under a cosine schedule with
//! warm restarts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use argb_nn::{Adam, CosineRestarts, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::data::{AugmentPolicy, Dataset};
use crate::error::{ArgbError, Result};
use crate::io::{check_image_batch, ensure_parent, Image};
use crate::model::{ArgbModel, PassOptions, DEFAULT_EXPERTS};

/// Which formula the balancing term uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BalanceForm {
    /// `K * sum_k fr_k * P_k`; equals 1 for a uniform router.
    #[default]
    Switch,
    /// `K^2 * sum_ij max_k p_k(ij)`, evaluated literally.
    Printed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTrainConfig {
    pub num_experts: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub first_period: u64,
    pub max_period: u64,
    pub total_steps: u64,
    pub lambda_balance: f64,
    pub balance_form: BalanceForm,
    pub noise_std: f64,
    pub patch_size: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            num_experts: DEFAULT_EXPERTS,
            batch_size: 16,
            initial_lr: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            first_period: 1_000,
            max_period: 256_000,
            total_steps: 511_000,
            lambda_balance: 0.01,
            balance_form: BalanceForm::Switch,
            noise_std: 1.0,
            patch_size: 256,
            hflip: true,
            vflip: true,
            rot90: true,
            seed: 0,
        }
    }
}

impl AeTrainConfig {
    /// Reduced setting that runs on one CPU core: five experts, 64x64
    /// patches, 10k steps with restarts after 250, 500, 1000 and then every
    /// 2000 steps.
    pub fn desk() -> Self {
        Self {
            num_experts: 5,
            batch_size: 1,
            first_period: 250,
            max_period: 2_000,
            total_steps: 10_000,
            patch_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool); 8] = [
            ("num_experts", self.num_experts >= 1),
            ("batch_size", self.batch_size >= 1),
            ("initial_lr", self.initial_lr > 0.0 && self.initial_lr.is_finite()),
            ("first_period", self.first_period >= 1),
            ("max_period", self.max_period >= self.first_period),
            ("lambda_balance", self.lambda_balance >= 0.0),
            ("noise_std", self.noise_std >= 0.0 && self.noise_std.is_finite()),
            ("patch_size", self.patch_size >= 1),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(ArgbError::config(format!("autoencoder.{key}"), "value out of range"));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineRestarts {
        CosineRestarts::new(self.initial_lr, self.first_period, self.max_period)
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        AugmentPolicy {
            crop_size: self.patch_size,
            hflip: self.hflip,
            vflip: self.vflip,
            rot90: self.rot90,
        }
    }
}

/// Balancing term recorded on `g` from router probabilities `[N, K, H, W]`
/// and their top-1 masks. The masks enter as constants.
pub fn balance_loss_graph(g: &mut Graph<f32>, probs: Var, masks: &Tensor<f32>, form: BalanceForm) -> Var {
    let k = masks.channels();
    match form {
        BalanceForm::Switch => {
            let fr = fractions(masks);
            let fr = g.constant(Tensor::new([1, k, 1, 1], fr));
            let p = g.channel_mean(probs);
            let prod = g.mul(p, fr);
            let s = g.sum(prod);
            g.scale(s, k as f64)
        }
        BalanceForm::Printed => {
            let m = g.max_channels(probs);
            let s = g.sum(m);
            g.scale(s, (k * k) as f64)
        }
    }
}

/// Fraction of pixels routed to each expert.
fn fractions(masks: &Tensor<f32>) -> Vec<f32> {
    let [n, k, h, w] = masks.shape();
    let total = (n * h * w) as f64;
    (0..k)
        .map(|e| {
            let count: f64 = (0..n)
                .map(|b| masks.plane_slice(b, e).iter().map(|&v| v as f64).sum::<f64>())
                .sum();
            (count / total) as f32
        })
        .collect()
}

/// The balancing loss as a number.
pub fn balance_loss(probs: &Tensor<f32>, masks: &Tensor<f32>, form: BalanceForm) -> Result<f32> {
    if probs.shape() != masks.shape() {
        return Err(ArgbError::shape(format!(
            "probabilities {:?} vs masks {:?}",
            probs.shape(),
            masks.shape()
        )));
    }
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let l = balance_loss_graph(&mut g, p, masks, form);
    Ok(g.value(l).item())
}

fn noise_tensor(shape: [usize; 4], std: f64, rng: &mut impl Rng) -> Tensor<f32> {
    let normal = Normal::new(0.0f32, std as f32).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect())
}

/// Mean absolute reconstruction error `|g(f(x) + z) - x|` with fresh noise
/// `z ~ N(0, noise_std^2)` drawn from `rng`. Uses running batch-norm
/// statistics; training steps record the same loss in training mode.
pub fn recon_loss(model: &ArgbModel<f32>, x: &Tensor<f32>, noise_std: f64, rng: &mut impl Rng) -> Result<f32> {
    if noise_std < 0.0 || !noise_std.is_finite() {
        return Err(ArgbError::invalid(format!("noise_std must be >= 0, got {noise_std}")));
    }
    check_image_batch(x)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pass = model.encoder_graph(&mut g, xv, PassOptions::FROZEN);
    let loss = recon_graph(&mut g, model, pass.embedding, xv, noise_std, false, rng);
    Ok(g.value(loss).item())
}

fn recon_graph(
    g: &mut Graph<f32>,
    model: &ArgbModel<f32>,
    embedding: Var,
    x: Var,
    noise_std: f64,
    trainable: bool,
    rng: &mut impl Rng,
) -> Var {
    let mut xi = embedding;
    if noise_std > 0.0 {
        let z = g.constant(noise_tensor(g.value(embedding).shape(), noise_std, rng));
        xi = g.add(xi, z);
    }
    let out = model.decoder_graph(g, xi, trainable);
    let diff = g.sub(out, x);
    let a = g.abs(diff);
    g.mean(a)
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub l_recon: f64,
    pub l_balance: f64,
    pub l_ae: f64,
}

/// Model, optimizer, schedule position and RNG of a training run.
pub struct AeTrainer {
    pub config: AeTrainConfig,
    pub model: ArgbModel<f32>,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
    step: u64,
    recon_ema: Option<f64>,
}

const RNG_STREAM_INIT: u64 = 0;
const RNG_STREAM_TRAIN: u64 = 1;

impl AeTrainer {
    pub fn new(config: AeTrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(RNG_STREAM_INIT);
        let model = ArgbModel::init(config.num_experts, &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(RNG_STREAM_TRAIN);
        let adam = Adam::new(config.adam_beta1, config.adam_beta2, config.adam_eps);
        Ok(Self {
            config,
            model,
            adam,
            rng,
            step: 0,
            recon_ema: None,
        })
    }

    /// Continues a run saved by [`AeTrainer::checkpoint`].
    pub fn resume(ck: Checkpoint) -> Result<Self> {
        let meta = &ck.metadata;
        let bad = |what: &str| ArgbError::Checkpoint(format!("cannot resume: {what}"));
        let config: AeTrainConfig =
            serde_json::from_value(meta["config"].clone()).map_err(|e| bad(&format!("config: {e}")))?;
        let step = meta["step"].as_u64().ok_or_else(|| bad("no step counter"))?;
        let seed_hex = meta["rng"]["seed"].as_str().ok_or_else(|| bad("no rng seed"))?;
        let mut seed = [0u8; 32];
        hex::decode_to_slice(seed_hex, &mut seed).map_err(|e| bad(&format!("rng seed: {e}")))?;
        let word_pos: u128 = meta["rng"]["word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("no rng position"))?;
        let stream = meta["rng"]["stream"].as_u64().ok_or_else(|| bad("no rng stream"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let mut adam = Adam::new(config.adam_beta1, config.adam_beta2, config.adam_eps);
        let opt = ck.optimizer.ok_or_else(|| bad("no optimizer state"))?;
        adam.restore(opt.step, opt.moments);
        Ok(Self {
            config,
            model: ck.model,
            adam,
            rng,
            step,
            recon_ema: meta["running"]["l_recon_ema"].as_f64(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Exponential moving average (factor 0.99) of the reconstruction loss.
    pub fn recon_ema(&self) -> Option<f64> {
        self.recon_ema
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone());
        ck.metadata = json!({
            "config": self.config,
            "step": self.step,
            "rng": {
                "seed": hex::encode(self.rng.get_seed()),
                "stream": self.rng.get_stream(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
            "running": { "l_recon_ema": self.recon_ema },
        });
        ck.optimizer = Some(OptimizerState::from_adam(&self.adam));
        ck
    }

    /// Draws a batch and takes one optimizer step.
    pub fn step(&mut self, data: &Dataset) -> Result<StepRecord> {
        let cfg = &self.config;
        let x = data.sample_batch(cfg.batch_size, &cfg.augment_policy(), &mut self.rng)?;
        self.step_on(x)
    }

    /// One optimizer step on the given batch.
    pub fn step_on(&mut self, x: Tensor<f32>) -> Result<StepRecord> {
        check_image_batch(&x)?;
        let cfg = self.config.clone();
        let lr = cfg.schedule().lr(self.step);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let pass = self.model.encoder_graph(&mut g, xv, PassOptions::TRAIN);
        let l_recon = recon_graph(
            &mut g,
            &self.model,
            pass.embedding,
            xv,
            cfg.noise_std,
            true,
            &mut self.rng,
        );
        let l_bal = balance_loss_graph(&mut g, pass.probs, &pass.masks, cfg.balance_form);
        let loss = if cfg.lambda_balance > 0.0 {
            let weighted = g.scale(l_bal, cfg.lambda_balance);
            g.add(l_recon, weighted)
        } else {
            l_recon
        };
        let l_recon_v = f64::from(g.value(l_recon).item());
        let l_bal_v = f64::from(g.value(l_bal).item());
        let record = StepRecord {
            step: self.step,
            lr,
            l_recon: l_recon_v,
            l_balance: l_bal_v,
            l_ae: l_recon_v + cfg.lambda_balance * l_bal_v,
        };
        if !record.l_ae.is_finite() {
            return Err(ArgbError::numerical(format!(
                "non-finite loss at step {}: {}",
                self.step,
                serde_json::to_string(&record)?
            )));
        }
        let mut grads = g.backward(loss);
        let named: Vec<(String, Tensor<f32>)> = g
            .params()
            .iter()
            .filter_map(|(name, v)| grads.take(*v).map(|t| (name.clone(), t)))
            .collect();
        drop(g);
        self.adam.begin_step();
        for (name, grad) in &named {
            let slot = self.model.param_mut(name).expect("graph params exist in the model");
            self.adam.update(name, Arc::make_mut(slot), grad, lr);
        }
        self.model.apply_bn_stats(&pass.bn_stats);
        self.recon_ema = Some(match self.recon_ema {
            Some(e) => 0.99 * e + 0.01 * l_recon_v,
            None => l_recon_v,
        });
        self.step += 1;
        Ok(record)
    }
}

/// Output locations of a training run.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Newline-delimited JSON step log.
    pub log: Option<PathBuf>,
    /// Directory that receives a snapshot when the loss turns non-finite.
    pub snapshot_dir: Option<PathBuf>,
}

/// Trains from scratch for `config.total_steps` steps.
pub fn train_autoencoder(
    config: AeTrainConfig,
    data: &Dataset,
    out: &TrainOutputs,
) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let trainer = AeTrainer::new(config)?;
    continue_training(trainer, data, out)
}

/// Runs an existing trainer to the end of its schedule.
pub fn continue_training(
    mut trainer: AeTrainer,
    data: &Dataset,
    out: &TrainOutputs,
) -> Result<(Checkpoint, Vec<StepRecord>)> {
    if data.is_empty() {
        return Err(ArgbError::invalid("training dataset has no patches"));
    }
    if data.min_side() < trainer.config.patch_size {
        return Err(ArgbError::invalid(format!(
            "patches of side {} are smaller than patch_size {}",
            data.min_side(),
            trainer.config.patch_size
        )));
    }
    let mut log = match &out.log {
        Some(p) => {
            ensure_parent(p)?;
            let f = if trainer.step_count() == 0 {
                fs::File::create(p)?
            } else {
                fs::OpenOptions::new().append(true).create(true).open(p)?
            };
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    let mut records = Vec::new();
    let total = trainer.config.total_steps;
    while !trainer.is_done() {
        let rec = match trainer.step(data) {
            Ok(r) => r,
            Err(e) => {
                // A failed step leaves the parameters untouched.
                if let Some(dir) = &out.snapshot_dir {
                    let path = dir.join(format!("nonfinite_step{}.ckpt", trainer.step_count()));
                    trainer.checkpoint().save(&path)?;
                    log::error!("saved diagnostic snapshot to {}", path.display());
                }
                return Err(e);
            }
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        if rec.step % 500 == 0 || rec.step + 1 == total {
            log::info!(
                "step {:>6} lr {:.2e} l_recon {:.5} (ema {:.5}) l_balance {:.4}",
                rec.step,
                rec.lr,
                rec.l_recon,
                trainer.recon_ema().unwrap_or(rec.l_recon),
                rec.l_balance
            );
        }
        records.push(rec);
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    Ok((trainer.checkpoint(), records))
}

/// Reads a step log written by [`train_autoencoder`].
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| ArgbError::missing(path, e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(ArgbError::from))
        .collect()
}

/// PSNR in dB for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconStats {
    pub mean_psnr: f64,
    /// Mean absolute per-channel difference on the 0-255 scale.
    pub mean_abs_diff_255: f64,
    pub per_image_psnr: Vec<f64>,
}

/// Reconstruction quality of `decode(encode(x))` without 8-bit quantization.
pub fn evaluate_reconstruction(model: &ArgbModel<f32>, images: &[Image]) -> Result<ReconStats> {
    if images.is_empty() {
        return Err(ArgbError::invalid("evaluation set is empty"));
    }
    let mut per_image = Vec::with_capacity(images.len());
    let mut abs_sum = 0.0;
    let mut count = 0usize;
    for img in images {
        let x = img.tensor();
        let y = model.decode(&model.encode(x)?)?;
        let (mut se, mut ae) = (0.0f64, 0.0f64);
        for (a, b) in y.data().iter().zip(x.data()) {
            let d = f64::from(*a) - f64::from(*b);
            se += d * d;
            ae += d.abs();
        }
        per_image.push(psnr_from_mse(se / x.len() as f64));
        abs_sum += ae;
        count += x.len();
    }
    Ok(ReconStats {
        mean_psnr: per_image.iter().sum::<f64>() / per_image.len() as f64,
        mean_abs_diff_255: 255.0 * abs_sum / count as f64,
        per_image_psnr: per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_restarts_at_base_lr() {
        let s = AeTrainConfig::default().schedule();
        assert_eq!(s.lr(0), 5e-4);
        for r in s.restarts(511_000) {
            assert_eq!(s.lr(r), 5e-4);
        }
        let desk = AeTrainConfig::desk().schedule();
        assert_eq!(desk.restarts(10_000), vec![0, 250, 750, 1750, 3750, 5750, 7750, 9750]);
    }

    #[test]
    fn psnr_of_known_mse() {
        assert!((psnr_from_mse(1e-4) - 40.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(0.0), PSNR_CAP);
    }

    #[test]
    fn invalid_config_names_key() {
        let cfg = AeTrainConfig {
            lambda_balance: -1.0,
            ..AeTrainConfig::desk()
        };
        match cfg.validate() {
            Err(ArgbError::Config { path, .. }) => assert_eq!(path, "autoencoder.lambda_balance"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
