//! A small residual denoiser trained with RGB or aRGB losses, plus PSNR and
//! SSIM evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use argb_nn::{clip_grad_inf_norm, Adam, CosineRestarts, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorFile;
use crate::data::{AugmentPolicy, Dataset};
use crate::error::{ArgbError, Result};
use crate::io::{check_image_batch, ensure_parent, Image};
use crate::losses::{loss_graph, LossConfig, LossSpec, Space};
use crate::model::{ArgbModel, Conv, Encoder};
use crate::training::psnr_from_mse;

pub const RESTORER_LAYERS: usize = 8;
pub const RESTORER_WIDTH: usize = 64;
/// Infinity-norm gradient clip applied to RGB-loss runs unless configured.
pub const DEFAULT_RGB_GRAD_CLIP: f64 = 20.0;

/// Eight 3x3 convolutions `3 -> 64 -> ... -> 64 -> 3` with ReLU in between.
/// The network predicts the noise, which is subtracted from the input.
#[derive(Clone, Debug)]
pub struct TinyRestorer {
    pub convs: Vec<Conv<f32>>,
}

impl TinyRestorer {
    pub fn init(rng: &mut impl Rng) -> Self {
        let convs = (0..RESTORER_LAYERS)
            .map(|i| {
                let cin = if i == 0 { 3 } else { RESTORER_WIDTH };
                let cout = if i + 1 == RESTORER_LAYERS { 3 } else { RESTORER_WIDTH };
                Conv::init(cin, cout, 3, true, rng)
            })
            .collect();
        Self { convs }
    }

    pub fn named_params(&self) -> Vec<(String, &Arc<Tensor<f32>>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("restorer.conv{i}.weight"), &c.weight));
            if let Some(b) = &c.bias {
                out.push((format!("restorer.conv{i}.bias"), b));
            }
        }
        out
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Arc<Tensor<f32>>> {
        let rest = name.strip_prefix("restorer.conv")?;
        let (idx, field) = rest.split_once('.')?;
        let conv = self.convs.get_mut(idx.parse::<usize>().ok()?)?;
        match field {
            "weight" => Some(&mut conv.weight),
            "bias" => conv.bias.as_mut(),
            _ => None,
        }
    }

    pub fn graph(&self, g: &mut Graph<f32>, x: Var, trainable: bool) -> Var {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            let w = g.param(&format!("restorer.conv{i}.weight"), &conv.weight, trainable);
            let b = conv
                .bias
                .as_ref()
                .map(|b| g.param(&format!("restorer.conv{i}.bias"), b, trainable));
            h = g.conv2d(h, w, b, conv.pad, None);
            if i + 1 < self.convs.len() {
                h = g.relu(h);
            }
        }
        g.sub(x, h)
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_image_batch(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.graph(&mut g, xv, false);
        Ok(g.value(y).clone())
    }

    pub fn save(&self, path: &Path, header: serde_json::Value) -> Result<()> {
        let mut f = TensorFile::new("tiny-restorer", header);
        for (name, t) in self.named_params() {
            f.push(name, (**t).clone());
        }
        f.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = TensorFile::load(path)?;
        if f.kind != "tiny-restorer" {
            return Err(ArgbError::Checkpoint(format!(
                "expected tiny-restorer, found {}",
                f.kind
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::init(&mut rng);
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let t = f
                .get(&name)
                .ok_or_else(|| ArgbError::Checkpoint(format!("tensor `{name}` missing")))?;
            *model.param_mut(&name).expect("own parameter") = Arc::new(t.clone());
        }
        Ok(model)
    }
}

/// `x + N(0, sigma^2)` clipped to `[0, 1]`.
pub fn degrade(x: &Tensor<f32>, sigma: f64, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(ArgbError::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0f32, sigma as f32).expect("valid sigma");
    let data = x
        .data()
        .iter()
        .map(|v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Ok(Tensor::new(x.shape(), data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestoreTrainConfig {
    /// Set from the run's `loss` section rather than stored here.
    #[serde(skip)]
    pub loss: LossConfig,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Joint rescaling of all gradients so their largest magnitude is at
    /// most this value. Unset means [`DEFAULT_RGB_GRAD_CLIP`] for RGB losses
    /// and no clipping for aRGB losses; `0` disables clipping.
    pub grad_clip: Option<f64>,
    pub sigma: f64,
    pub patch_size: usize,
    pub seed: u64,
    /// Validation every this many steps (0 disables intermediate validation).
    pub val_every: u64,
}

impl Default for RestoreTrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            steps: 5_000,
            batch: 1,
            lr: 5e-4,
            grad_clip: None,
            sigma: 0.1,
            patch_size: 64,
            seed: 0,
            val_every: 1_000,
        }
    }
}

impl RestoreTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let checks = [
            ("restorer.steps", self.steps >= 1),
            ("restorer.batch", self.batch >= 1),
            ("restorer.lr", self.lr > 0.0 && self.lr.is_finite()),
            ("restorer.sigma", self.sigma > 0.0 && self.sigma.is_finite()),
            ("restorer.patch_size", self.patch_size >= 1),
            (
                "restorer.grad_clip",
                self.grad_clip.is_none_or(|c| c >= 0.0 && c.is_finite()),
            ),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(ArgbError::config(key, "value out of range"));
            }
        }
        Ok(())
    }

    /// The clipping threshold actually applied, if any.
    pub fn effective_grad_clip(&self) -> Option<f64> {
        match (self.grad_clip, self.loss.space) {
            (Some(c), _) => (c > 0.0).then_some(c),
            (None, Space::Rgb) => Some(DEFAULT_RGB_GRAD_CLIP),
            (None, Space::Argb) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreLogRecord {
    pub step: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ssim: Option<f64>,
}

/// Clean images with a fixed noisy version of each.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub clean: Vec<Tensor<f32>>,
    pub noisy: Vec<Tensor<f32>>,
}

impl ValidationSet {
    pub fn new(images: &[Image], sigma: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean: Vec<Tensor<f32>> = images.iter().map(|i| i.tensor().clone()).collect();
        let noisy = clean
            .iter()
            .map(|c| degrade(c, sigma, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clean, noisy })
    }
}

pub struct RestoreRun {
    pub model: TinyRestorer,
    pub log: Vec<RestoreLogRecord>,
    /// Restorer output on the first training batch before any update.
    pub first_output: Tensor<f32>,
    pub encoder_hash_before: Option<String>,
    pub encoder_hash_after: Option<String>,
}

/// Trains a [`TinyRestorer`] to remove Gaussian noise of `cfg.sigma`. An
/// encoder must be passed exactly when the loss lives in aRGB space; it is
/// only read.
pub fn train_restorer(
    cfg: &RestoreTrainConfig,
    encoder: Option<&ArgbModel<f32>>,
    data: &Dataset,
    val: Option<&ValidationSet>,
    log_path: Option<&Path>,
) -> Result<RestoreRun> {
    cfg.validate()?;
    match (cfg.loss.space, encoder) {
        (Space::Argb, None) => return Err(ArgbError::invalid("aRGB loss needs an encoder checkpoint")),
        (Space::Rgb, Some(_)) => return Err(ArgbError::invalid("RGB loss takes no encoder")),
        _ => {}
    }
    let hash_before = encoder.map(ArgbModel::param_hash);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(0);
    let mut model = TinyRestorer::init(&mut init_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::<f32>::default();
    let schedule = CosineRestarts::new(cfg.lr, cfg.steps, cfg.steps);
    let spec: LossSpec<f32> = LossSpec::from_config(cfg.loss.clone());
    let policy = AugmentPolicy {
        crop_size: cfg.patch_size,
        ..AugmentPolicy::default()
    };
    let mut writer = match log_path {
        Some(p) => {
            ensure_parent(p)?;
            Some(std::io::BufWriter::new(fs::File::create(p)?))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut first_output = None;
    for step in 0..cfg.steps {
        let clean = data.sample_batch(cfg.batch, &policy, &mut rng)?;
        let noisy = degrade(&clean, cfg.sigma, &mut rng)?;
        let mut g = Graph::new();
        let xv = g.constant(noisy);
        let pred = model.graph(&mut g, xv, true);
        if first_output.is_none() {
            first_output = Some(g.value(pred).clone());
        }
        let target = g.constant(clean);
        let enc = encoder.map(|e| e as &dyn Encoder<f32>);
        let loss = loss_graph(&mut g, &spec, enc, pred, target)?;
        let value = f64::from(g.value(loss).item());
        if !value.is_finite() {
            return Err(ArgbError::numerical(format!("non-finite restorer loss at step {step}")));
        }
        let mut grads = g.backward(loss);
        let mut named: Vec<(String, Tensor<f32>)> = g
            .params()
            .iter()
            .filter_map(|(n, v)| grads.take(*v).map(|t| (n.clone(), t)))
            .collect();
        drop(g);
        if let Some(max) = cfg.effective_grad_clip() {
            let mut refs: Vec<&mut Tensor<f32>> = named.iter_mut().map(|(_, t)| t).collect();
            clip_grad_inf_norm(&mut refs, max);
        }
        let lr = schedule.lr(step);
        adam.begin_step();
        for (name, grad) in &named {
            let slot = model.param_mut(name).expect("restorer parameter");
            adam.update(name, Arc::make_mut(slot), grad, lr);
        }
        let mut rec = RestoreLogRecord {
            step,
            loss: value,
            val_psnr: None,
            val_ssim: None,
        };
        let last = step + 1 == cfg.steps;
        if let Some(v) = val {
            if last || (cfg.val_every > 0 && (step + 1) % cfg.val_every == 0) {
                let m = evaluate(&model, v)?;
                rec.val_psnr = Some(m.psnr);
                rec.val_ssim = Some(m.ssim);
                log::info!(
                    "step {:>5} loss {:.5} val psnr {:.2} ssim {:.4}",
                    step + 1,
                    value,
                    m.psnr,
                    m.ssim
                );
            }
        }
        if let Some(w) = writer.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        log.push(rec);
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    let hash_after = encoder.map(ArgbModel::param_hash);
    if hash_before != hash_after {
        return Err(ArgbError::numerical(
            "encoder parameters changed during restorer training",
        ));
    }
    Ok(RestoreRun {
        model,
        log,
        first_output: first_output.expect("at least one step"),
        encoder_hash_before: hash_before,
        encoder_hash_after: hash_after,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreMetrics {
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the noisy inputs themselves.
    pub input_psnr: f64,
}

/// Mean PSNR of 8-bit-quantized outputs and mean SSIM over the set.
pub fn evaluate(model: &TinyRestorer, val: &ValidationSet) -> Result<RestoreMetrics> {
    if val.clean.is_empty() {
        return Err(ArgbError::invalid("validation set is empty"));
    }
    let (mut psnr_sum, mut ssim_sum, mut input) = (0.0, 0.0, 0.0);
    for (clean, noisy) in val.clean.iter().zip(&val.noisy) {
        let out = quantize(&model.forward(noisy)?);
        psnr_sum += psnr(&out, clean);
        ssim_sum += ssim(&out, clean)?;
        input += psnr(&quantize(noisy), clean);
    }
    let n = val.clean.len() as f64;
    Ok(RestoreMetrics {
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        input_psnr: input / n,
    })
}

fn quantize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| f32::from(crate::io::quantize(v)) / 255.0)
}

/// PSNR with unit peak, capped like the reconstruction metric.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum();
    psnr_from_mse(se / a.len() as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels and all window positions that fit inside the
/// image (11x11 Gaussian window, sigma 1.5, dynamic range 1).
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(ArgbError::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let [n, c, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(ArgbError::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let k = gaussian_kernel();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..n {
        for ch in 0..c {
            let x: Vec<f64> = a.plane_slice(bi, ch).iter().map(|&v| f64::from(v)).collect();
            let y: Vec<f64> = b.plane_slice(bi, ch).iter().map(|&v| f64::from(v)).collect();
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
            let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &k));
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cov = sxy[i] - ux * uy;
                total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Saves `noisy | restored | clean` side by side for each validation image.
pub fn write_triptychs(model: &TinyRestorer, val: &ValidationSet, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (i, (clean, noisy)) in val.clean.iter().zip(&val.noisy).enumerate() {
        let out = model.forward(noisy)?;
        let (h, w) = (clean.height(), clean.width());
        let parts = [noisy, &out, clean];
        let strip = Tensor::from_fn([1, 3, h, 3 * w], |_, c, y, x| parts[x / w].at(0, c, y, x % w));
        let path = dir.join(format!("val_{i:03}.png"));
        Image::from_clamped(strip)?.save_png(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
