//! Measurements on a trained encoder: orthogonal decomposition through the
//! effective decoder, embedding mixing and inversion, the self-reference
//! map, metric sweeps, expert maps, embedding export and filter
//! visualisation.

use std::path::Path;

use argb_nn::{sgd_update, Graph, Scalar, Tensor};
use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ArgbError, Result};
use crate::io::{check_image_batch, ensure_parent, write_csv};
use crate::model::{assignments, ArgbModel, EffectiveDecoder, Embedding, Encoder, PassOptions, EXPERT_RADIUS};

#[derive(Clone, Debug)]
pub struct Decomposition<T: Scalar = f32> {
    /// Row-space component `A⁺A xi`; the only part the decoder sees.
    pub xi_par: Embedding<T>,
    /// Nullspace component `(I - A⁺A) xi`.
    pub xi_perp: Embedding<T>,
}

pub fn decompose<T: Scalar>(xi: &Embedding<T>, eff: &EffectiveDecoder) -> Result<Decomposition<T>> {
    Ok(Decomposition {
        xi_par: Embedding::new(eff.parallel(xi.tensor())?)?,
        xi_perp: Embedding::new(eff.perpendicular(xi.tensor())?)?,
    })
}

/// `max |g(xi + P_perp zeta) - g(xi)|` through the three decoder layers.
pub fn nullspace_invariance<T: Scalar>(model: &ArgbModel<T>, xi: &Embedding<T>, zeta: &Tensor<T>) -> Result<f64> {
    if zeta.shape() != xi.tensor().shape() {
        return Err(ArgbError::shape(format!(
            "perturbation {:?} vs embedding {:?}",
            zeta.shape(),
            xi.tensor().shape()
        )));
    }
    let eff = model.effective_decoder();
    let mut moved = eff.perpendicular(zeta)?;
    moved.add_assign(xi.tensor());
    let a = model.decode(xi)?;
    let b = model.decode(&Embedding::new(moved)?)?;
    Ok(a.max_abs_diff(&b).as_f64())
}

/// `A⁺A xi1 + (I - A⁺A) xi2`: the colors of the first embedding with the
/// nullspace part of the second.
pub fn mix_embeddings<T: Scalar>(
    xi1: &Embedding<T>,
    xi2: &Embedding<T>,
    eff: &EffectiveDecoder,
) -> Result<Embedding<T>> {
    if xi1.tensor().shape() != xi2.tensor().shape() {
        return Err(ArgbError::shape(format!(
            "cannot mix {:?} with {:?}",
            xi1.tensor().shape(),
            xi2.tensor().shape()
        )));
    }
    let mut out = eff.parallel(xi1.tensor())?;
    out.add_assign(&eff.perpendicular(xi2.tensor())?);
    Embedding::new(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InversionInit {
    /// Independent `U(0, 1)` values.
    RandomUniform,
    /// Start from the given image.
    Provided,
}

/// Reduction of the squared embedding error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionObjective {
    /// Sum over all elements: the per-pixel step does not depend on image size.
    Sum,
    /// Mean over all elements.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub init: InversionInit,
    pub objective: InversionObjective,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            lr: 0.1,
            init: InversionInit::RandomUniform,
            objective: InversionObjective::Mean,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Inversion<T: Scalar = f32> {
    pub image: Tensor<T>,
    /// Objective before each step and after the last one (`steps + 1` values).
    pub trace: Vec<f64>,
}

/// Plain gradient descent on the squared error `(f(z) - target)^2` over the
/// image `z`, summed or averaged per `cfg.objective`.
/// `start` is required for [`InversionInit::Provided`] and fixes the shape
/// for random initialisation.
pub fn invert<T: Scalar>(
    encoder: &dyn Encoder<T>,
    target: &Embedding<T>,
    cfg: &InversionConfig,
    start: Option<&Tensor<T>>,
    rng: &mut impl Rng,
) -> Result<Inversion<T>> {
    if cfg.steps == 0 {
        return Err(ArgbError::invalid("inversion needs at least one step"));
    }
    let [n, _, h, w] = target.tensor().shape();
    let mut z = match (&cfg.init, start) {
        (InversionInit::Provided, Some(s)) => s.clone(),
        (InversionInit::Provided, None) => return Err(ArgbError::invalid("provided init needs a start image")),
        (InversionInit::RandomUniform, _) => {
            Tensor::from_fn([n, 3, h, w], |_, _, _, _| T::from_f64_lossy(rng.random::<f64>()))
        }
    };
    check_image_batch(&z)?;
    if [z.batch(), z.height(), z.width()] != [n, h, w] {
        return Err(ArgbError::shape("start image and target embedding differ in size"));
    }
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let f = encoder.encode_graph(&mut g, zv);
        let t = g.constant(target.tensor().clone());
        let d = g.sub(f, t);
        let s = g.square(d);
        let loss = match cfg.objective {
            InversionObjective::Sum => g.sum(s),
            InversionObjective::Mean => g.mean(s),
        };
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(ArgbError::numerical(format!(
                "inversion diverged at step {step}; trace {trace:?}"
            )));
        }
        trace.push(value);
        if step == cfg.steps {
            break;
        }
        let mut grads = g.backward(loss);
        let grad = grads.take(zv).expect("input requires grad");
        sgd_update(&mut z, &grad, cfg.lr);
    }
    Ok(Inversion { image: z, trace })
}

/// 3x3 blocks `A * d xi[p] / d x[p]` at every pixel, with their diagonals
/// summarised as a root-mean-square over the colors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfRefMap {
    pub height: usize,
    pub width: usize,
    /// Row-major `[r][s]` blocks: derivative of output color `r` with
    /// respect to input color `s` at the same pixel.
    pub blocks: Vec<[[f64; 3]; 3]>,
    pub values: Vec<f64>,
}

impl SelfRefMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Pixels at least this far apart (Chebyshev) have disjoint dependence: the
/// embedding at one does not depend on the input at the other.
const GRID_STRIDE: usize = EXPERT_RADIUS + 1;

/// The self-reference map of a single image `[1, 3, H, W]`.
///
/// One vector-Jacobian product per grid offset and output color yields the
/// exact Jacobian blocks of every pixel on a grid with stride 5, because the
/// embedding's receptive field has radius 4 and routing is constant under
/// differentiation.
pub fn self_reference<T: Scalar>(model: &ArgbModel<T>, x: &Tensor<T>) -> Result<SelfRefMap> {
    check_image_batch(x)?;
    if x.batch() != 1 {
        return Err(ArgbError::shape("self_reference takes a single image"));
    }
    let (h, w) = (x.height(), x.width());
    let c = model.embedding_dim();
    let eff = model.effective_decoder();
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let emb = model.encoder_graph(&mut g, xv, PassOptions::FROZEN).embedding;
    let mut blocks = vec![[[0.0f64; 3]; 3]; h * w];
    for oy in 0..GRID_STRIDE.min(h) {
        for ox in 0..GRID_STRIDE.min(w) {
            for r in 0..3 {
                let mut cot = Tensor::<T>::zeros([1, c, h, w]);
                for y in (oy..h).step_by(GRID_STRIDE) {
                    for xx in (ox..w).step_by(GRID_STRIDE) {
                        for ch in 0..c {
                            cot.set(0, ch, y, xx, T::from_f64_lossy(eff.a[(r, ch)]));
                        }
                    }
                }
                let grads = g.backward_with(emb, cot);
                let gx = grads.get(xv).expect("input requires grad");
                for y in (oy..h).step_by(GRID_STRIDE) {
                    for xx in (ox..w).step_by(GRID_STRIDE) {
                        for s in 0..3 {
                            blocks[y * w + xx][r][s] = gx.at(0, s, y, xx).as_f64();
                        }
                    }
                }
            }
        }
    }
    let values: Vec<f64> = blocks
        .iter()
        .map(|b| ((b[0][0].powi(2) + b[1][1].powi(2) + b[2][2].powi(2)) / 3.0).sqrt())
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ArgbError::numerical("self-reference Jacobian is not finite"));
    }
    Ok(SelfRefMap {
        height: h,
        width: w,
        blocks,
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub rgb_mean: f64,
    pub rgb_std: f64,
    pub argb_mean: f64,
    pub argb_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    s / a.len() as f64
}

/// For each sigma, mean and sample standard deviation over `n_samples`
/// noise draws of the RGB distance `mse(x, x + eta)` and the aRGB distance
/// `mse(f(x), f(x + eta))`. Noisy images are clipped to `[0, 1]`.
pub fn metric_sweep<T: Scalar>(
    model: &ArgbModel<T>,
    x: &Tensor<T>,
    sigmas: &[f64],
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SweepRow>> {
    check_image_batch(x)?;
    if n_samples == 0 {
        return Err(ArgbError::invalid("n_samples must be at least 1"));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(ArgbError::invalid(format!("sigma must be >= 0, got {s}")));
    }
    let fx = model.encode(x)?;
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut rgb = Vec::with_capacity(n_samples);
        let mut argb = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let noisy = if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("valid sigma");
                let data = x
                    .data()
                    .iter()
                    .map(|v| T::from_f64_lossy((v.as_f64() + normal.sample(rng)).clamp(0.0, 1.0)))
                    .collect();
                Tensor::new(x.shape(), data)
            } else {
                x.clone()
            };
            rgb.push(mse(x, &noisy));
            argb.push(mse(fx.tensor(), model.encode(&noisy)?.tensor()));
        }
        let (rgb_mean, rgb_std) = mean_std(&rgb);
        let (argb_mean, argb_std) = mean_std(&argb);
        rows.push(SweepRow {
            sigma,
            rgb_mean,
            rgb_std,
            argb_mean,
            argb_std,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| vec![r.sigma, r.rgb_mean, r.rgb_std, r.argb_mean, r.argb_std])
        .collect();
    write_csv(path, &["sigma", "rgb_mean", "rgb_std", "argb_mean", "argb_std"], &table)
}

/// Per-pixel expert index of a single image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertMap {
    pub height: usize,
    pub width: usize,
    pub num_experts: usize,
    pub indices: Vec<usize>,
}

impl ExpertMap {
    pub fn at(&self, y: usize, x: usize) -> usize {
        self.indices[y * self.width + x]
    }

    /// Pixel count per expert.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_experts];
        for &i in &self.indices {
            h[i] += 1;
        }
        h
    }

    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Rgb(palette(self.at(y as usize, x as usize), self.num_experts))
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        self.to_rgb().save(path)?;
        Ok(())
    }
}

/// Evenly spaced hues.
fn palette(i: usize, n: usize) -> [u8; 3] {
    let hue = i as f64 / n.max(1) as f64 * 6.0;
    let f = hue.fract();
    let (r, g, b) = match hue as usize % 6 {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    [(r * 230.0) as u8 + 25, (g * 230.0) as u8 + 25, (b * 230.0) as u8 + 25]
}

pub fn expert_map<T: Scalar>(model: &ArgbModel<T>, x: &Tensor<T>) -> Result<ExpertMap> {
    if x.batch() != 1 {
        return Err(ArgbError::shape("expert_map takes a single image"));
    }
    let probs = model.route(x)?;
    Ok(ExpertMap {
        height: x.height(),
        width: x.width(),
        num_experts: model.num_experts(),
        indices: assignments(&probs),
    })
}

/// Rows `(x, y, expert, e_0 .. e_{C-1})` for every `subsample`-th pixel in
/// both directions.
pub fn embedding_rows<T: Scalar>(model: &ArgbModel<T>, x: &Tensor<T>, subsample: usize) -> Result<Vec<Vec<String>>> {
    if subsample == 0 {
        return Err(ArgbError::invalid("subsample must be at least 1"));
    }
    let map = expert_map(model, x)?;
    let xi = model.encode(x)?;
    let t = xi.tensor();
    let mut rows = Vec::new();
    for y in (0..x.height()).step_by(subsample) {
        for px in (0..x.width()).step_by(subsample) {
            let mut row = vec![px.to_string(), y.to_string(), map.at(y, px).to_string()];
            row.extend((0..t.channels()).map(|c| t.at(0, c, y, px).to_string()));
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn export_embeddings<T: Scalar>(
    model: &ArgbModel<T>,
    x: &Tensor<T>,
    subsample: usize,
    path: &Path,
) -> Result<usize> {
    let rows = embedding_rows(model, x, subsample)?;
    let mut header = vec!["x".to_string(), "y".to_string(), "expert".to_string()];
    header.extend((0..model.embedding_dim()).map(|c| format!("e{c}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, &header, &rows)?;
    Ok(rows.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaxFilterConfig {
    pub size: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for MaxFilterConfig {
    fn default() -> Self {
        Self {
            size: 32,
            steps: 100,
            lr: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaxFilter<T: Scalar = f32> {
    pub image: Tensor<T>,
    /// Mean activation before each step and after the last one.
    pub trace: Vec<f64>,
}

/// Gradient ascent on the mean of channel `channel` of expert `k`, starting
/// from uniform noise. Each step moves by `lr` times the gradient divided by
/// its largest magnitude, then clamps the image to `[0, 1]`.
pub fn maximize_filter<T: Scalar>(
    model: &ArgbModel<T>,
    k: usize,
    channel: usize,
    cfg: &MaxFilterConfig,
    rng: &mut impl Rng,
) -> Result<MaxFilter<T>> {
    if k >= model.num_experts() || channel >= model.embedding_dim() {
        return Err(ArgbError::invalid(format!(
            "expert {k} / channel {channel} out of range"
        )));
    }
    if cfg.size == 0 || cfg.steps == 0 {
        return Err(ArgbError::invalid("size and steps must be positive"));
    }
    let s = cfg.size;
    let mut x = Tensor::from_fn([1, 3, s, s], |_, _, _, _| T::from_f64_lossy(rng.random::<f64>()));
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = model.expert_graph(&mut g, k, xv, false);
        let ch = g.select_channel(out, channel);
        let act = g.mean(ch);
        let value = g.value(act).item().as_f64();
        if !value.is_finite() {
            return Err(ArgbError::numerical(format!("activation diverged at step {step}")));
        }
        trace.push(value);
        if step == cfg.steps {
            break;
        }
        let mut grads = g.backward(act);
        let grad = grads.take(xv).expect("input requires grad");
        let scale = grad.max_abs().as_f64();
        if scale > 0.0 {
            let f = cfg.lr / scale;
            x = x.zip_map(&grad, |v, gv| {
                T::from_f64_lossy((v.as_f64() + f * gv.as_f64()).clamp(0.0, 1.0))
            });
        }
    }
    Ok(MaxFilter { image: x, trace })
}

/// `k x k` box filter with zero padding handled by averaging only the valid
/// neighbours.
pub fn box_blur<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let r = (k / 2) as isize;
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, h, w], |b, ch, y, xx| {
        let (mut sum, mut cnt) = (0.0f64, 0usize);
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xq) = (y as isize + dy, xx as isize + dx);
                if yy >= 0 && xq >= 0 && (yy as usize) < h && (xq as usize) < w {
                    sum += x.at(b, ch, yy as usize, xq as usize).as_f64();
                    cnt += 1;
                }
            }
        }
        T::from_f64_lossy(sum / cnt as f64)
    })
}
