//! Per-pixel losses in RGB or in the aRGB embedding space of a frozen
//! encoder, auxiliary-loss hooks and gradient statistics.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use argb_nn::{Graph, Scalar, Tensor, Var};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{ArgbError, Result};
use crate::io::{ensure_parent, write_csv};
use crate::model::Encoder;

pub const CHARBONNIER_EPS: f64 = 1e-3;
const PSNR_STABILIZER: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    #[default]
    Rgb,
    Argb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    L1,
    L2,
    Psnr,
    Charbonnier,
    Edge,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [Self::L1, Self::L2, Self::Psnr, Self::Charbonnier, Self::Edge];

    pub fn name(self) -> &'static str {
        match self {
            Self::L1 => "l1",
            Self::L2 => "l2",
            Self::Psnr => "psnr",
            Self::Charbonnier => "charbonnier",
            Self::Edge => "edge",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = ArgbError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ArgbError::invalid(format!("unknown loss kind `{s}`")))
    }
}

/// An extra differentiable term `weight * f(pred, target)` on the RGB images.
pub type AuxFn<T> = dyn Fn(&mut Graph<T>, Var, Var) -> Var + Send + Sync;

#[derive(Clone)]
pub struct AuxHook<T: Scalar> {
    pub name: String,
    pub weight: f64,
    pub term: Arc<AuxFn<T>>,
}

impl<T: Scalar> fmt::Debug for AuxHook<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuxHook")
            .field("name", &self.name)
            .field("weight", &self.weight)
            .finish_non_exhaustive()
    }
}

/// Serializable part of a loss specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub space: Space,
    pub kind: LossKind,
    pub weight: f64,
    pub charbonnier_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            space: Space::Rgb,
            kind: LossKind::L1,
            weight: 1.0,
            charbonnier_eps: CHARBONNIER_EPS,
        }
    }
}

impl LossConfig {
    pub fn new(space: Space, kind: LossKind) -> Self {
        Self {
            space,
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(ArgbError::config("loss.weight", "must be a finite value >= 0"));
        }
        if !(self.charbonnier_eps > 0.0 && self.charbonnier_eps.is_finite()) {
            return Err(ArgbError::config("loss.charbonnier_eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossSpec<T: Scalar = f32> {
    pub config: LossConfig,
    pub aux: Vec<AuxHook<T>>,
}

impl<T: Scalar> LossSpec<T> {
    pub fn new(space: Space, kind: LossKind) -> Self {
        Self {
            config: LossConfig::new(space, kind),
            aux: Vec::new(),
        }
    }

    pub fn from_config(config: LossConfig) -> Self {
        Self {
            config,
            aux: Vec::new(),
        }
    }

    pub fn with_aux(mut self, name: &str, weight: f64, term: Arc<AuxFn<T>>) -> Self {
        self.aux.push(AuxHook {
            name: name.to_string(),
            weight,
            term,
        });
        self
    }
}

/// Records `kind` between two same-shaped variables.
pub fn pixel_loss_graph<T: Scalar>(g: &mut Graph<T>, kind: LossKind, pred: Var, target: Var, eps: f64) -> Var {
    match kind {
        LossKind::L1 => {
            let d = g.sub(pred, target);
            let a = g.abs(d);
            g.mean(a)
        }
        LossKind::L2 => {
            let d = g.sub(pred, target);
            let s = g.square(d);
            g.mean(s)
        }
        LossKind::Psnr => {
            // Negative PSNR on a unit peak: 10 log10(mse).
            let d = g.sub(pred, target);
            let s = g.square(d);
            let mse = g.mean(s);
            let shifted = g.add_scalar(mse, PSNR_STABILIZER);
            let l = g.log10(shifted);
            g.scale(l, 10.0)
        }
        LossKind::Charbonnier => {
            let d = g.sub(pred, target);
            let c = g.charbonnier(d, eps);
            g.mean(c)
        }
        LossKind::Edge => {
            let lp = g.laplacian(pred);
            let lt = g.laplacian(target);
            let d = g.sub(lp, lt);
            let c = g.charbonnier(d, eps);
            g.mean(c)
        }
    }
}

fn check_pair<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(ArgbError::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

pub fn pixel_loss<T: Scalar>(kind: LossKind, pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<T> {
    check_pair(pred, target)?;
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let l = pixel_loss_graph(&mut g, kind, p, t, eps);
    Ok(g.value(l).item())
}

/// Records the full loss of `spec` on image variables. In aRGB space both
/// images pass through the frozen encoder; only `pred` should require
/// gradients. Auxiliary hooks act on the RGB images.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    spec: &LossSpec<T>,
    encoder: Option<&dyn Encoder<T>>,
    pred: Var,
    target: Var,
) -> Result<Var> {
    spec.config.validate()?;
    let c = &spec.config;
    let (p, t) = match c.space {
        Space::Rgb => (pred, target),
        Space::Argb => {
            let enc = encoder.ok_or_else(|| ArgbError::invalid("an aRGB loss needs an encoder"))?;
            (enc.encode_graph(g, pred), enc.encode_graph(g, target))
        }
    };
    let base = pixel_loss_graph(g, c.kind, p, t, c.charbonnier_eps);
    let mut total = if c.weight == 1.0 { base } else { g.scale(base, c.weight) };
    for hook in &spec.aux {
        let term = (hook.term)(g, pred, target);
        if g.value(term).len() != 1 {
            return Err(ArgbError::shape(format!("aux term `{}` is not a scalar", hook.name)));
        }
        let weighted = g.scale(term, hook.weight);
        total = g.add(total, weighted);
    }
    Ok(total)
}

/// Loss between `f(pred)` and `f(target)` for a frozen encoder `f`.
pub fn argb_loss<T: Scalar>(
    spec: &LossSpec<T>,
    encoder: &dyn Encoder<T>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<T> {
    Ok(loss_and_grad(spec, Some(encoder), pred, target, false)?.0)
}

/// The loss value and, with `with_grad`, its gradient with respect to `pred`.
pub fn loss_and_grad<T: Scalar>(
    spec: &LossSpec<T>,
    encoder: Option<&dyn Encoder<T>>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    with_grad: bool,
) -> Result<(T, Option<Tensor<T>>)> {
    check_pair(pred, target)?;
    let mut g = Graph::new();
    let p = if with_grad {
        g.input(pred.clone())
    } else {
        g.constant(pred.clone())
    };
    let t = g.constant(target.clone());
    let l = loss_graph(&mut g, spec, encoder, p, t)?;
    let value = g.value(l).item();
    let grad = with_grad.then(|| {
        let mut grads = g.backward(l);
        grads.take(p).unwrap_or_else(|| Tensor::zeros(pred.shape()))
    });
    Ok((value, grad))
}

/// Histogram and summary statistics of a gradient tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradStats {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean_abs: f64,
    pub max_abs: f64,
    pub frac_zero: f64,
    pub count: u64,
}

impl GradStats {
    /// Statistics with `bins` equal-width bins spanning `[-max|g|, max|g|]`.
    pub fn new<T: Scalar>(grad: &Tensor<T>, bins: usize) -> Self {
        let max_abs = grad.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
        let half = if max_abs > 0.0 { max_abs } else { 1.0 };
        let bins = bins.max(1);
        let edges = (0..=bins)
            .map(|i| -half + 2.0 * half * i as f64 / bins as f64)
            .collect();
        Self::with_edges(grad, edges)
    }

    /// Statistics over explicit increasing bin edges; values outside the
    /// range are clamped into the first or last bin.
    pub fn with_edges<T: Scalar>(grad: &Tensor<T>, edges: Vec<f64>) -> Self {
        assert!(edges.len() >= 2, "need at least one bin");
        let bins = edges.len() - 1;
        let mut counts = vec![0u64; bins];
        let (mut sum_abs, mut max_abs, mut zeros) = (0.0f64, 0.0f64, 0u64);
        for v in grad.data() {
            let v = v.as_f64();
            sum_abs += v.abs();
            max_abs = max_abs.max(v.abs());
            if v == 0.0 {
                zeros += 1;
            }
            let i = edges[1..bins].partition_point(|&e| e <= v);
            counts[i] += 1;
        }
        let n = grad.len() as u64;
        Self {
            edges,
            counts,
            mean_abs: sum_abs / n.max(1) as f64,
            max_abs,
            frac_zero: zeros as f64 / n.max(1) as f64,
            count: n,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, c)| vec![self.edges[i].to_string(), self.edges[i + 1].to_string(), c.to_string()])
            .collect();
        write_csv(path, &["bin_left", "bin_right", "count"], &rows)
    }

    /// Bar chart of the histogram with counts on a log scale.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        render_histograms(path, &[(self, [40, 40, 40])])
    }
}

/// Overlays several histograms (same bin layout) as colored bars.
pub fn render_histograms(path: &Path, hists: &[(&GradStats, [u8; 3])]) -> Result<()> {
    let (w, h, margin) = (640u32, 320u32, 20u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let peak = hists
        .iter()
        .flat_map(|(s, _)| s.counts.iter())
        .map(|&c| ((c as f64) + 1.0).ln())
        .fold(0.0, f64::max)
        .max(1e-9);
    for (stats, color) in hists {
        let bins = stats.counts.len() as u32;
        let bar = ((w - 2 * margin) / bins).max(1);
        for (i, &c) in stats.counts.iter().enumerate() {
            let height = (((c as f64) + 1.0).ln() / peak * f64::from(h - 2 * margin)) as u32;
            let x0 = margin + i as u32 * bar;
            for x in x0..(x0 + bar).min(w - margin) {
                for y in (h - margin - height)..(h - margin) {
                    img.put_pixel(x, y, Rgb(*color));
                }
            }
        }
    }
    for x in margin..w - margin {
        img.put_pixel(x, h - margin, Rgb([0, 0, 0]));
    }
    ensure_parent(path)?;
    img.save(path)?;
    Ok(())
}

/// Statistics of `d loss / d wrt` on a recorded graph.
pub fn grad_stats<T: Scalar>(g: &Graph<T>, loss: Var, wrt: Var, bins: usize) -> Result<GradStats> {
    if g.value(loss).len() != 1 {
        return Err(ArgbError::shape(format!(
            "loss must be a scalar, got shape {:?}",
            g.value(loss).shape()
        )));
    }
    let mut grads = g.backward(loss);
    let grad = grads.take(wrt).unwrap_or_else(|| Tensor::zeros(g.value(wrt).shape()));
    Ok(GradStats::new(&grad, bins))
}
