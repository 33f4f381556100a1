//! The aRGB autoencoder: a per-pixel top-1 router over `K` convolutional
//! experts, aggregated into a `C = 128` channel embedding, and a linear
//! decoder made of three stacked 1x1 convolutions.
//!
//! Every forward computation exists in two forms: a graph form used for
//! training and differentiation, and plain methods ([`ArgbModel::route`],
//! [`ArgbModel::encode`], [`ArgbModel::decode`]) that evaluate the frozen
//! model with batch-norm running statistics.

use std::sync::Arc;

use argb_nn::{matmul, Graph, PixelSet, Scalar, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{ArgbError, Result};
use crate::io::check_image_batch;

pub const EMBED_DIM: usize = 128;
pub const DEFAULT_EXPERTS: usize = 20;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Chebyshev radius of the router's receptive field (7x7).
pub const ROUTER_RADIUS: usize = 3;
/// Chebyshev radius of each expert's receptive field (9x9).
pub const EXPERT_RADIUS: usize = 4;
/// Relative singular-value cutoff for the decoder pseudoinverse.
pub const PINV_RTOL: f64 = 1e-6;

const ROUTER_WIDTHS: [usize; 5] = [3, 64, 128, 256, 512];
const ROUTER_KERNELS: [usize; 5] = [3, 3, 3, 1, 1];
const EXPERT_WIDTHS: [usize; 5] = [3, 32, 64, 128, EMBED_DIM];
const DECODER_WIDTHS: [usize; 4] = [EMBED_DIM, 64, 32, 3];

/// Batch-normalization behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are returned for update.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// Options of a recorded encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct PassOptions {
    pub mode: Mode,
    /// Bind parameters as trainable leaves.
    pub trainable: bool,
    /// Evaluate each expert only around the pixels routed to it. Exact: the
    /// result equals the dense evaluation.
    pub sparse: bool,
}

impl PassOptions {
    pub const FROZEN: Self = Self {
        mode: Mode::Eval,
        trainable: false,
        sparse: true,
    };

    pub const TRAIN: Self = Self {
        mode: Mode::Train,
        trainable: true,
        sparse: true,
    };
}

/// A convolution layer with optional bias.
#[derive(Clone, Debug)]
pub struct Conv<T: Scalar> {
    pub weight: Arc<Tensor<T>>,
    pub bias: Option<Arc<Tensor<T>>>,
    pub pad: usize,
}

impl<T: Scalar> Conv<T> {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation for weight
    /// and bias, the default of common deep learning frameworks.
    pub fn init(cin: usize, cout: usize, kernel: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let mut sample =
            |shape: [usize; 4]| Tensor::from_fn(shape, |_, _, _, _| T::from_f64_lossy(rng.random_range(-bound..bound)));
        let weight = sample([cout, cin, kernel, kernel]);
        let bias = bias.then(|| Arc::new(sample([1, cout, 1, 1])));
        Self {
            weight: Arc::new(weight),
            bias,
            pad: (kernel - 1) / 2,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.height()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.batch()
    }

    fn graph(&self, g: &mut Graph<T>, name: &str, trainable: bool, x: Var, pixels: Option<Arc<PixelSet>>) -> Var {
        let w = g.param(&format!("{name}.weight"), &self.weight, trainable);
        let b = self
            .bias
            .as_ref()
            .map(|b| g.param(&format!("{name}.bias"), b, trainable));
        g.conv2d(x, w, b, self.pad, pixels)
    }

    fn cast<U: Scalar>(&self) -> Conv<U> {
        Conv {
            weight: Arc::new(self.weight.cast()),
            bias: self.bias.as_ref().map(|b| Arc::new(b.cast())),
            pad: self.pad,
        }
    }
}

/// Per-channel batch mean and biased variance from one training pass.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Arc<Tensor<T>>,
    pub beta: Arc<Tensor<T>>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Arc::new(Tensor::full([1, channels, 1, 1], T::one())),
            beta: Arc::new(Tensor::zeros([1, channels, 1, 1])),
            running_mean: Tensor::zeros([1, channels, 1, 1]),
            running_var: Tensor::full([1, channels, 1, 1], T::one()),
        }
    }

    fn graph(&self, g: &mut Graph<T>, name: &str, mode: Mode, trainable: bool, x: Var) -> (Var, Option<BnStats<T>>) {
        match mode {
            Mode::Train => {
                let gamma = g.param(&format!("{name}.weight"), &self.gamma, trainable);
                let beta = g.param(&format!("{name}.bias"), &self.beta, trainable);
                let [n, _, h, w] = g.value(x).shape();
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta, BN_EPS);
                (
                    y,
                    Some(BnStats {
                        mean,
                        var,
                        count: n * h * w,
                    }),
                )
            }
            Mode::Eval => {
                let eps = T::from_f64_lossy(BN_EPS);
                let scale = Tensor::from_fn(self.gamma.shape(), |_, c, _, _| {
                    self.gamma.data()[c] / (self.running_var.data()[c] + eps).sqrt()
                });
                let shift = Tensor::from_fn(self.beta.shape(), |_, c, _, _| {
                    self.beta.data()[c] - self.running_mean.data()[c] * scale.data()[c]
                });
                let s = g.constant(scale);
                let t = g.constant(shift);
                (g.channel_affine(x, s, t), None)
            }
        }
    }

    /// Exponential moving average update with unbiased variance.
    pub fn update_running(&mut self, stats: &BnStats<T>) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let one = T::one();
        let correction = if stats.count > 1 {
            T::from_f64_lossy(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            one
        };
        for (c, (rm, rv)) in self
            .running_mean
            .data_mut()
            .iter_mut()
            .zip(self.running_var.data_mut())
            .enumerate()
        {
            *rm = (one - m) * *rm + m * stats.mean[c];
            *rv = (one - m) * *rv + m * stats.var[c] * correction;
        }
    }

    fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        BatchNorm {
            gamma: Arc::new(self.gamma.cast()),
            beta: Arc::new(self.beta.cast()),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
        }
    }
}

/// Five-layer per-pixel classifier ending in a softmax over experts.
#[derive(Clone, Debug)]
pub struct RouterNet<T: Scalar> {
    pub convs: Vec<Conv<T>>,
    /// Normalisation after the second, third and fourth convolution.
    pub norms: Vec<BatchNorm<T>>,
}

impl<T: Scalar> RouterNet<T> {
    pub fn init(num_experts: usize, rng: &mut impl Rng) -> Self {
        let mut widths = ROUTER_WIDTHS.to_vec();
        widths.push(num_experts);
        let convs = (0..5)
            .map(|i| Conv::init(widths[i], widths[i + 1], ROUTER_KERNELS[i], true, rng))
            .collect();
        let norms = (1..4).map(|i| BatchNorm::new(widths[i + 1])).collect();
        Self { convs, norms }
    }

    pub fn num_experts(&self) -> usize {
        self.convs[4].out_channels()
    }

    /// Records the router and returns the softmax probabilities.
    fn graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        trainable: bool,
        preacts: &mut Option<&mut Vec<Var>>,
    ) -> (Var, Vec<BnStats<T>>) {
        let mut stats = Vec::new();
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.graph(g, &format!("router.conv{i}"), trainable, h, None);
            if i == 4 {
                break;
            }
            if i >= 1 {
                let (y, s) = self.norms[i - 1].graph(g, &format!("router.bn{i}"), mode, trainable, h);
                h = y;
                stats.extend(s);
            }
            if let Some(p) = preacts.as_mut() {
                p.push(h);
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        (g.softmax_channels(h), stats)
    }
}

/// Four 3x3 convolutions, `3 -> 32 -> 64 -> 128 -> C`.
#[derive(Clone, Debug)]
pub struct ExpertNet<T: Scalar> {
    pub convs: Vec<Conv<T>>,
}

impl<T: Scalar> ExpertNet<T> {
    pub fn init(rng: &mut impl Rng) -> Self {
        let convs = (0..4)
            .map(|i| Conv::init(EXPERT_WIDTHS[i], EXPERT_WIDTHS[i + 1], 3, true, rng))
            .collect();
        Self { convs }
    }

    /// Records the expert. With `pixels`, only the outputs at those pixels are
    /// computed (intermediate layers on the dilated neighbourhoods they need).
    fn graph(
        &self,
        g: &mut Graph<T>,
        name: &str,
        x: Var,
        trainable: bool,
        pixels: Option<&PixelSet>,
        preacts: &mut Option<&mut Vec<Var>>,
    ) -> Var {
        let layers = self.convs.len();
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            let set = pixels.map(|s| Arc::new(s.dilate(layers - 1 - i)));
            h = conv.graph(g, &format!("{name}.conv{i}"), trainable, h, set);
            if i + 1 < layers {
                if let Some(p) = preacts.as_mut() {
                    p.push(h);
                }
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        h
    }
}

/// Three bias-free-then-biased 1x1 convolutions `C -> 64 -> 32 -> 3`.
#[derive(Clone, Debug)]
pub struct LinearDecoder<T: Scalar> {
    pub convs: Vec<Conv<T>>,
}

impl<T: Scalar> LinearDecoder<T> {
    pub fn init(rng: &mut impl Rng) -> Self {
        let convs = (0..3)
            .map(|i| Conv::init(DECODER_WIDTHS[i], DECODER_WIDTHS[i + 1], 1, i == 2, rng))
            .collect();
        Self { convs }
    }

    fn graph(&self, g: &mut Graph<T>, xi: Var, trainable: bool) -> Var {
        let mut h = xi;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.graph(g, &format!("decoder.conv{i}"), trainable, h, None);
        }
        h
    }

    /// Collapsed weight `W3 W2 W1` (3 x C) and bias.
    pub fn affine(&self) -> (DMatrix<f64>, DVector<f64>) {
        let as_matrix = |c: &Conv<T>| {
            let [o, i, _, _] = c.weight.shape();
            DMatrix::from_row_iterator(o, i, c.weight.data().iter().map(|v| v.as_f64()))
        };
        let a = as_matrix(&self.convs[2]) * as_matrix(&self.convs[1]) * as_matrix(&self.convs[0]);
        let b = self.convs[2]
            .bias
            .as_ref()
            .map(|b| DVector::from_iterator(3, b.data().iter().map(|v| v.as_f64())))
            .unwrap_or_else(|| DVector::zeros(3));
        (a, b)
    }
}

/// Something that maps images to per-pixel embeddings and can be
/// differentiated with respect to its input. Implemented by [`ArgbModel`];
/// tests use analytic stand-ins.
pub trait Encoder<T: Scalar> {
    fn embedding_dim(&self) -> usize;

    /// Records the frozen encoder applied to `x` (`[N, 3, H, W]`).
    fn encode_graph(&self, g: &mut Graph<T>, x: Var) -> Var;
}

/// Everything recorded by one encoder pass.
pub struct EncoderPass<T: Scalar> {
    pub embedding: Var,
    pub probs: Var,
    /// Top-1 masks `[N, K, H, W]`; constants of the graph.
    pub masks: Arc<Tensor<T>>,
    pub bn_stats: Vec<BnStats<T>>,
    /// Leaky-ReLU pre-activations, only when requested.
    pub preacts: Vec<Var>,
}

/// An aRGB embedding `[N, C, H, W]` with finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<T: Scalar = f32>(Tensor<T>);

impl<T: Scalar> Embedding<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if !t.all_finite() {
            return Err(ArgbError::invalid("embedding contains non-finite values"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.channels()
    }
}

/// Router, `K` experts and linear decoder.
#[derive(Clone, Debug)]
pub struct ArgbModel<T: Scalar = f32> {
    pub router: RouterNet<T>,
    pub experts: Vec<ExpertNet<T>>,
    pub decoder: LinearDecoder<T>,
}

impl<T: Scalar> ArgbModel<T> {
    /// Fresh model with `num_experts` independently initialised experts.
    pub fn init(num_experts: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_experts == 0 {
            return Err(ArgbError::invalid("a model needs at least one expert"));
        }
        let router = RouterNet::init(num_experts, rng);
        let experts = (0..num_experts).map(|_| ExpertNet::init(rng)).collect();
        let decoder = LinearDecoder::init(rng);
        Ok(Self {
            router,
            experts,
            decoder,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn embedding_dim(&self) -> usize {
        EMBED_DIM
    }

    pub fn cast<U: Scalar>(&self) -> ArgbModel<U> {
        ArgbModel {
            router: RouterNet {
                convs: self.router.convs.iter().map(Conv::cast).collect(),
                norms: self.router.norms.iter().map(BatchNorm::cast).collect(),
            },
            experts: self
                .experts
                .iter()
                .map(|e| ExpertNet {
                    convs: e.convs.iter().map(Conv::cast).collect(),
                })
                .collect(),
            decoder: LinearDecoder {
                convs: self.decoder.convs.iter().map(Conv::cast).collect(),
            },
        }
    }

    fn convs_named(&self) -> Vec<(String, &Conv<T>)> {
        let mut out: Vec<(String, &Conv<T>)> = Vec::new();
        for (i, c) in self.router.convs.iter().enumerate() {
            out.push((format!("router.conv{i}"), c));
        }
        for (k, e) in self.experts.iter().enumerate() {
            for (i, c) in e.convs.iter().enumerate() {
                out.push((format!("experts.{k}.conv{i}"), c));
            }
        }
        for (i, c) in self.decoder.convs.iter().enumerate() {
            out.push((format!("decoder.conv{i}"), c));
        }
        out
    }

    /// Trainable parameters with their names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Arc<Tensor<T>>)> {
        let mut out = Vec::new();
        for (name, c) in self.convs_named() {
            out.push((format!("{name}.weight"), &c.weight));
            if let Some(b) = &c.bias {
                out.push((format!("{name}.bias"), b));
            }
        }
        for (i, bn) in self.router.norms.iter().enumerate() {
            out.push((format!("router.bn{}.weight", i + 1), &bn.gamma));
            out.push((format!("router.bn{}.bias", i + 1), &bn.beta));
        }
        out
    }

    /// Mutable access to the parameter called `name`.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Arc<Tensor<T>>> {
        let (head, field) = name.rsplit_once('.')?;
        if let Some(idx) = head.strip_prefix("router.bn") {
            let bn = self.router.norms.get_mut(idx.parse::<usize>().ok()?.checked_sub(1)?)?;
            return match field {
                "weight" => Some(&mut bn.gamma),
                "bias" => Some(&mut bn.beta),
                _ => None,
            };
        }
        let (owner, layer) = head.rsplit_once(".conv")?;
        let layer: usize = layer.parse().ok()?;
        let conv = match owner {
            "router" => self.router.convs.get_mut(layer)?,
            "decoder" => self.decoder.convs.get_mut(layer)?,
            _ => {
                let k: usize = owner.strip_prefix("experts.")?.parse().ok()?;
                self.experts.get_mut(k)?.convs.get_mut(layer)?
            }
        };
        match field {
            "weight" => Some(&mut conv.weight),
            "bias" => conv.bias.as_mut(),
            _ => None,
        }
    }

    /// Batch-norm running statistics with their names.
    pub fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, bn) in self.router.norms.iter().enumerate() {
            out.push((format!("router.bn{}.running_mean", i + 1), &bn.running_mean));
            out.push((format!("router.bn{}.running_var", i + 1), &bn.running_var));
        }
        out
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let (head, field) = name.rsplit_once('.')?;
        let idx: usize = head.strip_prefix("router.bn")?.parse().ok()?;
        let bn = self.router.norms.get_mut(idx.checked_sub(1)?)?;
        match field {
            "running_mean" => Some(&mut bn.running_mean),
            "running_var" => Some(&mut bn.running_var),
            _ => None,
        }
    }

    pub fn apply_bn_stats(&mut self, stats: &[BnStats<T>]) {
        for (bn, s) in self.router.norms.iter_mut().zip(stats) {
            bn.update_running(s);
        }
    }

    /// SHA-256 over every parameter and buffer (names, shapes and values).
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |name: &str, t: &Tensor<T>| {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        };
        for (n, t) in self.named_params() {
            feed(&n, t);
        }
        for (n, t) in self.named_buffers() {
            feed(&n, t);
        }
        hex::encode(h.finalize())
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records router, experts and aggregation on `g`.
    pub fn encoder_graph(&self, g: &mut Graph<T>, x: Var, opts: PassOptions) -> EncoderPass<T> {
        self.encoder_graph_inner(g, x, opts, false)
    }

    /// Like [`ArgbModel::encoder_graph`] but also collects every leaky-ReLU
    /// pre-activation of the router and the evaluated expert pixels.
    pub fn encoder_graph_with_preacts(&self, g: &mut Graph<T>, x: Var, opts: PassOptions) -> EncoderPass<T> {
        self.encoder_graph_inner(g, x, opts, true)
    }

    fn encoder_graph_inner(&self, g: &mut Graph<T>, x: Var, opts: PassOptions, collect: bool) -> EncoderPass<T> {
        let mut preacts = Vec::new();
        let mut sink = collect.then_some(&mut preacts);
        let (probs, bn_stats) = self.router.graph(g, x, opts.mode, opts.trainable, &mut sink);
        let masks = Arc::new(top1_masks(g.value(probs)));
        let mut terms = Vec::with_capacity(self.experts.len());
        for (k, expert) in self.experts.iter().enumerate() {
            let name = format!("experts.{k}");
            if opts.sparse {
                let set = PixelSet::from_mask(&masks, k);
                if set.is_empty() {
                    continue;
                }
                terms.push(expert.graph(g, &name, x, opts.trainable, Some(&set), &mut sink));
            } else {
                let out = expert.graph(g, &name, x, opts.trainable, None, &mut sink);
                let m = g.constant(masks.narrow_channels(k, 1));
                terms.push(g.mul_mask(out, m));
            }
        }
        let embedding = g.add_n(&terms);
        EncoderPass {
            embedding,
            probs,
            masks,
            bn_stats,
            preacts,
        }
    }

    /// Records the decoder on an embedding variable.
    pub fn decoder_graph(&self, g: &mut Graph<T>, xi: Var, trainable: bool) -> Var {
        self.decoder.graph(g, xi, trainable)
    }

    /// Records expert `k` densely (every output pixel).
    pub fn expert_graph(&self, g: &mut Graph<T>, k: usize, x: Var, trainable: bool) -> Var {
        self.experts[k].graph(g, &format!("experts.{k}"), x, trainable, None, &mut None)
    }

    /// Per-pixel expert probabilities `[N, K, H, W]`.
    pub fn route(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_image_batch(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (probs, _) = self.router.graph(&mut g, xv, Mode::Eval, false, &mut None);
        Ok(g.value(probs).clone())
    }

    /// The aRGB embedding of a batch of images.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Embedding<T>> {
        check_image_batch(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pass = self.encoder_graph(&mut g, xv, PassOptions::FROZEN);
        Embedding::new(g.value(pass.embedding).clone())
    }

    /// Dense output of expert `k` on `x`.
    pub fn expert_forward(&self, k: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_image_batch(x)?;
        if k >= self.experts.len() {
            return Err(ArgbError::invalid(format!("expert {k} out of range")));
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.expert_graph(&mut g, k, xv, false);
        Ok(g.value(out).clone())
    }

    /// Decodes an embedding back to RGB through the three decoder layers.
    pub fn decode(&self, xi: &Embedding<T>) -> Result<Tensor<T>> {
        if xi.channels() != EMBED_DIM {
            return Err(ArgbError::shape(format!(
                "decoder expects {EMBED_DIM} channels, got {}",
                xi.channels()
            )));
        }
        let mut g = Graph::new();
        let v = g.constant(xi.tensor().clone());
        let out = self.decoder_graph(&mut g, v, false);
        Ok(g.value(out).clone())
    }

    pub fn effective_decoder(&self) -> EffectiveDecoder {
        let (a, b) = self.decoder.affine();
        EffectiveDecoder::from_affine(a, b)
    }
}

impl<T: Scalar> Encoder<T> for ArgbModel<T> {
    fn embedding_dim(&self) -> usize {
        EMBED_DIM
    }

    fn encode_graph(&self, g: &mut Graph<T>, x: Var) -> Var {
        self.encoder_graph(g, x, PassOptions::FROZEN).embedding
    }
}

/// Binary top-1 masks `[N, K, H, W]`; ties go to the lowest expert index.
pub fn top1_masks<T: Scalar>(probs: &Tensor<T>) -> Tensor<T> {
    let [n, k, h, w] = probs.shape();
    let mut masks = Tensor::zeros([n, k, h, w]);
    for (i, &e) in assignments(probs).iter().enumerate() {
        let (b, p) = (i / (h * w), i % (h * w));
        masks.data_mut()[(b * k + e) * h * w + p] = T::one();
    }
    masks
}

/// Selected expert per pixel, flattened over `(N, H, W)`.
pub fn assignments<T: Scalar>(probs: &Tensor<T>) -> Vec<usize> {
    let [n, k, h, w] = probs.shape();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = probs.data()[b * k * plane + p];
            for e in 1..k {
                let v = probs.data()[(b * k + e) * plane + p];
                if v > best_v {
                    best = e;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    out
}

/// The decoder collapsed to one affine map `A xi + b`, with the projectors
/// onto the row space of `A` and onto its nullspace.
#[derive(Clone, Debug)]
pub struct EffectiveDecoder {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub a_pinv: DMatrix<f64>,
    pub p_par: DMatrix<f64>,
    pub p_perp: DMatrix<f64>,
    pub rank: usize,
}

impl EffectiveDecoder {
    pub fn from_affine(a: DMatrix<f64>, b: DVector<f64>) -> Self {
        let c = a.ncols();
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
        let cutoff = PINV_RTOL * smax;
        let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
        let a_pinv = if smax > 0.0 {
            svd.pseudo_inverse(cutoff).expect("svd computed with both factors")
        } else {
            DMatrix::zeros(c, a.nrows())
        };
        if rank < a.nrows() {
            log::warn!("decoder weight is rank deficient (rank {rank} < {})", a.nrows());
        }
        let p_par = &a_pinv * &a;
        let p_perp = DMatrix::identity(c, c) - &p_par;
        Self {
            a,
            b,
            a_pinv,
            p_par,
            p_perp,
            rank,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.a.nrows()
    }

    fn check<T: Scalar>(&self, xi: &Tensor<T>) -> Result<()> {
        if xi.channels() != self.embedding_dim() {
            return Err(ArgbError::shape(format!(
                "embedding has {} channels, decoder expects {}",
                xi.channels(),
                self.embedding_dim()
            )));
        }
        Ok(())
    }

    /// `A xi + b` at every pixel.
    pub fn apply<T: Scalar>(&self, xi: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(xi)?;
        let mut out = pixelwise(&self.a, xi);
        let [n, _, _, _] = out.shape();
        for b in 0..n {
            for c in 0..3 {
                let bv = T::from_f64_lossy(self.b[c]);
                out.plane_slice_mut(b, c).iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        Ok(out)
    }

    /// Row-space component `A⁺A xi`.
    pub fn parallel<T: Scalar>(&self, xi: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(xi)?;
        Ok(pixelwise(&self.p_par, xi))
    }

    /// Nullspace component `(I - A⁺A) xi`.
    pub fn perpendicular<T: Scalar>(&self, xi: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(xi)?;
        Ok(pixelwise(&self.p_perp, xi))
    }
}

/// Applies a matrix to the channel vector of every pixel.
pub fn pixelwise<T: Scalar>(m: &DMatrix<f64>, x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert_eq!(m.ncols(), c, "matrix columns vs channels");
    let rows = m.nrows();
    let mut mt = Vec::with_capacity(rows * c);
    for r in 0..rows {
        for col in 0..c {
            mt.push(T::from_f64_lossy(m[(r, col)]));
        }
    }
    let plane = h * w;
    let mut out = Tensor::zeros([n, rows, h, w]);
    for b in 0..n {
        let src = &x.data()[b * c * plane..(b + 1) * c * plane];
        let dst = &mut out.data_mut()[b * rows * plane..(b + 1) * rows * plane];
        matmul(rows, c, plane, &mt, false, src, false, T::zero(), dst);
    }
    out
}
