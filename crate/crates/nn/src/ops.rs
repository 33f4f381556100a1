//! Differentiable operations recorded on a [`Graph`].

use std::sync::Arc;

use crate::conv::{conv2d, conv2d_backward, PixelSet};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

fn cast<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn count<T: Scalar>(n: usize) -> T {
    T::from_usize(n).expect("count fits in float")
}

/// Applies a 4-neighbour Laplacian stencil to every channel plane with zero padding.
pub fn laplacian<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let four = cast::<T>(4.0);
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane_slice(b, ch);
            let dst = out.plane_slice_mut(b, ch);
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = -four * src[y * w + xx];
                    if y > 0 {
                        acc = acc + src[(y - 1) * w + xx];
                    }
                    if y + 1 < h {
                        acc = acc + src[(y + 1) * w + xx];
                    }
                    if xx > 0 {
                        acc = acc + src[y * w + xx - 1];
                    }
                    if xx + 1 < w {
                        acc = acc + src[y * w + xx + 1];
                    }
                    dst[y * w + xx] = acc;
                }
            }
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    fn unary(
        &mut self,
        x: Var,
        value: Tensor<T>,
        derivative: impl Fn(&Tensor<T>, &Tensor<T>) -> Tensor<T> + 'static,
    ) -> Var {
        let xv = self.value_arc(x);
        self.push(value, vec![x], Box::new(move |g, _| vec![Some(derivative(&xv, g))]))
    }

    /// Stride-1 convolution, optionally evaluated only on `pixels`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, pad: usize, pixels: Option<Arc<PixelSet>>) -> Var {
        let xv = self.value_arc(x);
        let wv = self.value_arc(weight);
        let bv = bias.map(|b| self.value_arc(b));
        let out = conv2d(&xv, &wv, bv.as_deref(), pad, pixels.as_deref());
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push(
            out,
            parents,
            Box::new(move |g, needs| {
                let need_bias = needs.get(2).copied().unwrap_or(false);
                let grads = conv2d_backward(&xv, &wv, g, pad, pixels.as_deref(), needs[0], needs[1], need_bias);
                let mut v = vec![grads.input, grads.weight];
                if needs.len() == 3 {
                    v.push(grads.bias);
                }
                v
            }),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = cast::<T>(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.unary(x, out, move |xv, g| {
            xv.zip_map(g, |a, gv| if a > T::zero() { gv } else { gv * s })
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// Batch normalisation with batch statistics over `(N, H, W)`.
    ///
    /// Returns the output together with the per-channel batch mean and
    /// biased variance so the caller can update running statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Vec<T>, Vec<T>) {
        let xv = self.value_arc(x);
        let [n, c, h, w] = xv.shape();
        let m = n * h * w;
        let mf = count::<T>(m);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s = s + xv.plane_slice(b, ch).iter().copied().sum::<T>();
            }
            let mu = s / mf;
            let mut ss = T::zero();
            for b in 0..n {
                ss = ss + xv.plane_slice(b, ch).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
            mean[ch] = mu;
            var[ch] = ss / mf;
        }
        let eps_t = cast::<T>(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut xhat = Tensor::zeros(xv.shape());
        for b in 0..n {
            for ch in 0..c {
                let (mu, is) = (mean[ch], inv_std[ch]);
                let src = xv.plane_slice(b, ch);
                let dst = xhat.plane_slice_mut(b, ch);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - mu) * is;
                }
            }
        }
        let gv = self.value_arc(gamma);
        let bv = self.value_arc(beta);
        let mut out = Tensor::zeros(xv.shape());
        for b in 0..n {
            for ch in 0..c {
                let (ga, be) = (gv.data()[ch], bv.data()[ch]);
                let src = xhat.plane_slice(b, ch);
                let dst = out.plane_slice_mut(b, ch);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = ga * s + be;
                }
            }
        }
        let xhat = Arc::new(xhat);
        let var_out = self.push(
            out,
            vec![x, gamma, beta],
            Box::new(move |g, needs| {
                let mut dgamma = Tensor::zeros([1, c, 1, 1]);
                let mut dbeta = Tensor::zeros([1, c, 1, 1]);
                for ch in 0..c {
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    for b in 0..n {
                        for (&gg, &xh) in g.plane_slice(b, ch).iter().zip(xhat.plane_slice(b, ch)) {
                            sg = sg + gg;
                            sgx = sgx + gg * xh;
                        }
                    }
                    dbeta.data_mut()[ch] = sg;
                    dgamma.data_mut()[ch] = sgx;
                }
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for ch in 0..c {
                        let k = gv.data()[ch] * inv_std[ch] / mf;
                        let (sg, sgx) = (dbeta.data()[ch], dgamma.data()[ch]);
                        for b in 0..n {
                            let gs = g.plane_slice(b, ch);
                            let xs = xhat.plane_slice(b, ch);
                            let dst = dx.plane_slice_mut(b, ch);
                            for ((d, &gg), &xh) in dst.iter_mut().zip(gs).zip(xs) {
                                *d = k * (mf * gg - sg - xh * sgx);
                            }
                        }
                    }
                    dx
                });
                vec![dx, Some(dgamma), Some(dbeta)]
            }),
        );
        (var_out, mean, var)
    }

    /// `y[n, c] = x[n, c] * scale[c] + shift[c]` with `[1, C, 1, 1]` scale and shift.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = self.value_arc(x);
        let sv = self.value_arc(scale);
        let tv = self.value_arc(shift);
        let [n, c, h, w] = xv.shape();
        assert_eq!(sv.shape(), [1, c, 1, 1], "scale shape");
        assert_eq!(tv.shape(), [1, c, 1, 1], "shift shape");
        let mut out = Tensor::zeros(xv.shape());
        for b in 0..n {
            for ch in 0..c {
                let (s, t) = (sv.data()[ch], tv.data()[ch]);
                for (d, &v) in out.plane_slice_mut(b, ch).iter_mut().zip(xv.plane_slice(b, ch)) {
                    *d = v * s + t;
                }
            }
        }
        self.push(
            out,
            vec![x, scale, shift],
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for b in 0..n {
                        for ch in 0..c {
                            let s = sv.data()[ch];
                            for (d, &gg) in dx.plane_slice_mut(b, ch).iter_mut().zip(g.plane_slice(b, ch)) {
                                *d = gg * s;
                            }
                        }
                    }
                    dx
                });
                let mut ds = Tensor::zeros([1, c, 1, 1]);
                let mut dt = Tensor::zeros([1, c, 1, 1]);
                if needs[1] || needs[2] {
                    for b in 0..n {
                        for ch in 0..c {
                            for (&gg, &v) in g.plane_slice(b, ch).iter().zip(xv.plane_slice(b, ch)) {
                                ds.data_mut()[ch] = ds.data()[ch] + gg * v;
                                dt.data_mut()[ch] = dt.data()[ch] + gg;
                            }
                        }
                    }
                }
                vec![dx, Some(ds), Some(dt)]
            }),
        )
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let p = h * w;
        let mut out = Tensor::zeros(xv.shape());
        for b in 0..n {
            for i in 0..p {
                let base = b * c * p + i;
                let mut mx = T::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(xv.data()[base + ch * p]);
                }
                let mut s = T::zero();
                for ch in 0..c {
                    let e = (xv.data()[base + ch * p] - mx).exp();
                    out.data_mut()[base + ch * p] = e;
                    s = s + e;
                }
                for ch in 0..c {
                    let o = base + ch * p;
                    out.data_mut()[o] = out.data()[o] / s;
                }
            }
        }
        let yv = Arc::new(out.clone());
        self.push(
            out,
            vec![x],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    for i in 0..p {
                        let base = b * c * p + i;
                        let mut dot = T::zero();
                        for ch in 0..c {
                            dot = dot + g.data()[base + ch * p] * yv.data()[base + ch * p];
                        }
                        for ch in 0..c {
                            let o = base + ch * p;
                            dx.data_mut()[o] = yv.data()[o] * (g.data()[o] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Maximum over channels at every pixel, `[N, 1, H, W]`. The gradient
    /// flows to the lowest-index maximiser.
    pub fn max_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let p = h * w;
        let mut out = Tensor::zeros([n, 1, h, w]);
        let mut arg = vec![0usize; n * p];
        for b in 0..n {
            for i in 0..p {
                let base = b * c * p + i;
                let mut best = 0;
                for ch in 1..c {
                    if xv.data()[base + ch * p] > xv.data()[base + best * p] {
                        best = ch;
                    }
                }
                arg[b * p + i] = best;
                out.data_mut()[b * p + i] = xv.data()[base + best * p];
            }
        }
        self.push(
            out,
            vec![x],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    for i in 0..p {
                        dx.data_mut()[b * c * p + arg[b * p + i] * p + i] = g.data()[b * p + i];
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Multiplies every channel of `x` (`[N, C, H, W]`) by `mask` (`[N, 1, H, W]`).
    pub fn mul_mask(&mut self, x: Var, mask: Var) -> Var {
        let xv = self.value_arc(x);
        let mv = self.value_arc(mask);
        let [n, c, h, w] = xv.shape();
        assert_eq!(mv.shape(), [n, 1, h, w], "mask shape");
        let mut out = Tensor::zeros(xv.shape());
        for b in 0..n {
            let m = mv.plane_slice(b, 0);
            for ch in 0..c {
                for ((d, &v), &mm) in out.plane_slice_mut(b, ch).iter_mut().zip(xv.plane_slice(b, ch)).zip(m) {
                    *d = v * mm;
                }
            }
        }
        self.push(
            out,
            vec![x, mask],
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for b in 0..n {
                        let m = mv.plane_slice(b, 0);
                        for ch in 0..c {
                            for ((d, &gg), &mm) in dx.plane_slice_mut(b, ch).iter_mut().zip(g.plane_slice(b, ch)).zip(m)
                            {
                                *d = gg * mm;
                            }
                        }
                    }
                    dx
                });
                let dm = needs[1].then(|| {
                    let mut dm = Tensor::zeros([n, 1, h, w]);
                    for b in 0..n {
                        for ch in 0..c {
                            let xs = xv.plane_slice(b, ch);
                            let gs = g.plane_slice(b, ch);
                            for (i, d) in dm.plane_slice_mut(b, 0).iter_mut().enumerate() {
                                *d = *d + gs[i] * xs[i];
                            }
                        }
                    }
                    dm
                });
                vec![dx, dm]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            out,
            vec![a, b],
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            out,
            vec![a, b],
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let out = av.zip_map(&bv, |x, y| x * y);
        self.push(
            out,
            vec![a, b],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&bv, |gg, y| gg * y)),
                    needs[1].then(|| g.zip_map(&av, |gg, x| gg * x)),
                ]
            }),
        )
    }

    /// Sum of a list of same-shaped variables.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n of nothing");
        let mut out = self.value(vars[0]).clone();
        for v in &vars[1..] {
            out.add_assign(self.value(*v));
        }
        let k = vars.len();
        self.push(
            out,
            vars.to_vec(),
            Box::new(move |g, needs| (0..k).map(|i| needs[i].then(|| g.clone())).collect()),
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let st = cast::<T>(s);
        let out = self.value(x).map(|v| v * st);
        self.push(out, vec![x], Box::new(move |g, _| vec![Some(g.map(|v| v * st))]))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let st = cast::<T>(s);
        let out = self.value(x).map(|v| v + st);
        self.push(out, vec![x], Box::new(|g, _| vec![Some(g.clone())]))
    }

    /// Absolute value with subgradient 0 at the origin.
    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.unary(x, out, |xv, g| {
            xv.zip_map(g, |a, gg| {
                if a > T::zero() {
                    gg
                } else if a < T::zero() {
                    -gg
                } else {
                    T::zero()
                }
            })
        })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let two = cast::<T>(2.0);
        self.unary(x, out, move |xv, g| xv.zip_map(g, |a, gg| two * a * gg))
    }

    /// `sqrt(x^2 + eps^2)` element-wise.
    pub fn charbonnier(&mut self, x: Var, eps: f64) -> Var {
        let e2 = cast::<T>(eps * eps);
        let out = self.value(x).map(|v| (v * v + e2).sqrt());
        self.unary(x, out, move |xv, g| xv.zip_map(g, |a, gg| gg * a / (a * a + e2).sqrt()))
    }

    pub fn log10(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.log10());
        let ln10 = cast::<T>(std::f64::consts::LN_10);
        self.unary(x, out, move |xv, g| xv.zip_map(g, |a, gg| gg / (a * ln10)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape();
        let out = Tensor::scalar(xv.sum());
        self.push(
            out,
            vec![x],
            Box::new(move |g, _| vec![Some(Tensor::full(shape, g.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape();
        let nf = count::<T>(xv.len());
        let out = Tensor::scalar(xv.sum() / nf);
        self.push(
            out,
            vec![x],
            Box::new(move |g, _| vec![Some(Tensor::full(shape, g.item() / nf))]),
        )
    }

    /// Mean over `(N, H, W)` for every channel, `[1, C, 1, 1]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let mf = count::<T>(n * h * w);
        let mut out = Tensor::zeros([1, c, 1, 1]);
        for b in 0..n {
            for ch in 0..c {
                out.data_mut()[ch] = out.data()[ch] + xv.plane_slice(b, ch).iter().copied().sum::<T>();
            }
        }
        out.scale_inplace(T::one() / mf);
        self.push(
            out,
            vec![x],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    for ch in 0..c {
                        let v = g.data()[ch] / mf;
                        dx.plane_slice_mut(b, ch).iter_mut().for_each(|d| *d = v);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Channel `c` of `x` as a `[N, 1, H, W]` variable.
    pub fn select_channel(&mut self, x: Var, c: usize) -> Var {
        let xv = self.value(x);
        let shape = xv.shape();
        let out = xv.narrow_channels(c, 1);
        self.push(
            out,
            vec![x],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(shape);
                for b in 0..shape[0] {
                    dx.plane_slice_mut(b, c).copy_from_slice(g.plane_slice(b, 0));
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Per-channel 4-neighbour Laplacian with zero padding.
    pub fn laplacian(&mut self, x: Var) -> Var {
        let out = laplacian(self.value(x));
        // the stencil is symmetric and zero padding makes it self-adjoint
        self.push(out, vec![x], Box::new(|g, _| vec![Some(laplacian(g))]))
    }
}
