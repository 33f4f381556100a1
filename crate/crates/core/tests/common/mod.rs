#![allow(dead_code)]

use argb::ArgbModel;
use argb_nn::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn model<T: Scalar>(k: usize, seed: u64) -> ArgbModel<T> {
    ArgbModel::<f32>::init(k, &mut rng(seed)).unwrap().cast()
}

pub fn image<T: Scalar>(n: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn([n, 3, h, w], |_, _, _, _| T::from_f64_lossy(rng.random::<f64>()))
}

pub fn normal<T: Scalar>(shape: [usize; 4], rng: &mut impl Rng) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    Tensor::from_fn(shape, |_, _, _, _| {
        let v: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(v)
    })
}

pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

/// Central finite differences of `f` at every element of `x`.
pub fn finite_diff(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        probe.data_mut()[i] = v + h;
        let up = f(&probe);
        probe.data_mut()[i] = v - h;
        let down = f(&probe);
        probe.data_mut()[i] = v;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `|a - b| / max(|a|, |b|)` over whole vectors.
pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let norm = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = a.zip_map(b, |x, y| x - y);
    norm(&diff) / norm(a).max(norm(b)).max(1e-300)
}

/// A model whose experts pass the first three channels through unchanged and
/// whose decoder reads them back, so `decode(encode(x)) = x` for `x >= 0`.
pub fn identity_model(k: usize) -> ArgbModel<f32> {
    use std::sync::Arc;
    let mut m: ArgbModel<f32> = model(k, 0);
    let eye = |shape: [usize; 4]| {
        let [_, _, kh, kw] = shape;
        Tensor::from_fn(
            shape,
            |o, i, y, x| {
                if o == i && y == kh / 2 && x == kw / 2 {
                    1.0
                } else {
                    0.0
                }
            },
        )
    };
    for expert in &mut m.experts {
        for conv in &mut expert.convs {
            conv.weight = Arc::new(eye(conv.weight.shape()));
            if let Some(b) = &mut conv.bias {
                *b = Arc::new(Tensor::zeros(b.shape()));
            }
        }
    }
    for conv in &mut m.decoder.convs {
        conv.weight = Arc::new(eye(conv.weight.shape()));
        if let Some(b) = &mut conv.bias {
            *b = Arc::new(Tensor::zeros(b.shape()));
        }
    }
    m
}
