//! Every differentiable op checked against central finite differences in f64.

use std::sync::Arc;

use argb_nn::{Graph, PixelSet, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// Central differences of `f` with respect to every element of `x`.
fn numeric_grad(x: &Tensor<f64>, h: f64, f: &dyn Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let num = a.max_abs_diff(b);
    let den = a.max_abs().max(b.max_abs()).max(1e-8);
    num / den
}

/// Builds `build(graph, inputs...) -> scalar` and compares the autodiff
/// gradient of every input with finite differences.
fn check(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    for (k, x) in inputs.iter().enumerate() {
        let eval = |xk: &Tensor<f64>| {
            let mut g2 = Graph::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g2.constant(if j == k { xk.clone() } else { t.clone() }))
                .collect();
            let o = build(&mut g2, &vs);
            g2.value(o).item()
        };
        let num = numeric_grad(x, 1e-5, &eval);
        let ana = grads.get(vars[k]).expect("gradient present");
        let e = rel_err(ana, &num);
        assert!(e < 1e-6, "input {k}: relative error {e}");
    }
}

/// Random linear functional so every output element contributes.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let w = random(g.value(x).shape(), seed);
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum(p)
}

#[test]
fn conv2d_dense_and_sparse() {
    let x = random([2, 3, 5, 4], 1);
    let w = random([4, 3, 3, 3], 2);
    let b = random([1, 4, 1, 1], 3);
    check(&[x.clone(), w.clone(), b.clone()], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, None);
        project(g, y, 4)
    });
    let set = Arc::new(PixelSet::new(5, 4, vec![vec![0, 6, 19], vec![2, 3, 10, 11]]));
    check(&[x, w, b], move |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, Some(set.clone()));
        project(g, y, 5)
    });
    check(&[random([1, 6, 3, 3], 6), random([2, 6, 1, 1], 7)], |g, v| {
        let y = g.conv2d(v[0], v[1], None, 0, None);
        project(g, y, 8)
    });
}

#[test]
fn batch_norm_training_mode() {
    let x = random([3, 2, 3, 3], 10);
    let gamma = random([1, 2, 1, 1], 11);
    let beta = random([1, 2, 1, 1], 12);
    check(&[x, gamma, beta], |g, v| {
        let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5);
        project(g, y, 13)
    });
}

#[test]
fn pointwise_ops() {
    // keep inputs away from kinks
    let x = random([1, 2, 3, 3], 20).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    check(&[x.clone()], |g, v| {
        let y = g.leaky_relu(v[0], 0.2);
        project(g, y, 21)
    });
    check(&[x.clone()], |g, v| {
        let y = g.abs(v[0]);
        project(g, y, 22)
    });
    check(&[x.clone()], |g, v| {
        let y = g.square(v[0]);
        project(g, y, 23)
    });
    check(&[x.clone()], |g, v| {
        let y = g.charbonnier(v[0], 1e-3);
        project(g, y, 24)
    });
    check(&[x.map(|v| v.abs() + 0.5)], |g, v| {
        let y = g.log10(v[0]);
        project(g, y, 25)
    });
    check(&[x.clone()], |g, v| {
        let y = g.scale(v[0], -1.7);
        let y = g.add_scalar(y, 0.3);
        let y = g.laplacian(y);
        project(g, y, 26)
    });
}

#[test]
fn binary_and_reductions() {
    let a = random([2, 3, 2, 2], 30);
    let b = random([2, 3, 2, 2], 31);
    let m = random([2, 1, 2, 2], 32);
    check(&[a.clone(), b.clone()], |g, v| {
        let s = g.sub(v[0], v[1]);
        let p = g.mul(s, v[1]);
        let q = g.add(p, v[0]);
        let r = g.add_n(&[q, v[0], v[1]]);
        g.mean(r)
    });
    check(&[a.clone(), m], |g, v| {
        let y = g.mul_mask(v[0], v[1]);
        project(g, y, 33)
    });
    check(&[a.clone()], |g, v| {
        let c = g.channel_mean(v[0]);
        project(g, c, 34)
    });
    check(&[a.clone()], |g, v| {
        let c = g.select_channel(v[0], 2);
        project(g, c, 35)
    });
    check(&[a, random([1, 3, 1, 1], 36), random([1, 3, 1, 1], 37)], |g, v| {
        let y = g.channel_affine(v[0], v[1], v[2]);
        project(g, y, 38)
    });
}

#[test]
fn softmax_and_channel_max() {
    let x = random([2, 4, 2, 3], 40);
    check(&[x.clone()], |g, v| {
        let y = g.softmax_channels(v[0]);
        project(g, y, 41)
    });
    check(&[x], |g, v| {
        let y = g.max_channels(v[0]);
        project(g, y, 42)
    });
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let w = Arc::new(random([2, 3, 3, 3], 50));
    let x = g.input(random([1, 3, 4, 4], 51));
    let wv = g.param("w", &w, false);
    let y = g.conv2d(x, wv, None, 1, None);
    let l = g.sum(y);
    let grads = g.backward(l);
    assert!(grads.get(wv).is_none());
    assert!(grads.get(x).is_some());
    assert!(g.params().is_empty());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([1, 3, 2, 2], vals));
        let y = g.softmax_channels(x);
        let yv = g.value(y);
        for p in 0..4 {
            let s: f64 = (0..3).map(|c| yv.data()[c * 4 + p]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!((0..3).all(|c| yv.data()[c * 4 + p] >= 0.0));
        }
    }
}
