//! Recovers a 3x3 convolution kernel from input/output pairs with the
//! autodiff graph and Adam.
//!
//! ```text
//! cargo run --release -p argb-nn --example fit_kernel
//! ```

use std::sync::Arc;

use argb_nn::{Adam, Graph, Tensor};

fn main() {
    let truth = Tensor::<f32>::new([1, 1, 3, 3], vec![0.0, 0.2, 0.0, 0.2, 0.2, 0.2, 0.0, 0.2, 0.0]);
    let x = Tensor::<f32>::from_fn([4, 1, 16, 16], |n, _, y, x| {
        // Cheap deterministic pseudo-noise.
        let h = ((n * 256 + y * 16 + x) as u32).wrapping_mul(2_654_435_761);
        (h >> 16) as f32 / 65_536.0 - 0.5
    });
    let target = {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(truth.clone()));
        let y = g.conv2d(xv, wv, None, 1, None);
        g.value(y).clone()
    };

    let mut w = Arc::new(Tensor::<f32>::zeros([1, 1, 3, 3]));
    let mut adam = Adam::default();
    for step in 0..=400 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.param("w", &w, true);
        let y = g.conv2d(xv, wv, None, 1, None);
        let t = g.constant(target.clone());
        let d = g.sub(y, t);
        let sq = g.square(d);
        let loss = g.mean(sq);
        if step % 100 == 0 {
            println!("step {step:>3} loss {:.3e}", g.value(loss).item());
        }
        let mut grads = g.backward(loss);
        let gw = grads.take(wv).expect("trainable parameter");
        adam.begin_step();
        adam.update("w", Arc::make_mut(&mut w), &gw, 0.02);
    }
    println!("max kernel error {:.2e}", w.max_abs_diff(&truth));
}
