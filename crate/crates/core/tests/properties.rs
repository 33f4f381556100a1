mod common;

use argb::analysis::{box_blur, decompose, mix_embeddings};
use argb::losses::{pixel_loss, LossKind};
use argb::model::{assignments, top1_masks, EMBED_DIM};
use argb::restoration::ssim;
use argb::training::{balance_loss, psnr_from_mse, BalanceForm};
use argb::Embedding;
use argb_nn::Tensor;
use common::{model, normal, rng};
use proptest::prelude::*;

fn tensor(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    common::image::<f32>(shape[0], shape[2], shape[3], &mut r)
}

/// Random per-pixel distributions over `k` experts.
fn probs(k: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let logits = normal::<f32>([1, k, h, w], &mut rng(seed));
    Tensor::from_fn([1, k, h, w], |_, e, y, x| {
        let z: f32 = (0..k).map(|j| logits.at(0, j, y, x).exp()).sum();
        logits.at(0, e, y, x).exp() / z
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn routing_picks_a_maximum(k in 1usize..7, seed in any::<u64>()) {
        let p = probs(k, 3, 4, seed);
        let masks = top1_masks(&p);
        for (i, &e) in assignments(&p).iter().enumerate() {
            let (y, x) = (i / 4, i % 4);
            prop_assert!((0..k).all(|j| p.at(0, j, y, x) <= p.at(0, e, y, x)));
            prop_assert!((0..k).all(|j| p.at(0, j, y, x) < p.at(0, e, y, x) || j >= e));
            prop_assert_eq!((0..k).map(|j| masks.at(0, j, y, x)).sum::<f32>(), 1.0);
        }
    }

    #[test]
    fn switch_balance_is_bounded(k in 1usize..7, seed in any::<u64>()) {
        let p = probs(k, 4, 4, seed);
        let v = balance_loss(&p, &top1_masks(&p), BalanceForm::Switch).unwrap();
        prop_assert!(v >= 0.0 && v <= k as f32 + 1e-4);
    }

    #[test]
    fn uniform_routing_has_unit_switch_balance(k in 1usize..9) {
        let p = Tensor::<f32>::full([2, k, 3, 3], 1.0 / k as f32);
        let v = balance_loss(&p, &top1_masks(&p), BalanceForm::Switch).unwrap();
        prop_assert!((v - 1.0).abs() < 1e-5);
    }

    #[test]
    fn psnr_decreases_with_error(a in 1e-10f64..1.0, b in 1e-10f64..1.0) {
        prop_assume!(a < b);
        prop_assert!(psnr_from_mse(a) > psnr_from_mse(b));
    }

    #[test]
    fn distance_losses_vanish_only_at_equality(seed in any::<u64>(), shift in 0.01f32..0.5) {
        let x = tensor([1, 3, 5, 5], seed);
        let y = x.map(|v| v + shift);
        for kind in [LossKind::L1, LossKind::L2, LossKind::Charbonnier] {
            let same = pixel_loss(kind, &x, &x, 1e-3).unwrap();
            let diff = pixel_loss(kind, &y, &x, 1e-3).unwrap();
            prop_assert!(same >= 0.0 && diff > same, "{:?}", kind);
        }
    }

    #[test]
    fn ssim_is_symmetric_and_at_most_one(seed in any::<u64>(), other in any::<u64>()) {
        let a = tensor([1, 3, 12, 13], seed);
        let b = tensor([1, 3, 12, 13], other);
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn blur_stays_within_the_input_range(seed in any::<u64>(), k in 1usize..6) {
        let x = tensor([1, 3, 7, 6], seed);
        let (lo, hi) = x.data().iter().fold((f32::MAX, f32::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
        let b = box_blur(&x, 2 * k + 1);
        prop_assert!(b.data().iter().all(|v| *v >= lo - 1e-6 && *v <= hi + 1e-6));
    }

    #[test]
    fn decomposition_and_mixing_laws(seed in 0u64..8, draw in any::<u64>()) {
        let m = model::<f64>(2, seed);
        let eff = m.effective_decoder();
        let mut r = rng(draw);
        let xi = Embedding::new(normal::<f64>([1, EMBED_DIM, 2, 3], &mut r)).unwrap();
        let other = Embedding::new(normal::<f64>([1, EMBED_DIM, 2, 3], &mut r)).unwrap();
        let d = decompose(&xi, &eff).unwrap();
        let sum = d.xi_par.tensor().zip_map(d.xi_perp.tensor(), |a, b| a + b);
        prop_assert!(common::max_abs_diff(&sum, xi.tensor()) < 1e-9);
        // Projecting twice changes nothing.
        let again = decompose(&d.xi_par, &eff).unwrap();
        prop_assert!(again.xi_perp.tensor().max_abs() < 1e-9);
        let mixed = mix_embeddings(&xi, &other, &eff).unwrap();
        prop_assert!(common::max_abs_diff(&m.decode(&mixed).unwrap(), &m.decode(&xi).unwrap()) < 1e-9);
    }
}
