mod common;

use argb::checkpoint::{Checkpoint, TensorFile};
use argb::data::{synth_patch, Dataset, SynthKind, CHECKER_CELL};
use argb::io::Image;
use argb::model::top1_masks;
use argb::training::{
    balance_loss, evaluate_reconstruction, psnr_from_mse, recon_loss, AeTrainConfig, AeTrainer, BalanceForm,
};
use argb::ArgbError;
use argb_nn::Tensor;
use common::{identity_model, image, model, rng};

fn uniform_with_tilt(k: usize, h: usize, w: usize, tilt: f32) -> Tensor<f32> {
    // Pixel i favours expert i % k by `tilt`, so every expert wins equally often.
    Tensor::from_fn([1, k, h, w], |_, e, y, x| {
        let fav = (y * w + x) % k;
        let base = (1.0 - tilt) / k as f32;
        if e == fav {
            base + tilt
        } else {
            base
        }
    })
}

#[test]
fn balance_loss_is_one_at_balanced_uniform_routing() {
    for k in [2, 5, 20] {
        let probs = uniform_with_tilt(k, 4, k * 2, 1e-6);
        let l = balance_loss(&probs, &top1_masks(&probs), BalanceForm::Switch).unwrap();
        assert!((l - 1.0).abs() < 1e-4, "K={k}: {l}");
    }
}

#[test]
fn balance_loss_is_k_when_one_expert_takes_everything() {
    let k = 20;
    let probs = Tensor::from_fn([2, k, 3, 3], |_, e, _, _| if e == 0 { 1.0f32 } else { 0.0 });
    let l = balance_loss(&probs, &top1_masks(&probs), BalanceForm::Switch).unwrap();
    assert!((l - 20.0).abs() < 1e-4);
}

#[test]
fn balance_loss_with_one_expert_is_one() {
    let m = model::<f32>(1, 1);
    let x = image::<f32>(1, 6, 6, &mut rng(2));
    let probs = m.route(&x).unwrap();
    let l = balance_loss(&probs, &top1_masks(&probs), BalanceForm::Switch).unwrap();
    assert!((l - 1.0).abs() < 1e-6);
}

#[test]
fn printed_balance_form_scales_with_pixel_count() {
    let (k, h, w) = (4, 3, 5);
    let probs = Tensor::full([1, k, h, w], 1.0 / k as f32);
    let l = balance_loss(&probs, &top1_masks(&probs), BalanceForm::Printed).unwrap();
    assert!((l - (k * h * w) as f32).abs() < 1e-3);
    let bad = Tensor::<f32>::zeros([1, k, h, w + 1]);
    assert!(balance_loss(&probs, &bad, BalanceForm::Switch).is_err());
}

#[test]
fn hand_set_identity_reconstructs_exactly() {
    let m = identity_model(3);
    let x = Image::constant(8, 8, [0.2, 0.5, 0.9]).into_tensor();
    assert_eq!(recon_loss(&m, &x, 0.0, &mut rng(0)).unwrap(), 0.0);
    let y = image::<f32>(2, 7, 9, &mut rng(1));
    let stats = evaluate_reconstruction(&m, &[Image::new(y.batch_item(0)).unwrap()]).unwrap();
    assert_eq!(stats.mean_psnr, 100.0);
    assert_eq!(stats.mean_abs_diff_255, 0.0);
    assert!(evaluate_reconstruction(&m, &[]).is_err());
}

#[test]
fn recon_loss_matches_a_loop_oracle() {
    let m = model::<f32>(3, 3);
    let x = image::<f32>(2, 6, 5, &mut rng(4));
    let y = m.decode(&m.encode(&x).unwrap()).unwrap();
    let mut acc = 0.0f64;
    for b in 0..2 {
        for c in 0..3 {
            for i in 0..6 {
                for j in 0..5 {
                    acc += (f64::from(y.at(b, c, i, j)) - f64::from(x.at(b, c, i, j))).abs();
                }
            }
        }
    }
    let want = acc / x.len() as f64;
    let got = f64::from(recon_loss(&m, &x, 0.0, &mut rng(0)).unwrap());
    assert!((got - want).abs() < 1e-6);
}

#[test]
fn recon_loss_noise_is_seeded() {
    let m = model::<f32>(2, 5);
    let x = image::<f32>(1, 6, 6, &mut rng(6));
    let a = recon_loss(&m, &x, 1.0, &mut rng(7)).unwrap();
    let b = recon_loss(&m, &x, 1.0, &mut rng(7)).unwrap();
    let c = recon_loss(&m, &x, 1.0, &mut rng(8)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(matches!(
        recon_loss(&m, &x, -1.0, &mut rng(0)),
        Err(ArgbError::InvalidInput(_))
    ));
}

#[test]
fn psnr_formula() {
    assert!((psnr_from_mse(1e-4) - 40.0).abs() < 1e-9);
    assert_eq!(psnr_from_mse(0.0), 100.0);
}

fn small_config(steps: u64) -> AeTrainConfig {
    AeTrainConfig {
        num_experts: 2,
        batch_size: 1,
        patch_size: 24,
        first_period: 50,
        max_period: 100,
        total_steps: steps,
        seed: 11,
        ..AeTrainConfig::default()
    }
}

fn gradient_patches(n: usize, size: usize) -> Dataset {
    let mut r = rng(12);
    Dataset::new(
        (0..n)
            .map(|_| synth_patch(SynthKind::Gradients, size, CHECKER_CELL, &mut r))
            .collect(),
    )
}

#[test]
fn zero_lambda_makes_the_total_the_reconstruction_loss() {
    let cfg = AeTrainConfig {
        lambda_balance: 0.0,
        ..small_config(5)
    };
    let data = gradient_patches(4, 32);
    let mut t = AeTrainer::new(cfg).unwrap();
    for _ in 0..5 {
        let rec = t.step(&data).unwrap();
        assert_eq!(rec.l_ae, rec.l_recon);
    }
    let mut t = AeTrainer::new(small_config(3)).unwrap();
    let rec = t.step(&data).unwrap();
    assert_eq!(rec.l_ae, rec.l_recon + 0.01 * rec.l_balance);
    assert_eq!(rec.lr, 5e-4);
}

fn round_trip(ck: &Checkpoint) -> Checkpoint {
    let bytes = ck.to_tensor_file().to_bytes().unwrap();
    Checkpoint::from_tensor_file(TensorFile::from_bytes(&bytes).unwrap()).unwrap()
}

#[test]
fn resuming_from_a_checkpoint_continues_bit_exactly() {
    let data = gradient_patches(4, 32);
    let mut a = AeTrainer::new(small_config(10)).unwrap();
    for _ in 0..3 {
        a.step(&data).unwrap();
    }
    let mut b = AeTrainer::resume(round_trip(&a.checkpoint())).unwrap();
    assert_eq!(b.step_count(), 3);
    for _ in 0..2 {
        let ra = a.step(&data).unwrap();
        let rb = b.step(&data).unwrap();
        assert_eq!(ra, rb);
    }
    assert_eq!(a.model.param_hash(), b.model.param_hash());
}

#[test]
fn same_seed_same_run() {
    let data = gradient_patches(4, 32);
    let run = || {
        let mut t = AeTrainer::new(small_config(4)).unwrap();
        (0..4).for_each(|_| {
            t.step(&data).unwrap();
        });
        t.model.param_hash()
    };
    assert_eq!(run(), run());
}

#[test]
fn short_run_on_gradients_reduces_the_loss() {
    let data = gradient_patches(8, 32);
    let mut t = AeTrainer::new(small_config(200)).unwrap();
    let losses: Vec<f64> = (0..200).map(|_| t.step(&data).unwrap().l_recon).collect();
    let smooth = |end: usize| losses[end - 10..end].iter().sum::<f64>() / 10.0;
    assert!(smooth(200) < smooth(20), "{} vs {}", smooth(200), smooth(20));
}

#[test]
fn invalid_configs_name_the_key() {
    let cfg = AeTrainConfig {
        batch_size: 0,
        ..AeTrainConfig::default()
    };
    assert!(matches!(AeTrainer::new(cfg), Err(ArgbError::Config { ref path, .. }) if path == "autoencoder.batch_size"));
}
