mod common;

use argb::model::{assignments, top1_masks, PassOptions, EMBED_DIM, EXPERT_RADIUS, ROUTER_RADIUS};
use argb::{ArgbModel, EffectiveDecoder, Embedding};
use argb_nn::{Graph, Tensor};
use common::{image, max_abs_diff, model, normal, rng};
use nalgebra::DMatrix;
use std::sync::Arc;

#[test]
fn router_output_is_a_distribution_and_masks_partition() {
    let m = model::<f32>(5, 1);
    let x = image::<f32>(2, 10, 12, &mut rng(2));
    let probs = m.route(&x).unwrap();
    assert_eq!(probs.shape(), [2, 5, 10, 12]);
    let masks = top1_masks(&probs);
    for b in 0..2 {
        for y in 0..10 {
            for xx in 0..12 {
                let s: f64 = (0..5).map(|k| f64::from(probs.at(b, k, y, xx))).sum();
                assert!((s - 1.0).abs() < 1e-5);
                assert!((0..5).all(|k| probs.at(b, k, y, xx) >= 0.0));
                let ones: Vec<f32> = (0..5).map(|k| masks.at(b, k, y, xx)).collect();
                assert!(ones.iter().all(|&v| v == 0.0 || v == 1.0));
                assert_eq!(ones.iter().sum::<f32>(), 1.0);
            }
        }
    }
}

#[test]
fn ties_go_to_the_lowest_expert() {
    let probs = Tensor::<f32>::new([1, 3, 1, 2], vec![0.4, 0.3, 0.4, 0.3, 0.2, 0.3]);
    assert_eq!(assignments(&probs), vec![0, 0]);
    let probs = Tensor::<f32>::new([1, 3, 1, 1], vec![0.2, 0.4, 0.4]);
    assert_eq!(assignments(&probs), vec![1]);
}

#[test]
fn embedding_equals_the_selected_expert_per_pixel() {
    let m = model::<f64>(4, 3);
    let x = image::<f64>(1, 9, 11, &mut rng(4));
    let xi = m.encode(&x).unwrap();
    let choice = assignments(&m.route(&x).unwrap());
    let dense: Vec<Tensor<f64>> = (0..4).map(|k| m.expert_forward(k, &x).unwrap()).collect();
    for y in 0..9 {
        for xx in 0..11 {
            let k = choice[y * 11 + xx];
            for c in 0..EMBED_DIM {
                assert_eq!(xi.tensor().at(0, c, y, xx), dense[k].at(0, c, y, xx));
            }
        }
    }
}

#[test]
fn sparse_and_dense_aggregation_agree() {
    let m = model::<f32>(6, 5);
    let x = image::<f32>(2, 13, 9, &mut rng(6));
    let run = |sparse| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pass = m.encoder_graph(
            &mut g,
            xv,
            PassOptions {
                sparse,
                ..PassOptions::FROZEN
            },
        );
        g.value(pass.embedding).clone()
    };
    assert!(max_abs_diff(&run(true), &run(false)) < 1e-6);
}

#[test]
fn single_expert_model_routes_everything_to_it() {
    let m = model::<f32>(1, 7);
    let x = image::<f32>(1, 8, 8, &mut rng(8));
    let probs = m.route(&x).unwrap();
    assert!(probs.data().iter().all(|&p| (p - 1.0).abs() < 1e-6));
    assert_eq!(m.encode(&x).unwrap().tensor(), &m.expert_forward(0, &x).unwrap());
}

fn perturb(x: &Tensor<f32>, y: usize, xx: usize, delta: f32) -> Tensor<f32> {
    let mut out = x.clone();
    for c in 0..3 {
        let v = out.at(0, c, y, xx);
        out.set(0, c, y, xx, v + delta);
    }
    out
}

#[test]
fn router_and_expert_receptive_fields() {
    let m = model::<f32>(3, 9);
    let x = image::<f32>(1, 21, 21, &mut rng(10));
    let (py, px) = (10, 10);
    let probs = m.route(&x).unwrap();
    let expert = m.expert_forward(1, &x).unwrap();
    let at = |t: &Tensor<f32>| (0..t.channels()).map(|c| t.at(0, c, py, px)).collect::<Vec<_>>();
    // Router: radius 3.
    let outside = perturb(&x, py + ROUTER_RADIUS + 1, px, 0.5);
    assert_eq!(at(&m.route(&outside).unwrap()), at(&probs));
    let inside = perturb(&x, py + ROUTER_RADIUS, px - ROUTER_RADIUS, 0.5);
    assert_ne!(at(&m.route(&inside).unwrap()), at(&probs));
    // Experts: radius 4.
    let outside = perturb(&x, py, px + EXPERT_RADIUS + 1, 0.5);
    assert_eq!(at(&m.expert_forward(1, &outside).unwrap()), at(&expert));
    let inside = perturb(&x, py - EXPERT_RADIUS, px + EXPERT_RADIUS, 0.5);
    assert_ne!(at(&m.expert_forward(1, &inside).unwrap()), at(&expert));
}

#[test]
fn decoder_is_affine_and_matches_its_collapsed_form() {
    let m = model::<f64>(2, 11);
    let mut r = rng(12);
    let a = normal::<f64>([1, EMBED_DIM, 4, 5], &mut r);
    let b = normal::<f64>([1, EMBED_DIM, 4, 5], &mut r);
    let alpha = 0.3;
    let mix = a.zip_map(&b, |u, v| alpha * u + (1.0 - alpha) * v);
    let da = m.decode(&Embedding::new(a.clone()).unwrap()).unwrap();
    let db = m.decode(&Embedding::new(b).unwrap()).unwrap();
    let dmix = m.decode(&Embedding::new(mix).unwrap()).unwrap();
    let lin = da.zip_map(&db, |u, v| alpha * u + (1.0 - alpha) * v);
    assert!(max_abs_diff(&dmix, &lin) < 1e-10);
    let eff = m.effective_decoder();
    assert!(max_abs_diff(&eff.apply(&a).unwrap(), &da) < 1e-10);
}

/// Matrix of a 1x1 convolution weight, rebuilt by explicit loops.
fn loop_product(m: &ArgbModel<f32>) -> Vec<Vec<f64>> {
    let w: Vec<Vec<Vec<f64>>> = m
        .decoder
        .convs
        .iter()
        .map(|c| {
            let [o, i, _, _] = c.weight.shape();
            (0..o)
                .map(|r| (0..i).map(|s| f64::from(c.weight.at(r, s, 0, 0))).collect())
                .collect()
        })
        .collect();
    let mut acc = w[0].clone();
    for layer in &w[1..] {
        acc = layer
            .iter()
            .map(|row| {
                (0..acc[0].len())
                    .map(|col| row.iter().zip(&acc).map(|(a, r)| a * r[col]).sum())
                    .collect()
            })
            .collect();
    }
    acc
}

#[test]
fn effective_weight_is_the_product_of_decoder_layers() {
    let m = model::<f32>(2, 13);
    let eff = m.effective_decoder();
    let oracle = loop_product(&m);
    assert_eq!(eff.a.shape(), (3, EMBED_DIM));
    for r in 0..3 {
        for c in 0..EMBED_DIM {
            assert!((eff.a[(r, c)] - oracle[r][c]).abs() < 1e-5);
        }
    }
}

#[test]
fn identity_blocks_give_a_coordinate_projector() {
    let mut m = model::<f32>(2, 14);
    for conv in &mut m.decoder.convs {
        let [o, i, _, _] = conv.weight.shape();
        conv.weight = Arc::new(Tensor::from_fn(
            [o, i, 1, 1],
            |r, s, _, _| {
                if r == s {
                    1.0
                } else {
                    0.0
                }
            },
        ));
    }
    let eff = m.effective_decoder();
    assert_eq!(eff.rank, 3);
    for r in 0..EMBED_DIM {
        for c in 0..EMBED_DIM {
            let want = if r == c && r < 3 { 1.0 } else { 0.0 };
            assert!((eff.p_par[(r, c)] - want).abs() < 1e-12);
            assert!((eff.p_perp[(r, c)] - (if r == c { 1.0 } else { 0.0 } - want)).abs() < 1e-12);
        }
    }
}

fn check_projectors(eff: &EffectiveDecoder) {
    let p = &eff.p_par;
    assert!((p * p - p).abs().max() < 1e-5, "idempotent");
    assert!((p - p.transpose()).abs().max() < 1e-5, "symmetric");
    assert!(
        (&eff.a * &eff.p_perp).abs().max() < 1e-5,
        "A annihilates the nullspace part"
    );
    // Normal-equations form of the row-space projector for full-rank A.
    let a = &eff.a;
    let gram = (a * a.transpose()).try_inverse().expect("full rank");
    let oracle: DMatrix<f64> = a.transpose() * gram * a;
    assert!((p - oracle).abs().max() < 1e-5, "matches A^T (A A^T)^-1 A");
}

#[test]
fn projectors_of_random_decoders() {
    for seed in 0..4 {
        let m = model::<f32>(2, 100 + seed);
        let eff = m.effective_decoder();
        assert_eq!(eff.rank, 3);
        check_projectors(&eff);
    }
}

#[test]
fn rank_deficient_decoder_is_detected() {
    let mut m = model::<f32>(2, 15);
    let w = &mut m.decoder.convs[2].weight;
    let [o, i, _, _] = w.shape();
    *w = Arc::new(Tensor::from_fn([o, i, 1, 1], |r, s, _, _| {
        if r == 2 {
            0.0
        } else {
            w.at(r, s, 0, 0)
        }
    }));
    let eff = m.effective_decoder();
    assert_eq!(eff.rank, 2);
    assert!(eff.is_rank_deficient());
    let p = &eff.p_par;
    assert!((p * p - p).abs().max() < 1e-5);
    assert!((p.trace() - 2.0).abs() < 1e-6);
}

/// Embedding and the sign of every router and expert pre-activation.
fn signs_and_value(m: &ArgbModel<f64>, x: &Tensor<f64>) -> (Tensor<f64>, Vec<bool>, Vec<usize>) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pass = m.encoder_graph_with_preacts(&mut g, xv, PassOptions::FROZEN);
    let signs = pass
        .preacts
        .iter()
        .flat_map(|v| g.value(*v).data().iter().map(|z| *z > 0.0).collect::<Vec<_>>())
        .collect();
    let choice = assignments(g.value(pass.probs));
    (g.value(pass.embedding).clone(), signs, choice)
}

#[test]
fn encoder_is_locally_linear() {
    let m = model::<f64>(3, 16);
    let mut r = rng(17);
    let mut confirmed = 0;
    for _ in 0..10 {
        let x = image::<f64>(1, 10, 10, &mut r);
        let v = normal::<f64>([1, 3, 10, 10], &mut r);
        let h = 1e-5;
        let xp = x.zip_map(&v, |a, b| a + h * b);
        let xm = x.zip_map(&v, |a, b| a - h * b);
        let (f0, s0, c0) = signs_and_value(&m, &x);
        let (fp, sp, cp) = signs_and_value(&m, &xp);
        let (fm, sm, cm) = signs_and_value(&m, &xm);
        if s0 != sp || s0 != sm || c0 != cp || c0 != cm {
            continue;
        }
        confirmed += 1;
        let second = fp.zip_map(&fm, |a, b| a + b).zip_map(&f0, |s, c| s - 2.0 * c);
        assert!(second.max_abs() < 1e-9, "second difference {}", second.max_abs());
    }
    assert!(confirmed >= 5);
}

#[test]
fn casting_preserves_the_forward_pass() {
    let m32 = model::<f32>(3, 18);
    let m64: ArgbModel<f64> = m32.cast();
    let x = image::<f32>(1, 8, 8, &mut rng(19));
    let a = m32.encode(&x).unwrap();
    let b = m64.encode(&x.cast()).unwrap();
    assert!(max_abs_diff(a.tensor(), &b.tensor().cast()) < 1e-4);
}
