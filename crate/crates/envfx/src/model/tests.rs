//! Contract tests for the network submodules.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::dataset::EnvironmentLabel;
use crate::nn::ops;

fn micro_model() -> Model {
    Model::new(ModelConfig::micro()).unwrap()
}

fn rand_mel(rng: &mut ChaCha20Rng, b: usize, t: usize) -> Array3<f64> {
    Array3::from_shape_fn((b, t, 80), |_| rng.random_range(-8.0..0.0))
}

fn full_mask(b: usize, t: usize) -> Array2<bool> {
    Array2::from_elem((b, t), true)
}

/// Mask with the tail of each row padded.
fn tail_mask(b: usize, t: usize, valid: usize) -> Array2<bool> {
    Array2::from_shape_fn((b, t), |(_, ti)| ti < valid)
}

#[test]
fn encoder_output_shape_and_determinism() {
    let model = micro_model();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let x = Tensor::constant(rand_mel(&mut rng, 2, 16).into_dyn());
    let mask = full_mask(2, 16);
    let a = model.encode(&x, &mask).unwrap();
    assert_eq!(a.shape(), vec![2, 16, 8]);
    let b = model.encode(&x, &mask).unwrap();
    assert_eq!(a.to_array(), b.to_array());
}

#[test]
fn encoder_rejects_wrong_channel_count() {
    let model = micro_model();
    let x = Tensor::constant(Array3::<f64>::zeros((1, 16, 40)).into_dyn());
    assert!(model.encode(&x, &full_mask(1, 16)).is_err());
}

#[test]
fn encoder_masks_padded_frames_to_zero() {
    let model = micro_model();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let x = Tensor::constant(rand_mel(&mut rng, 1, 16).into_dyn());
    let mask = tail_mask(1, 16, 10);
    let h = model.encode(&x, &mask).unwrap();
    let v = h.value();
    for ti in 10..16 {
        for c in 0..8 {
            assert_eq!(v[[0, ti, c]], 0.0);
        }
    }
}

#[test]
fn encoder_ignores_padded_region_values() {
    let model = micro_model();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let base = rand_mel(&mut rng, 1, 16);
    let mut tampered = base.clone();
    for ti in 10..16 {
        for c in 0..80 {
            tampered[[0, ti, c]] = rng.random_range(-100.0..100.0);
        }
    }
    let mask = tail_mask(1, 16, 10);
    let a = model
        .encode(&Tensor::constant(base.into_dyn()), &mask)
        .unwrap();
    let b = model
        .encode(&Tensor::constant(tampered.into_dyn()), &mask)
        .unwrap();
    assert_eq!(a.to_array(), b.to_array(), "padded values leaked into latents");
}

#[test]
fn unet_preserves_time_length() {
    let model = micro_model();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let y = Tensor::constant(rand_mel(&mut rng, 2, 16).into_dyn());
    let out = model.extract_effect(&y, &full_mask(2, 16), false).unwrap();
    assert_eq!(out.shape(), vec![2, 16, 80]);
}

#[test]
fn unet_time_trace_matches_pooling_arithmetic() {
    // Depth 3 on 1200 frames: 1200 -> 600 -> 300 -> 150 -> 300 -> 600 -> 1200.
    let cfg = ModelConfig {
        unet_depth: 3,
        max_frames: 1200,
        ..ModelConfig::micro()
    };
    let model = Model::new(cfg).unwrap();
    assert_eq!(
        model.effect_time_trace(1200),
        vec![1200, 600, 300, 150, 300, 600, 1200]
    );
}

#[test]
fn unet_input_gradient_matches_finite_differences() {
    // Inference-mode batch norm makes the finite-difference oracle valid.
    let model = micro_model();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let base = rand_mel(&mut rng, 1, 16);
    let mask = full_mask(1, 16);
    let weights = Array3::from_shape_fn((1, 16, 80), |(_, t, c)| {
        0.01 * ((t * 7 + c * 3) % 13) as f64
    });

    let loss_of = |input: &Array3<f64>| -> (f64, Option<ndarray::ArrayD<f64>>) {
        let x = Tensor::param(input.clone().into_dyn());
        let out = model.extract_effect(&x, &mask, false).unwrap();
        let loss = ops::sum_all(&ops::mul(
            &out,
            &Tensor::constant(weights.clone().into_dyn()),
        ));
        let v = loss.scalar();
        loss.backward();
        (v, x.grad())
    };

    let (_, grad) = loss_of(&base);
    let grad = grad.unwrap();
    let h = 1e-3;
    let mut rng2 = ChaCha20Rng::seed_from_u64(99);
    for _ in 0..10 {
        let bi = 0;
        let ti = rng2.random_range(0..16);
        let ci = rng2.random_range(0..80);
        let mut plus = base.clone();
        plus[[bi, ti, ci]] += h;
        let mut minus = base.clone();
        minus[[bi, ti, ci]] -= h;
        let fd = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
        let an = grad[[bi, ti, ci]];
        let denom = an.abs().max(fd.abs()).max(1e-8);
        assert!(
            ((fd - an) / denom).abs() < 1e-3,
            "unet input grad: fd {fd} vs analytic {an} at ({ti},{ci})"
        );
    }
}

#[test]
fn effect_encoder_alpha_zero_equals_zero_spectrum() {
    let model = micro_model();
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let y_prime = Tensor::constant(rand_mel(&mut rng, 1, 16).into_dyn());
    let zeros = Tensor::constant(Array3::<f64>::zeros((1, 16, 80)).into_dyn());
    let mask = full_mask(1, 16);
    let a = model.encode_effect(&y_prime, 0.0, &mask).unwrap();
    let b = model.encode_effect(&zeros, 1.0, &mask).unwrap();
    assert_eq!(a.to_array(), b.to_array());
}

#[test]
fn effect_encoder_rejects_out_of_range_alpha() {
    let model = micro_model();
    let y = Tensor::constant(Array3::<f64>::zeros((1, 16, 80)).into_dyn());
    let mask = full_mask(1, 16);
    assert!(model.encode_effect(&y, -0.1, &mask).is_err());
    assert!(model.encode_effect(&y, 2.1, &mask).is_err());
    assert!(model.encode_effect(&y, 2.0, &mask).is_ok());
}

#[test]
fn variance_adaptor_shapes_and_padding_masking() {
    let model = micro_model();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let x = Tensor::constant(rand_mel(&mut rng, 2, 16).into_dyn());
    let mask = tail_mask(2, 16, 12);
    let enc = model.encode(&x, &mask).unwrap();
    let out = model.variance_forward(&enc, &mask, None);
    assert_eq!(out.pitch_pred.shape(), vec![2, 16, 1]);
    assert_eq!(out.energy_pred.shape(), vec![2, 16, 1]);
    assert_eq!(out.embedding.shape(), vec![2, 16, 8]);
    // Predictions and embeddings vanish on padded frames.
    let p = out.pitch_pred.value();
    let e = out.embedding.value();
    for ti in 12..16 {
        assert_eq!(p[[0, ti, 0]], 0.0);
        for c in 0..8 {
            assert_eq!(e[[0, ti, c]], 0.0);
        }
    }
}

#[test]
fn decoder_shape_and_attention_masking() {
    let model = micro_model();
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let base = Array3::from_shape_fn((1, 16, 8), |_| rng.random_range(-1.0..1.0));
    let mask = tail_mask(1, 16, 11);

    let out_a = model.decode(&Tensor::constant(base.clone().into_dyn()), &mask);
    assert_eq!(out_a.shape(), vec![1, 16, 80]);

    // Change the latent only at padded positions.
    let mut tampered = base.clone();
    for ti in 11..16 {
        for c in 0..8 {
            tampered[[0, ti, c]] += rng.random_range(-10.0..10.0);
        }
    }
    let out_b = model.decode(&Tensor::constant(tampered.into_dyn()), &mask);
    let (va, vb) = (out_a.value(), out_b.value());
    for ti in 0..11 {
        for c in 0..80 {
            assert!(
                (va[[0, ti, c]] - vb[[0, ti, c]]).abs() < 1e-6,
                "padded latent leaked into valid frame {ti}"
            );
        }
    }
}

#[test]
fn decoder_batch_rows_are_independent() {
    let model = micro_model();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let a = Array3::from_shape_fn((1, 16, 8), |_| rng.random_range(-1.0..1.0));
    let b = Array3::from_shape_fn((1, 16, 8), |_| rng.random_range(-1.0..1.0));
    let mask = full_mask(2, 16);

    let mut ab = Array3::<f64>::zeros((2, 16, 8));
    ab.index_axis_mut(ndarray::Axis(0), 0).assign(&a.index_axis(ndarray::Axis(0), 0));
    ab.index_axis_mut(ndarray::Axis(0), 1).assign(&b.index_axis(ndarray::Axis(0), 0));
    let mut ba = Array3::<f64>::zeros((2, 16, 8));
    ba.index_axis_mut(ndarray::Axis(0), 0).assign(&b.index_axis(ndarray::Axis(0), 0));
    ba.index_axis_mut(ndarray::Axis(0), 1).assign(&a.index_axis(ndarray::Axis(0), 0));

    let out_ab = model.decode(&Tensor::constant(ab.into_dyn()), &mask);
    let out_ba = model.decode(&Tensor::constant(ba.into_dyn()), &mask);
    let (vab, vba) = (out_ab.value(), out_ba.value());
    for ti in 0..16 {
        for c in 0..80 {
            assert_eq!(vab[[0, ti, c]], vba[[1, ti, c]]);
            assert_eq!(vab[[1, ti, c]], vba[[0, ti, c]]);
        }
    }
}

#[test]
fn classifier_emits_five_normalized_logits() {
    let model = micro_model();
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let latent = Tensor::constant(
        Array3::from_shape_fn((3, 16, 8), |_| rng.random_range(-1.0..1.0)).into_dyn(),
    );
    let mask = full_mask(3, 16);
    let logits = model.classify_environment(&latent, &mask, ClassifierSide::Content);
    assert_eq!(logits.shape(), vec![3, 5]);
    let v = logits.value();
    for b in 0..3 {
        let row: Vec<f64> = (0..5).map(|k| v[[b, k]]).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        let softmax_sum: f64 = row.iter().map(|x| (x - m).exp() / z).sum();
        assert!((softmax_sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn grl_non_target_split_batch_oracle() {
    // Batch [T, N, N, T]: rows marked N must see negated gradients, matching
    // two separate backward passes through plain paths.
    use EnvironmentLabel::{Bathroom, Cave};
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let value = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
    let weights = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));

    let labels = [Bathroom, Cave, Cave, Bathroom];
    let targets = [Bathroom; 4];

    let x = Tensor::param(value.clone().into_dyn());
    let routed = grl_non_target(&x, &labels, &targets);
    assert_eq!(routed.to_array(), x.to_array(), "forward is the identity");
    ops::sum_all(&ops::mul(
        &routed,
        &Tensor::constant(weights.clone().into_dyn()),
    ))
    .backward();
    let got = x.grad().unwrap();

    // Oracle: plain pass for target rows, negated for non-target rows.
    for b in 0..4 {
        let sign = if labels[b] == targets[b] { 1.0 } else { -1.0 };
        for c in 0..3 {
            let expect = sign * weights[[b, c]];
            assert_eq!(got[[b, c]], expect, "row {b}");
        }
    }
}

#[test]
fn grl_non_target_degenerate_batches() {
    use EnvironmentLabel::Gallery;
    let x = Tensor::param(Array2::from_elem((2, 2), 1.0).into_dyn());
    // All-target: behaves as a no-op layer.
    let all_t = grl_non_target(&x, &[Gallery, Gallery], &[Gallery, Gallery]);
    ops::sum_all(&all_t).backward();
    assert!(x.grad().unwrap().iter().all(|&g| g == 1.0));
    x.zero_grad();
    // All-non-target: behaves as a plain gradient reversal.
    let all_n = grl_non_target(
        &x,
        &[Gallery, Gallery],
        &[EnvironmentLabel::Cave, EnvironmentLabel::Cave],
    );
    ops::sum_all(&all_n).backward();
    assert!(x.grad().unwrap().iter().all(|&g| g == -1.0));
}

#[test]
fn full_forward_shape_closure() {
    // Dec(Enc(x) + EffectEnc(Extract(y)) + Var(Enc(x))) matches x's shape.
    let model = micro_model();
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let x = Tensor::constant(rand_mel(&mut rng, 2, 16).into_dyn());
    let y = Tensor::constant(rand_mel(&mut rng, 2, 16).into_dyn());
    let mask = full_mask(2, 16);
    let enc = model.encode(&x, &mask).unwrap();
    let eff = model.extract_effect(&y, &mask, false).unwrap();
    let cond = model.encode_effect(&eff, 1.0, &mask).unwrap();
    let var = model.variance_forward(&enc, &mask, None);
    let z = ops::add(&ops::add(&enc, &cond), &var.embedding);
    let out = model.decode(&z, &mask);
    assert_eq!(out.shape(), x.shape());
}

#[test]
fn checkpoint_roundtrip_reproduces_forward_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = ModelConfig::micro();
    let model = Model::new(cfg.clone()).unwrap();
    let registry = model.registry();

    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let x = Tensor::constant(rand_mel(&mut rng, 1, 16).into_dyn());
    let mask = full_mask(1, 16);
    let before = model.extract_effect(&x, &mask, false).unwrap().to_array();

    let data = checkpoint::snapshot(
        &model,
        &registry,
        None,
        serde_json::json!({ "model": cfg }).to_string(),
        42,
        [7u8; 32],
        123,
    );
    checkpoint::save_checkpoint(&path, &data).unwrap();

    let loaded = checkpoint::load_checkpoint(&path).unwrap();
    assert_eq!(loaded.step, 42);
    assert_eq!(loaded.rng_word_pos, 123);

    // Fresh model with a different init seed; restoring must reproduce the
    // original forward bit for bit.
    let model2 = Model::new(ModelConfig {
        init_seed: 999,
        ..cfg
    })
    .unwrap();
    let registry2 = model2.registry();
    checkpoint::restore_model(&model2, &registry2, &loaded).unwrap();
    let after = model2.extract_effect(&x, &mask, false).unwrap().to_array();
    assert_eq!(before, after);
}

#[test]
fn checkpoint_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = micro_model();
    let registry = model.registry();
    let data = checkpoint::snapshot(&model, &registry, None, "{}".into(), 0, [0u8; 32], 0);
    checkpoint::save_checkpoint(&path, &data).unwrap();

    // Flip a byte inside the config blob (magic 8 + version 4 + len 4 = 16).
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[16] ^= 0x01; // stays valid UTF-8 so the hash check is what trips
    std::fs::write(&path, bytes).unwrap();
    let err = checkpoint::load_checkpoint(&path).unwrap_err();
    assert!(format!("{err}").contains("hash"));
}

#[test]
fn config_rejects_bad_geometry() {
    let bad = ModelConfig {
        max_frames: 100, // not divisible by 2^4
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        d_model: 9, // not divisible by heads
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        encoder_kernel: 4,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
}
