//! End-to-end model behaviors: persistence, covariance, gradient flow.

use std::collections::BTreeMap;

use drbnet_core::loss::l1_multiscale;
use drbnet_core::model::{Model, ModelConfig};
use drbnet_core::optim::RAdam;
use drbnet_core::tensor::{GradTape, Tensor};
use drbnet_core::train::{load_checkpoint, save_checkpoint};

fn small_model(seed: u64) -> Model {
    Model::new(ModelConfig {
        base_width: 4,
        kernel_size: 5,
        slope: 0.2,
        seed,
    })
    .unwrap()
}

#[test]
fn checkpoint_round_trip_preserves_forward_bits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = small_model(11);
    let x = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut drbnet_core::rng(1));
    let before = model.infer(&x).unwrap().to_vec();

    save_checkpoint(&path, &model, None, 3, 99, "model.width = 4\n").unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    assert_eq!(ckpt.epoch, 3);
    assert_eq!(ckpt.seed, 99);
    assert_eq!(ckpt.config_text, "model.width = 4\n");

    // Load into a differently-initialized model of the same shape.
    let other = small_model(77);
    other.load_named(&ckpt.params).unwrap();
    let after = other.infer(&x).unwrap().to_vec();
    assert!(before
        .iter()
        .zip(&after)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn checkpoint_rejects_unknown_and_missing_names() {
    let model = small_model(0);
    let mut entries: BTreeMap<String, Tensor> = model
        .named_parameters()
        .into_iter()
        .map(|(n, t)| (n, t.detach()))
        .collect();
    entries.insert("bogus.weight".into(), Tensor::zeros(&[1]));
    assert!(model.load_named(&entries).is_err());
    entries.remove("bogus.weight");
    let some_key = entries.keys().next().unwrap().clone();
    entries.remove(&some_key);
    assert!(model.load_named(&entries).is_err());
}

#[test]
fn optimizer_state_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("o.ckpt");
    let model = small_model(5);
    let mut opt = RAdam::new(model.named_parameters());

    // A couple of real steps to populate the moments.
    let x = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut drbnet_core::rng(2));
    let y = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut drbnet_core::rng(3));
    for _ in 0..3 {
        let tape = GradTape::new();
        let pyr = model.forward(&tape, &x).unwrap();
        let loss = l1_multiscale(&tape, &pyr, &y).unwrap();
        tape.backward(&loss.total).unwrap();
        opt.step(1e-3).unwrap();
        model.zero_grads();
    }
    save_checkpoint(&path, &model, Some(&opt), 2, 0, "").unwrap();
    let ckpt = load_checkpoint(&path).unwrap();

    let model2 = small_model(6);
    model2.load_named(&ckpt.params).unwrap();
    let mut opt2 = RAdam::new(model2.named_parameters());
    opt2.load_state(&ckpt.optim).unwrap();
    assert_eq!(opt2.step_count(), opt.step_count());

    // One more identical step on both must produce identical weights.
    let step = |m: &Model, o: &mut RAdam| {
        let tape = GradTape::new();
        let pyr = m.forward(&tape, &x).unwrap();
        let loss = l1_multiscale(&tape, &pyr, &y).unwrap();
        tape.backward(&loss.total).unwrap();
        o.step(1e-3).unwrap();
        m.zero_grads();
    };
    step(&model, &mut opt);
    step(&model2, &mut opt2);
    for ((_, a), (_, b)) in model
        .named_parameters()
        .iter()
        .zip(model2.named_parameters().iter())
    {
        assert_eq!(a.to_vec(), b.to_vec());
    }
}

#[test]
fn translation_covariance_in_the_interior() {
    let model = small_model(8);
    // The cascade's receptive-field radius is just under 200 px; pixels
    // whose receptive cone stays inside the frame are exactly covariant,
    // so the frame must be large enough to have a true interior.
    let (h, w) = (408, 408);
    let shift = 8usize;
    let base = Tensor::rand_uniform(&[1, 3, h + shift, w + shift], 0.0, 1.0, &mut drbnet_core::rng(4));
    let bv = base.to_vec();
    let crop = |oy: usize, ox: usize| -> Tensor {
        let mut out = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[c * h * w + y * w + x] =
                        bv[c * (h + shift) * (w + shift) + (y + oy) * (w + shift) + (x + ox)];
                }
            }
        }
        Tensor::from_vec(&[1, 3, h, w], out).unwrap()
    };
    let a = model.infer(&crop(0, 0)).unwrap().to_vec();
    let b = model.infer(&crop(shift, shift)).unwrap().to_vec();

    // Compare a's interior shifted by 8 against b's interior; borders are
    // excluded (padding and resize edge effects are not covariant).
    let margin = 184;
    let mut diff = 0.0f64;
    let mut count = 0usize;
    for c in 0..3 {
        for y in margin..h - margin - shift {
            for x in margin..w - margin - shift {
                let av = a[c * h * w + (y + shift) * w + (x + shift)];
                let bvv = b[c * h * w + y * w + x];
                diff += (av as f64 - bvv as f64).abs();
                count += 1;
            }
        }
    }
    let mad = diff / count as f64;
    assert!(mad <= 1e-3, "interior mean abs diff {mad}");
}

#[test]
fn gradient_reaches_every_parameter() {
    let model = small_model(9);
    // Accumulate gradients over 5 random batches without zeroing.
    for seed in 0..5 {
        let mut rng = drbnet_core::rng(100 + seed);
        let x = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let y = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let tape = GradTape::new();
        let pyr = model.forward(&tape, &x).unwrap();
        let loss = l1_multiscale(&tape, &pyr, &y).unwrap();
        tape.backward(&loss.total).unwrap();
    }
    for (name, p) in model.named_parameters() {
        let g = p.grad().unwrap_or_else(|| panic!("{name} got no gradient"));
        assert!(
            g.iter().any(|&v| v != 0.0),
            "{name}: gradient identically zero across 5 batches"
        );
    }
}

#[test]
fn tiled_inference_constant_image_under_identity_model() {
    let model = small_model(10);
    model.make_identity_cascade();
    let x = Tensor::full(&[1, 3, 100, 130], 0.42);
    let out = model.infer_tiled(&x, 64, 16).unwrap();
    assert_eq!(out.shape(), &[1, 3, 100, 130]);
    for v in out.to_vec() {
        assert!((v - 0.42).abs() < 1e-5);
    }
}
