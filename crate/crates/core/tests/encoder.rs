mod common;

use common::{adapter_oracle, adapter_store, random_tensor, rng, run_adapter};
use rand::Rng;
use usseg::autodiff::Tape;
use usseg::model::hiera::{
    adapter_rank, encode, hiera_block, trainable_parameters, AdapterPlacement, AdapterWeights, HieraConfig,
};
use usseg::model::{ModelConfig, SegModel};
use usseg::params::ParamStore;
use usseg::train::{model_for_mode, AblationMode};
use usseg::{Error, Tensor};

#[test]
fn adapter_matches_scalar_formula_on_random_cases() {
    let mut rng = rng(11);
    for case in 0..50 {
        let d = if case % 2 == 0 { 4 } else { 8 };
        let (b, h, w) = (
            rng.random_range(1..=2),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        );
        let store = adapter_store("a", d, &mut rng);
        let x = random_tensor(&[b, h, w, d], &mut rng);
        let y = run_adapter(&store, "a", &x);
        let get = |n: &str| store.get(&format!("a.{n}")).unwrap().value.data().to_vec();
        let (wd, bd, wu, bu) = (get("w_down"), get("b_down"), get("w_up"), get("b_up"));
        for (xp, yp) in x.data().chunks(d).zip(y.data().chunks(d)) {
            let expect = adapter_oracle(xp, &wd, &bd, &wu, &bu);
            for (e, g) in expect.iter().zip(yp) {
                assert!((e - g).abs() < 1e-5, "case {case}: {e} vs {g}");
            }
        }
    }
}

#[test]
fn adapter_hand_example() {
    let mut store = ParamStore::<f64>::new();
    store.insert(
        "a.w_down",
        Tensor::new(vec![4, 1], vec![0.5, -0.25, 0.1, 0.2]).unwrap(),
        true,
    );
    store.insert("a.b_down", Tensor::new(vec![1], vec![0.1]).unwrap(), true);
    store.insert(
        "a.w_up",
        Tensor::new(vec![1, 4], vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
        true,
    );
    store.insert("a.b_up", Tensor::new(vec![4], vec![0.0, 0.1, 0.0, -0.1]).unwrap(), true);
    let x = Tensor::new(vec![1, 1, 1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let y = run_adapter(&store, "a", &x);
    // hidden = GELU(0.5 + 0.1) = GELU(0.6)
    let g = 0.6 * 0.5 * (1.0 + common::erf_as(0.6 / 2f64.sqrt()));
    let expect = [1.0 + g, -g + 0.1, 0.5 * g, 2.0 * g - 0.1];
    for (e, v) in expect.iter().zip(y.data()) {
        assert!((e - v).abs() < 1e-6, "{e} vs {v}");
    }
}

#[test]
fn adapter_with_zero_up_projection_is_exact_identity() {
    let mut rng = rng(3);
    let mut store = adapter_store("a", 8, &mut rng);
    store.get_mut("a.w_up").unwrap().value = Tensor::zeros(&[2, 8]);
    store.get_mut("a.b_up").unwrap().value = Tensor::zeros(&[8]);
    let x = random_tensor(&[2, 3, 3, 8], &mut rng);
    assert_eq!(run_adapter(&store, "a", &x), x);
}

#[test]
fn adapter_rank_is_quarter_width() {
    assert_eq!(adapter_rank(256).unwrap(), 64);
    assert_eq!(adapter_rank(64).unwrap(), 16);
    assert!(matches!(adapter_rank(6), Err(Error::Config(_))));
}

fn block_store(d: usize, zero: bool, rng: &mut rand_chacha::ChaCha8Rng) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mut put = |name: &str, shape: &[usize], fill: Option<f64>| {
        let t = match fill {
            Some(v) => Tensor::full(shape, v),
            None if zero => Tensor::zeros(shape),
            None => random_tensor(shape, rng),
        };
        store.insert(format!("blk.{name}"), t, false);
    };
    for n in ["norm1", "norm2"] {
        put(&format!("{n}.gamma"), &[d], Some(1.0));
        put(&format!("{n}.beta"), &[d], Some(0.0));
    }
    for p in ["wq", "wk", "wv", "wo"] {
        put(&format!("attn.{p}"), &[d, d], None);
    }
    put("mlp.fc1.weight", &[d, 4 * d], None);
    put("mlp.fc1.bias", &[4 * d], None);
    put("mlp.fc2.weight", &[4 * d, d], None);
    put("mlp.fc2.bias", &[d], None);
    store
}

#[test]
fn block_with_zero_weights_reduces_to_adapter() {
    let mut rng = rng(5);
    let mut store = block_store(8, true, &mut rng);
    for (name, p) in adapter_store("ad", 8, &mut rng).iter() {
        store.insert(name, p.value.clone(), true);
    }
    let x = random_tensor(&[1, 2, 3, 8], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let w = AdapterWeights::bind(&mut tape, &store, "ad").unwrap();
    let y = hiera_block(
        &mut tape,
        &store,
        "blk",
        xv,
        2,
        Some((&w, AdapterPlacement::AfterAttention)),
    )
    .unwrap();
    let expect = run_adapter(&store, "ad", &x);
    assert!(tape.value(y).max_abs_diff(&expect) < 1e-12);
}

#[test]
fn block_preserves_shape_and_identity_adapter_changes_nothing() {
    let mut rng = rng(8);
    let mut store = block_store(128, false, &mut rng);
    store.insert("ad.w_down", random_tensor(&[128, 32], &mut rng), true);
    store.insert("ad.b_down", random_tensor(&[32], &mut rng), true);
    store.insert("ad.w_up", Tensor::zeros(&[32, 128]), true);
    store.insert("ad.b_up", Tensor::zeros(&[128]), true);
    let x = random_tensor(&[1, 14, 14, 128], &mut rng);
    for placement in [AdapterPlacement::AfterAttention, AdapterPlacement::AfterMlp] {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let plain = hiera_block(&mut tape, &store, "blk", xv, 4, None).unwrap();
        let w = AdapterWeights::bind(&mut tape, &store, "ad").unwrap();
        let adapted = hiera_block(&mut tape, &store, "blk", xv, 4, Some((&w, placement))).unwrap();
        assert_eq!(tape.shape(plain), &[1, 14, 14, 128]);
        assert_eq!(tape.value(plain), tape.value(adapted));
    }
}

fn pyramid_values(model: &SegModel<f32>, image: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone()).unwrap();
    let p = encode(&mut tape, &model.params, &model.config.encoder, x).unwrap();
    p.levels.iter().map(|&v| tape.value(v).clone()).collect()
}

#[test]
fn encoder_with_initial_adapters_equals_frozen_encoder_bitwise() {
    let image = Tensor::<f32>::uniform(&[2, 64, 64, 1], 0.0, 1.0, &mut rng(1));
    for placement in [AdapterPlacement::AfterAttention, AdapterPlacement::AfterMlp] {
        let mut cfg = ModelConfig::default();
        cfg.encoder.adapter_placement = placement;
        let with = SegModel::<f32>::new(model_for_mode(&cfg, AblationMode::C), 7).unwrap();
        let without = SegModel::<f32>::new(model_for_mode(&cfg, AblationMode::B), 7).unwrap();
        let (a, b) = (pyramid_values(&with, &image), pyramid_values(&without, &image));
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }
}

#[test]
fn pyramid_shapes_follow_the_stride_ladder() {
    let model = SegModel::<f32>::new(ModelConfig::default(), 0).unwrap();
    let image = Tensor::<f32>::uniform(&[1, 224, 224, 1], 0.0, 1.0, &mut rng(2));
    let shapes: Vec<Vec<usize>> = pyramid_values(&model, &image)
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    assert_eq!(shapes, [vec![1, 56, 56, 64], vec![1, 28, 28, 64], vec![1, 14, 14, 64]]);

    let small = Tensor::<f32>::uniform(&[2, 32, 48, 1], 0.0, 1.0, &mut rng(3));
    let big = Tensor::<f32>::uniform(&[2, 64, 96, 1], 0.0, 1.0, &mut rng(3));
    let (s, b) = (pyramid_values(&model, &small), pyramid_values(&model, &big));
    for (x, y) in s.iter().zip(&b) {
        assert_eq!(x.shape()[0], 2);
        assert_eq!((2 * x.shape()[1], 2 * x.shape()[2]), (y.shape()[1], y.shape()[2]));
    }
}

#[test]
fn indivisible_input_names_the_required_multiple() {
    let model = SegModel::<f32>::new(model_for_mode(&ModelConfig::default(), AblationMode::C), 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 40, 48, 1])).unwrap();
    let err = encode(&mut tape, &model.params, &model.config.encoder, x).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(err.to_string().contains("multiple of 16"), "{err}");
}

#[test]
fn trainable_set_is_exactly_the_adapters() {
    let model = SegModel::<f32>::new(model_for_mode(&ModelConfig::default(), AblationMode::C), 0).unwrap();
    let names = trainable_parameters(&model.config.encoder, &model.params);
    assert_eq!(names.len(), 12);
    assert!(names.iter().all(|n| n.starts_with("adapter.")));
    for (name, p) in model.params.iter() {
        if name.starts_with("encoder.") {
            assert!(!p.trainable, "{name}");
        }
    }
    let frozen = SegModel::<f32>::new(model_for_mode(&ModelConfig::default(), AblationMode::B), 0).unwrap();
    assert!(trainable_parameters(&frozen.config.encoder, &frozen.params).is_empty());
    assert!(HieraConfig::default().adapter_enabled);
}

fn adapter_grads(model: &SegModel<f64>) -> Vec<(String, f64)> {
    let image = Tensor::<f64>::uniform(&[2, 32, 32, 1], 0.0, 1.0, &mut rng(4));
    let labels: Vec<usize> = (0..2 * 32 * 32).map(|i| (i / 7) % 3).collect();
    let mut tape = Tape::new();
    let x = tape.constant(image).unwrap();
    let logits = model.forward(&mut tape, x).unwrap();
    let loss = tape.dice_ce_loss(logits, &labels).unwrap();
    tape.backward(loss).unwrap();
    let grads = tape.param_grads();
    for (name, _) in &grads {
        assert!(
            model.params.get(name).unwrap().trainable,
            "frozen {name} received a gradient"
        );
    }
    grads
        .into_iter()
        .filter(|(n, _)| n.starts_with("adapter."))
        .map(|(n, g)| (n, g.norm()))
        .collect()
}

#[test]
fn gradients_reach_adapters_and_skip_frozen_tensors() {
    let mut model = SegModel::<f32>::new(ModelConfig::default(), 9)
        .unwrap()
        .params
        .cast::<f64>();
    let cfg = ModelConfig::default();
    let seg = |params: ParamStore<f64>| SegModel {
        config: cfg.clone(),
        params,
    };
    // At the identity initialization only the up-projection sees the loss.
    for (name, norm) in adapter_grads(&seg(model.clone())) {
        if name.ends_with("w_up") || name.ends_with("b_up") {
            assert!(norm > 0.0, "{name}");
        } else {
            assert_eq!(norm, 0.0, "{name}");
        }
    }
    let names: Vec<String> = model
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.ends_with("w_up"))
        .collect();
    let mut r = rng(10);
    for name in names {
        let shape = model.get(&name).unwrap().value.shape().to_vec();
        model.get_mut(&name).unwrap().value = random_tensor(&shape, &mut r);
    }
    let grads = adapter_grads(&seg(model));
    assert_eq!(grads.len(), 12);
    for (name, norm) in grads {
        assert!(norm > 0.0, "{name}");
    }
}
