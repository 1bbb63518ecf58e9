//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use usseg::autodiff::{grad_check, AttentionWeights, Tape};
use usseg::data::phantom::{generate, PhantomSpec};
use usseg::data::Sample;
use usseg::metrics::{detect_classify, mask_overlap, overlap_metrics, surface_distances, Detection};
use usseg::model::fusion::{fuse_pyramid, FusionConfig, FusionMode};
use usseg::model::hiera::{encode, AdapterPlacement};
use usseg::model::{ModelConfig, SegModel};
use usseg::pca::pca_rgb;
use usseg::run::{round3, run_bench, run_eval, run_train, BenchReport, DataSource, RunConfig, BENCH_TIMED_ITERS};
use usseg::train::{batch_loss, evaluate, lr_at, model_for_mode, train, warmup_steps, AblationMode, TrainConfig};
use usseg::Tensor;

type Outcome = String;

fn ensure(ok: bool, msg: impl FnOnce() -> String) {
    if !ok {
        panic!("{}", msg());
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn autodiff_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut check =
        |name: &str,
         params: Vec<Tensor<f64>>,
         f: &dyn Fn(&mut Tape<f64>, &[usseg::autodiff::Var]) -> usseg::Result<usseg::autodiff::Var>| {
            let err = grad_check(
                |t, p| {
                    let y = f(t, p)?;
                    if t.value(y).numel() == 1 {
                        Ok(y)
                    } else {
                        probe_loss(t, y)
                    }
                },
                &params,
            )
            .unwrap();
            ensure(err < 1e-3, || format!("{name}: max relative error {err:.3e}"));
            worst = worst.max(err);
        };
    check("gelu", vec![randn(&[2, 3, 4], 1)], &|t, p| t.gelu(p[0]));
    check(
        "conv2d",
        vec![randn(&[2, 5, 5, 3], 2), randn(&[3, 3, 3, 4], 3), randn(&[4], 4)],
        &|t, p| t.conv2d(p[0], p[1], Some(p[2]), 1, 1),
    );
    check(
        "conv2d stride 2",
        vec![randn(&[1, 6, 6, 2], 5), randn(&[2, 2, 2, 3], 6)],
        &|t, p| t.conv2d(p[0], p[1], None, 2, 0),
    );
    check(
        "conv_transpose2d",
        vec![randn(&[2, 3, 3, 4], 7), randn(&[2, 2, 4, 3], 8), randn(&[3], 9)],
        &|t, p| t.conv_transpose2d(p[0], p[1], Some(p[2]), 2),
    );
    check("bilinear_resize up", vec![randn(&[1, 3, 4, 2], 10)], &|t, p| {
        t.bilinear_resize(p[0], 6, 5)
    });
    check("bilinear_resize down", vec![randn(&[2, 6, 5, 2], 11)], &|t, p| {
        t.bilinear_resize(p[0], 3, 2)
    });
    let mut r = rng(12);
    let mut attn = vec![randn(&[2, 3, 4], 13)];
    attn.extend((0..4).map(|_| Tensor::randn(&[4, 4], 0.5, &mut r)));
    check("attention", attn, &|t, p| {
        let w = AttentionWeights {
            wq: p[1],
            wk: p[2],
            wv: p[3],
            wo: p[4],
        };
        t.attention(p[0], 2, &w)
    });
    check(
        "layer_norm",
        vec![randn(&[3, 6], 14), randn(&[6], 15), randn(&[6], 16)],
        &|t, p| t.layer_norm(p[0], p[1], p[2], 1e-6),
    );
    check("softmax", vec![randn(&[4, 5], 17)], &|t, p| t.softmax(p[0]));
    check("matmul", vec![randn(&[3, 5], 18), randn(&[5, 2], 19)], &|t, p| {
        t.matmul(p[0], p[1])
    });
    check(
        "concat",
        vec![randn(&[2, 2, 3, 2], 20), randn(&[2, 2, 3, 4], 21)],
        &|t, p| t.concat(&[p[0], p[1]]),
    );
    check("max_pool", vec![randn(&[2, 4, 6, 3], 22)], &|t, p| t.max_pool2(p[0]));
    let target: Vec<usize> = (0..2 * 4 * 4).map(|_| r.random_range(0..3)).collect();
    check("dice_ce_loss", vec![randn(&[2, 4, 4, 3], 23)], &|t, p| {
        t.dice_ce_loss(p[0], &target)
    });
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("suite took {elapsed:?}"));
    format!(
        "13 checks, max relative error {worst:.2e}, {:.1} s",
        elapsed.as_secs_f64()
    )
}

fn adapter_fidelity() -> Outcome {
    let mut r = rng(11);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let d = [4, 8, 16][case % 3];
        let (b, h, w) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=4));
        let store = adapter_store("a", d, &mut r);
        let x = random_tensor(&[b, h, w, d], &mut r);
        let y = run_adapter(&store, "a", &x);
        let get = |n: &str| store.get(&format!("a.{n}")).unwrap().value.data().to_vec();
        let (wd, bd, wu, bu) = (get("w_down"), get("b_down"), get("w_up"), get("b_up"));
        for (xp, yp) in x.data().chunks(d).zip(y.data().chunks(d)) {
            for (e, g) in adapter_oracle(xp, &wd, &bd, &wu, &bu).iter().zip(yp) {
                worst = worst.max((e - g).abs());
            }
        }
    }
    ensure(worst < 1e-5, || {
        format!("adapter deviates from the scalar loop by {worst:.3e}")
    });

    let image = Tensor::<f32>::uniform(&[2, 64, 64, 1], 0.0, 1.0, &mut rng(1));
    for placement in [AdapterPlacement::AfterAttention, AdapterPlacement::AfterMlp] {
        let mut cfg = ModelConfig::default();
        cfg.encoder.adapter_placement = placement;
        let levels = |mode| {
            let model = SegModel::<f32>::new(model_for_mode(&cfg, mode), 7).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(image.clone()).unwrap();
            let p = encode(&mut tape, &model.params, &model.config.encoder, x).unwrap();
            p.levels
                .iter()
                .map(|&v| tape.value(v).data().to_vec())
                .collect::<Vec<_>>()
        };
        ensure(levels(AblationMode::C) == levels(AblationMode::B), || {
            format!("{placement:?}: encoder with initial adapters differs from the frozen encoder")
        });
    }
    format!("50 cases, max abs error {worst:.2e}; encoder identity bitwise for both placements")
}

fn freeze_contract() -> Outcome {
    let data = generate(&PhantomSpec {
        count: 4,
        size: 32,
        seed: 3,
        ..Default::default()
    });
    let mut model = SegModel::new(model_for_mode(&ModelConfig::default(), AblationMode::E), 0).unwrap();
    let before = model.params.clone();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 2,
        ..Default::default()
    };
    let out = train(&mut model, &data, &data, &cfg, None).unwrap();
    ensure(out.state.step == 10, || format!("{} steps", out.state.step));
    let (mut frozen, mut trained) = (0, 0);
    for (name, p) in model.params.iter() {
        let same = p.value == before.get(name).unwrap().value;
        if name.starts_with("encoder.") || name.starts_with("aux.") {
            ensure(same && !p.trainable, || {
                format!("backbone tensor {name} changed or is trainable")
            });
            frozen += 1;
        } else {
            ensure(!same, || format!("trainable tensor {name} did not change"));
            trained += 1;
        }
    }
    let adapters = model.params.iter().filter(|(n, _)| n.starts_with("adapter.")).count();
    ensure(adapters > 0 && model.params.contains("fusion.proj.weight"), || {
        "missing trainable groups".into()
    });
    format!("{frozen} frozen tensors unchanged, {trained} adapter/projection/decoder tensors changed")
}

fn shape_pipeline() -> Outcome {
    for d_hiera in [64, 256] {
        let mut cfg = ModelConfig::default();
        cfg.encoder.d_hiera = d_hiera;
        let model = SegModel::<f32>::new(cfg, 0).unwrap();
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::uniform(&[1, 224, 224, 1], 0.0, 1.0, &mut rng(6)))
            .unwrap();
        let parts = model.forward_parts(&mut tape, x).unwrap();
        let shapes: Vec<Vec<usize>> = parts.fused.levels.iter().map(|&l| tape.shape(l).to_vec()).collect();
        let want: Vec<Vec<usize>> = [56, 28, 14].iter().map(|&s| vec![1, s, s, 2 * d_hiera]).collect();
        ensure(shapes == want, || {
            format!("d_hiera {d_hiera}: fused pyramid {shapes:?}")
        });
        let logits = tape.shape(parts.logits).to_vec();
        ensure(logits == [1, 224, 224, 3], || {
            format!("d_hiera {d_hiera}: logits {logits:?}")
        });
    }
    "224x224 gives (56,56),(28,28),(14,14) x 2*d_hiera and (224,224,3) logits for d_hiera 64 and 256".into()
}

fn metric_oracles() -> Outcome {
    let mut r = rng(42);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (dp, dg) = (r.random_range(0.0..0.6), r.random_range(0.0..0.6));
        let (p, g) = (random_mask(&mut r, dp), random_mask(&mut r, dg));
        let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count() as f64;
        let (np, ng) = (
            p.iter().filter(|&&v| v).count() as f64,
            g.iter().filter(|&&v| v).count() as f64,
        );
        let (dsc, iou) = mask_overlap(&p, &g);
        if np + ng > 0.0 {
            ensure(
                dsc == 2.0 * inter / (np + ng) && iou == inter / (np + ng - inter),
                || format!("case {case}: overlap mismatch"),
            );
            ensure((dsc - 2.0 * iou / (1.0 + iou)).abs() < 1e-12, || {
                format!("case {case}: dsc/iou identity")
            });
        }
        let labels = |m: &[bool]| m.iter().map(|&v| v as u8).collect::<Vec<_>>();
        let (pl, gl) = (labels(&p), labels(&g));
        let acc = pl.iter().zip(&gl).filter(|(a, b)| a == b).count() as f64 / (N * N) as f64;
        ensure(overlap_metrics(&pl, &gl, 2).acc == acc, || format!("case {case}: acc"));
        match (surface_distances(&p, &g, N, N), brute_distances(&p, &g)) {
            (None, None) => {}
            (Some(s), Some((hd, hd95, asd))) => {
                worst = worst
                    .max((s.hd - hd).abs())
                    .max((s.hd95 - hd95).abs())
                    .max((s.asd - asd).abs());
            }
            (a, b) => panic!("case {case}: distance validity differs {a:?} vs {b:?}"),
        }
    }
    ensure(worst < 1e-9, || format!("surface distances off by {worst:.3e}"));

    let strip = |inter: usize, only_p: usize, only_g: usize| {
        let p: Vec<bool> = (0..20).map(|i| i < inter + only_p).collect();
        let g: Vec<bool> = (0..20)
            .map(|i| i < inter || (i >= inter + only_p && i < inter + only_p + only_g))
            .collect();
        (p, g)
    };
    let mut cases = 0;
    for inter in 0..6 {
        for only_p in 0..6 {
            for only_g in 0..6 {
                let (p, g) = strip(inter, only_p, only_g);
                let (np, ng, union) = (inter + only_p, inter + only_g, inter + only_p + only_g);
                let expect = match (np > 0, ng > 0) {
                    (false, false) => Detection::Tn,
                    (true, false) => Detection::Fp,
                    (false, true) => Detection::Fn,
                    (true, true) if 4 * inter > union => Detection::Tp,
                    (true, true) => Detection::Fn,
                };
                ensure(detect_classify(&p, &g, 0.25) == expect, || {
                    format!("detection {inter}/{only_p}/{only_g}")
                });
                cases += 1;
            }
        }
    }
    let (p, g) = strip(1, 3, 0);
    ensure(
        mask_overlap(&p, &g).1 == 0.25 && detect_classify(&p, &g, 0.25) == Detection::Fn,
        || "IoU exactly 0.25 must be FN".into(),
    );
    format!("200 random pairs (distance error {worst:.1e}), {cases} detection cases, IoU=0.25 -> FN")
}

fn learning_dynamics() -> Outcome {
    let start = Instant::now();
    let samples = generate(&PhantomSpec {
        count: 8,
        size: 64,
        seed: 1,
        ..Default::default()
    });
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 4,
        peak_lr: 1e-4,
        augment: false,
        ..Default::default()
    };
    let base = model_for_mode(&ModelConfig::default(), AblationMode::E);
    let mut model = SegModel::new(base.clone(), cfg.seed).unwrap();
    let mut frozen_cfg = base;
    frozen_cfg.encoder.adapter_enabled = false;
    let baseline = SegModel::new(frozen_cfg, cfg.seed).unwrap();

    let out = train(&mut model, &samples, &samples, &cfg, None).unwrap();
    ensure(out.step_losses.len() == 200, || {
        format!("{} steps", out.step_losses.len())
    });
    let first: Vec<&Sample> = out.step_batches[0]
        .iter()
        .map(|id| samples.iter().find(|s| &s.id == id).unwrap())
        .collect();
    let base_loss = batch_loss(&baseline, &first).unwrap();
    let gap = (out.step_losses[0] - base_loss).abs();
    ensure(gap < 1e-6, || {
        format!("step-0 loss {} vs frozen baseline {base_loss}", out.step_losses[0])
    });

    let refs: Vec<&Sample> = samples.iter().collect();
    let dsc = evaluate(&model, &refs, 4, 0.25).unwrap().report.dsc;
    ensure(dsc >= 0.90, || format!("train DSC {dsc:.4} after 200 steps"));
    format!(
        "train DSC {dsc:.4} after 200 steps; step-0 loss {:.6} equals frozen baseline (gap {gap:.1e}); {:.0} s",
        out.step_losses[0],
        start.elapsed().as_secs_f64()
    )
}

fn schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let total = 1000;
    let w = warmup_steps(total, &cfg);
    let mid = w + (total - w) / 2;
    ensure(w == 50, || format!("warmup {w}"));
    ensure(lr_at(0, total, &cfg) == 0.0, || "lr_at(0) != 0".into());
    ensure(lr_at(w, total, &cfg) == 1e-4, || "lr_at(W) != 1e-4".into());
    ensure((lr_at(mid, total, &cfg) - 5e-5).abs() < 1e-12, || {
        "cosine midpoint".into()
    });
    // linear extrapolation of the warmup ramp to W against the cosine branch at W
    let left = 2.0 * lr_at(w - 1, total, &cfg) - lr_at(w - 2, total, &cfg);
    let jump = (left - lr_at(w, total, &cfg)).abs();
    ensure(jump < 1e-12, || format!("discontinuity {jump:.3e} at the joint"));
    format!("W={w}, lr(W)=1e-4, lr({mid})=5e-5, joint gap {jump:.1e}")
}

fn fusion_permutation() -> Outcome {
    let mut r = rng(3);
    for case in 0..100 {
        let (d, d_dino) = (r.random_range(1..=6), r.random_range(1..=5));
        let store = proj_store(random_tensor(&[d_dino, d], &mut r), random_tensor(&[d], &mut r));
        let mut tape = Tape::new();
        let pyramid = random_pyramid(&mut tape, d, &mut r);
        let b = tape.shape(pyramid.levels[0])[0];
        let (ah, aw) = (r.random_range(1..=4), r.random_range(1..=4));
        let aux = tape.constant(random_tensor(&[b, ah, aw, d_dino], &mut r)).unwrap();
        let mode = |m| FusionConfig { mode: m, group: 1 };
        let cat = fuse_pyramid(&mut tape, &store, &mode(FusionMode::Concat), &pyramid, Some(aux)).unwrap();
        let mix = fuse_pyramid(&mut tape, &store, &mode(FusionMode::Interleave), &pyramid, Some(aux)).unwrap();
        let perm: Vec<usize> = (0..2 * d).map(|j| if j % 2 == 0 { j / 2 } else { d + j / 2 }).collect();
        for (&c, &m) in cat.levels.iter().zip(&mix.levels) {
            ensure(tape.shape(c) == tape.shape(m), || format!("case {case}: shapes differ"));
            for (cp, mp) in tape
                .value(c)
                .data()
                .chunks(2 * d)
                .zip(tape.value(m).data().chunks(2 * d))
            {
                ensure(perm.iter().enumerate().all(|(j, &src)| mp[j] == cp[src]), || {
                    format!("case {case}: not a channel permutation")
                });
            }
        }
    }
    let base = ModelConfig::default();
    let count = |mode| {
        let m = SegModel::<f32>::new(model_for_mode(&base, mode), 0).unwrap();
        (m.params.count_elements(false), m.params.count_elements(true))
    };
    let (dc, ec) = (count(AblationMode::D), count(AblationMode::E));
    ensure(dc == ec, || format!("D {dc:?} vs E {ec:?}"));
    format!(
        "100 random pyramids; D and E both have {} parameters ({} trainable)",
        dc.0, dc.1
    )
}

fn small_run(dir: &std::path::Path) -> RunConfig {
    RunConfig {
        train: TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 9,
            ..Default::default()
        },
        data: DataSource::Phantom(PhantomSpec {
            count: 12,
            size: 32,
            seed: 4,
            ..Default::default()
        }),
        output_dir: dir.join("run"),
        ..Default::default()
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for attempt in ["a", "b"] {
        let dir = tmp.path().join(attempt);
        let cfg = small_run(&dir);
        run_train(&cfg).unwrap();
        run_eval(&cfg, &cfg.output_dir, &dir.join("eval")).unwrap();
        files.push((
            fs::read(cfg.output_dir.join("history.csv")).unwrap(),
            fs::read(dir.join("eval").join("metrics.json")).unwrap(),
        ));
    }
    ensure(files[0].0 == files[1].0, || "history.csv differs".into());
    ensure(files[0].1 == files[1].1, || "metrics.json differs".into());
    format!(
        "history.csv ({} B) and metrics.json ({} B) bitwise identical across two runs",
        files[0].0.len(),
        files[0].1.len()
    )
}

fn bench_sanity() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    run_bench(&RunConfig::default(), "acceptance", BENCH_TIMED_ITERS, &out).unwrap();
    let report: BenchReport = serde_json::from_str(&fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    ensure(report.timed_iters >= 100, || {
        format!("{} timed iterations", report.timed_iters)
    });
    ensure(report.warmup_iters == 20, || {
        format!("{} warmup iterations", report.warmup_iters)
    });
    ensure(report.input_shape == [1, 224, 224, 1], || {
        format!("input {:?}", report.input_shape)
    });
    let t = &report.timing;
    ensure(t.fps == round3(1000.0 / t.mean_ms), || {
        format!("fps {} vs mean {} ms", t.fps, t.mean_ms)
    });
    format!(
        "{} timed iterations, mean {:.2} ms, fps {}",
        report.timed_iters, t.mean_ms, t.fps
    )
}

fn pca_checks() -> Outcome {
    let mut r = rng(17);
    let (mut ortho, mut dev) = (0.0f64, 0.0f64);
    for case in 0..30 {
        let d = r.random_range(3..=8);
        let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
        let mut f = random_tensor(&[1, h, w, d], &mut r);
        for (i, v) in f.data_mut().iter_mut().enumerate() {
            *v *= 1.0 + (i % d) as f64;
        }
        let s = &pca_rgb(&f).unwrap().samples[0];
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = s.components[i].iter().zip(&s.components[j]).map(|(a, b)| a * b).sum();
                ortho = ortho.max((dot - (i == j) as u8 as f64).abs());
            }
        }
        let oracle = dense_eigen(f.data(), h * w, d);
        for k in 0..3 {
            ensure(same_up_to_sign(&s.components[k], &oracle[k].1, 1e-4), || {
                format!("case {case}: component {k} differs from the dense eigensolver")
            });
            let (a, b) = (&s.components[k], &oracle[k].1);
            let plus = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let minus = a.iter().zip(b).map(|(x, y)| (x + y).abs()).fold(0.0, f64::max);
            dev = dev.max(plus.min(minus));
        }
    }
    ensure(ortho < 1e-6, || format!("orthonormality error {ortho:.3e}"));

    let v = [0.3, -1.2, 0.5, 2.0];
    let scalars: Vec<f64> = (0..12).map(|_| r.random_range(-2.0..2.0)).collect();
    let f = Tensor::new(
        vec![1, 3, 4, 4],
        scalars.iter().flat_map(|s| v.map(|x| s * x)).collect(),
    )
    .unwrap();
    let explained = pca_rgb(&f).unwrap().samples[0].explained[0];
    ensure((explained - 1.0).abs() < 1e-9, || {
        format!("rank-1 PC1 explains {explained}")
    });
    format!("orthonormality error {ortho:.1e}, eigensolver deviation {dev:.1e}, rank-1 PC1 explains {explained}")
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("autodiff gradient checks", autodiff_suite),
        ("adapter fidelity and identity init", adapter_fidelity),
        ("freeze contract", freeze_contract),
        ("shape pipeline", shape_pipeline),
        ("metric oracles", metric_oracles),
        ("learning dynamics", learning_dynamics),
        ("schedule", schedule),
        ("fusion permutation", fusion_permutation),
        ("determinism", determinism),
        ("bench sanity", bench_sanity),
        ("pca", pca_checks),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(payload) => {
                failed += 1;
                let msg = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("criterion {:>2} {name}: FAIL ({msg})", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
