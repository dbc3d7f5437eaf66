use ndarray::{arr1, ArrayD, IxDyn};

use super::*;
use crate::datasets::synthetic::{make_synthetic_dataset, SynthConfig};
use crate::dynamics::Scheme;
use crate::models::{ResNetConfig, VitConfig};

fn data(samples: usize, seed: u64) -> Dataset {
    make_synthetic_dataset(&SynthConfig {
        height: 8,
        width: 16,
        channels: 2,
        lead: 2,
        samples,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_bundle(seed: u64) -> ModelBundle {
    let mut cfg = BundleConfig::new(2, 8, 16);
    cfg.velocity.backbone = BackboneConfig::Local(ResNetConfig {
        ladder: vec![(1, 4)],
        dropout: 0.0,
        ..ResNetConfig::default()
    });
    cfg.advection.backbone = BackboneConfig::Attention(VitConfig {
        hidden_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        decoder_depth: 1,
        ..VitConfig::desk()
    });
    cfg.source = SourceModelConfig::TimeAwareLocal(ResNetConfig {
        ladder: vec![(1, 4)],
        dropout: 0.0,
        ..ResNetConfig::default()
    });
    cfg.seed = seed;
    ModelBundle::new(cfg).unwrap()
}

fn solver() -> SolverConfig {
    SolverConfig {
        scheme: Scheme::Euler,
        substeps: 1,
        ..SolverConfig::default()
    }
}

fn setup<'a>(train: &'a Dataset, val: Option<&'a Dataset>, optim: OptimConfig) -> TrainSetup<'a> {
    TrainSetup {
        train,
        val,
        solver: solver(),
        optim,
        loss: LossConfig::default(),
        run_dir: None,
        resume: false,
        stop_after: None,
    }
}

fn quick_optim() -> OptimConfig {
    OptimConfig {
        epochs: 2,
        batch_size: 2,
        warmup_steps: 2,
        seed: 11,
        ..OptimConfig::default()
    }
}

fn params_equal(a: &ModelBundle, b: &ModelBundle) -> bool {
    a.params.iter().zip(b.params.iter()).all(|(x, y)| {
        x.value.iter().zip(y.value.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
    })
}

#[test]
fn weighted_loss_matches_hand_value() {
    let pred = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 2, 1]), vec![1.0, 2.0]).unwrap();
    let target = ArrayD::zeros(IxDyn(&[1, 1, 1, 2, 1]));
    let alpha = arr1(&[0.5, 1.5]);
    let l = multi_task_loss(&pred, &target, &alpha).unwrap();
    assert!((l - 3.25).abs() < 1e-15);
}

#[test]
fn loss_matches_explicit_loop() {
    let shape = [2, 3, 2, 4, 5];
    let n: usize = shape.iter().product();
    let pred = ArrayD::from_shape_fn(IxDyn(&shape), |ix| ((ix[0] * 7 + ix[1] * 5 + ix[2] * 3 + ix[3] * 11 + ix[4]) as f64 * 0.37).sin());
    let target = ArrayD::from_shape_fn(IxDyn(&shape), |ix| ((ix[4] * 13 + ix[3]) as f64 * 0.21).cos());
    let alpha = arr1(&[0.6, 1.2, 1.4, 0.8]);
    let mut total = 0.0;
    for b in 0..2 {
        for s in 0..3 {
            for k in 0..2 {
                for h in 0..4 {
                    for w in 0..5 {
                        let d = pred[[b, s, k, h, w]] - target[[b, s, k, h, w]];
                        total += alpha[h] * d * d;
                    }
                }
            }
        }
    }
    let got = multi_task_loss(&pred, &target, &alpha).unwrap();
    assert!((got - total / n as f64).abs() < 1e-12);

    // the tape version over a channel subset equals the array loss on that subset
    let mut tape = Tape::new();
    let vars = Vec::new();
    let mut f = Fwd::new(&mut tape, &vars, false, 0);
    let p = f.tape.constant(pred.clone());
    let sub = loss_var(&mut f, p, &target, &alpha, &[1]).unwrap();
    let want = multi_task_loss(&pred.select(Axis(2), &[1]), &target.select(Axis(2), &[1]), &alpha).unwrap();
    assert!((f.tape.value(sub)[[]] - want).abs() < 1e-12);
    let all = loss_var(&mut f, p, &target, &alpha, &[0, 1]).unwrap();
    assert!((f.tape.value(all)[[]] - got).abs() < 1e-12);
}

#[test]
fn loss_rejects_mismatched_shapes() {
    let a = ArrayD::zeros(IxDyn(&[1, 1, 1, 2, 2]));
    let b = ArrayD::zeros(IxDyn(&[1, 1, 1, 2, 3]));
    assert!(matches!(multi_task_loss(&a, &b, &arr1(&[1.0, 1.0])), Err(Error::Loss(_))));
    assert!(matches!(multi_task_loss(&a, &a, &arr1(&[1.0, 1.0, 1.0])), Err(Error::Loss(_))));
}

#[test]
fn schedule_endpoints_and_shape() {
    let s = Schedule { warmup: 10, total: 110 };
    let peak = 5e-4;
    assert_eq!(s.rate(0, peak), SCHEDULE_START);
    assert!((s.rate(10, peak) - peak).abs() < 1e-18);
    assert!((s.rate(110, peak) - SCHEDULE_FLOOR).abs() < 1e-18);
    assert!((s.rate(500, peak) - SCHEDULE_FLOOR).abs() < 1e-18);
    // halfway through the decay sits halfway between peak and floor
    assert!((s.rate(60, peak) - 0.5 * (peak + SCHEDULE_FLOOR)).abs() < 1e-15);
    for i in 0..10 {
        assert!(s.rate(i + 1, peak) > s.rate(i, peak));
    }
    for i in 10..110 {
        assert!(s.rate(i + 1, peak) < s.rate(i, peak));
    }
    // continuous across the warmup boundary
    let jump = (s.rate(10, peak) - s.rate(9, peak)).abs().max((s.rate(11, peak) - s.rate(10, peak)).abs());
    assert!(jump <= peak / 10.0 + 1e-15);
    assert_eq!(s.rate(5, 0.0), 0.0);

    let optim = OptimConfig::default();
    let (base, adv) = lr_schedule(&s, &optim, 10);
    assert!((base - 5e-4).abs() < 1e-18 && (adv - 1e-4).abs() < 1e-18);
}

#[test]
fn optimizer_config_is_validated() {
    let bad = [
        OptimConfig { lr: -1.0, ..OptimConfig::default() },
        OptimConfig { batch_size: 0, ..OptimConfig::default() },
        OptimConfig { beta2: 1.0, ..OptimConfig::default() },
        OptimConfig { eps: 0.0, ..OptimConfig::default() },
        OptimConfig { grad_clip: Some(0.0), ..OptimConfig::default() },
        OptimConfig { advection_lr: f64::NAN, ..OptimConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config { .. })), "{c:?}");
    }
    OptimConfig::default().validate().unwrap();
}

#[test]
fn first_adamw_step_matches_closed_form() {
    // After one step with bias correction, m̂ = g and v̂ = g², so the update is
    // lr·(g/(|g| + eps) + wd·x).
    let mut bundle = small_bundle(3);
    let before: Vec<ArrayD<f64>> = bundle.params.iter().map(|p| p.value.clone()).collect();
    let grads: Vec<Option<Tensor>> = bundle
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| Some(p.value.mapv(|_| if i % 2 == 0 { 0.5 } else { -2.0 })))
        .collect();
    let cfg = OptimConfig {
        weight_decay: 0.1,
        ..OptimConfig::default()
    };
    let rates = (1e-3, 2e-4);
    let mut adam = AdamW::new(&bundle);
    adam.update(&mut bundle, &grads, rates, &cfg);
    let mut saw_frozen_decay = false;
    for (i, p) in bundle.params.iter().enumerate() {
        let lr = if p.component == Component::Advection { rates.1 } else { rates.0 };
        let wd = if p.decay { 0.1 } else { 0.0 };
        saw_frozen_decay |= !p.decay;
        let g: f64 = if i % 2 == 0 { 0.5 } else { -2.0 };
        for (x1, x0) in p.value.iter().zip(before[i].iter()) {
            let want = x0 - lr * (g / (g.abs() + cfg.eps) + wd * x0);
            assert!((x1 - want).abs() < 1e-15, "{}: {x1} vs {want}", p.name);
        }
    }
    assert!(saw_frozen_decay, "expected positional embeddings exempt from decay");
}

#[test]
fn positional_embeddings_do_not_decay() {
    // zero gradients isolate the decay term
    let mut bundle = small_bundle(4);
    let before: Vec<ArrayD<f64>> = bundle.params.iter().map(|p| p.value.clone()).collect();
    let grads: Vec<Option<Tensor>> = bundle.params.iter().map(|p| Some(ArrayD::zeros(p.value.raw_dim()))).collect();
    let cfg = OptimConfig {
        weight_decay: 0.5,
        ..OptimConfig::default()
    };
    AdamW::new(&bundle).update(&mut bundle, &grads, (0.1, 0.1), &cfg);
    for (p, b) in bundle.params.iter().zip(&before) {
        if p.decay {
            let want = b * 0.95;
            assert!(p.value.iter().zip(want.iter()).all(|(x, y)| (x - y).abs() < 1e-15), "{}", p.name);
        } else {
            assert_eq!(&p.value, b, "{} decayed", p.name);
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let ds = data(2, 1);
    let bundle = small_bundle(5);
    let pipe = Pipeline::new(&ds.grid, solver()).unwrap();
    let batch = Batch::from_dataset(&ds, &[0, 1]).unwrap();
    let channels = [0, 1];
    let (_, grads) = loss_and_gradients(&bundle, &pipe, &batch, &channels, None).unwrap();
    let mut probe = ModelBundle::from_container(&bundle.to_container().unwrap()).unwrap();
    let mut checked = 0;
    for component in [Component::Velocity, Component::Advection, Component::Source] {
        let (i, p) = bundle
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.component == component)
            .max_by_key(|(_, p)| p.value.len())
            .unwrap();
        for j in [0, p.value.len() / 2, p.value.len() - 1] {
            let h = 1e-5;
            let base = p.value.as_slice().unwrap()[j];
            let mut eval = |x: f64| {
                probe.params.iter_mut().nth(i).unwrap().value.as_slice_mut().unwrap()[j] = x;
                loss_value(&probe, &pipe, &batch, &channels).unwrap()
            };
            let fd = (eval(base + h) - eval(base - h)) / (2.0 * h);
            eval(base);
            let an = grads[i].as_ref().unwrap().as_slice().unwrap()[j];
            let scale = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / scale < 1e-4, "{} [{j}]: fd {fd} vs tape {an}", p.name);
            checked += 1;
        }
    }
    assert_eq!(checked, 9);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ds = data(4, 2);
    let mut bundle = small_bundle(6);
    let reference = small_bundle(6);
    let optim = OptimConfig {
        lr: 0.0,
        advection_lr: 0.0,
        weight_decay: 0.1,
        ..quick_optim()
    };
    let report = train(&mut bundle, &setup(&ds, None, optim)).unwrap();
    assert_eq!(report.outcome, Outcome::Stable);
    assert_eq!(report.steps, 4);
    assert!(report.history.iter().all(|r| r.lr == 0.0 && r.advection_lr == 0.0));
    assert!(params_equal(&bundle, &reference));
}

#[test]
fn advection_rate_is_independent() {
    let ds = data(2, 2);
    let mut bundle = small_bundle(6);
    let reference = small_bundle(6);
    let optim = OptimConfig {
        advection_lr: 0.0,
        epochs: 1,
        ..quick_optim()
    };
    train(&mut bundle, &setup(&ds, None, optim)).unwrap();
    for (p, q) in bundle.params.iter().zip(reference.params.iter()) {
        if p.component == Component::Advection {
            assert_eq!(p.value, q.value, "{} moved", p.name);
        }
    }
    assert!(!params_equal(&bundle, &reference));
}

#[test]
fn training_is_bitwise_deterministic() {
    let ds = data(4, 3);
    let val = data(2, 4);
    let run = || {
        let mut b = small_bundle(8);
        let r = train(&mut b, &setup(&ds, Some(&val), quick_optim())).unwrap();
        (b, r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert!(params_equal(&a, &b));
    assert_eq!(ra.history, rb.history);
    assert_eq!(ra.validation.len(), 2);
    assert_eq!(ra.validation, rb.validation);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = data(4, 3);
    let val = data(2, 4);
    let dir = tempfile::tempdir().unwrap();

    let mut full = small_bundle(9);
    let mut s = setup(&ds, Some(&val), quick_optim());
    s.run_dir = Some(dir.path().join("full"));
    let full_report = train(&mut full, &s).unwrap();

    let mut part = small_bundle(9);
    s.run_dir = Some(dir.path().join("split"));
    s.stop_after = Some(1);
    let first = train(&mut part, &s).unwrap();
    assert_eq!(first.steps, 2);

    let mut resumed = small_bundle(123);
    s.stop_after = None;
    s.resume = true;
    let second = train(&mut resumed, &s).unwrap();
    assert_eq!(second.steps, 4);
    assert!(params_equal(&full, &resumed));
    assert_eq!(second.best_validation, full_report.best_validation);

    let hist: Vec<StepRecord> = read_jsonl(&dir.path().join("split").join(HISTORY_FILE)).unwrap();
    assert_eq!(hist, full_report.history);
    let best = load_checkpoint(&dir.path().join("full").join(BEST_CHECKPOINT)).unwrap();
    let pipe = Pipeline::new(&val.grid, solver()).unwrap();
    let best_loss = dataset_loss(&best, &pipe, &val, &[0, 1], 2).unwrap();
    assert!((best_loss - full_report.best_validation.unwrap()).abs() < 1e-12);
}

#[test]
fn non_finite_state_is_reported_as_divergence() {
    let ds = data(4, 5);
    let mut bundle = small_bundle(10);
    let poisoned = bundle
        .params
        .iter_mut()
        .find(|p| p.component == Component::Velocity)
        .unwrap();
    poisoned.value.fill(f64::NAN);
    let dir = tempfile::tempdir().unwrap();
    let mut s = setup(&ds, None, quick_optim());
    s.run_dir = Some(dir.path().to_path_buf());
    let report = train(&mut bundle, &s).unwrap();
    assert_eq!(report.outcome, Outcome::Diverged { epoch: 1, step: 0 });
    assert_eq!(report.history.len(), 1);
    assert!(report.history[0].nan);
    let text = fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
    assert!(text.contains("\"nan\":true"));
}

#[test]
fn empty_training_set_is_rejected() {
    let mut ds = data(2, 1);
    ds.samples.clear();
    let mut bundle = small_bundle(1);
    assert!(matches!(train(&mut bundle, &setup(&ds, None, quick_optim())), Err(Error::Data(_))));
}

fn record(outcome: &str, loss: Option<f64>) -> StabilityRecord {
    StabilityRecord {
        velocity: "local".into(),
        advection: "attention".into(),
        source: "time_aware_local".into(),
        lr: 5e-4,
        advection_lr: 1e-4,
        outcome: outcome.into(),
        nan_epoch: (outcome == "nan").then_some(3),
        final_validation_loss: loss,
        rank: None,
    }
}

#[test]
fn ranking_orders_stable_runs_by_validation_loss() {
    let mut recs = vec![
        record("stable", Some(0.3)),
        record("nan", None),
        record("stable", Some(0.1)),
        record("stable", Some(0.2)),
    ];
    rank_records(&mut recs);
    let ranks: Vec<Option<usize>> = recs.iter().map(|r| r.rank).collect();
    assert_eq!(ranks, vec![Some(3), None, Some(1), Some(2)]);

    // re-sorting by rank reproduces increasing loss
    let mut stable: Vec<&StabilityRecord> = recs.iter().filter(|r| r.rank.is_some()).collect();
    stable.sort_by_key(|r| r.rank);
    assert!(stable.windows(2).all(|w| w[0].final_validation_loss <= w[1].final_validation_loss));
}

#[test]
fn stability_record_schema() {
    let v = serde_json::to_value(record("nan", None)).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(
        keys,
        ["advection", "advection_lr", "final_validation_loss", "lr", "nan_epoch", "outcome", "rank", "source", "velocity"]
    );
    let back: StabilityRecord = serde_json::from_value(v).unwrap();
    assert_eq!(back, record("nan", None));
}

#[test]
fn stability_matrix_covers_every_combination() {
    let ds = data(2, 6);
    let base = small_bundle(0).config.clone();
    let local = base.velocity.backbone.clone();
    let triples = vec![
        ArchTriple {
            velocity: local.clone(),
            advection: base.advection.backbone.clone(),
            source: base.source.clone(),
        },
        ArchTriple {
            velocity: local.clone(),
            advection: local,
            source: SourceModelConfig::None,
        },
    ];
    let optim = OptimConfig { epochs: 1, ..quick_optim() };
    let recs = stability_matrix(&base, &triples, &[(5e-4, 1e-4), (1e-3, 1e-3)], &setup(&ds, Some(&ds), optim)).unwrap();
    assert_eq!(recs.len(), 4);
    assert_eq!(recs[2].advection, "local");
    assert_eq!(recs[2].source, "none");
    assert!(recs.iter().all(|r| r.outcome == "stable" && r.final_validation_loss.is_some()));
    let mut ranks: Vec<usize> = recs.iter().filter_map(|r| r.rank).collect();
    ranks.sort();
    assert_eq!(ranks, vec![1, 2, 3, 4]);
}
