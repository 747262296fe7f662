mod common;

use s4mt::data::{generate, LengthLaw, ParallelCorpus, SyntheticTaskSpec, TaskKind, RESERVED};
use s4mt::model::{build_model, DecoderKind, EncoderKind, ModelConfig};
use s4mt::train::{
    average_checkpoints, clip_global_norm, epoch_checkpoints, lr_at, teacher_forced_accuracy, AdamConfig, AdamState,
    Checkpoint, LrSchedule, Progress, Trainer, TrainerConfig, MAGIC, VERSION,
};
use s4mt::{Error, Tensor};

fn corpus(n: usize, seed: u64) -> ParallelCorpus {
    generate(&SyntheticTaskSpec::new(TaskKind::Copy, 8, LengthLaw::uniform(1, 6), seed), n).unwrap()
}

fn tiny() -> ModelConfig {
    ModelConfig::new(EncoderKind::None, DecoderKind::S4, 8 + RESERVED)
        .layers(0, 1)
        .blocks(1)
        .width(16, 32, 2)
        .state(4)
}

fn trainer_cfg() -> TrainerConfig {
    TrainerConfig {
        epochs: 3,
        batch_tokens: 128,
        lr: 0.01,
        warmup_steps: 5,
        seed: 7,
        ..Default::default()
    }
}

#[test]
fn schedule_landmarks() {
    let s = LrSchedule {
        base_lr: 0.005,
        warmup_steps: 4000,
    };
    assert!((lr_at(&s, 4000).unwrap() - 0.005).abs() < 1e-12);
    assert!((lr_at(&s, 16000).unwrap() - 0.0025).abs() < 1e-12);
    assert!((lr_at(&s, 2000).unwrap() - 0.0025).abs() < 1e-12);
    assert!((lr_at(&s, 3999).unwrap() - lr_at(&s, 4001).unwrap()).abs() < 1e-6);
    assert!(matches!(lr_at(&s, 0), Err(Error::Argument(_))));
    let mut prev = lr_at(&s, 4000).unwrap();
    for step in (4001..20000).step_by(97) {
        let lr = lr_at(&s, step).unwrap();
        assert!(lr < prev);
        prev = lr;
    }
}

#[test]
fn adam_first_step_on_quadratic() {
    let mut w = vec![Tensor::new(&[1], vec![1.0]).unwrap()];
    let mut adam = AdamState::new(&w, AdamConfig::default());
    let g = vec![w[0].clone()];
    adam.update(&["w".into()], &mut w, &g, 0.1).unwrap();
    assert!((w[0].data()[0] - 0.9).abs() < 1e-6, "{}", w[0].data()[0]);
}

#[test]
fn adam_zero_gradient_and_nan() {
    let mut w = vec![Tensor::new(&[2], vec![0.5, -1.5]).unwrap()];
    let before = w.clone();
    let mut adam = AdamState::new(&w, AdamConfig::default());
    adam.update(&["w".into()], &mut w, &[Tensor::zeros(&[2])], 0.1).unwrap();
    assert_eq!(w, before);
    let bad = Tensor::new(&[2], vec![f32::NAN, 0.0]).unwrap();
    match adam.update(&["layer.w".into()], &mut w, &[bad], 0.1) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("layer.w")),
        other => panic!("{other:?}"),
    }
    assert_eq!(w, before);
}

#[test]
fn clipping_bounds_global_norm() {
    let mut g = vec![Tensor::new(&[2], vec![3.0, 0.0]).unwrap(), Tensor::new(&[1], vec![4.0]).unwrap()];
    let norm = clip_global_norm(&mut g, 1.0);
    assert!((norm - 5.0).abs() < 1e-9);
    let after: f64 = g.iter().flat_map(|t| t.data().iter()).map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    assert!((after - 1.0).abs() < 1e-6);
    let mut small = vec![Tensor::new(&[1], vec![0.5]).unwrap()];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].data(), &[0.5]);
}

#[test]
fn checkpoint_layout_and_round_trip() {
    let model = build_model(&tiny(), 3).unwrap();
    let ckpt = Checkpoint::new(&model, None, Progress::default(), None);
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    assert_eq!(header["model"]["d_model"], 16);
    // first record: u16 name length, name, u8 rank, u64 dims, payload
    let rec = &bytes[16 + hlen..];
    let nlen = u16::from_le_bytes(rec[..2].try_into().unwrap()) as usize;
    assert_eq!(&rec[2..2 + nlen], model.params().names()[0].as_bytes());
    let rank = rec[2 + nlen] as usize;
    assert_eq!(rank, model.params().tensors()[0].rank());

    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let restored = back.model().unwrap();
    for (a, b) in model.params().tensors().iter().zip(restored.params().tensors()) {
        let (a, b): (Vec<u32>, Vec<u32>) =
            (a.data().iter().map(|v| v.to_bits()).collect(), b.data().iter().map(|v| v.to_bits()).collect());
        assert_eq!(a, b);
    }
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let model = build_model(&tiny(), 3).unwrap();
    let bytes = Checkpoint::new(&model, None, Progress::default(), None).to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[4] = 99;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

fn with_params(model: &s4mt::model::Model, value: f32) -> Checkpoint {
    let mut m = model.clone();
    for t in m.params_mut().tensors_mut() {
        t.data_mut().fill(value);
    }
    Checkpoint::new(&m, None, Progress::default(), None)
}

#[test]
fn averaging_oracles() {
    let model = build_model(&tiny(), 4).unwrap();
    let one = Checkpoint::new(&model, None, Progress::default(), None);
    let avg = average_checkpoints(&[one.clone(), one.clone(), one.clone()]).unwrap();
    assert_eq!(avg.params, one.params);

    let avg = average_checkpoints(&[with_params(&model, 0.0), with_params(&model, 2.0)]).unwrap();
    assert!(avg.params.tensors().iter().all(|t| t.data().iter().all(|&v| v == 1.0)));

    let draws: Vec<Checkpoint> = (10..13)
        .map(|s| {
            let mut ck = Checkpoint::new(&build_model(&tiny(), s).unwrap(), None, Progress::default(), None);
            ck.header.progress.step = s;
            ck
        })
        .collect();
    let avg = average_checkpoints(&draws).unwrap();
    assert_eq!(avg.header.progress.step, 12);
    assert!(avg.moments.is_none());
    for (i, t) in avg.params.tensors().iter().enumerate() {
        for (j, &v) in t.data().iter().enumerate() {
            let want = draws.iter().map(|c| c.params.tensors()[i].data()[j] as f64).sum::<f64>() / 3.0;
            assert_eq!(v, want as f32);
        }
    }
}

#[test]
fn averaging_names_the_differing_field() {
    let a = Checkpoint::new(&build_model(&tiny(), 1).unwrap(), None, Progress::default(), None);
    let b = Checkpoint::new(&build_model(&tiny().state(6), 1).unwrap(), None, Progress::default(), None);
    match average_checkpoints(&[a, b]) {
        Err(Error::Incompatible { field }) => assert_eq!(field, "state_dim"),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let data = corpus(300, 1);
    let run = || {
        let mut t = Trainer::new(build_model(&tiny(), 2).unwrap(), &data, trainer_cfg()).unwrap();
        let mut losses = Vec::new();
        t.run_with(
            |m| {
                losses.push(m.loss);
                Ok(())
            },
            |_| Ok(()),
        )
        .unwrap();
        (t, losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(a.model.params(), b.model.params());
    let per_epoch = a.batches_per_epoch();
    let first_epoch_end = la[per_epoch - 1];
    assert!(first_epoch_end < (13.0f32).ln(), "{first_epoch_end}");
    let (_, loss1) = teacher_forced_accuracy(&a.model, &data, 256).unwrap();
    let (_, loss2) = teacher_forced_accuracy(&a.model, &data, 256).unwrap();
    assert_eq!(loss1, loss2);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = corpus(200, 2);
    let mut cfg = trainer_cfg();
    cfg.max_steps = Some(17);
    let mut full = Trainer::new(build_model(&tiny(), 5).unwrap(), &data, cfg.clone()).unwrap();
    full.run_with(|_| Ok(()), |_| Ok(())).unwrap();

    let mut short = cfg.clone();
    short.max_steps = Some(6);
    let mut first = Trainer::new(build_model(&tiny(), 5).unwrap(), &data, short).unwrap();
    first.run_with(|_| Ok(()), |_| Ok(())).unwrap();
    assert_eq!(first.progress.step, 6);
    let bytes = first.checkpoint().to_bytes().unwrap();
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let mut second = Trainer::resume(&ckpt, &data, cfg.clone()).unwrap();
    second.run_with(|_| Ok(()), |_| Ok(())).unwrap();

    assert_eq!(second.progress, full.progress);
    assert_eq!(
        second.checkpoint().to_bytes().unwrap(),
        full.checkpoint().to_bytes().unwrap()
    );

    let mut other_seed = cfg;
    other_seed.seed += 1;
    assert!(matches!(Trainer::resume(&ckpt, &data, other_seed), Err(Error::Incompatible { .. })));
}

#[test]
fn run_writes_metrics_and_epoch_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(100, 3);
    let mut t = Trainer::new(build_model(&tiny(), 1).unwrap(), &data, trainer_cfg()).unwrap();
    let summary = t.run(dir.path()).unwrap();
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count() as u64, summary.steps);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["step", "lr", "mt_loss", "ae_loss", "tokens_per_sec"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(epoch_checkpoints(dir.path()).unwrap().len(), 3);
    assert!(dir.path().join("last.ckpt").exists());
}

#[test]
fn zero_epochs_and_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = trainer_cfg();
    cfg.epochs = 0;
    let mut t = Trainer::new(build_model(&tiny(), 1).unwrap(), &corpus(20, 1), cfg).unwrap();
    let summary = t.run(dir.path()).unwrap();
    assert_eq!(summary.steps, 0);
    assert!(epoch_checkpoints(dir.path()).unwrap().is_empty());
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap(), "");

    let empty = ParallelCorpus::default();
    assert!(matches!(
        Trainer::new(build_model(&tiny(), 1).unwrap(), &empty, trainer_cfg()),
        Err(Error::Config(_))
    ));
}

#[test]
fn divergence_is_a_numeric_error() {
    let data = corpus(50, 4);
    let mut model = build_model(&tiny(), 1).unwrap();
    model.params_mut().tensors_mut()[0].data_mut()[0] = f32::INFINITY;
    let mut t = Trainer::new(model, &data, trainer_cfg()).unwrap();
    assert!(matches!(t.run_with(|_| Ok(()), |_| Ok(())), Err(Error::Numeric(_))));
}

#[test]
fn frozen_state_matrices_stay_put() {
    let mut cfg = tiny();
    cfg.freeze_state_matrices = true;
    let model = build_model(&cfg, 3).unwrap();
    let before = model.params().clone();
    let tc = TrainerConfig { max_steps: Some(4), ..trainer_cfg() };
    let mut t = Trainer::new(model, &corpus(30, 1), tc).unwrap();
    t.run_with(|_| Ok(()), |_| Ok(())).unwrap();
    let mut frozen = 0;
    for ((name, a), b) in before.names().iter().zip(before.tensors()).zip(t.model.params().tensors()) {
        if name.ends_with(".ssm.a") || name.ends_with(".ssm.b") {
            assert_eq!(a.data(), b.data(), "{name}");
            frozen += 1;
        } else if name.ends_with(".ssm.c") {
            assert_ne!(a.data(), b.data(), "{name}");
        }
    }
    assert_eq!(frozen, 2);
}
