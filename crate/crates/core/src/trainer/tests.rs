use super::*;
use crate::benchkit::{build_corpus, CorpusConfig};
use crate::units::UnitSequence;
use crate::vfnet::ModelConfig;
use ndarray::Array2;

fn small_model(k: usize, mode: InputMode) -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 2,
        dim: 16,
        head_dim: None,
        ff_mult: 2,
        unit_vocab: k + 2,
        unit_emb_dim: 8,
        mel_dim: 80,
        max_frames: 64,
        input_mode: mode,
        abs_pos: true,
        cond_pos: true,
    }
}

fn quick_cfg(stage: Stage) -> TrainConfig {
    let mut cfg = TrainConfig::tiny(stage);
    cfg.warmup_steps = 2;
    cfg.total_updates = 12;
    cfg.batch_frames = 40;
    cfg.log_every = 1;
    cfg.checkpoint_every = 4;
    cfg.seed = 3;
    cfg
}

fn example(id: &str, frames: usize, units: Vec<usize>) -> Example {
    let target = Array2::from_shape_fn((frames, 80), |(i, j)| ((i * 7 + j * 3) % 11) as f32 * 0.3 - 4.0);
    Example {
        id: id.into(),
        target,
        cond: ExampleCond::Units(UnitSequence { ids: units, collapsed: true }),
    }
}

fn toy_data() -> Dataset {
    let examples = (0..6)
        .map(|i| example(&format!("e{i}"), 6 + 2 * i, vec![i % 4, (i + 1) % 4, (i + 3) % 4]))
        .collect();
    Dataset::new(examples, InputMode::Units, 4).unwrap()
}

fn fresh_state(mode: InputMode) -> TrainState {
    TrainState::new(ModelParams::init(&small_model(4, mode), 1).unwrap())
}

#[test]
fn schedule_examples() {
    let pre = TrainConfig::paper_pretrain();
    assert_eq!(lr_schedule(0, &pre), 0.0);
    assert_eq!(lr_schedule(20_000, &pre), 7.5e-5);
    assert_eq!(lr_schedule(10_000, &TrainConfig::paper_finetune()), 1e-5);
    let mut cfg = TrainConfig::tiny(Stage::Pretrain);
    cfg.warmup_steps = 100;
    cfg.total_updates = 200;
    cfg.peak_lr = 1e-4;
    assert!((lr_schedule(150, &cfg) - 5e-5).abs() < 1e-18);
    assert!((lr_schedule(50, &cfg) - 5e-5).abs() < 1e-18);
    assert_eq!(lr_schedule(200, &cfg), 0.0);
    assert_eq!(lr_schedule(900, &cfg), 0.0);
}

#[test]
fn config_validation() {
    let mut cfg = TrainConfig::tiny(Stage::Pretrain);
    cfg.warmup_steps = cfg.total_updates;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = TrainConfig::tiny(Stage::Pretrain);
    cfg.peak_lr = 0.0;
    assert!(cfg.validate().is_err());
    assert!(TrainConfig::paper_pretrain().validate().is_ok());
}

#[test]
fn zero_gradients_only_decay_weights() {
    let mut state = fresh_state(InputMode::Units);
    let before = state.params().clone();
    let zeros = before.zeros_like();
    let cfg = TrainConfig::tiny(Stage::Pretrain);
    let lr = 3e-3;
    let n = 25;
    for _ in 0..n {
        adamw_update(&mut state, &zeros, lr, &cfg);
        state.step += 1;
    }
    let factor = (1.0 - lr * cfg.weight_decay).powi(n);
    let step = (1.0 - lr * cfg.weight_decay) as f32;
    for (a, b) in state.params().tensors().iter().zip(before.tensors()) {
        for (&x, &y) in a.data.iter().zip(&b.data) {
            assert_eq!(x, (0..n).fold(y, |v, _| v * step));
            assert!((x as f64 - y as f64 * factor).abs() <= 1e-5 * (y.abs() as f64), "{x} vs {y}");
        }
    }
}

#[test]
fn same_seed_same_losses() {
    let data = toy_data();
    let cfg = quick_cfg(Stage::Pretrain);
    let run = || {
        let mut state = fresh_state(InputMode::Units);
        let plan = plan_epoch(&data.examples.iter().map(|e| e.seq_len()).collect::<Vec<_>>(), 40, 3, 0);
        plan.iter()
            .map(|b| {
                let batch: Vec<_> = b.iter().map(|&i| &data.examples[i]).collect();
                train_step(&mut state, &batch, 4, &cfg).unwrap().to_bits()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn batch_padding_adds_no_loss() {
    let data = toy_data();
    let cfg = quick_cfg(Stage::Pretrain);
    let mut state = fresh_state(InputMode::Units);
    // A few updates so the output head is no longer zero.
    for i in 0..3 {
        train_step(&mut state, &[&data.examples[i]], 4, &cfg).unwrap();
    }
    let (a, b) = (&data.examples[0], &data.examples[5]);
    let count = |ex: &Example| -> f64 {
        let (_, g) = batch_gradient(&state.net, &[ex], 4, &cfg, 7).unwrap();
        drop(g);
        let p = prepare(ex, 4, &cfg, derive_seed(derive_seed(cfg.seed, 7), id_hash(&ex.id))).unwrap();
        p.mask.iter().filter(|&&m| m).count() as f64
    };
    let (na, nb) = (count(a), count(b));
    let (la, ga) = batch_gradient(&state.net, &[a], 4, &cfg, 7).unwrap();
    let (lb, gb) = batch_gradient(&state.net, &[b], 4, &cfg, 7).unwrap();
    let (lab, gab) = batch_gradient(&state.net, &[a, b], 4, &cfg, 7).unwrap();
    let expected = (la * na + lb * nb) / (na + nb);
    assert!((lab - expected).abs() <= 1e-5 * expected, "{lab} vs {expected}");
    let mut combined = ga.clone();
    combined.scale((na / (na + nb)) as f32);
    combined.add_scaled(&gb, (nb / (na + nb)) as f32);
    for (x, y) in gab.tensors().iter().zip(combined.tensors()) {
        for (&p, &q) in x.data.iter().zip(&y.data) {
            assert!((p - q).abs() <= 1e-4 * (1.0 + q.abs()), "{}: {p} vs {q}", x.name);
        }
    }
}

#[test]
fn divergence_leaves_state_alone() {
    let data = toy_data();
    let cfg = quick_cfg(Stage::Pretrain);
    let mut state = fresh_state(InputMode::Units);
    state.net.params.tensors_mut()[0].data[0] = f32::NAN;
    let before = state.step;
    let err = train_step(&mut state, &[&data.examples[0]], 4, &cfg).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }));
    assert_eq!(state.step, before);
    assert!(state.loss_history.is_empty());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data();
    let cfg = quick_cfg(Stage::Pretrain);
    let mut state = fresh_state(InputMode::Units);
    for i in 0..3 {
        train_step(&mut state, &[&data.examples[i]], 4, &cfg).unwrap();
    }
    let path = dir.path().join("c.ufckp");
    save_checkpoint(&path, &state, &cfg, 4).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..6], b"UFCKP1");
    assert_eq!(&bytes[bytes.len() - 8..], &3u64.to_le_bytes());
    let mut loaded = load_checkpoint(&path).unwrap().state;
    let batch = [&data.examples[4], &data.examples[1]];
    let a = train_step(&mut state, &batch, 4, &cfg).unwrap();
    let b = train_step(&mut loaded, &batch, 4, &cfg).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(state.params().tensors(), loaded.params().tensors());
}

#[test]
fn checkpoint_keeps_loss_history_bits() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = fresh_state(InputMode::Units);
    let mut x = 0.1f64;
    for step in 1..=200 {
        x = (x * 3.7 + 0.123_456_789).fract() * 6.0;
        state.loss_history.push((step, x));
    }
    state.loss_history.push((201, f64::MIN_POSITIVE));
    state.loss_history.push((202, 4.620_765_496_827_759e-3));
    let path = dir.path().join("h.ufckp");
    save_checkpoint(&path, &state, &quick_cfg(Stage::Pretrain), 4).unwrap();
    let loaded = load_checkpoint(&path).unwrap().state;
    let bits = |h: &[(u64, f64)]| h.iter().map(|(s, l)| (*s, l.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&loaded.loss_history), bits(&state.loss_history));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = toy_data();
    let model = small_model(4, InputMode::Units);
    let cfg = quick_cfg(Stage::Pretrain);
    let (full_dir, part_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = run_stage(&data, &model, &cfg, &RunOptions { out_dir: full_dir.path().into(), ..Default::default() }).unwrap();

    let opts = RunOptions {
        out_dir: part_dir.path().into(),
        stop_after: Some(5),
        ..Default::default()
    };
    let first = run_stage(&data, &model, &cfg, &opts).unwrap();
    assert_eq!(first.state.step, 5);
    let resumed = run_stage(
        &data,
        &model,
        &cfg,
        &RunOptions {
            out_dir: part_dir.path().into(),
            resume: Some(first.checkpoint),
            ..Default::default()
        },
    )
    .unwrap();
    let bits = |h: &[(u64, f64)]| h.iter().map(|(s, l)| (*s, l.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&resumed.state.loss_history), bits(&full.state.loss_history));
    assert_eq!(resumed.state.params().tensors(), full.state.params().tensors());

    let csv = std::fs::read_to_string(&resumed.metrics).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss,lr,wall_s"));
    let steps: Vec<u64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (1..=12).collect::<Vec<_>>());
    assert!(part_dir.path().join("final.ufckp").exists());
}

#[test]
fn finetune_needs_a_checkpoint() {
    let data = toy_data();
    let model = small_model(4, InputMode::Units);
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_cfg(Stage::Finetune);
    let opts = RunOptions { out_dir: dir.path().into(), ..Default::default() };
    assert!(matches!(run_stage(&data, &model, &cfg, &opts), Err(Error::IncompatibleCheckpoint(_))));

    let pre = run_stage(&data, &model, &quick_cfg(Stage::Pretrain), &RunOptions { out_dir: dir.path().join("pre"), ..Default::default() }).unwrap();
    let mut wider = model.clone();
    wider.dim = 32;
    let opts = RunOptions { out_dir: dir.path().join("ft"), init: Some(pre.checkpoint.clone()), ..Default::default() };
    assert!(matches!(run_stage(&data, &wider, &cfg, &opts), Err(Error::IncompatibleCheckpoint(_))));
    let ft = run_stage(&data, &model, &cfg, &opts).unwrap();
    assert_eq!(ft.state.step, 12);
    let scratch = RunOptions { out_dir: dir.path().join("scratch"), allow_scratch: true, ..Default::default() };
    assert!(run_stage(&data, &model, &cfg, &scratch).is_ok());
}

#[test]
fn empty_or_mismatched_data() {
    assert!(matches!(Dataset::new(vec![], InputMode::Units, 4), Err(Error::InvalidInput(_))));
    let bad = example("x", 2, vec![0, 1, 2]);
    assert!(Dataset::new(vec![bad], InputMode::Units, 4).is_err());
    let mel = Example {
        id: "m".into(),
        target: Array2::zeros((4, 80)),
        cond: ExampleCond::Mel(Array2::zeros((6, 80))),
    };
    assert!(Dataset::new(vec![mel.clone()], InputMode::Units, 4).is_err());
    assert_eq!(Dataset::new(vec![mel], InputMode::MelInput, 0).unwrap().examples[0].seq_len(), 6);
}

#[test]
fn mel_mode_trains() {
    let mel_ex = |i: usize, t: usize, c: usize| Example {
        id: format!("m{i}"),
        target: Array2::from_shape_fn((t, 80), |(a, b)| ((a + b + i) % 5) as f32 - 3.0),
        cond: ExampleCond::Mel(Array2::from_shape_fn((c, 80), |(a, b)| ((a * b + i) % 7) as f32 - 4.0)),
    };
    let data = Dataset::new(vec![mel_ex(0, 8, 13), mel_ex(1, 10, 6), mel_ex(2, 5, 9)], InputMode::MelInput, 0).unwrap();
    let model = small_model(4, InputMode::MelInput);
    let mut cfg = quick_cfg(Stage::Pretrain);
    cfg.ablation_mode = InputMode::MelInput;
    let dir = tempfile::tempdir().unwrap();
    let out = run_stage(&data, &model, &cfg, &RunOptions { out_dir: dir.path().into(), ..Default::default() }).unwrap();
    assert!(out.state.loss_history.iter().all(|(_, l)| l.is_finite()));
}

#[test]
fn tiny_model_learns_small_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = build_corpus(&dir.path().join("c"), &CorpusConfig::new(10, 1, 0.5, 2).unwrap(), 1).unwrap();
    let feats: Vec<_> = corpus
        .split(crate::benchkit::Split::Train)
        .map(|e| crate::io::read_features(&corpus.resolve(&e.clean_feature_path)).unwrap().into_inner())
        .collect();
    let all = ndarray::concatenate(ndarray::Axis(0), &feats.iter().map(|f| f.view()).collect::<Vec<_>>()).unwrap();
    let cb = crate::units::fit_kmeans(&crate::units::FeatureMatrix::new(all).unwrap(), 12, 0).unwrap();
    let data = Dataset::from_corpus(&corpus, Some(&cb), Stage::Pretrain, InputMode::Units).unwrap();
    let mut cfg = TrainConfig::tiny(Stage::Pretrain);
    cfg.total_updates = 200;
    cfg.warmup_steps = 20;
    cfg.log_every = 1;
    let model = ModelConfig::tiny(cb.vocab_size());
    let out = run_stage(&data, &model, &cfg, &RunOptions { out_dir: dir.path().join("run"), ..Default::default() }).unwrap();
    let h: Vec<f64> = out.state.loss_history.iter().map(|x| x.1).collect();
    let head = h[..10].iter().sum::<f64>() / 10.0;
    let tail = h[h.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "running loss {head} -> {tail}");
}
