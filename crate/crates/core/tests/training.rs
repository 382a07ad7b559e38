use ghost_stereo::checkpoint;
use ghost_stereo::data::synthetic::random_dot_dataset;
use ghost_stereo::data::Normalization;
use ghost_stereo::train::{evaluate_samples, train_loop, LrSchedule, Phase, TrainOptions, TrainState};
use ghost_stereo::{Error, GhostStereo, ModelConfig, StereoSample};

fn options(steps: u64, dir: Option<std::path::PathBuf>) -> TrainOptions {
    TrainOptions {
        total_steps: steps,
        batch_size: 1,
        steps_per_epoch: 2,
        schedule: LrSchedule::for_phase(Phase::Pretrain),
        crop: Some((32, 32)),
        checkpoint_dir: dir,
    }
}

fn setup(cfg: &ModelConfig) -> (GhostStereo, TrainState, Vec<StereoSample>) {
    let data = random_dot_dataset(32, 64, 2, 3).unwrap();
    let (model, store) = GhostStereo::new(cfg).unwrap();
    let state = TrainState::new(cfg, store, Normalization::fit(&data));
    (model, state, data)
}

#[test]
fn zero_loss_weights_leave_parameters_unchanged() {
    let cfg = ModelConfig {
        loss_weights: [0.0, 0.0],
        ..ModelConfig::desk()
    };
    let (model, state, data) = setup(&cfg);
    let before = state.store.clone();
    let after = train_loop(&model, state, &data, None, &options(1, None), |_| {}, |_| {}).unwrap();
    for (a, b) in before.entries().iter().zip(after.store.entries()) {
        if a.learnable {
            assert_eq!(a.value, b.value, "{} changed", a.name);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = ModelConfig::desk();
    let run = || {
        let (model, state, data) = setup(&cfg);
        let mut losses = Vec::new();
        let st = train_loop(
            &model,
            state,
            &data,
            None,
            &options(4, None),
            |r| losses.push(r.loss),
            |_| {},
        )
        .unwrap();
        (losses, st.store)
    };
    let (la, sa) = run();
    let (lb, sb) = run();
    assert_eq!(la, lb);
    assert_eq!(sa, sb);
}

#[test]
fn nan_input_aborts_with_dump() {
    let cfg = ModelConfig::desk();
    let (model, state, mut data) = setup(&cfg);
    for s in &mut data {
        s.left.data_mut().fill(f64::NAN);
    }
    let dir = tempfile::tempdir().unwrap();
    let err = train_loop(
        &model,
        state,
        &data,
        None,
        &options(3, Some(dir.path().to_path_buf())),
        |_| {},
        |_| {},
    )
    .expect_err("non-finite loss must abort");
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
    let dump = std::fs::read_to_string(dir.path().join("nonfinite_step0.json")).unwrap();
    assert!(dump.contains("sample"));
}

#[test]
fn epoch_checkpoint_reproduces_logged_epe() {
    let cfg = ModelConfig::desk();
    let (model, state, data) = setup(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    let val = data[..1].to_vec();
    train_loop(
        &model,
        state,
        &data,
        Some(&val),
        &options(4, Some(dir.path().to_path_buf())),
        |_| {},
        |e| records.push(e.clone()),
    )
    .unwrap();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r.val_epe.is_some()));
    let (model2, restored) = checkpoint::load_model(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(restored.step, 4);
    assert_eq!(restored.epoch, 2);
    let (epe, _) = evaluate_samples(&model2, &restored.store, &restored.norm, &data).unwrap();
    assert!((epe - records[1].train_epe).abs() < 1e-12);
    let best = records.iter().filter_map(|r| r.val_epe).fold(f64::INFINITY, f64::min);
    assert_eq!(restored.best_val_epe, Some(best));
}

#[test]
fn new_round_restarts_schedule() {
    let cfg = ModelConfig::desk();
    let (model, state, data) = setup(&cfg);
    let schedule = LrSchedule {
        base: 1e-3,
        milestones: vec![1],
        factor: 0.5,
    };
    let opts = |steps| TrainOptions {
        schedule: schedule.clone(),
        ..options(steps, None)
    };
    let mut lrs = Vec::new();
    let mut state = train_loop(&model, state, &data, None, &opts(4), |r| lrs.push(r.lr), |_| {}).unwrap();
    state.start_round();
    let state = train_loop(&model, state, &data, None, &opts(8), |r| lrs.push(r.lr), |_| {}).unwrap();
    assert_eq!(lrs, vec![1e-3, 1e-3, 5e-4, 5e-4, 1e-3, 1e-3, 5e-4, 5e-4]);
    assert_eq!(state.round, 1);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let cfg = ModelConfig::desk();
    let (_, state, _) = setup(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    checkpoint::save(&path, &state).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&path, &bytes).unwrap();
    assert!(checkpoint::load(&path).is_err());

    let other = ModelConfig { use_cve: false, ..cfg };
    let (_, store) = GhostStereo::new(&other).unwrap();
    let mut mismatched = TrainState::new(&other, store, Normalization::default());
    mismatched.config = ModelConfig::desk();
    checkpoint::save(&path, &mismatched).unwrap();
    assert!(matches!(checkpoint::load_model(&path), Err(Error::Checkpoint(_))));
}
