use super::*;
use crate::dataset::{generate_synthetic_scenes, SyntheticSceneSpec};
use rand::RngCore;

fn tiny_dataset() -> SceneDataset {
    let spec = SyntheticSceneSpec {
        n_scenes: 2,
        tiles_per_scene: 4,
        tile_size: 16,
        ..Default::default()
    };
    generate_synthetic_scenes(&spec, 0).unwrap()
}

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.batch_size = 4;
    c.epochs = 2;
    c.encoder.queue_capacity = 6;
    c.encoder.momentum = 0.99;
    c
}

fn pairs(ds: &SceneDataset, cfg: &TrainConfig, n: usize) -> Vec<AugmentedPair> {
    (0..n)
        .map(|i| crate::dataset::augment_pair(&ds.tiles()[i], &cfg.augment, i as u64).unwrap())
        .collect()
}

#[test]
fn total_is_weighted_sum() {
    let ds = tiny_dataset();
    let cfg = tiny_config();
    let mut t = Trainer::new(&cfg, ds.len()).unwrap();
    for _ in 0..3 {
        let r = t.next_step(&ds).unwrap();
        assert!((r.total - (r.l_c + 10.0 * r.l_d)).abs() < 1e-6);
        assert!(r.l_d > 0.0 && r.grad_norm_diff > 0.0);
    }
}

#[test]
fn zero_diffusion_weight_freezes_predictor() {
    let ds = tiny_dataset();
    let mut cfg = tiny_config();
    cfg.loss.lambda_d = 0.0;
    let mut t = Trainer::new(&cfg, ds.len()).unwrap();
    let before = t.predictor().params.fingerprint().unwrap();
    let r = t.next_step(&ds).unwrap();
    assert_eq!(r.total, r.l_c);
    assert_eq!(r.l_d, 0.0);
    assert_eq!(r.grad_norm_diff, 0.0);
    assert_eq!(before, t.predictor().params.fingerprint().unwrap());
}

#[test]
fn zero_contrastive_weight_freezes_head() {
    let ds = tiny_dataset();
    let mut cfg = tiny_config();
    cfg.loss.lambda_c = 0.0;
    let mut t = Trainer::new(&cfg, ds.len()).unwrap();
    let head = |t: &Trainer| {
        t.encoders()
            .query
            .params
            .iter()
            .filter(|(k, _)| k.starts_with("head."))
            .map(|(_, v)| crate::nn::tensor_fingerprint(v.as_tensor()).unwrap())
            .collect::<Vec<_>>()
    };
    let before = head(&t);
    let r = t.next_step(&ds).unwrap();
    assert_eq!(r.grad_norm_head, 0.0);
    assert!(r.grad_norm_encoder > 0.0);
    assert_eq!(r.total, 10.0 * r.l_d);
    assert_eq!(before, head(&t));
}

#[test]
fn detached_condition_blocks_encoder_gradient() {
    let ds = tiny_dataset();
    let mut cfg = tiny_config();
    cfg.loss.lambda_c = 0.0;
    cfg.diffusion.predictor.detach_condition = true;
    let mut t = Trainer::new(&cfg, ds.len()).unwrap();
    let r = t.next_step(&ds).unwrap();
    assert_eq!(r.grad_norm_q, 0.0);
    assert!(r.grad_norm_diff > 0.0);
}

#[test]
fn queue_grows_to_capacity() {
    let ds = tiny_dataset();
    let cfg = tiny_config();
    let mut t = Trainer::new(&cfg, ds.len()).unwrap();
    let batch = pairs(&ds, &cfg, 4);
    for s in 1..=3usize {
        t.train_step(&batch).unwrap();
        assert_eq!(t.queue().len(), (s * 4).min(6));
    }
    assert!(matches!(t.train_step(&[]), Err(Error::Contract(_))));
}

#[test]
fn non_finite_loss_is_reported() {
    let ds = tiny_dataset();
    let mut cfg = tiny_config();
    cfg.loss.tau = 1e-300;
    let dir = tempfile::tempdir().unwrap();
    let err = train(&ds, &cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Training { step: 1, .. }), "{err}");
    assert!(dir.path().join("failure_step_1.txt").exists());
}

#[test]
fn zero_epochs_writes_initial_checkpoint_only() {
    let ds = tiny_dataset();
    let mut cfg = tiny_config();
    cfg.epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let s = train(&ds, &cfg, dir.path()).unwrap();
    assert!(s.reports.is_empty());
    assert_eq!(s.checkpoints, vec![checkpoint_dir(dir.path(), 0)]);
    let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(metrics, format!("{METRICS_HEADER}\n"));
}

#[test]
fn reruns_are_identical() {
    let ds = tiny_dataset();
    let cfg = tiny_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = train(&ds, &cfg, a.path()).unwrap();
    let sb = train(&ds, &cfg, b.path()).unwrap();
    assert_eq!(sa.reports.len(), 4);
    assert_eq!(sa.reports, sb.reports);
    let bytes = |d: &Path| fs::read(d.join("tensors.safetensors")).unwrap();
    assert_eq!(bytes(&sa.final_checkpoint), bytes(&sb.final_checkpoint));
    assert_eq!(
        fs::read(a.path().join(METRICS_FILE)).unwrap(),
        fs::read(b.path().join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = tiny_dataset();
    let mut cfg = tiny_config();
    cfg.checkpoint_every = 2;
    let full = tempfile::tempdir().unwrap();
    let s = train(&ds, &cfg, full.path()).unwrap();
    let mid = checkpoint_dir(full.path(), 2);
    assert!(s.checkpoints.contains(&mid));

    let resumed_dir = tempfile::tempdir().unwrap();
    let r = resume(&mid, &ds, resumed_dir.path()).unwrap();
    assert_eq!(r.reports, s.reports[2..]);
    let bytes = |d: &Path| fs::read(d.join("tensors.safetensors")).unwrap();
    assert_eq!(bytes(&r.final_checkpoint), bytes(&s.final_checkpoint));

    // resuming in place truncates the log rows past the checkpoint, then rewrites them
    let before = fs::read_to_string(full.path().join(METRICS_FILE)).unwrap();
    resume(&mid, &ds, full.path()).unwrap();
    assert_eq!(before, fs::read_to_string(full.path().join(METRICS_FILE)).unwrap());
}

#[test]
fn rng_state_round_trips() {
    let ds = tiny_dataset();
    let cfg = tiny_config();
    let mut t = Trainer::new(&cfg, ds.len()).unwrap();
    t.next_step(&ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    t.save(dir.path()).unwrap();
    let mut back = Trainer::load(dir.path()).unwrap();
    let a: Vec<u64> = (0..100).map(|_| t.rng_mut().next_u64()).collect();
    let b: Vec<u64> = (0..100).map(|_| back.rng_mut().next_u64()).collect();
    assert_eq!(a, b);
}

#[test]
fn corrupt_and_incompatible_checkpoints_are_rejected() {
    let ds = tiny_dataset();
    let t = Trainer::new(&tiny_config(), ds.len()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    t.save(dir.path()).unwrap();

    let tensors = dir.path().join("tensors.safetensors");
    let mut bytes = fs::read(&tensors).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0xFF;
    fs::write(&tensors, &bytes).unwrap();
    assert!(matches!(Trainer::load(dir.path()), Err(Error::Checkpoint(_))));

    let meta = dir.path().join("meta.json");
    let text = fs::read_to_string(&meta).unwrap();
    fs::write(&meta, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
    assert!(matches!(
        Trainer::load(dir.path()),
        Err(Error::Version { found: 99, expected: 1 })
    ));
    fs::write(&meta, "{not json").unwrap();
    assert!(matches!(Trainer::load(dir.path()), Err(Error::Checkpoint(_))));
    assert!(matches!(Trainer::load(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn query_branch_loads_from_checkpoint() {
    let ds = tiny_dataset();
    let mut t = Trainer::new(&tiny_config(), ds.len()).unwrap();
    t.next_step(&ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    t.save(dir.path()).unwrap();
    let (branch, meta) = load_query_branch(dir.path()).unwrap();
    assert_eq!(meta.step, 1);
    assert_eq!(
        branch.params.fingerprint().unwrap(),
        t.encoders().query.params.fingerprint().unwrap()
    );
}

#[test]
fn noise_preview_has_one_row_per_pair() {
    let ds = tiny_dataset();
    let cfg = tiny_config();
    let t = Trainer::new(&cfg, ds.len()).unwrap();
    let img = t.noise_preview(&pairs(&ds, &cfg, 3), 0).unwrap();
    assert_eq!(img.height(), 3 * 17 + 1);
    assert_eq!(img.width(), 4 * 17 + 1);
}
