//! End-to-end checks of persistence, configs and the evaluation protocol.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mctueg::evalharness::{
    baseline_random_noise, evaluate_target, run_protocol, target_rng, train_target, transform_dataset, Method,
    ProtocolConfig,
};
use mctueg::metascheme::{Trainer, Variant};
use mctueg::models::{GeneratorModel, NoiseBudget};
use mctueg::runio::{
    load_checkpoint, load_config, read_trace, run_training, save_checkpoint, Checkpoint, CHECKPOINT_FILE,
    CHECKPOINT_VERSION, TRACE_FILE,
};
use mctueg::tasksuite::{make_suite, SuiteConfig};
use mctueg::Error;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn tiny() -> mctueg::runio::RunConfig {
    load_config(&config_path("tiny.cfg")).unwrap()
}

#[test]
fn shipped_defaults_carry_the_reference_hyperparameters() {
    let cfg = load_config(&config_path("defaults.cfg")).unwrap();
    let h = &cfg.train.hyper;
    assert_eq!((h.alpha, h.beta, h.eta, h.lambda), (1e-4, 2e-5, 5e-4, 0.2));
    assert!((h.budget.epsilon() - 8.0 / 255.0).abs() < 1e-15);
    for name in ["desk.cfg", "tiny.cfg"] {
        load_config(&config_path(name)).unwrap();
    }
}

#[test]
fn checkpoint_file_round_trip_and_damage() {
    let cfg = tiny();
    let suite = make_suite(&cfg.suite).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let state = run_training(&suite, &cfg, dir.path(), None).unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    let trainer = Trainer::new(&suite, cfg.train.clone()).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().restore(&trainer).unwrap(), state);

    let again = dir.path().join("again.uegc");
    save_checkpoint(&state, &again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(&path).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.uegc");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::CorruptFile(_))));

    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        Checkpoint::decode(&newer),
        Err(Error::VersionMismatch { found, expected }) if found == CHECKPOINT_VERSION + 1 && expected == CHECKPOINT_VERSION
    ));

    let missing = dir.path().join("nope.uegc");
    assert!(matches!(load_checkpoint(&missing), Err(Error::Io { .. })));
}

#[test]
fn zero_cycles_leave_the_initial_state() {
    let mut cfg = tiny();
    cfg.train.cycles = 0;
    let suite = make_suite(&cfg.suite).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let state = run_training(&suite, &cfg, dir.path(), None).unwrap();
    let trainer = Trainer::new(&suite, cfg.train.clone()).unwrap();
    assert_eq!(state, trainer.init_state().unwrap());
    assert!(read_trace(&dir.path().join(TRACE_FILE)).unwrap().is_empty());
}

#[test]
fn resumed_run_writes_the_same_bytes() {
    let mut cfg = tiny();
    cfg.train.cycles = 2;
    let suite = make_suite(&cfg.suite).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (whole, parted) = (dir.path().join("whole"), dir.path().join("parted"));
    run_training(&suite, &cfg, &whole, None).unwrap();
    let mut first = cfg.clone();
    first.train.cycles = 1;
    run_training(&suite, &first, &parted, None).unwrap();
    let saved = dir.path().join("after-one.uegc");
    std::fs::copy(parted.join(CHECKPOINT_FILE), &saved).unwrap();
    // a record past the checkpoint, as if the process died mid-cycle
    let extra = std::fs::read_to_string(whole.join(TRACE_FILE)).unwrap();
    let n = std::fs::read_to_string(parted.join(TRACE_FILE)).unwrap().lines().count();
    let mut stale = std::fs::read_to_string(parted.join(TRACE_FILE)).unwrap();
    stale.push_str(extra.lines().nth(n).unwrap());
    stale.push('\n');
    std::fs::write(parted.join(TRACE_FILE), stale).unwrap();
    run_training(&suite, &cfg, &parted, Some(&saved)).unwrap();
    for f in [CHECKPOINT_FILE, TRACE_FILE] {
        assert_eq!(std::fs::read(whole.join(f)).unwrap(), std::fs::read(parted.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn silent_transforms_leave_the_data_alone() {
    let cfg = tiny();
    let suite = make_suite(&cfg.suite).unwrap();
    let budget = cfg.train.hyper.budget;
    let zero = GeneratorModel::zeros(suite.dims(), cfg.train.gen_hidden).unwrap();
    assert_eq!(transform_dataset(&zero, &suite.split, budget).unwrap(), suite.split);

    let eps = 1e-12;
    let noisy = baseline_random_noise(&suite.split, NoiseBudget::new(eps).unwrap(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(noisy.test, suite.split.test);
    assert!(noisy.train.images.max_abs_diff(&suite.split.train.images) <= eps);
    assert_eq!(noisy.train.labels, suite.split.train.labels);
}

#[test]
fn raw_protocol_equals_plain_target_training() {
    let cfg = tiny();
    let seed = cfg.seeds[0];
    let outcome = run_protocol(&ProtocolConfig {
        suite: cfg.suite.clone(),
        train: cfg.train.clone(),
        target: cfg.target,
        methods: vec![Method::Raw],
        seeds: vec![seed],
        tasks: Vec::new(),
    })
    .unwrap();
    let suite = make_suite(&SuiteConfig { seed, ..cfg.suite.clone() }).unwrap();
    assert_eq!(outcome.report.rows.len(), suite.tasks.len());
    assert!(outcome.generators.is_empty());
    for task in &suite.tasks {
        let target = train_target(task, &suite.split.train, &cfg.target, &mut target_rng(seed, task)).unwrap();
        let direct = evaluate_target(&target, &suite.split.test).unwrap();
        let row = outcome.report.row(&task.name, Method::Raw).unwrap();
        assert_eq!(row.values, vec![direct], "{}", task.name);
        assert_eq!(row.median, direct);
        assert_eq!(row.dispersion, None);
    }
}

#[test]
fn report_has_one_row_per_task_and_method() {
    let cfg = tiny();
    let methods = vec![Method::Raw, Method::RandomNoise, Method::Scheme(Variant::WithoutMetaTest)];
    let outcome = run_protocol(&ProtocolConfig {
        suite: cfg.suite.clone(),
        train: cfg.train.clone(),
        target: cfg.target,
        methods: methods.clone(),
        seeds: vec![0, 1],
        tasks: vec!["shape_class".into(), "centroid".into()],
    })
    .unwrap();
    assert_eq!(outcome.report.rows.len(), 2 * methods.len());
    assert_eq!(outcome.generators.len(), 2);
    assert!(outcome.report.rows.iter().all(|r| r.values.len() == 2 && r.dispersion.is_some()));
    let tsv = outcome.report.to_tsv();
    assert_eq!(tsv.lines().count(), 1 + outcome.report.rows.len());
    assert_eq!(outcome.report.to_jsonl().lines().count(), outcome.report.rows.len());
    assert_eq!(outcome.report.per_method().len(), methods.len());
}
