//! Statistical audits of the synthetic suite, the task split, the noise
//! baseline and the training trace.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mctueg::evalharness::baseline_random_noise;
use mctueg::metascheme::{split_tasks, StepTrace, TrainConfig, Trainer};
use mctueg::models::{ImageBatch, ImageDims, NoiseBudget};
use mctueg::tasksuite::{make_suite, BatchSampler, Label, LabelBatch, LabelKind, SuiteConfig, TaskId};

fn big_suite(train_size: usize) -> mctueg::tasksuite::Suite {
    make_suite(&SuiteConfig {
        seed: 17,
        num_seen: 6,
        num_unseen: 3,
        dims: ImageDims::new(1, 16, 16),
        train_size,
        test_size: 1,
    })
    .unwrap()
}

#[test]
fn labels_are_valid_over_ten_thousand_scenes() {
    let suite = big_suite(10_000);
    let data = &suite.split.train;
    let spatial = suite.dims().spatial();
    let nonempty = data.scenes.iter().filter(|s| s.mask(suite.dims()).iter().any(|&b| b)).count();
    assert!(nonempty as f64 >= 0.99 * data.len() as f64, "{nonempty} nonempty masks");
    for task in &suite.tasks {
        let labels = &data.labels[task.id.0 as usize];
        match (task.label_kind, labels) {
            (LabelKind::ImageClass { classes }, LabelBatch::Class(v)) => {
                assert_eq!(v.len(), data.len());
                assert!(v.iter().all(|&c| c < classes), "{}", task.name);
                for c in 0..classes {
                    assert!(v.contains(&c), "{} never produces class {c}", task.name);
                }
            }
            (LabelKind::PixelClass { classes }, LabelBatch::PixelClass(v)) => {
                assert_eq!(v.len(), data.len() * spatial);
                assert!(v.iter().all(|&c| c < classes), "{}", task.name);
            }
            (LabelKind::ImageRegression { dim }, LabelBatch::Regression(v)) => {
                assert_eq!(v.len(), data.len() * dim);
                assert!(v.iter().all(|x| x.is_finite()), "{}", task.name);
            }
            (LabelKind::PixelRegression, LabelBatch::PixelRegression(v)) => {
                assert_eq!(v.len(), data.len() * spatial);
                assert!(v.iter().all(|x| (0.0..=1.0).contains(x)), "{}", task.name);
            }
            (kind, got) => panic!("{}: {kind:?} stored as {}", task.name, got.tag()),
        }
    }
}

#[test]
fn stored_labels_match_a_fresh_render() {
    let suite = big_suite(300);
    let dims = suite.dims();
    for task in &suite.tasks {
        let stored = &suite.split.train.labels[task.id.0 as usize];
        for (i, scene) in suite.split.train.scenes.iter().enumerate() {
            let fresh = task.render_label(scene, dims);
            let got = stored.gather(&[i], task.label_kind, dims);
            let same = match (&fresh, &got) {
                (Label::Class(c), LabelBatch::Class(v)) => v == &[*c],
                (Label::PixelClass(p), LabelBatch::PixelClass(v)) => p == v,
                (Label::Values(x), LabelBatch::Regression(v) | LabelBatch::PixelRegression(v)) => x == v,
                _ => false,
            };
            assert!(same, "{} sample {i}", task.name);
        }
    }
}

fn split_counts(t: u32, draws: usize) -> BTreeMap<Vec<TaskId>, usize> {
    let seen: Vec<TaskId> = (0..t).map(TaskId).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
    let mut counts = BTreeMap::new();
    for _ in 0..draws {
        let s = split_tasks(&seen, &mut rng).unwrap();
        assert_eq!(s.meta_train.len(), (t as usize).div_ceil(2));
        assert_eq!(s.meta_train.len() + s.meta_test.len(), t as usize);
        assert!(s.meta_train.iter().all(|x| !s.meta_test.contains(x)));
        *counts.entry(s.meta_train).or_insert(0) += 1;
    }
    counts
}

fn binomial(n: u64, k: u64) -> u64 {
    (1..=k).fold(1, |acc, i| acc * (n + 1 - i) / i)
}

#[test]
fn splits_are_uniform() {
    let draws = 10_000;
    for (t, side) in [(6u32, 3u64), (5, 3)] {
        let counts = split_counts(t, draws);
        let subsets = binomial(t as u64, side);
        assert_eq!(counts.len() as u64, subsets, "T = {t}");
        let p = 1.0 / subsets as f64;
        let (mean, sd) = (draws as f64 * p, (draws as f64 * p * (1.0 - p)).sqrt());
        for (k, c) in &counts {
            assert!((*c as f64 - mean).abs() <= 4.0 * sd, "T = {t}, {k:?}: {c} vs {mean}");
        }
        // Marginal: each task lands on the meta-training side with
        // probability side / T.
        let p = side as f64 / t as f64;
        let (mean, sd) = (draws as f64 * p, (draws as f64 * p * (1.0 - p)).sqrt());
        for task in 0..t {
            let c: usize = counts.iter().filter(|(k, _)| k.contains(&TaskId(task))).map(|(_, c)| c).sum();
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "T = {t}, task {task}: {c} vs {mean}");
        }
    }
}

/// Asymptotic Kolmogorov tail `P(K > x)`.
fn kolmogorov_tail(x: f64) -> f64 {
    let mut s = 0.0;
    for k in 1..=100 {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        s += sign * (-2.0 * (k * k) as f64 * x * x).exp();
    }
    (2.0 * s).clamp(0.0, 1.0)
}

#[test]
fn random_noise_is_uniform_in_the_budget() {
    // Constant mid-grey images so that no pixel is clamped.
    let suite = big_suite(4096);
    let dims = suite.dims();
    let n = suite.split.train.len();
    let mut split = suite.split.clone();
    split.train = split
        .train
        .with_images(ImageBatch::new(dims, vec![0.5; n * dims.len()]).unwrap())
        .unwrap();
    let eps = 8.0 / 255.0;
    let out = baseline_random_noise(&split, NoiseBudget::new(eps).unwrap(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(out.test, split.test);
    let mut u: Vec<f64> = out.train.images.data().iter().map(|x| (x - 0.5 + eps) / (2.0 * eps)).collect();
    assert!(u.len() >= 1_000_000);
    assert!(u.iter().all(|v| (0.0..=1.0).contains(v)));
    u.sort_by(f64::total_cmp);
    let m = u.len() as f64;
    let d = u
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i + 1) as f64 / m - v).max(v - i as f64 / m))
        .fold(0.0, f64::max);
    let p = kolmogorov_tail(d * m.sqrt());
    assert!(p > 0.01, "KS statistic {d}, p = {p}");
}

#[test]
fn kolmogorov_tail_reference_points() {
    // Standard critical values of the Kolmogorov distribution.
    assert!((kolmogorov_tail(1.3581) - 0.05).abs() < 1e-3);
    assert!((kolmogorov_tail(1.6276) - 0.01).abs() < 1e-3);
}

#[test]
fn trace_follows_the_split_and_matches_the_trainer() {
    let suite = make_suite(&SuiteConfig {
        num_seen: 5,
        num_unseen: 1,
        train_size: 48,
        test_size: 4,
        ..SuiteConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        cycles: 2,
        batch_size: 16,
        gen_hidden: 4,
        surr_conv_channels: 1,
        surr_width: 4,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(&suite, cfg.clone()).unwrap();
    let mut expected: Vec<StepTrace> = Vec::new();
    let reference = trainer.run(trainer.init_state().unwrap(), &mut expected).unwrap();

    let mut state = trainer.init_state().unwrap();
    let mut manual = Vec::new();
    for _ in 0..cfg.cycles {
        for _ in 0..cfg.hyper.gen_epochs_per_cycle {
            let split = split_tasks(trainer.seen(), &mut state.rng).unwrap();
            for idx in BatchSampler::epoch(suite.split.train.len(), cfg.batch_size, &mut state.rng) {
                let out = trainer.generator_iteration(&mut state, &split, &idx).unwrap();
                let t = &out.trace;
                assert!(split.meta_train.contains(&TaskId(t.m_tr)), "{t:?}");
                assert!(split.meta_test.contains(&TaskId(t.m_te)), "{t:?}");
                assert!(t.is_finite());
                manual.push(out.trace);
            }
        }
        for _ in 0..cfg.hyper.surr_epochs_per_cycle {
            trainer.surrogate_epoch(&mut state).unwrap();
        }
        state.cycle += 1;
    }
    assert_eq!(manual, expected);
    assert_eq!(state, reference);
    let iterations: Vec<u64> = expected.iter().map(|t| t.iteration).collect();
    assert_eq!(iterations, (0..expected.len() as u64).collect::<Vec<_>>());
}
