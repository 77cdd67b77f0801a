//! Closed-form and finite-difference oracles for the numerical core.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{central_diff, mlp_loss, rel};
use mctueg::diffcore::toy::{Quadratic, ToyMlp};
use mctueg::diffcore::{finite_diff_check, gradient, hvp, GradVector, ParamVector, DEFAULT_HVP_STEP};
use mctueg::flatness::{hessian_spectrum, left_mass, top_eigenvalue};
use mctueg::metascheme::{
    actual_update, flatness_ascent, flatness_gap, meta_test_feedback, meta_train_step, GapMode,
};
use mctueg::models::{GeneratorLoss, GeneratorModel, ImageDims, NoiseBudget, Sharing, SurrogatePool, TrunkSpec};
use mctueg::tasksuite::{make_suite, SuiteConfig};

fn theta(v: &[f64]) -> ParamVector {
    ParamVector::from_slice(v).unwrap()
}

#[test]
fn toy_gradients_match_hand_written_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (mlp, p, b) = ToyMlp::random_instance(&mut rng);
        let (v, g) = gradient(&mlp, &p, &b).unwrap();
        assert!((v - mlp_loss(&mlp, p.values(), &b)).abs() < 1e-14);
        let fd = central_diff(|x| mlp_loss(&mlp, x, &b), p.values(), 1e-5);
        for (a, o) in g.values().iter().zip(&fd) {
            worst = worst.max(rel(*a, *o));
        }
        assert!(finite_diff_check(&mlp, &p, &b, 1e-5).unwrap().passed);
    }
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn hvp_on_diag_one_five() {
    let q = Quadratic::diagonal(&[1.0, 5.0]);
    let v = GradVector::new(vec![0.0, 1.0], theta(&[0.3, -0.7]).layout().clone()).unwrap();
    let h = hvp(&q, &theta(&[0.3, -0.7]), &(), &v, DEFAULT_HVP_STEP).unwrap();
    assert!(h.values()[0].abs() < 1e-8 && (h.values()[1] - 5.0).abs() < 1e-8, "{:?}", h.values());
}

#[test]
fn generator_field_gradient_passes_check() {
    let dims = ImageDims::new(1, 8, 8);
    let suite = make_suite(&SuiteConfig {
        dims,
        num_seen: 2,
        num_unseen: 1,
        train_size: 4,
        test_size: 2,
        ..SuiteConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let generator = GeneratorModel::new(dims, 3, &mut rng).unwrap();
    let seen: Vec<_> = suite.seen().cloned().collect();
    let pool = SurrogatePool::new(
        dims,
        &seen,
        TrunkSpec {
            conv_channels: 2,
            width: 6,
        },
        Sharing::SharedTrunk,
        &mut rng,
    )
    .unwrap();
    for task in &seen {
        let loss = GeneratorLoss {
            generator: &generator,
            pool: &pool,
            task: task.id,
            budget: NoiseBudget::new(0.2).unwrap(),
        };
        let batch = suite.split.train.full_batch(task).unwrap();
        let report = finite_diff_check(&loss, generator.params(), &batch, 1e-5).unwrap();
        assert!(report.passed, "{}: {report:?}", task.name);
    }
}

#[test]
fn scalar_chain_matches_hand_arithmetic() {
    let (a, b, alpha, eta, beta) = (2.0, 3.0, 0.1, 0.1, 2e-5);
    let (qa, qb) = (Quadratic::diagonal(&[a]), Quadratic::diagonal(&[b]));
    let p = theta(&[1.0]);
    let mt = meta_train_step(&qa, &p, &(), alpha).unwrap();
    assert!((mt.gen_desc.values()[0] - 0.8).abs() < 1e-15);
    assert_eq!(mt.grad.values(), &[2.0]);
    let (_, g_mt) = meta_test_feedback(&qa, &(), &qb, &(), &p, &mt.gen_desc, alpha, DEFAULT_HVP_STEP).unwrap();
    assert!((g_mt.values()[0] - 1.92).abs() < 1e-10);
    let asc = flatness_ascent(&p, &mt.grad, eta).unwrap();
    assert!((asc.values()[0] - 1.2).abs() < 1e-15);
    let gap = flatness_gap(&qa, &p, &asc, &(), (mt.loss, &mt.grad), GapMode::FirstOrder, eta, DEFAULT_HVP_STEP).unwrap();
    assert!((gap.gap - 0.44).abs() < 1e-10);
    let next = actual_update(&p, &mt.grad, &g_mt, &gap.grad, beta).unwrap();
    // 1 - 2e-5 * (2 + 1.92 + 0.4)
    assert!((next.values()[0] - 0.999_913_6).abs() < 1e-12);
}

#[test]
fn top_eigenvalue_of_diag_one_five() {
    let q = Quadratic::diagonal(&[1.0, 5.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let top = top_eigenvalue(&q, &theta(&[0.0, 0.0]), &(), 200, &mut rng).unwrap();
    assert!((top - 5.0).abs() < 1e-6);
}

#[test]
fn ten_dim_spectrum_is_exact() {
    let diag: Vec<f64> = (0..10).map(|i| 0.5 + i as f64 * 1.3).collect();
    let q = Quadratic::diagonal(&diag);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s = hessian_spectrum(&q, &theta(&[0.0; 10]), &(), 10, 2, &mut rng).unwrap();
    assert_eq!(s.ritz_values.len(), 10);
    for (r, d) in s.ritz_values.iter().zip(&diag) {
        assert!((r - d).abs() < 1e-6, "{r} vs {d}");
    }
}

#[test]
fn left_mass_quadrature_on_two_dims() {
    // Any Rademacher probe is (+-1, +-1)/sqrt(2): weight 1/2 on each eigenvalue.
    let q = Quadratic::diagonal(&[1.0, 5.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = hessian_spectrum(&q, &theta(&[0.0, 0.0]), &(), 2, 1, &mut rng).unwrap();
    assert!((left_mass(&s, 2.0) - 0.5).abs() < 1e-12);
    assert_eq!(left_mass(&s, 0.5), 0.0);
    assert!((left_mass(&s, 6.0) - 1.0).abs() < 1e-12);
}

#[test]
fn left_mass_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mlp, p, b) = ToyMlp::random_instance(&mut rng);
    let run = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = hessian_spectrum(&mlp, &p, &b, 6, 3, &mut r).unwrap();
        left_mass(&s, 0.1).to_bits()
    };
    assert_eq!(run(3), run(3));
}

#[test]
fn composite_meta_oracle_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..25 {
        let (mlp, p, b_tr) = ToyMlp::random_instance(&mut rng);
        let b_te = mlp.random_batch(b_tr.rows, &mut rng);
        let alpha = rng.gen_range(0.01..0.3);
        let mt = meta_train_step(&mlp, &p, &b_tr, alpha).unwrap();
        let (_, g) = meta_test_feedback(&mlp, &b_tr, &mlp, &b_te, &p, &mt.gen_desc, alpha, DEFAULT_HVP_STEP).unwrap();
        let fd = central_diff(
            |x| {
                let px = ParamVector::new(x.to_vec(), p.layout().clone()).unwrap();
                let (_, gt) = gradient(&mlp, &px, &b_tr).unwrap();
                let d: Vec<f64> = x.iter().zip(gt.values()).map(|(t, g)| t - alpha * g).collect();
                mlp_loss(&mlp, &d, &b_te)
            },
            p.values(),
            1e-5,
        );
        for (a, o) in g.values().iter().zip(&fd) {
            assert!(rel(*a, *o) <= 1e-4, "{a} vs {o}");
        }
    }
}
