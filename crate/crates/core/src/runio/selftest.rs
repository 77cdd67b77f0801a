//! Fast oracle suite behind the `selftest` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::toy::{Quadratic, ToyMlp};
use crate::diffcore::{dot, gradient, hvp, rel_error, value, finite_diff_check, GradVector, ParamVector, DEFAULT_HVP_STEP};
use crate::error::Result;
use crate::metascheme::{flatness_ascent, flatness_gap, meta_test_feedback, meta_train_step, GapMode, TrainConfig, Trainer};
use crate::models::{apply_perturbation, ImageDims, ImageTensor, NoiseBudget, RawNoiseField};
use crate::tasksuite::{make_suite, SuiteConfig};

use super::Checkpoint;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, worst: f64, tol: f64) -> Check {
    Check {
        name,
        passed: worst <= tol,
        detail: format!("worst {worst:.3e}, tolerance {tol:.0e}"),
    }
}

fn random_direction<R: Rng>(p: &ParamVector, rng: &mut R) -> GradVector {
    let v = (0..p.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    GradVector::new(v, p.layout().clone()).expect("same layout")
}

/// Central differences of `theta -> L_te(theta - alpha * grad L_tr(theta))`.
pub fn composite_meta_oracle(
    tr: &ToyMlp,
    batch_tr: &crate::diffcore::toy::ToyBatch,
    te: &ToyMlp,
    batch_te: &crate::diffcore::toy::ToyBatch,
    params: &ParamVector,
    alpha: f64,
) -> Result<Vec<f64>> {
    let f = |p: &ParamVector| -> Result<f64> {
        let (_, g) = gradient(tr, p, batch_tr)?;
        value(te, &p.stepped(&g, -alpha)?, batch_te)
    };
    let h = 1e-5;
    (0..params.len())
        .map(|i| {
            let mut e = vec![0.0; params.len()];
            e[i] = 1.0;
            let up = f(&params.offset_by(&e, h)?)?;
            let down = f(&params.offset_by(&e, -h)?)?;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Runs every check with `instances` random cases each.
pub fn run_selftest(instances: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_7e57);
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (mlp, p, b) = ToyMlp::random_instance(&mut rng);
        worst = worst.max(finite_diff_check(&mlp, &p, &b, 1e-5)?.max_rel_error);
    }
    out.push(check("gradient vs central differences", worst, 1e-5));

    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (mlp, p, b) = ToyMlp::random_instance(&mut rng);
        let (u, v) = (random_direction(&p, &mut rng), random_direction(&p, &mut rng));
        let hu = hvp(&mlp, &p, &b, &u, DEFAULT_HVP_STEP)?;
        let hv = hvp(&mlp, &p, &b, &v, DEFAULT_HVP_STEP)?;
        worst = worst.max(rel_error(dot(v.values(), hu.values()), dot(u.values(), hv.values())));
    }
    out.push(check("hessian-vector product symmetry", worst, 1e-4));

    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (a, b) = (rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0));
        let (theta, alpha) = (rng.gen_range(-2.0..2.0), rng.gen_range(0.0..0.3));
        let p = ParamVector::from_slice(&[theta])?;
        let (qa, qb) = (Quadratic::diagonal(&[a]), Quadratic::diagonal(&[b]));
        let mt = meta_train_step(&qa, &p, &(), alpha)?;
        let (_, g) = meta_test_feedback(&qa, &(), &qb, &(), &p, &mt.gen_desc, alpha, DEFAULT_HVP_STEP)?;
        let expect = b * (1.0 - alpha * a).powi(2) * theta;
        worst = worst.max((g.values()[0] - expect).abs());
    }
    out.push(check("meta-test feedback, quadratic closed form", worst, 1e-10));

    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (tr, p, b_tr) = ToyMlp::random_instance(&mut rng);
        let b_te = tr.random_batch(b_tr.rows, &mut rng);
        let alpha = 0.1;
        let mt = meta_train_step(&tr, &p, &b_tr, alpha)?;
        let (_, g) = meta_test_feedback(&tr, &b_tr, &tr, &b_te, &p, &mt.gen_desc, alpha, DEFAULT_HVP_STEP)?;
        let oracle = composite_meta_oracle(&tr, &b_tr, &tr, &b_te, &p, alpha)?;
        for (x, y) in g.values().iter().zip(&oracle) {
            worst = worst.max(rel_error(*x, *y));
        }
    }
    out.push(check("meta-test feedback vs composite differences", worst, 1e-4));

    let q = Quadratic::diagonal(&[2.0]);
    let p = ParamVector::from_slice(&[1.0])?;
    let (l0, g0) = gradient(&q, &p, &())?;
    let asc = flatness_ascent(&p, &g0, 0.1)?;
    let gap = flatness_gap(&q, &p, &asc, &(), (l0, &g0), GapMode::FirstOrder, 0.1, DEFAULT_HVP_STEP)?;
    out.push(check(
        "loss gap, quadratic closed form",
        (gap.gap - 0.44).abs().max((gap.grad.values()[0] - 0.4).abs()),
        1e-10,
    ));

    let budget = NoiseBudget::new(8.0 / 255.0)?;
    let dims = ImageDims::new(1, 8, 8);
    let mut worst = 0.0f64;
    for _ in 0..instances.max(1) * 16 {
        let x: Vec<f64> = (0..dims.len()).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let raw: Vec<f64> = (0..dims.len()).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let x = ImageTensor::new(dims, x)?;
        let xu = apply_perturbation(&x, &RawNoiseField { dims, data: raw }, budget)?;
        worst = worst.max(xu.max_abs_diff(&x) - budget.epsilon());
    }
    out.push(check("perturbation budget (excess over epsilon)", worst.max(0.0), 1e-12));

    let suite = make_suite(&SuiteConfig {
        num_seen: 2,
        num_unseen: 1,
        train_size: 16,
        test_size: 4,
        ..SuiteConfig::default()
    })?;
    let trainer = Trainer::new(
        &suite,
        TrainConfig {
            cycles: 1,
            batch_size: 8,
            gen_hidden: 4,
            surr_conv_channels: 1,
            surr_width: 4,
            ..TrainConfig::default()
        },
    )?;
    let state = trainer.run(trainer.init_state()?, &mut crate::metascheme::NullSink)?;
    let bytes = Checkpoint::from_state(&state).encode();
    let again = Checkpoint::decode(&bytes)?.restore(&trainer)?;
    let same = Checkpoint::from_state(&again).encode() == bytes;
    out.push(Check {
        name: "checkpoint round trip",
        passed: same,
        detail: format!("{} bytes", bytes.len()),
    });
    Ok(out)
}
