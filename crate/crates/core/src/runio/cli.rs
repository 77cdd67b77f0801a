//! Command-line entry point.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::selftest::run_selftest;
use super::{load_checkpoint, output_root, run_training, write_flatness, write_report, Manifest, RunConfig};
use crate::error::{Error, Result};
use crate::evalharness::{
    flatness_rows, flatness_study, run_protocol, train_generator, transform_dataset, Method, ProtocolConfig,
    TrainedGenerator,
};
use crate::metascheme::{Trainer, Variant};
use crate::tasksuite::export::write_dataset;
use crate::tasksuite::{make_suite, SuiteConfig};

#[derive(Debug, Parser)]
#[command(name = "mctueg", version, about = "Cross-task unexploitable example generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` and $MCTUEG_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Selection {
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated task names.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a generator, writing checkpoint, trace and manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the cycle budget.
        #[arg(long)]
        cycles: Option<usize>,
    },
    /// Export the perturbed training set and clean test set of a checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the evaluation protocol for the configured methods.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Selection,
    },
    /// Run the evaluation protocol for every method unless narrowed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Selection,
    },
    /// Hessian spectra of trained generators, per task.
    Spectra {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Selection,
        /// Analyze this checkpoint instead of training generators.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Gradient, HVP and closed-form oracle checks.
    Selftest {
        /// Random cases per check.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => super::load_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply(cfg: &mut RunConfig, select: &Selection) -> Result<()> {
    if let Some(m) = &select.methods {
        cfg.methods = m.iter().map(|n| Method::from_name(n)).collect::<Result<_>>()?;
    }
    if let Some(s) = &select.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(t) = &select.tasks {
        cfg.tasks = t.clone();
    }
    cfg.validate()
}

fn suite_for(cfg: &RunConfig, seed: u64) -> Result<crate::tasksuite::Suite> {
    make_suite(&SuiteConfig {
        seed,
        ..cfg.suite.clone()
    })
}

fn protocol(cfg: &RunConfig, dir: &Path, command: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Manifest::new(command, cfg, cfg.seeds.clone()).write(dir)?;
    let outcome = run_protocol(&ProtocolConfig {
        suite: cfg.suite.clone(),
        train: cfg.train.clone(),
        target: cfg.target,
        methods: cfg.methods.clone(),
        seeds: cfg.seeds.clone(),
        tasks: cfg.tasks.clone(),
    })?;
    write_report(dir, &outcome.report)?;
    print!("{}", outcome.report.to_tsv());
    Ok(())
}

fn spectra(cfg: &RunConfig, dir: &Path, checkpoint: Option<&Path>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let budget = cfg.train.hyper.budget;
    let (suites, generators) = match checkpoint {
        Some(p) => {
            let seed = cfg.train.seed;
            let suite = suite_for(cfg, seed)?;
            let state = load_checkpoint(p)?.restore(&Trainer::new(&suite, cfg.train.clone())?)?;
            let g = TrainedGenerator {
                method: Method::Scheme(cfg.train.variant),
                seed,
                state,
            };
            Manifest::new("spectra", cfg, vec![seed]).write(dir)?;
            (vec![(seed, suite)], vec![g])
        }
        None => {
            let mut variants: Vec<Variant> = cfg
                .methods
                .iter()
                .filter_map(|m| match m {
                    Method::Scheme(v) => Some(*v),
                    _ => None,
                })
                .collect();
            if variants.is_empty() {
                variants = vec![Variant::Full, Variant::WithoutMetaFlat];
            }
            Manifest::new("spectra", cfg, cfg.seeds.clone()).write(dir)?;
            let mut suites = Vec::new();
            let mut generators = Vec::new();
            for &seed in &cfg.seeds {
                let suite = suite_for(cfg, seed)?;
                for &v in &variants {
                    generators.push(TrainedGenerator {
                        method: Method::Scheme(v),
                        seed,
                        state: train_generator(&suite, &cfg.train, v, seed)?,
                    });
                }
                suites.push((seed, suite));
            }
            (suites, generators)
        }
    };
    let records = flatness_study(&suites, &generators, &cfg.target, &cfg.spectrum, budget)?;
    let rows = flatness_rows(&records, Variant::WithoutMetaFlat.name());
    write_flatness(dir, &records, &rows)?;
    print!("{}", crate::evalharness::flatness_tsv(&rows));
    Ok(())
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common, resume, cycles } => {
            let mut cfg = config(&common)?;
            if let Some(c) = cycles {
                cfg.train.cycles = c;
            }
            let dir = output_root(common.out.as_deref(), &cfg);
            let suite = suite_for(&cfg, cfg.train.seed)?;
            let state = run_training(&suite, &cfg, &dir, resume.as_deref())?;
            println!(
                "trained {} cycles ({} generator iterations) into {}",
                state.cycle,
                state.iteration,
                dir.display()
            );
        }
        Command::Generate { common, checkpoint } => {
            let cfg = config(&common)?;
            let dir = output_root(common.out.as_deref(), &cfg);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let seed = cfg.train.seed;
            let suite = suite_for(&cfg, seed)?;
            let state = load_checkpoint(&checkpoint)?.restore(&Trainer::new(&suite, cfg.train.clone())?)?;
            let split = transform_dataset(&state.generator, &suite.split, cfg.train.hyper.budget)?;
            Manifest::new("generate", &cfg, vec![seed]).write(&dir)?;
            write_dataset(&dir.join("train.uegd"), &suite.tasks, &split.train, seed)?;
            write_dataset(&dir.join("test.uegd"), &suite.tasks, &split.test, seed)?;
            println!("wrote {} and {}", dir.join("train.uegd").display(), dir.join("test.uegd").display());
        }
        Command::Evaluate { common, select } => {
            let mut cfg = config(&common)?;
            apply(&mut cfg, &select)?;
            protocol(&cfg, &output_root(common.out.as_deref(), &cfg), "evaluate")?;
        }
        Command::Ablate { common, select } => {
            let mut cfg = config(&common)?;
            if select.methods.is_none() {
                cfg.methods = Method::all();
            }
            apply(&mut cfg, &select)?;
            protocol(&cfg, &output_root(common.out.as_deref(), &cfg), "ablate")?;
        }
        Command::Spectra {
            common,
            select,
            checkpoint,
        } => {
            let mut cfg = config(&common)?;
            apply(&mut cfg, &select)?;
            spectra(&cfg, &output_root(common.out.as_deref(), &cfg), checkpoint.as_deref())?;
        }
        Command::Selftest { instances } => {
            let checks = run_selftest(instances)?;
            let mut ok = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

/// Parses `argv` and runs the command. Returns the process exit status:
/// 0 on success, 1 on a runtime failure, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: selftest failed");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
