//! Flat `key = value` run configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::{Method, TargetTraining};
use crate::flatness::SpectrumConfig;
use crate::metascheme::{GapMode, HistoryMode, TrainConfig, Variant};
use crate::models::{NoiseBudget, Sharing};
use crate::tasksuite::SuiteConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub suite: SuiteConfig,
    pub train: TrainConfig,
    pub target: TargetTraining,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub tasks: Vec<String>,
    pub spectrum: SpectrumConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            suite: SuiteConfig::default(),
            train: TrainConfig::default(),
            target: TargetTraining::default(),
            methods: vec![
                Method::Raw,
                Method::RandomNoise,
                Method::Scheme(Variant::Full),
            ],
            seeds: vec![0, 1, 2, 3, 4],
            tasks: Vec::new(),
            spectrum: SpectrumConfig::default(),
            output_dir: None,
        }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "num_seen",
    "num_unseen",
    "channels",
    "height",
    "width",
    "train_size",
    "test_size",
    "alpha",
    "beta",
    "eta",
    "lambda",
    "epsilon",
    "gen_epochs_per_cycle",
    "surr_epochs_per_cycle",
    "surr_lr",
    "hvp_step",
    "cycles",
    "batch_size",
    "gen_hidden",
    "surr_conv_channels",
    "surr_width",
    "sharing",
    "variant",
    "gap_mode",
    "history",
    "target_epochs",
    "target_lr",
    "target_batch_size",
    "target_conv_channels",
    "target_width",
    "methods",
    "seeds",
    "tasks",
    "spectrum_probes",
    "spectrum_steps",
    "power_iters",
    "spectrum_batch",
    "output_dir",
];

fn parse_f64(v: &str) -> std::result::Result<f64, String> {
    if let Some((n, d)) = v.split_once('/') {
        let n: f64 = n.trim().parse().map_err(|_| format!("`{v}` is not a number"))?;
        let d: f64 = d.trim().parse().map_err(|_| format!("`{v}` is not a number"))?;
        return Ok(n / d);
    }
    v.parse().map_err(|_| format!("`{v}` is not a number"))
}

fn parse_uint<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a non-negative integer"))
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn sharing_name(s: Sharing) -> &'static str {
    match s {
        Sharing::SharedTrunk => "shared",
        Sharing::Separate => "separate",
    }
}

fn gap_name(g: GapMode) -> &'static str {
    match g {
        GapMode::FirstOrder => "first_order",
        GapMode::Exact => "exact",
    }
}

fn history_name(h: HistoryMode) -> &'static str {
    match h {
        HistoryMode::Cached => "cached",
        HistoryMode::Recompute => "recompute",
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let h = &mut self.train.hyper;
        match key {
            "seed" => {
                let s = parse_uint(v)?;
                self.suite.seed = s;
                self.train.seed = s;
            }
            "num_seen" => self.suite.num_seen = parse_uint(v)?,
            "num_unseen" => self.suite.num_unseen = parse_uint(v)?,
            "channels" => self.suite.dims.channels = parse_uint(v)?,
            "height" => self.suite.dims.height = parse_uint(v)?,
            "width" => self.suite.dims.width = parse_uint(v)?,
            "train_size" => self.suite.train_size = parse_uint(v)?,
            "test_size" => self.suite.test_size = parse_uint(v)?,
            "alpha" => h.alpha = parse_f64(v)?,
            "beta" => h.beta = parse_f64(v)?,
            "eta" => h.eta = parse_f64(v)?,
            "lambda" => h.lambda = parse_f64(v)?,
            "epsilon" => {
                h.budget = NoiseBudget::new(parse_f64(v)?).map_err(|e| e.to_string())?;
            }
            "gen_epochs_per_cycle" => h.gen_epochs_per_cycle = parse_uint(v)?,
            "surr_epochs_per_cycle" => h.surr_epochs_per_cycle = parse_uint(v)?,
            "surr_lr" => h.surr_lr = parse_f64(v)?,
            "hvp_step" => h.hvp_step = parse_f64(v)?,
            "cycles" => self.train.cycles = parse_uint(v)?,
            "batch_size" => self.train.batch_size = parse_uint(v)?,
            "gen_hidden" => self.train.gen_hidden = parse_uint(v)?,
            "surr_conv_channels" => self.train.surr_conv_channels = parse_uint(v)?,
            "surr_width" => self.train.surr_width = parse_uint(v)?,
            "sharing" => {
                self.train.sharing = match v {
                    "shared" => Sharing::SharedTrunk,
                    "separate" => Sharing::Separate,
                    _ => return Err(format!("expected `shared` or `separate`, got `{v}`")),
                }
            }
            "variant" => {
                self.train.variant = Variant::from_name(v).ok_or_else(|| format!("unknown variant `{v}`"))?;
            }
            "gap_mode" => {
                self.train.gap_mode = match v {
                    "first_order" => GapMode::FirstOrder,
                    "exact" => GapMode::Exact,
                    _ => return Err(format!("expected `first_order` or `exact`, got `{v}`")),
                }
            }
            "history" => {
                self.train.history = match v {
                    "cached" => HistoryMode::Cached,
                    "recompute" => HistoryMode::Recompute,
                    _ => return Err(format!("expected `cached` or `recompute`, got `{v}`")),
                }
            }
            "target_epochs" => self.target.epochs = parse_uint(v)?,
            "target_lr" => self.target.lr = parse_f64(v)?,
            "target_batch_size" => self.target.batch_size = parse_uint(v)?,
            "target_conv_channels" => self.target.conv_channels = parse_uint(v)?,
            "target_width" => self.target.width = parse_uint(v)?,
            "methods" => {
                self.methods = list(v)
                    .iter()
                    .map(|m| Method::from_name(m).map_err(|_| format!("unknown method `{m}`")))
                    .collect::<std::result::Result<_, _>>()?;
            }
            "seeds" => {
                self.seeds = list(v)
                    .iter()
                    .map(|s| parse_uint(s))
                    .collect::<std::result::Result<_, _>>()?;
            }
            "tasks" => self.tasks = list(v),
            "spectrum_probes" => self.spectrum.probes = parse_uint(v)?,
            "spectrum_steps" => self.spectrum.lanczos_steps = parse_uint(v)?,
            "power_iters" => self.spectrum.power_iters = parse_uint(v)?,
            "spectrum_batch" => self.spectrum.batch = parse_uint(v)?,
            "output_dir" => self.output_dir = Some(PathBuf::from(v)),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<String> {
        let h = &self.train.hyper;
        let join = |v: Vec<String>| v.join(",");
        Some(match key {
            "seed" => self.train.seed.to_string(),
            "num_seen" => self.suite.num_seen.to_string(),
            "num_unseen" => self.suite.num_unseen.to_string(),
            "channels" => self.suite.dims.channels.to_string(),
            "height" => self.suite.dims.height.to_string(),
            "width" => self.suite.dims.width.to_string(),
            "train_size" => self.suite.train_size.to_string(),
            "test_size" => self.suite.test_size.to_string(),
            "alpha" => h.alpha.to_string(),
            "beta" => h.beta.to_string(),
            "eta" => h.eta.to_string(),
            "lambda" => h.lambda.to_string(),
            "epsilon" => h.budget.epsilon().to_string(),
            "gen_epochs_per_cycle" => h.gen_epochs_per_cycle.to_string(),
            "surr_epochs_per_cycle" => h.surr_epochs_per_cycle.to_string(),
            "surr_lr" => h.surr_lr.to_string(),
            "hvp_step" => h.hvp_step.to_string(),
            "cycles" => self.train.cycles.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "gen_hidden" => self.train.gen_hidden.to_string(),
            "surr_conv_channels" => self.train.surr_conv_channels.to_string(),
            "surr_width" => self.train.surr_width.to_string(),
            "sharing" => sharing_name(self.train.sharing).into(),
            "variant" => self.train.variant.name().into(),
            "gap_mode" => gap_name(self.train.gap_mode).into(),
            "history" => history_name(self.train.history).into(),
            "target_epochs" => self.target.epochs.to_string(),
            "target_lr" => self.target.lr.to_string(),
            "target_batch_size" => self.target.batch_size.to_string(),
            "target_conv_channels" => self.target.conv_channels.to_string(),
            "target_width" => self.target.width.to_string(),
            "methods" => join(self.methods.iter().map(|m| m.name().to_string()).collect()),
            "seeds" => join(self.seeds.iter().map(|s| s.to_string()).collect()),
            "tasks" if self.tasks.is_empty() => return None,
            "tasks" => join(self.tasks.clone()),
            "spectrum_probes" => self.spectrum.probes.to_string(),
            "spectrum_steps" => self.spectrum.lanczos_steps.to_string(),
            "power_iters" => self.spectrum.power_iters.to_string(),
            "spectrum_batch" => self.spectrum.batch.to_string(),
            "output_dir" => return self.output_dir.as_ref().map(|p| p.display().to_string()),
            _ => return None,
        })
    }

    /// Canonical text form: every key in [`KEYS`] order. Parsing it gives
    /// back an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Some(v) = self.get(key) {
                out.push_str(&format!("{key} = {v}\n"));
            }
        }
        out
    }

    /// Checks every cardinality and positivity constraint of the pipeline.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.target.validate()?;
        let s = &self.suite;
        if !(2..=6).contains(&s.num_seen) {
            return Err(Error::Validation(format!("num_seen must lie in 2..=6, got {}", s.num_seen)));
        }
        if !(1..=3).contains(&s.num_unseen) {
            return Err(Error::Validation(format!("num_unseen must lie in 1..=3, got {}", s.num_unseen)));
        }
        if !(1..=3).contains(&s.dims.channels) {
            return Err(Error::Validation("channels must lie in 1..=3".into()));
        }
        if s.dims.height < 8 || s.dims.width < 8 {
            return Err(Error::Validation("height and width must be at least 8".into()));
        }
        if s.train_size == 0 || s.test_size == 0 {
            return Err(Error::Validation("train_size and test_size must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Validation("seeds must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Validation("methods must not be empty".into()));
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::Validation("seeds must be distinct".into()));
        }
        self.spectrum.validate()
    }
}

/// Parses config text on top of the defaults, then validates.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .or_else(|| line.split_once(':'))
            .ok_or_else(|| Error::Parse {
                line: line_no,
                key: line.to_string(),
                message: "expected `key = value`".into(),
            })?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(Error::Parse {
                line: line_no,
                key: key.into(),
                message: "unknown key".into(),
            });
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::Parse {
                line: line_no,
                key: key.into(),
                message: "duplicate key".into(),
            });
        }
        cfg.set(key, value).map_err(|message| Error::Parse {
            line: line_no,
            key: key.into(),
            message,
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
