//! Experiment configuration files.
//!
//! The format is line oriented:
//!
//! ```text
//! # comment
//! [section]
//! key = value            # trailing comments are allowed
//! list = 1.0, 0.99, 0.9
//! ```
//!
//! Sections and keys are listed in `ExperimentConfig::parse`; anything else is
//! rejected with the offending line and key.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow_matching::{CouplingMode, OdeMethod};
use crate::measures::{DatasetKind, DatasetSpec};
use crate::monge_gap::MgCoupling;
use crate::solver::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Solve the discrete coupling only.
    CouplingOnly,
    Fm,
    MongeGap,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::CouplingOnly => "coupling_only",
            Estimator::Fm => "fm",
            Estimator::MongeGap => "monge_gap",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "coupling_only" => Some(Self::CouplingOnly),
            "fm" => Some(Self::Fm),
            "monge_gap" => Some(Self::MongeGap),
            _ => None,
        }
    }
}

/// How batches are paired during training. For `monge_gap` the OT modes map
/// to balanced / rebalanced batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    Independent,
    Balanced,
    Unbalanced,
}

impl Coupling {
    pub fn name(self) -> &'static str {
        match self {
            Coupling::Independent => "independent",
            Coupling::Balanced => "balanced",
            Coupling::Unbalanced => "unbalanced",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "independent" => Some(Self::Independent),
            "balanced" | "balanced_ot" => Some(Self::Balanced),
            "unbalanced" | "unbalanced_ot" => Some(Self::Unbalanced),
            _ => None,
        }
    }

    pub fn fm_mode(self) -> CouplingMode {
        match self {
            Coupling::Independent => CouplingMode::Independent,
            Coupling::Balanced => CouplingMode::BalancedOt,
            Coupling::Unbalanced => CouplingMode::UnbalancedOt,
        }
    }

    pub fn mg_mode(self) -> MgCoupling {
        match self {
            Coupling::Unbalanced => MgCoupling::Unbalanced,
            _ => MgCoupling::Balanced,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    /// Gaussian path noise of flow matching.
    pub sigma: f64,
    pub ode_steps: usize,
    pub ode_method: OdeMethod,
    /// Solver tolerance used for batch couplings during training.
    pub batch_tolerance: f64,
    pub fitting_weight: f64,
    pub gap_weight: f64,
    /// eps of the Monge gap and fitting term as a fraction of the mean cost.
    pub gap_epsilon_scale: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 128,
            learning_rate: 1e-3,
            hidden: vec![128, 128, 128],
            sigma: 0.0,
            ode_steps: 100,
            ode_method: OdeMethod::Rk4,
            batch_tolerance: 1e-4,
            fitting_weight: 1.0,
            gap_weight: 1.0,
            gap_epsilon_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub estimator: Estimator,
    pub coupling: Coupling,
    pub taus: Vec<f64>,
    pub solver: SolverConfig,
    pub training: TrainingSection,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::uniform_mixture(0),
            estimator: Estimator::CouplingOnly,
            coupling: Coupling::Unbalanced,
            taus: vec![1.0],
            solver: SolverConfig::default(),
            training: TrainingSection::default(),
            seeds: vec![0],
            output: PathBuf::from("out"),
        }
    }
}

fn err(line: usize, message: impl Into<String>) -> Error {
    Error::Config { line, message: message.into() }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| err(line, format!("invalid value {value:?} for key {key}")))
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse_num(line, key, v.trim())).collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        if cfg.output.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.output = dir.join(&cfg.output);
            }
        }
        Ok(cfg)
    }

    /// Parses a configuration; keys not present keep their defaults. The
    /// dataset kind, when given, must precede the other dataset keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut dataset_seed = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err(line, format!("malformed section header {content:?}")))?.trim();
                if !["dataset", "estimator", "solver", "training", "run"].contains(&name) {
                    return Err(err(line, format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| err(line, format!("expected key = value, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let full = format!("{section}.{key}");
            let unknown_value = || err(line, format!("unknown value {value:?} for key {full}"));
            match (section.as_str(), key) {
                ("dataset", "kind") => {
                    let kind = DatasetKind::from_name(value).ok_or_else(unknown_value)?;
                    let seed = cfg.dataset.seed;
                    cfg.dataset = match kind {
                        DatasetKind::UniformMixture => DatasetSpec::uniform_mixture(seed),
                        DatasetKind::GaussianImbalance => DatasetSpec::gaussian_imbalance(seed),
                        DatasetKind::GaussianOutliers => DatasetSpec::gaussian_outliers(seed, 0.1),
                    };
                }
                ("dataset", "seed") => dataset_seed = Some(parse_num(line, &full, value)?),
                ("dataset", "source_counts") => cfg.dataset.source_counts = parse_list(line, &full, value)?,
                ("dataset", "target_counts") => cfg.dataset.target_counts = parse_list(line, &full, value)?,
                ("dataset", "noise_scale") => cfg.dataset.noise_scale = parse_num(line, &full, value)?,
                ("dataset", "outlier_fraction") => cfg.dataset.outlier_fraction = parse_num(line, &full, value)?,
                ("estimator", "name") => cfg.estimator = Estimator::from_name(value).ok_or_else(unknown_value)?,
                ("estimator", "coupling_mode") => cfg.coupling = Coupling::from_name(value).ok_or_else(unknown_value)?,
                ("estimator", "taus") => cfg.taus = parse_list(line, &full, value)?,
                ("solver", "epsilon_scale") => cfg.solver.epsilon_scale = parse_num(line, &full, value)?,
                ("solver", "epsilon_abs") => cfg.solver.epsilon_abs = Some(parse_num(line, &full, value)?),
                ("solver", "max_iters") => cfg.solver.max_iters = parse_num(line, &full, value)?,
                ("solver", "tolerance") => cfg.solver.tolerance = parse_num(line, &full, value)?,
                ("solver", "divergence") => {
                    if value != "kl" {
                        return Err(unknown_value());
                    }
                }
                ("training", "iterations") => cfg.training.iterations = parse_num(line, &full, value)?,
                ("training", "batch_size") => cfg.training.batch_size = parse_num(line, &full, value)?,
                ("training", "learning_rate") => cfg.training.learning_rate = parse_num(line, &full, value)?,
                ("training", "hidden") => cfg.training.hidden = parse_list(line, &full, value)?,
                ("training", "sigma") => cfg.training.sigma = parse_num(line, &full, value)?,
                ("training", "ode_steps") => cfg.training.ode_steps = parse_num(line, &full, value)?,
                ("training", "ode_method") => cfg.training.ode_method = OdeMethod::from_name(value).ok_or_else(unknown_value)?,
                ("training", "batch_tolerance") => cfg.training.batch_tolerance = parse_num(line, &full, value)?,
                ("training", "fitting_weight") => cfg.training.fitting_weight = parse_num(line, &full, value)?,
                ("training", "gap_weight") => cfg.training.gap_weight = parse_num(line, &full, value)?,
                ("training", "gap_epsilon_scale") => cfg.training.gap_epsilon_scale = parse_num(line, &full, value)?,
                ("run", "seeds") => cfg.seeds = parse_list(line, &full, value)?,
                ("run", "output") => cfg.output = PathBuf::from(value),
                ("", _) => return Err(err(line, format!("key {key} outside of a section"))),
                _ => return Err(err(line, format!("unknown key {full}"))),
            }
        }
        if let Some(seed) = dataset_seed {
            cfg.dataset.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.taus.is_empty() {
            return Err(err(0, "estimator.taus must not be empty"));
        }
        for &tau in &self.taus {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::OutOfRange { name: "tau", value: tau, allowed: "(0, 1]" });
            }
        }
        if self.seeds.is_empty() {
            return Err(err(0, "run.seeds must list at least one seed"));
        }
        self.solver.validate()?;
        let t = &self.training;
        if t.hidden.is_empty() || t.hidden.contains(&0) {
            return Err(err(0, "training.hidden must list positive layer sizes"));
        }
        if t.ode_steps == 0 {
            return Err(Error::OutOfRange { name: "ode_steps", value: 0.0, allowed: ">= 1" });
        }
        if !(t.learning_rate > 0.0) {
            return Err(Error::OutOfRange { name: "learning_rate", value: t.learning_rate, allowed: "> 0" });
        }
        if self.estimator == Estimator::MongeGap && self.coupling == Coupling::Independent {
            return Err(err(0, "estimator.coupling_mode independent is not available for monge_gap"));
        }
        Ok(())
    }

    /// The tau values actually run: modes without an unbalanced coupling
    /// ignore the grid and use tau = 1.
    pub fn effective_taus(&self) -> Vec<f64> {
        match (self.estimator, self.coupling) {
            (Estimator::CouplingOnly, _) | (_, Coupling::Unbalanced) => self.taus.clone(),
            _ => vec![1.0],
        }
    }
}
