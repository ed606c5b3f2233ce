//! TOML experiment files.
//!
//! ```toml
//! [problem]
//! m = 1000
//! n = 500
//!
//! [priors]
//! u = { kind = "gaussian", mean = 0.0, variance = 1.0 }
//! v = { kind = "bernoulli_exponential", sparsity = 0.1, rate = 1.0 }
//!
//! [rules]
//! families = ["linear", "mmse"]
//! init_v = "prior_mean"
//!
//! [sweep]
//! snr_db = [-5.0, 0.0, 5.0]
//! trials = 50
//! iters = 10
//! master_seed = 7
//! baseline = true
//!
//! [output]
//! tolerance = 0.05
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Prior;
use crate::montecarlo::{ExperimentConfig, InitPolicy, RuleFamily};
use crate::selection::ScalarCost;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub m: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorsSection {
    pub u: Prior,
    pub v: Prior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    Linear,
    Mmse,
    Prox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulesSection {
    pub families: Vec<FamilyName>,
    #[serde(default)]
    pub init_v: InitPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prox_cost_u: Option<ScalarCost>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prox_cost_v: Option<ScalarCost>,
}

fn default_baseline_iters() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub snr_db: Vec<f64>,
    pub trials: usize,
    pub iters: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub baseline: bool,
    #[serde(default = "default_baseline_iters")]
    pub baseline_iters: usize,
}

fn default_tolerance() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_true")]
    pub write_trials: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { tolerance: default_tolerance(), write_trials: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub problem: ProblemSection,
    pub priors: PriorsSection,
    pub rules: RulesSection,
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// 1-based line of byte offset `offset`.
fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// 1-based line on which `key` is assigned, if it appears.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

fn semantic_error(text: &str, key: &str, msg: impl Into<String>) -> Error {
    let msg = msg.into();
    match line_of_key(text, key) {
        Some(line) => Error::Config(format!("line {line}: {msg}")),
        None => Error::Config(msg),
    }
}

impl ConfigFile {
    /// Parses and validates a configuration document.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start)).unwrap_or(1);
            Error::Config(format!("line {line}: {}", e.message()))
        })?;
        cfg.check(text)?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn check(&self, text: &str) -> Result<()> {
        if self.problem.m == 0 {
            return Err(semantic_error(text, "m", "m must be positive"));
        }
        if self.problem.n == 0 {
            return Err(semantic_error(text, "n", "n must be positive"));
        }
        self.priors.u.validate().map_err(|e| semantic_error(text, "u", e.to_string()))?;
        self.priors.v.validate().map_err(|e| semantic_error(text, "v", e.to_string()))?;
        if self.sweep.trials == 0 {
            return Err(semantic_error(text, "trials", "trials must be at least 1"));
        }
        if self.sweep.iters == 0 {
            return Err(semantic_error(text, "iters", "iters must be at least 1"));
        }
        if self.sweep.snr_db.is_empty() {
            return Err(semantic_error(text, "snr_db", "snr grid is empty"));
        }
        if self.sweep.snr_db.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY)
            || self.sweep.snr_db.windows(2).any(|w| !(w[0] < w[1]))
        {
            return Err(semantic_error(text, "snr_db", "snr grid must be strictly increasing"));
        }
        if self.sweep.baseline && self.sweep.baseline_iters == 0 {
            return Err(semantic_error(text, "baseline_iters", "baseline_iters must be at least 1"));
        }
        if self.rules.families.is_empty() && !self.sweep.baseline {
            return Err(semantic_error(text, "families", "no rule family and no baseline selected"));
        }
        let wants_prox = self.rules.families.contains(&FamilyName::Prox);
        if wants_prox && (self.rules.prox_cost_u.is_none() || self.rules.prox_cost_v.is_none()) {
            return Err(semantic_error(text, "families", "prox family needs prox_cost_u and prox_cost_v"));
        }
        for (key, cost) in [("prox_cost_u", &self.rules.prox_cost_u), ("prox_cost_v", &self.rules.prox_cost_v)] {
            if let Some(c) = cost {
                c.validate().map_err(|e| semantic_error(text, key, e.to_string()))?;
            }
        }
        if !(self.output.tolerance > 0.0) {
            return Err(semantic_error(text, "tolerance", "tolerance must be positive"));
        }
        Ok(())
    }

    pub fn families(&self) -> Vec<RuleFamily> {
        let mut out = Vec::new();
        for f in &self.rules.families {
            let fam = match f {
                FamilyName::Linear => RuleFamily::Linear,
                FamilyName::Mmse => RuleFamily::Mmse,
                FamilyName::Prox => RuleFamily::Prox {
                    cost_u: self.rules.prox_cost_u.unwrap_or(ScalarCost::Zero),
                    cost_v: self.rules.prox_cost_v.unwrap_or(ScalarCost::Zero),
                },
            };
            if !out.contains(&fam) {
                out.push(fam);
            }
        }
        out
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            m: self.problem.m,
            n: self.problem.n,
            prior_u: self.priors.u,
            prior_v: self.priors.v,
            families: self.families(),
            snr_grid_db: self.sweep.snr_db.clone(),
            trials: self.sweep.trials,
            iters: self.sweep.iters,
            master_seed: self.sweep.master_seed,
            baseline: self.sweep.baseline,
            baseline_iters: self.sweep.baseline_iters,
            init_v: self.rules.init_v,
        }
    }

    /// The inverse of [`ConfigFile::experiment`].
    pub fn from_experiment(exp: &ExperimentConfig, output: OutputSection) -> Self {
        let mut prox_cost_u = None;
        let mut prox_cost_v = None;
        let families = exp
            .families
            .iter()
            .map(|f| match f {
                RuleFamily::Linear => FamilyName::Linear,
                RuleFamily::Mmse => FamilyName::Mmse,
                RuleFamily::Prox { cost_u, cost_v } => {
                    prox_cost_u = Some(*cost_u);
                    prox_cost_v = Some(*cost_v);
                    FamilyName::Prox
                }
            })
            .collect();
        Self {
            problem: ProblemSection { m: exp.m, n: exp.n },
            priors: PriorsSection { u: exp.prior_u, v: exp.prior_v },
            rules: RulesSection { families, init_v: exp.init_v, prox_cost_u, prox_cost_v },
            sweep: SweepSection {
                snr_db: exp.snr_grid_db.clone(),
                trials: exp.trials,
                iters: exp.iters,
                master_seed: exp.master_seed,
                baseline: exp.baseline,
                baseline_iters: exp.baseline_iters,
            },
            output,
        }
    }
}
