//! SNR sweeps over independent random instances, with per-iteration medians
//! set against the deterministic predictions.

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iterfac::{self, correlation, DampingMode, InitV, IterFacConfig, LambdaMode};
use crate::model::{generate_problem, snr_to_tau_w, stream_rng, Prior, RankOneProblem};
use crate::selection::{LambdaSchedule, ScalarCost, SelectionRule, Side};
use crate::state_evolution::{
    mmse_initial_rho_v, se_linear_fixed_point, se_linear_trajectory, se_mmse_trajectory,
    se_trajectory, ExpectationEngine, SEState, SeConfig,
};

/// Selection-rule family applied to both sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleFamily {
    Linear,
    Mmse,
    Prox { cost_u: ScalarCost, cost_v: ScalarCost },
}

impl RuleFamily {
    pub fn label(&self) -> &'static str {
        match self {
            RuleFamily::Linear => "linear",
            RuleFamily::Mmse => "mmse",
            RuleFamily::Prox { .. } => "prox",
        }
    }
}

/// Starting point for `v(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Every component equal to `E[V0]`.
    #[default]
    PriorMean,
    /// Random direction, independent of the instance.
    RandomUnit,
}

pub const BASELINE_LABEL: &str = "svd";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub m: usize,
    pub n: usize,
    pub prior_u: Prior,
    pub prior_v: Prior,
    pub families: Vec<RuleFamily>,
    pub snr_grid_db: Vec<f64>,
    pub trials: usize,
    pub iters: usize,
    pub master_seed: u64,
    pub baseline: bool,
    pub baseline_iters: usize,
    pub init_v: InitPolicy,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Config(format!("m = {}, n = {} must be positive", self.m, self.n)));
        }
        self.prior_u.validate()?;
        self.prior_v.validate()?;
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.iters == 0 {
            return Err(Error::Config("iters must be at least 1".into()));
        }
        if self.baseline && self.baseline_iters == 0 {
            return Err(Error::Config("baseline_iters must be at least 1".into()));
        }
        if self.snr_grid_db.is_empty() {
            return Err(Error::Config("snr grid is empty".into()));
        }
        if self.snr_grid_db.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("snr grid must be strictly increasing".into()));
        }
        if self.snr_grid_db.iter().any(|s| s.is_nan()) {
            return Err(Error::Config("snr grid contains NaN".into()));
        }
        if self.families.is_empty() && !self.baseline {
            return Err(Error::Config("no rule family and no baseline selected".into()));
        }
        for f in &self.families {
            if let RuleFamily::Prox { cost_u, cost_v } = f {
                cost_u.validate()?;
                cost_v.validate()?;
            }
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        self.n as f64 / self.m as f64
    }

    pub fn tau_w(&self, snr_db: f64) -> f64 {
        snr_to_tau_w(snr_db, self.prior_u.second_moment(), self.prior_v.second_moment())
    }
}

/// One instance's outcome for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    /// `ρ_u(t)`, `ρ_v(t)` for `t = 0..=iters` (a single entry for the baseline).
    pub rho_u: Vec<f64>,
    pub rho_v: Vec<f64>,
    /// `"ok"` or the failure message.
    pub status: String,
}

impl TrialRecord {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Results for one (SNR, method) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub snr_db: f64,
    pub tau_w: f64,
    pub method: String,
    /// Iteration index of each entry in the curves below.
    pub iters: Vec<usize>,
    pub median_rho_u: Vec<f64>,
    pub median_rho_v: Vec<f64>,
    pub se_rho_u: Vec<f64>,
    pub se_rho_v: Vec<f64>,
    pub trials: Vec<TrialRecord>,
    pub trials_ok: usize,
    pub trials_failed: usize,
    pub degraded: bool,
    /// Why the prediction is missing, if it could not be computed.
    pub se_error: Option<String>,
}

impl SweepCell {
    pub fn final_median_rho_v(&self) -> f64 {
        *self.median_rho_v.last().expect("nonempty curve")
    }

    pub fn final_se_rho_v(&self) -> f64 {
        *self.se_rho_v.last().expect("nonempty curve")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn degraded(&self) -> bool {
        self.cells.iter().any(|c| c.degraded)
    }

    pub fn cell(&self, snr_db: f64, method: &str) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.snr_db == snr_db && c.method == method)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for trial `trial` at grid point `snr_index`.
pub fn trial_seed(master: u64, snr_index: usize, trial: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ snr_index as u64) ^ trial as u64)
}

/// Median of the values; an even count averages the middle pair.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Power-iteration estimate of the leading singular pair.
#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub u_hat: Array1<f64>,
    pub v_hat: Array1<f64>,
    pub rho_u: f64,
    pub rho_v: f64,
}

/// Alternating power iteration `u ← A·v/‖A·v‖`, `v ← Aᵀ·u/‖Aᵀ·u‖` from a
/// seeded random unit vector.
pub fn svd_baseline(problem: &RankOneProblem, iters: usize, seed: u64) -> Result<BaselineResult> {
    if iters == 0 {
        return Err(Error::InvalidArgument("baseline needs at least one iteration".into()));
    }
    let g = Prior::Gaussian { mean: 0.0, variance: 1.0 };
    let mut v = g.sample(&mut stream_rng(seed, 4), problem.n);
    let mut u = Array1::zeros(problem.m);
    for _ in 0..iters {
        u = problem.a.dot(&v);
        let nu = u.dot(&u).sqrt();
        if nu == 0.0 || !nu.is_finite() {
            return Err(Error::ZeroMatrix);
        }
        u /= nu;
        v = problem.a.t().dot(&u);
        let nv = v.dot(&v).sqrt();
        if nv == 0.0 || !nv.is_finite() {
            return Err(Error::ZeroMatrix);
        }
        v /= nv;
    }
    Ok(BaselineResult {
        rho_u: correlation(u.view(), problem.u0.view()),
        rho_v: correlation(v.view(), problem.v0.view()),
        u_hat: u,
        v_hat: v,
    })
}

/// Engine settings for one rule family.
pub fn family_setup(
    family: &RuleFamily,
    cfg: &ExperimentConfig,
    init_seed: u64,
) -> Result<(SelectionRule, SelectionRule, IterFacConfig)> {
    let init_v = match cfg.init_v {
        InitPolicy::PriorMean => InitV::PriorMean(cfg.prior_v),
        InitPolicy::RandomUnit => InitV::RandomUnit(init_seed),
    };
    let mut ic = IterFacConfig::new(init_v);
    ic.max_iters = cfg.iters;
    ic.damping = DampingMode::Analysis;
    let (ru, rv) = match family {
        RuleFamily::Linear => {
            ic.lambda_mode = LambdaMode::Analysis(LambdaSchedule::constant(1.0));
            (SelectionRule::linear(Side::U), SelectionRule::linear(Side::V))
        }
        RuleFamily::Mmse => {
            ic.lambda_mode = LambdaMode::Analysis(LambdaSchedule::constant(1.0));
            (SelectionRule::mmse(Side::U, cfg.prior_u)?, SelectionRule::mmse(Side::V, cfg.prior_v)?)
        }
        RuleFamily::Prox { cost_u, cost_v } => {
            ic.lambda_mode = LambdaMode::Analysis(LambdaSchedule::second_moments(cfg.beta()));
            (SelectionRule::prox(Side::U, *cost_u)?, SelectionRule::prox(Side::V, *cost_v)?)
        }
    };
    Ok((ru, rv, ic))
}

/// Predicted `(ρ_u(t), ρ_v(t))`, `t = 0..=iters`, for a family at noise `tau_w`.
pub fn se_prediction(
    family: &RuleFamily,
    cfg: &ExperimentConfig,
    tau_w: f64,
    engine: &ExpectationEngine,
) -> Result<Vec<(f64, f64)>> {
    let (tau_u, tau_v) = (cfg.prior_u.second_moment(), cfg.prior_v.second_moment());
    let beta = cfg.beta();
    let rho_v0 = match cfg.init_v {
        InitPolicy::PriorMean => mmse_initial_rho_v(&cfg.prior_v),
        InitPolicy::RandomUnit => 0.0,
    };
    match family {
        RuleFamily::Linear => Ok(se_linear_trajectory(rho_v0, beta, tau_u, tau_v, tau_w, cfg.iters)),
        RuleFamily::Mmse => se_mmse_trajectory(rho_v0, beta, tau_w, &cfg.prior_u, &cfg.prior_v, cfg.iters, engine),
        RuleFamily::Prox { .. } => {
            let traj = se_states(family, cfg, tau_w, engine)?;
            Ok(traj.iter().map(|s| (s.rho_u, s.rho_v)).collect())
        }
    }
}

/// Full recursion states `t = 0..=iters` for a family at noise `tau_w`,
/// including the `ᾱ` moments and the `λ` values of each step.
pub fn se_states(
    family: &RuleFamily,
    cfg: &ExperimentConfig,
    tau_w: f64,
    engine: &ExpectationEngine,
) -> Result<Vec<SEState>> {
    let (ru, rv, ic) = family_setup(family, cfg, 0)?;
    let lambda = match ic.lambda_mode {
        LambdaMode::Analysis(s) => s,
        LambdaMode::Descent => unreachable!("sweep families use analysis-mode lambda"),
    };
    let se_cfg = SeConfig {
        prior_u: cfg.prior_u,
        prior_v: cfg.prior_v,
        beta: cfg.beta(),
        tau_w,
        rule_u: ru,
        rule_v: rv,
        lambda,
    };
    let init = match cfg.init_v {
        InitPolicy::PriorMean => SEState::initial_prior_mean(&cfg.prior_v),
        InitPolicy::RandomUnit => SEState::from_rho_v(&cfg.prior_v, 0.0)?,
    };
    se_trajectory(init, &se_cfg, cfg.iters, engine)
}

struct TrialOutcome {
    snr_index: usize,
    trial: usize,
    seed: u64,
    per_method: Vec<std::result::Result<(Vec<f64>, Vec<f64>), String>>,
}

fn run_trial(cfg: &ExperimentConfig, snr_index: usize, trial: usize) -> TrialOutcome {
    let seed = trial_seed(cfg.master_seed, snr_index, trial);
    let tau_w = cfg.tau_w(cfg.snr_grid_db[snr_index]);
    let slots = cfg.families.len() + usize::from(cfg.baseline);
    let problem = match generate_problem(cfg.m, cfg.n, &cfg.prior_u, &cfg.prior_v, tau_w, seed) {
        Ok(p) => p,
        Err(e) => {
            return TrialOutcome { snr_index, trial, seed, per_method: vec![Err(e.to_string()); slots] };
        }
    };
    let mut per_method = Vec::with_capacity(slots);
    for family in &cfg.families {
        let outcome = family_setup(family, cfg, seed)
            .and_then(|(ru, rv, ic)| iterfac::run(&problem, &ru, &rv, &ic))
            .map(|traj| (traj.rho_u(), traj.rho_v()))
            .map_err(|e| e.to_string());
        per_method.push(outcome);
    }
    if cfg.baseline {
        let outcome = svd_baseline(&problem, cfg.baseline_iters, seed)
            .map(|b| (vec![b.rho_u], vec![b.rho_v]))
            .map_err(|e| e.to_string());
        per_method.push(outcome);
    }
    TrialOutcome { snr_index, trial, seed, per_method }
}

fn assemble_cell(
    snr_db: f64,
    tau_w: f64,
    method: String,
    iters: Vec<usize>,
    se: std::result::Result<Vec<(f64, f64)>, String>,
    trials: Vec<TrialRecord>,
) -> SweepCell {
    let (se, se_error) = match se {
        Ok(se) => (se, None),
        Err(msg) => (vec![(f64::NAN, f64::NAN); iters.len()], Some(msg)),
    };
    let ok: Vec<&TrialRecord> = trials.iter().filter(|t| t.ok()).collect();
    let trials_ok = ok.len();
    let trials_failed = trials.len() - trials_ok;
    let curve = |pick: fn(&TrialRecord) -> &Vec<f64>| -> Vec<f64> {
        (0..iters.len())
            .map(|k| {
                let vals: Vec<f64> = ok.iter().map(|t| pick(t)[k]).filter(|x| x.is_finite()).collect();
                median(&vals)
            })
            .collect()
    };
    let median_rho_u = curve(|t| &t.rho_u);
    let median_rho_v = curve(|t| &t.rho_v);
    let degraded = trials_failed * 10 > trials.len();
    SweepCell {
        snr_db,
        tau_w,
        method,
        iters,
        median_rho_u,
        median_rho_v,
        se_rho_u: se.iter().map(|p| p.0).collect(),
        se_rho_v: se.iter().map(|p| p.1).collect(),
        trials,
        trials_ok,
        trials_failed,
        degraded,
        se_error,
    }
}

/// Runs every trial at every grid point. Trials execute on the current rayon
/// pool; results are keyed by index so the output does not depend on the
/// schedule.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    if cfg.snr_grid_db.iter().any(|s| !s.is_finite()) {
        return Err(Error::Config("Monte Carlo sweeps need finite SNR values".into()));
    }
    let engine = ExpectationEngine::default();
    let work: Vec<(usize, usize)> = (0..cfg.snr_grid_db.len())
        .flat_map(|s| (0..cfg.trials).map(move |t| (s, t)))
        .collect();
    let mut outcomes: Vec<TrialOutcome> = work.par_iter().map(|&(s, t)| run_trial(cfg, s, t)).collect();
    outcomes.sort_by_key(|o| (o.snr_index, o.trial));

    let mut cells = Vec::new();
    for (s, &snr_db) in cfg.snr_grid_db.iter().enumerate() {
        let tau_w = cfg.tau_w(snr_db);
        let row: Vec<&TrialOutcome> = outcomes.iter().filter(|o| o.snr_index == s).collect();
        let mut methods: Vec<(String, Vec<usize>, std::result::Result<Vec<(f64, f64)>, String>)> = Vec::new();
        for family in &cfg.families {
            let se = se_prediction(family, cfg, tau_w, &engine).map_err(|e| e.to_string());
            methods.push((family.label().to_string(), (0..=cfg.iters).collect(), se));
        }
        if cfg.baseline {
            let fp = se_linear_fixed_point(
                cfg.beta(),
                cfg.prior_u.second_moment(),
                cfg.prior_v.second_moment(),
                tau_w,
            );
            methods.push((BASELINE_LABEL.to_string(), vec![cfg.baseline_iters], Ok(vec![fp])));
        }
        for (k, (label, iters, se)) in methods.into_iter().enumerate() {
            let len = iters.len();
            let trials = row
                .iter()
                .map(|o| match &o.per_method[k] {
                    Ok((ru, rv)) => TrialRecord {
                        trial: o.trial,
                        seed: o.seed,
                        rho_u: ru.clone(),
                        rho_v: rv.clone(),
                        status: "ok".into(),
                    },
                    Err(msg) => TrialRecord {
                        trial: o.trial,
                        seed: o.seed,
                        rho_u: vec![f64::NAN; len],
                        rho_v: vec![f64::NAN; len],
                        status: msg.clone(),
                    },
                })
                .collect();
            cells.push(assemble_cell(snr_db, tau_w, label, iters, se, trials));
        }
    }
    Ok(SweepResult { cells })
}

/// Deviation of one cell's final medians from the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct CellDeviation {
    pub snr_db: f64,
    pub method: String,
    pub deviation_rho_u: f64,
    pub deviation_rho_v: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub cells: Vec<CellDeviation>,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `|median ρ − predicted ρ|` at the final iteration of every cell.
pub fn compare_to_se(sweep: &SweepResult, tolerance: f64) -> ComparisonReport {
    let cells: Vec<CellDeviation> = sweep
        .cells
        .iter()
        .map(|c| {
            let du = (c.median_rho_u.last().copied().unwrap_or(f64::NAN)
                - c.se_rho_u.last().copied().unwrap_or(f64::NAN))
            .abs();
            let dv = (c.final_median_rho_v() - c.final_se_rho_v()).abs();
            CellDeviation {
                snr_db: c.snr_db,
                method: c.method.clone(),
                deviation_rho_u: du,
                deviation_rho_v: dv,
                pass: du <= tolerance && dv <= tolerance,
            }
        })
        .collect();
    let max_deviation = cells
        .iter()
        .map(|c| c.deviation_rho_u.max(c.deviation_rho_v))
        .fold(0.0, |a: f64, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });
    let pass = cells.iter().all(|c| c.pass);
    ComparisonReport { cells, max_deviation, tolerance, pass }
}
