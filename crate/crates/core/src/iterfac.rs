//! The alternating rank-one estimator: a linearized observation of each
//! factor is formed from the data matrix plus a damping correction, then
//! passed through a componentwise selection rule.

use ndarray::{Array1, ArrayView1, Zip};

use crate::error::{Error, Result};
use crate::model::{stream_rng, Prior, RankOneProblem};
use crate::selection::{
    lambda_update, Channel, LambdaRule, LambdaSchedule, LambdaStats, RuleKind, ScalarCost,
    SelectionRule, Side,
};

/// How the damping factors `μ_u`, `μ_v` are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DampingMode {
    /// Derivative-based correction: `μ_v(t) = −(τ_w/m)Σ_i G_u'(p_i)` and
    /// `μ_u(t+1) = −(τ_w/m)Σ_j G_v'(q_j)`, starting from `μ_u(0) = 0`.
    Analysis,
    /// Fixed nonnegative factors; with [`LambdaMode::Descent`] every half
    /// step is a majorize-minimize step on the penalized objective.
    Descent { mu_u: f64, mu_v: f64 },
}

/// How `λ_u`, `λ_v` are chosen.
#[derive(Debug, Clone)]
pub enum LambdaMode {
    /// `λ_u = μ_u + ‖v(t)‖²/m`, `λ_v = μ_v + ‖u(t+1)‖²/m`.
    Descent,
    /// Empirical averages of the registered adaptation functions.
    Analysis(LambdaSchedule),
}

#[derive(Debug, Clone)]
pub enum InitV {
    /// Every component set to the prior mean.
    PriorMean(Prior),
    /// Uniformly random direction with unit norm.
    RandomUnit(u64),
    Explicit(Array1<f64>),
}

#[derive(Debug, Clone)]
pub enum InitU {
    Zeros,
    Explicit(Array1<f64>),
}

#[derive(Debug, Clone)]
pub struct IterFacConfig {
    pub max_iters: usize,
    pub damping: DampingMode,
    pub lambda_mode: LambdaMode,
    pub init_v: InitV,
    pub init_u: InitU,
    pub record_objective: bool,
    /// Multiplier on the analysis-mode damping; only ever changed to build
    /// broken fixtures for the self-check.
    #[doc(hidden)]
    pub damping_sign: f64,
}

impl IterFacConfig {
    pub fn new(init_v: InitV) -> Self {
        Self {
            max_iters: 10,
            damping: DampingMode::Analysis,
            lambda_mode: LambdaMode::Analysis(LambdaSchedule::constant(1.0)),
            init_v,
            init_u: InitU::Zeros,
            record_objective: false,
            damping_sign: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DampingMode::Descent { mu_u, mu_v } = self.damping {
            if !(mu_u >= 0.0 && mu_v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "descent damping must be nonnegative (got mu_u = {mu_u}, mu_v = {mu_v})"
                )));
            }
        }
        Ok(())
    }
}

/// Estimates and second-order statistics after `t` iterations.
#[derive(Debug, Clone)]
pub struct IterateRecord {
    pub t: usize,
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    pub alpha_u0: f64,
    pub alpha_u1: f64,
    pub alpha_v0: f64,
    pub alpha_v1: f64,
    pub rho_u: f64,
    pub rho_v: f64,
    pub objective: Option<f64>,
}

/// Quantities produced while moving from iterate `t` to `t + 1`.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub p: Array1<f64>,
    pub q: Array1<f64>,
    pub lambda_u: f64,
    pub lambda_v: f64,
    pub mu_u: f64,
    pub mu_v: f64,
}

#[derive(Debug, Clone)]
pub struct IterFacTrajectory {
    /// `max_iters + 1` entries, starting with the initial condition.
    pub iterates: Vec<IterateRecord>,
    /// `max_iters` entries.
    pub steps: Vec<StepRecord>,
}

impl IterFacTrajectory {
    pub fn rho_u(&self) -> Vec<f64> {
        self.iterates.iter().map(|r| r.rho_u).collect()
    }

    pub fn rho_v(&self) -> Vec<f64> {
        self.iterates.iter().map(|r| r.rho_v).collect()
    }

    pub fn objectives(&self) -> Option<Vec<f64>> {
        self.iterates.iter().map(|r| r.objective).collect()
    }

    pub fn last(&self) -> &IterateRecord {
        self.iterates.last().expect("trajectory holds the initial iterate")
    }
}

/// Squared cosine between `x` and `x0`; zero if either vector vanishes.
pub fn correlation(x: ArrayView1<f64>, x0: ArrayView1<f64>) -> f64 {
    let nx = x.dot(&x);
    let n0 = x0.dot(&x0);
    if nx == 0.0 || n0 == 0.0 {
        return 0.0;
    }
    let c = x.dot(&x0);
    (c * c / (nx * n0)).min(1.0)
}

/// `(ρ_u(t), ρ_v(t))` for every recorded iterate.
pub fn empirical_correlations(
    trajectory: &IterFacTrajectory,
    problem: &RankOneProblem,
) -> (Vec<f64>, Vec<f64>) {
    trajectory
        .iterates
        .iter()
        .map(|r| (correlation(r.u.view(), problem.u0.view()), correlation(r.v.view(), problem.v0.view())))
        .unzip()
}

/// `(1/2m)‖A − u·vᵀ‖²_F + Σ c_u(u_i) + Σ c_v(v_j)`, evaluated entrywise.
pub fn objective(
    problem: &RankOneProblem,
    u: ArrayView1<f64>,
    v: ArrayView1<f64>,
    cost_u: &ScalarCost,
    cost_v: &ScalarCost,
) -> Result<f64> {
    if u.len() != problem.m || v.len() != problem.n {
        return Err(Error::DimensionMismatch(format!(
            "u has {} entries, v has {}, problem is {} x {}",
            u.len(),
            v.len(),
            problem.m,
            problem.n
        )));
    }
    let mut fit = 0.0;
    for (row, &ui) in problem.a.rows().into_iter().zip(u.iter()) {
        for (&aij, &vj) in row.iter().zip(v.iter()) {
            let r = aij - ui * vj;
            fit += r * r;
        }
    }
    let penalty_u: f64 = u.iter().map(|&x| cost_u.value(x)).sum();
    let penalty_v: f64 = v.iter().map(|&x| cost_v.value(x)).sum();
    Ok(fit / (2.0 * problem.m as f64) + penalty_u + penalty_v)
}

fn initial_v(init: &InitV, n: usize) -> Result<Array1<f64>> {
    match init {
        InitV::PriorMean(prior) => Ok(Array1::from_elem(n, prior.mean())),
        InitV::RandomUnit(seed) => {
            let g = Prior::Gaussian { mean: 0.0, variance: 1.0 };
            let mut v = g.sample(&mut stream_rng(*seed, 3), n);
            let norm = v.dot(&v).sqrt();
            if norm == 0.0 {
                return Err(Error::InvalidArgument("random start vector vanished".into()));
            }
            v /= norm;
            Ok(v)
        }
        InitV::Explicit(v) => {
            if v.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "initial v has {} entries, expected {n}",
                    v.len()
                )));
            }
            Ok(v.clone())
        }
    }
}

fn record(
    t: usize,
    u: &Array1<f64>,
    v: &Array1<f64>,
    problem: &RankOneProblem,
    costs: Option<(&ScalarCost, &ScalarCost)>,
) -> Result<IterateRecord> {
    let m = problem.m as f64;
    let n = problem.n as f64;
    let objective = match costs {
        Some((cu, cv)) => Some(objective(problem, u.view(), v.view(), cu, cv)?),
        None => None,
    };
    Ok(IterateRecord {
        t,
        alpha_u0: u.dot(u) / m,
        alpha_u1: u.dot(&problem.u0) / m,
        alpha_v0: v.dot(v) / n,
        alpha_v1: v.dot(&problem.v0) / n,
        rho_u: correlation(u.view(), problem.u0.view()),
        rho_v: correlation(v.view(), problem.v0.view()),
        u: u.clone(),
        v: v.clone(),
        objective,
    })
}

fn apply_rule(rule: &SelectionRule, t: usize, input: &Array1<f64>, lambda: f64) -> Result<(Array1<f64>, f64)> {
    let mut out = Array1::zeros(input.len());
    let mut deriv_sum = 0.0;
    for (o, &x) in out.iter_mut().zip(input.iter()) {
        let (g, d) = rule.select_with_derivative(t, x, lambda)?;
        *o = g;
        deriv_sum += d;
    }
    Ok((out, deriv_sum))
}

fn check_finite(t: usize, what: &str, xs: &Array1<f64>) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { iteration: t, what: what.to_string() })
    }
}

fn check_scalar(t: usize, what: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { iteration: t, what: format!("{what} = {x}") })
    }
}

/// Runs `config.max_iters` iterations and records the full trajectory.
pub fn run(
    problem: &RankOneProblem,
    rule_u: &SelectionRule,
    rule_v: &SelectionRule,
    config: &IterFacConfig,
) -> Result<IterFacTrajectory> {
    config.validate()?;
    if rule_u.side != Side::U || rule_v.side != Side::V {
        return Err(Error::InvalidArgument("selection rules are attached to the wrong sides".into()));
    }
    let (m, n) = (problem.m, problem.n);
    let mf = m as f64;
    let tau_w = problem.tau_w;

    let mut v = initial_v(&config.init_v, n)?;
    let mut u = match &config.init_u {
        InitU::Zeros => Array1::zeros(m),
        InitU::Explicit(u) if u.len() == m => u.clone(),
        InitU::Explicit(u) => {
            return Err(Error::DimensionMismatch(format!("initial u has {} entries, expected {m}", u.len())))
        }
    };
    let (cost_u, cost_v) = (rule_u.cost(), rule_v.cost());
    let costs = config.record_objective.then_some((&cost_u, &cost_v));

    let mut rule_u = rule_u.clone();
    let mut rule_v = rule_v.clone();
    let (lambda_rule_u, lambda_rule_v) = match &config.lambda_mode {
        LambdaMode::Descent => (LambdaRule::Descent, LambdaRule::Descent),
        LambdaMode::Analysis(s) => (LambdaRule::Analysis(s.phi_u.clone()), LambdaRule::Analysis(s.phi_v.clone())),
    };

    let mut mu_u = match config.damping {
        DampingMode::Analysis => 0.0,
        DampingMode::Descent { mu_u, .. } => mu_u,
    };

    let mut iterates = Vec::with_capacity(config.max_iters + 1);
    let mut steps = Vec::with_capacity(config.max_iters);
    iterates.push(record(0, &u, &v, problem, costs)?);

    for t in 0..config.max_iters {
        let lambda_u = lambda_update(
            &lambda_rule_u,
            &LambdaStats {
                t,
                mu: Some(mu_u),
                norm_sq_over_m: Some(v.dot(&v) / mf),
                truth: Some(problem.v0.view()),
                estimate: Some(v.view()),
            },
        )?;
        check_scalar(t, "lambda_u", lambda_u)?;
        if matches!(rule_u.kind, RuleKind::Mmse(_)) {
            rule_u.set_channel(Channel { scale: v.dot(&problem.v0) / mf, noise_var: tau_w * v.dot(&v) / mf });
        }

        let mut p = problem.a.dot(&v);
        Zip::from(&mut p).and(&u).for_each(|pi, &ui| *pi = *pi / mf + mu_u * ui);
        check_finite(t, "p", &p)?;
        let (u_next, du_sum) = apply_rule(&rule_u, t, &p, lambda_u)?;
        check_finite(t, "u", &u_next)?;

        let mu_v = match config.damping {
            DampingMode::Analysis => -config.damping_sign * tau_w / mf * du_sum,
            DampingMode::Descent { mu_v, .. } => mu_v,
        };
        check_scalar(t, "mu_v", mu_v)?;

        let lambda_v = lambda_update(
            &lambda_rule_v,
            &LambdaStats {
                t,
                mu: Some(mu_v),
                norm_sq_over_m: Some(u_next.dot(&u_next) / mf),
                truth: Some(problem.u0.view()),
                estimate: Some(u_next.view()),
            },
        )?;
        check_scalar(t, "lambda_v", lambda_v)?;
        if matches!(rule_v.kind, RuleKind::Mmse(_)) {
            rule_v.set_channel(Channel {
                scale: u_next.dot(&problem.u0) / mf,
                noise_var: tau_w * u_next.dot(&u_next) / mf,
            });
        }

        let mut q = problem.a.t().dot(&u_next);
        Zip::from(&mut q).and(&v).for_each(|qj, &vj| *qj = *qj / mf + mu_v * vj);
        check_finite(t, "q", &q)?;
        let (v_next, dv_sum) = apply_rule(&rule_v, t, &q, lambda_v)?;
        check_finite(t, "v", &v_next)?;

        let mu_u_next = match config.damping {
            DampingMode::Analysis => -config.damping_sign * tau_w / mf * dv_sum,
            DampingMode::Descent { mu_u, .. } => mu_u,
        };
        check_scalar(t, "mu_u", mu_u_next)?;

        steps.push(StepRecord { t, p, q, lambda_u, lambda_v, mu_u, mu_v });
        u = u_next;
        v = v_next;
        mu_u = mu_u_next;
        iterates.push(record(t + 1, &u, &v, problem, costs)?);
    }
    Ok(IterFacTrajectory { iterates, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_problem;
    use ndarray::array;

    #[test]
    fn correlation_examples() {
        let u0 = array![1.0, -2.0, 0.5];
        assert!((correlation(u0.view(), u0.view()) - 1.0).abs() < 1e-15);
        let twice = &u0 * 2.0;
        assert!((correlation(twice.view(), u0.view()) - 1.0).abs() < 1e-15);
        let orth = array![2.0, 1.0, 0.0];
        assert_eq!(correlation(orth.view(), u0.view()), 0.0);
        let zero = Array1::zeros(3);
        assert_eq!(correlation(zero.view(), u0.view()), 0.0);
    }

    #[test]
    fn objective_small_cases() {
        let p = RankOneProblem::from_parts(array![0.0, 0.0], array![0.0, 0.0], ndarray::Array2::zeros((2, 2)), 1.0)
            .unwrap();
        let z = Array1::zeros(2);
        assert_eq!(objective(&p, z.view(), z.view(), &ScalarCost::Zero, &ScalarCost::Zero).unwrap(), 0.0);

        let a = array![[1.0, 2.0], [3.0, 5.0]];
        let p = RankOneProblem::from_parts(array![1.0, 1.0], array![1.0, 1.0], a, 1.0).unwrap();
        let u = array![1.0, 2.0];
        let v = array![0.5, -1.0];
        // residuals: [0.5, 3.0; 2.0, 7.0]
        let fit = (0.25 + 9.0 + 4.0 + 49.0) / 4.0;
        let l1 = ScalarCost::L1 { weight: 0.1 };
        let expect = fit + 0.1 * 3.0 + 0.1 * 1.5;
        let got = objective(&p, u.view(), v.view(), &l1, &l1).unwrap();
        assert!((got - expect).abs() < 1e-14);
    }

    #[test]
    fn linear_analysis_damping_cross_pairing() {
        let g = Prior::gaussian(0.0, 1.0).unwrap();
        let prob = generate_problem(40, 20, &g, &g, 0.3, 11).unwrap();
        let mut cfg = IterFacConfig::new(InitV::RandomUnit(5));
        cfg.lambda_mode = LambdaMode::Analysis(LambdaSchedule {
            phi_u: crate::selection::LambdaFn::constant(0.7),
            phi_v: crate::selection::LambdaFn::constant(1.3),
        });
        let traj = run(&prob, &SelectionRule::linear(Side::U), &SelectionRule::linear(Side::V), &cfg).unwrap();
        assert_eq!(traj.steps[0].mu_u, 0.0);
        for (k, s) in traj.steps.iter().enumerate() {
            assert!((s.mu_v - (-0.3 * 0.7)).abs() < 1e-15);
            if k > 0 {
                let prev = &traj.steps[k - 1];
                assert!((s.mu_u - (-0.5 * 0.3 * prev.lambda_v)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rule_sides_checked() {
        let g = Prior::gaussian(0.0, 1.0).unwrap();
        let prob = generate_problem(4, 3, &g, &g, 0.3, 1).unwrap();
        let cfg = IterFacConfig::new(InitV::RandomUnit(1));
        let r = run(&prob, &SelectionRule::linear(Side::V), &SelectionRule::linear(Side::V), &cfg);
        assert!(r.is_err());
    }

    #[test]
    fn prox_with_vanishing_lambda_fails_with_message() {
        let g = Prior::gaussian(0.0, 1.0).unwrap();
        let prob = generate_problem(6, 4, &g, &g, 0.3, 1).unwrap();
        let mut cfg = IterFacConfig::new(InitV::Explicit(Array1::zeros(4)));
        cfg.lambda_mode = LambdaMode::Descent;
        cfg.damping = DampingMode::Descent { mu_u: 0.0, mu_v: 0.0 };
        let rule_u = SelectionRule::prox(Side::U, ScalarCost::Zero).unwrap();
        let rule_v = SelectionRule::prox(Side::V, ScalarCost::Zero).unwrap();
        let err = run(&prob, &rule_u, &rule_v, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonconvexSubproblem { .. }));
    }

    #[test]
    fn negative_descent_damping_rejected() {
        let mut cfg = IterFacConfig::new(InitV::RandomUnit(1));
        cfg.damping = DampingMode::Descent { mu_u: -0.1, mu_v: 0.0 };
        assert!(cfg.validate().is_err());
    }
}
