//! Deterministic prediction of the estimator's behaviour in the large-system
//! limit.
//!
//! Each factor estimate behaves like a scalar selection rule applied to a
//! scaled copy of the true component in Gaussian noise:
//!
//! ```text
//! U(t+1) = G_u(P),  P = β·ᾱ_v1(t)·U0 + N(0, β·τ_w·ᾱ_v0(t))
//! V(t+1) = G_v(Q),  Q = ᾱ_u1(t+1)·V0 + N(0, τ_w·ᾱ_u0(t+1))
//! ```
//!
//! with `ᾱ_x0 = E[X²]`, `ᾱ_x1 = E[X0·X]`. The general recursion is evaluated
//! numerically by an [`ExpectationEngine`]; the linear and MMSE rules also
//! have closed-form correlation recursions.

use std::cell::RefCell;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{stream_rng, Prior};
use crate::quadrature::{integrate, GaussHermite};
use crate::selection::{
    bernoulli_exp_marginal, bernoulli_exp_posterior, mmse_denoiser, Channel, LambdaSchedule,
    RuleKind, SelectionRule,
};

/// How expectations over `(X0, Y = a·X0 + σ·Z)` are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum EngineMethod {
    GaussHermite { nodes: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

/// Evaluates `E[f(X0, Y)]` for a prior on `X0` and an additive Gaussian
/// channel `Y = a·X0 + N(0, σ²)`.
///
/// Gauss–Hermite mode integrates the Gaussian prior with a product rule, a
/// point mass exactly, and the Bernoulli–exponential prior as its atom at
/// zero plus an adaptive Gauss–Kronrod integral over the exponential slab.
#[derive(Debug, Clone)]
pub struct ExpectationEngine {
    pub method: EngineMethod,
    pub tolerance: f64,
    rule: Option<GaussHermite>,
}

/// An expectation with per-component standard errors (zero for quadrature).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate<const K: usize> {
    pub value: [f64; K],
    pub std_error: [f64; K],
}

impl Default for ExpectationEngine {
    fn default() -> Self {
        Self::gauss_hermite(63, 1e-9).expect("default rule is valid")
    }
}

impl ExpectationEngine {
    pub fn gauss_hermite(nodes: usize, tolerance: f64) -> Result<Self> {
        if nodes < 31 || nodes % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "Gauss-Hermite node count must be odd and at least 31 (got {nodes})"
            )));
        }
        if !(tolerance > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance must be positive (got {tolerance})")));
        }
        Ok(Self {
            method: EngineMethod::GaussHermite { nodes },
            tolerance,
            rule: Some(GaussHermite::new(nodes)),
        })
    }

    pub fn monte_carlo(samples: usize, seed: u64) -> Result<Self> {
        if samples < 100_000 {
            return Err(Error::InvalidArgument(format!(
                "Monte Carlo engine needs at least 100000 samples (got {samples})"
            )));
        }
        Ok(Self { method: EngineMethod::MonteCarlo { samples, seed }, tolerance: 1e-9, rule: None })
    }

    /// `E[f(X0, a·X0 + σ·Z)]`. `what` names the integral in error messages.
    pub fn expect<const K: usize, F>(
        &self,
        prior: &Prior,
        channel: Channel,
        what: &str,
        f: F,
    ) -> Result<Estimate<K>>
    where
        F: Fn(f64, f64) -> Result<[f64; K]>,
    {
        if !(channel.noise_var >= 0.0) || !channel.scale.is_finite() {
            return Err(Error::NonFiniteExpectation { integral: what.to_string() });
        }
        let est = match &self.method {
            EngineMethod::GaussHermite { .. } => {
                let gh = self.rule.as_ref().expect("rule built with engine");
                Estimate { value: self.expect_quadrature(gh, prior, channel, &f)?, std_error: [0.0; K] }
            }
            EngineMethod::MonteCarlo { samples, seed } => {
                expect_monte_carlo(*samples, *seed, prior, channel, &f)?
            }
        };
        if est.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteExpectation { integral: what.to_string() });
        }
        Ok(est)
    }

    fn expect_quadrature<const K: usize, F>(
        &self,
        gh: &GaussHermite,
        prior: &Prior,
        channel: Channel,
        f: &F,
    ) -> Result<[f64; K]>
    where
        F: Fn(f64, f64) -> Result<[f64; K]>,
    {
        let sigma = channel.noise_var.sqrt();
        let inner = |x0: f64| -> Result<[f64; K]> {
            let mut acc = [0.0; K];
            let y_mean = channel.scale * x0;
            for (&z, &w) in gh.nodes.iter().zip(&gh.weights) {
                let vals = f(x0, y_mean + sigma * z)?;
                for k in 0..K {
                    acc[k] += w * vals[k];
                }
            }
            Ok(acc)
        };
        match *prior {
            Prior::PointMass { value } => inner(value),
            Prior::Gaussian { mean, variance } => {
                let sd = variance.sqrt();
                let mut acc = [0.0; K];
                for (&z, &w) in gh.nodes.iter().zip(&gh.weights) {
                    let vals = inner(mean + sd * z)?;
                    for k in 0..K {
                        acc[k] += w * vals[k];
                    }
                }
                Ok(acc)
            }
            Prior::BernoulliExponential { sparsity, rate } => {
                let atom = inner(0.0)?;
                let failure: RefCell<Option<Error>> = RefCell::new(None);
                let weighted = |x: f64, g: &dyn Fn(f64) -> Result<[f64; K]>| match g(x) {
                    Ok(mut v) => {
                        let dens = rate * (-rate * x).exp();
                        for c in v.iter_mut() {
                            *c *= dens;
                        }
                        v
                    }
                    Err(e) => {
                        failure.borrow_mut().get_or_insert(e);
                        [0.0; K]
                    }
                };
                // Size of each component before cancellation in the inner
                // sum; it sets the absolute accuracy that roundoff permits.
                let inner_abs = |x0: f64| -> Result<[f64; K]> {
                    let mut acc = [0.0; K];
                    let y_mean = channel.scale * x0;
                    for (&z, &w) in gh.nodes.iter().zip(&gh.weights) {
                        let vals = f(x0, y_mean + sigma * z)?;
                        for k in 0..K {
                            acc[k] += w * vals[k].abs();
                        }
                    }
                    Ok(acc)
                };
                let upper = 50.0 / rate;
                let scale = integrate::<K, _>(|x| weighted(x, &inner_abs), 0.0, upper, [0.0; K], 1e-3, 200);
                let mut abs_tol = [0.0; K];
                if let Ok(s) = &scale {
                    for k in 0..K {
                        abs_tol[k] = 1e-2 * self.tolerance * s.value[k];
                    }
                }
                let slab = integrate::<K, _>(
                    |x| weighted(x, &inner),
                    0.0,
                    upper,
                    abs_tol,
                    1e-2 * self.tolerance,
                    4000,
                );
                if let Some(e) = failure.into_inner() {
                    return Err(e);
                }
                let slab = slab?;
                let mut acc = [0.0; K];
                for k in 0..K {
                    acc[k] = (1.0 - sparsity) * atom[k] + sparsity * slab.value[k];
                }
                Ok(acc)
            }
        }
    }
}

fn expect_monte_carlo<const K: usize, F>(
    samples: usize,
    seed: u64,
    prior: &Prior,
    channel: Channel,
    f: &F,
) -> Result<Estimate<K>>
where
    F: Fn(f64, f64) -> Result<[f64; K]>,
{
    let mut prior_rng = stream_rng(seed, 0);
    let mut noise_rng = stream_rng(seed, 1);
    let sigma = channel.noise_var.sqrt();
    let mut mean = [0.0; K];
    let mut m2 = [0.0; K];
    for i in 0..samples {
        let x0 = prior.draw(&mut prior_rng);
        let z: f64 = StandardNormal.sample(&mut noise_rng);
        let vals = f(x0, channel.scale * x0 + sigma * z)?;
        // Welford update
        let count = (i + 1) as f64;
        for k in 0..K {
            let delta = vals[k] - mean[k];
            mean[k] += delta / count;
            m2[k] += delta * (vals[k] - mean[k]);
        }
    }
    let n = samples as f64;
    let mut std_error = [0.0; K];
    for k in 0..K {
        std_error[k] = (m2[k] / (n - 1.0) / n).sqrt();
    }
    Ok(Estimate { value: mean, std_error })
}

/// How a factor estimate depends on its scalar observation.
#[derive(Debug, Clone)]
enum LawMap {
    Constant(f64),
    Identity,
    Rule { rule: SelectionRule, t: usize, lambda: f64 },
}

/// Joint law of `(X0, X)` with `X = h(a·X0 + N(0, σ²))`.
#[derive(Debug, Clone)]
struct Law {
    channel: Channel,
    map: LawMap,
}

impl Law {
    fn apply(&self, y: f64) -> Result<f64> {
        match &self.map {
            LawMap::Constant(c) => Ok(*c),
            LawMap::Identity => Ok(y),
            LawMap::Rule { rule, t, lambda } => rule.select(*t, y, *lambda),
        }
    }

    fn constant(c: f64) -> Self {
        Self { channel: Channel { scale: 0.0, noise_var: 0.0 }, map: LawMap::Constant(c) }
    }
}

/// One point of the deterministic recursion.
///
/// `lambda_u`/`lambda_v` are the values used in the step that produced this
/// state (`NaN` for the initial state).
#[derive(Debug, Clone)]
pub struct SEState {
    pub t: usize,
    pub alpha_u0: f64,
    pub alpha_u1: f64,
    pub alpha_v0: f64,
    pub alpha_v1: f64,
    pub lambda_u: f64,
    pub lambda_v: f64,
    pub rho_u: f64,
    pub rho_v: f64,
    u_law: Option<Law>,
    v_law: Law,
}

fn rho(alpha0: f64, alpha1: f64, tau: f64) -> f64 {
    if alpha0 > 0.0 && tau > 0.0 {
        (alpha1 * alpha1 / (alpha0 * tau)).min(1.0)
    } else {
        0.0
    }
}

impl SEState {
    /// `V(0) = E[V0]` deterministically.
    pub fn initial_prior_mean(prior_v: &Prior) -> Self {
        let c = prior_v.mean();
        Self::initial(c * c, c * prior_v.mean(), prior_v.second_moment(), Law::constant(c))
    }

    /// `V(0) = √ρ·V0 + N(0, τ_v·(1 − ρ))`, which has correlation `ρ` with `V0`.
    pub fn from_rho_v(prior_v: &Prior, rho_v: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho_v) {
            return Err(Error::InvalidArgument(format!("rho_v must lie in [0, 1] (got {rho_v})")));
        }
        let tau_v = prior_v.second_moment();
        let law = Law {
            channel: Channel { scale: rho_v.sqrt(), noise_var: tau_v * (1.0 - rho_v) },
            map: LawMap::Identity,
        };
        Ok(Self::initial(tau_v, rho_v.sqrt() * tau_v, tau_v, law))
    }

    fn initial(alpha_v0: f64, alpha_v1: f64, tau_v: f64, v_law: Law) -> Self {
        Self {
            t: 0,
            alpha_u0: 0.0,
            alpha_u1: 0.0,
            alpha_v0,
            alpha_v1,
            lambda_u: f64::NAN,
            lambda_v: f64::NAN,
            rho_u: 0.0,
            rho_v: rho(alpha_v0, alpha_v1, tau_v),
            u_law: None,
            v_law,
        }
    }
}

/// Problem-level inputs to the general recursion.
#[derive(Debug, Clone)]
pub struct SeConfig {
    pub prior_u: Prior,
    pub prior_v: Prior,
    pub beta: f64,
    pub tau_w: f64,
    pub rule_u: SelectionRule,
    pub rule_v: SelectionRule,
    pub lambda: LambdaSchedule,
}

/// Advances the recursion by one iteration.
pub fn se_step(state: &SEState, cfg: &SeConfig, engine: &ExpectationEngine) -> Result<SEState> {
    let t = state.t;
    let tau_u = cfg.prior_u.second_moment();
    let tau_v = cfg.prior_v.second_moment();

    let v_law = &state.v_law;
    let phi_u = &cfg.lambda.phi_u;
    let lambda_u = engine
        .expect(&cfg.prior_v, v_law.channel, "lambda_u", |x0, y| Ok([phi_u.eval(t, x0, v_law.apply(y)?)]))?
        .value[0];

    let p_channel = Channel {
        scale: cfg.beta * state.alpha_v1,
        noise_var: cfg.beta * cfg.tau_w * state.alpha_v0,
    };
    let mut rule_u = cfg.rule_u.clone();
    if matches!(rule_u.kind, RuleKind::Mmse(_)) {
        rule_u.set_channel(p_channel);
    }
    let phi_v = &cfg.lambda.phi_v;
    let u_est = engine.expect(&cfg.prior_u, p_channel, "E[U^2], E[U0 U], lambda_v", |x0, y| {
        let g = rule_u.select(t, y, lambda_u)?;
        Ok([g * g, x0 * g, phi_v.eval(t, x0, g)])
    })?;
    let [alpha_u0, alpha_u1, lambda_v] = u_est.value;

    let q_channel = Channel { scale: alpha_u1, noise_var: cfg.tau_w * alpha_u0 };
    let mut rule_v = cfg.rule_v.clone();
    if matches!(rule_v.kind, RuleKind::Mmse(_)) {
        rule_v.set_channel(q_channel);
    }
    let v_est = engine.expect(&cfg.prior_v, q_channel, "E[V^2], E[V0 V]", |x0, y| {
        let g = rule_v.select(t, y, lambda_v)?;
        Ok([g * g, x0 * g])
    })?;
    let [alpha_v0, alpha_v1] = v_est.value;

    Ok(SEState {
        t: t + 1,
        alpha_u0,
        alpha_u1,
        alpha_v0,
        alpha_v1,
        lambda_u,
        lambda_v,
        rho_u: rho(alpha_u0, alpha_u1, tau_u),
        rho_v: rho(alpha_v0, alpha_v1, tau_v),
        u_law: Some(Law { channel: p_channel, map: LawMap::Rule { rule: rule_u, t, lambda: lambda_u } }),
        v_law: Law { channel: q_channel, map: LawMap::Rule { rule: rule_v, t, lambda: lambda_v } },
    })
}

/// `iters` steps from `initial`; the result holds `iters + 1` states.
pub fn se_trajectory(
    initial: SEState,
    cfg: &SeConfig,
    iters: usize,
    engine: &ExpectationEngine,
) -> Result<Vec<SEState>> {
    let mut out = Vec::with_capacity(iters + 1);
    out.push(initial);
    for _ in 0..iters {
        let next = se_step(out.last().expect("nonempty"), cfg, engine)?;
        out.push(next);
    }
    Ok(out)
}

/// One step of the correlation recursion for linear selection rules:
///
/// `ρ_u' = β·T·ρ_v / (β·T·ρ_v + τ_w)`, `ρ_v' = T·ρ_u' / (T·ρ_u' + τ_w)`,
/// `T = τ_u·τ_v`.
///
/// It follows from the general recursion with `G(p) = λ·p`, for which the
/// scale `λ` cancels from both correlations.
pub fn se_linear_recursion(rho_v: f64, beta: f64, tau_u: f64, tau_v: f64, tau_w: f64) -> (f64, f64) {
    let t = tau_u * tau_v;
    let num_u = beta * t * rho_v;
    let rho_u = if num_u == 0.0 { 0.0 } else { (num_u / (num_u + tau_w)).clamp(0.0, 1.0) };
    let num_v = t * rho_u;
    let rho_v = if num_v == 0.0 { 0.0 } else { (num_v / (num_v + tau_w)).clamp(0.0, 1.0) };
    (rho_u, rho_v)
}

/// Limit of [`se_linear_recursion`] from any positive start.
pub fn se_linear_fixed_point(beta: f64, tau_u: f64, tau_v: f64, tau_w: f64) -> (f64, f64) {
    let t = tau_u * tau_v;
    let gap = (beta * t * t - tau_w * tau_w).max(0.0);
    if gap == 0.0 {
        return (0.0, 0.0);
    }
    (gap / (t * (beta * t + tau_w)), gap / (beta * t * (t + tau_w)))
}

/// `ρ` trajectory `[(ρ_u(0), ρ_v(0)), …]` of the linear recursion, with
/// `ρ_u(0) = 0`.
pub fn se_linear_trajectory(
    rho_v0: f64,
    beta: f64,
    tau_u: f64,
    tau_v: f64,
    tau_w: f64,
    iters: usize,
) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, rho_v0)];
    for _ in 0..iters {
        let (_, rv) = *out.last().expect("nonempty");
        out.push(se_linear_recursion(rv, beta, tau_u, tau_v, tau_w));
    }
    out
}

/// `E(η) = E[Var(X0 | √η·X0 + D)]`, `D ~ N(0, 1)`.
pub fn mmse_function(prior: &Prior, eta: f64, engine: &ExpectationEngine) -> Result<f64> {
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be nonnegative (got {eta})")));
    }
    match *prior {
        Prior::PointMass { .. } => Ok(0.0),
        Prior::Gaussian { variance, .. } => Ok(variance / (1.0 + eta * variance)),
        Prior::BernoulliExponential { sparsity, rate } => {
            if eta == 0.0 {
                return Ok(prior.variance());
            }
            let a = eta.sqrt();
            let lo = -12.0;
            let hi = a * 45.0 / rate + 12.0;
            let tol = 1e-2 * engine.tolerance;
            let failure: RefCell<Option<Error>> = RefCell::new(None);
            let r = integrate::<1, _>(
                |y| match bernoulli_exp_posterior(sparsity, rate, a, 1.0, y) {
                    Ok((_, var)) => [bernoulli_exp_marginal(sparsity, rate, a, 1.0, y) * var],
                    Err(e) => {
                        failure.borrow_mut().get_or_insert(e);
                        [0.0]
                    }
                },
                lo,
                hi,
                [0.0],
                tol,
                4000,
            );
            if let Some(e) = failure.into_inner() {
                return Err(e);
            }
            let r = r?;
            if !r.value[0].is_finite() {
                return Err(Error::Quadrature { estimate: r.value[0], bound: r.error });
            }
            Ok(r.value[0])
        }
    }
}

/// `E(η)` evaluated as `E[(X0 − E[X0|Y])²]` through the engine; an
/// independent route used to cross-check [`mmse_function`].
pub fn mmse_function_by_expectation(prior: &Prior, eta: f64, engine: &ExpectationEngine) -> Result<f64> {
    let ch = Channel { scale: eta.sqrt(), noise_var: 1.0 };
    let est = engine.expect(prior, ch, "mmse", |x0, y| {
        let (m, _) = mmse_denoiser(prior, ch, y)?;
        Ok([(x0 - m) * (x0 - m)])
    })?;
    Ok(est.value[0])
}

/// One step of the correlation recursion for MMSE selection rules:
/// `ρ_u' = 1 − E_u(β·τ_v·ρ_v/τ_w)/τ_u`, `ρ_v' = 1 − E_v(τ_u·ρ_u'/τ_w)/τ_v`.
#[allow(clippy::too_many_arguments)]
pub fn se_mmse_recursion(
    rho_v: f64,
    beta: f64,
    tau_u: f64,
    tau_v: f64,
    tau_w: f64,
    prior_u: &Prior,
    prior_v: &Prior,
    engine: &ExpectationEngine,
) -> Result<(f64, f64)> {
    let eta_u = beta * tau_v * rho_v / tau_w;
    let rho_u = (1.0 - mmse_function(prior_u, eta_u, engine)? / tau_u).clamp(0.0, 1.0);
    let eta_v = tau_u * rho_u / tau_w;
    let rho_v = (1.0 - mmse_function(prior_v, eta_v, engine)? / tau_v).clamp(0.0, 1.0);
    Ok((rho_u, rho_v))
}

/// `(E[V0])²/τ_v`: the correlation of the prior-mean start.
pub fn mmse_initial_rho_v(prior_v: &Prior) -> f64 {
    let m = prior_v.mean();
    let tau = prior_v.second_moment();
    if tau > 0.0 {
        m * m / tau
    } else {
        0.0
    }
}

/// `ρ` trajectory of the MMSE recursion, `iters + 1` entries with `ρ_u(0) = 0`.
#[allow(clippy::too_many_arguments)]
pub fn se_mmse_trajectory(
    rho_v0: f64,
    beta: f64,
    tau_w: f64,
    prior_u: &Prior,
    prior_v: &Prior,
    iters: usize,
    engine: &ExpectationEngine,
) -> Result<Vec<(f64, f64)>> {
    let (tau_u, tau_v) = (prior_u.second_moment(), prior_v.second_moment());
    let mut out = vec![(0.0, rho_v0)];
    for _ in 0..iters {
        let (_, rv) = *out.last().expect("nonempty");
        out.push(se_mmse_recursion(rv, beta, tau_u, tau_v, tau_w, prior_u, prior_v, engine)?);
    }
    Ok(out)
}

/// Noise level `√β·τ_u·τ_v` below which zero-mean MMSE estimation escapes
/// the uninformative fixed point.
pub fn phase_transition_threshold(beta: f64, tau_u: f64, tau_v: f64) -> f64 {
    beta.sqrt() * tau_u * tau_v
}

/// Outcome of iterating the MMSE recursion from a small start `ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonProbe {
    pub epsilon: f64,
    pub final_rho_v: f64,
    pub max_rho_v: f64,
    pub iterations: usize,
}

/// Iterates the MMSE recursion from `ρ_v(0) = ε` for each `ε` until the
/// change in `ρ_v` drops below `1e-14` or `max_iters` steps elapse.
pub fn phase_transition_probe(
    beta: f64,
    tau_w: f64,
    prior_u: &Prior,
    prior_v: &Prior,
    epsilons: &[f64],
    max_iters: usize,
    engine: &ExpectationEngine,
) -> Result<Vec<EpsilonProbe>> {
    let (tau_u, tau_v) = (prior_u.second_moment(), prior_v.second_moment());
    epsilons
        .iter()
        .map(|&epsilon| {
            let mut rv = epsilon;
            let mut max_rho_v = rv;
            let mut iterations = 0;
            while iterations < max_iters {
                let (_, next) = se_mmse_recursion(rv, beta, tau_u, tau_v, tau_w, prior_u, prior_v, engine)?;
                iterations += 1;
                let done = (next - rv).abs() < 1e-14;
                rv = next;
                max_rho_v = max_rho_v.max(rv);
                if done {
                    break;
                }
            }
            Ok(EpsilonProbe { epsilon, final_rho_v: rv, max_rho_v, iterations })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    MseU,
    MseV,
    CorrU,
    CorrV,
}

/// Scalar-equivalent performance at `state`: squared error
/// `E[(X0 − X(t))²]` or the correlation `ρ`.
pub fn scalar_equivalent_metric(
    metric: Metric,
    state: &SEState,
    cfg: &SeConfig,
    engine: &ExpectationEngine,
) -> Result<f64> {
    match metric {
        Metric::CorrU => Ok(state.rho_u),
        Metric::CorrV => Ok(state.rho_v),
        Metric::MseU => {
            let law = state
                .u_law
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("U(t) is undefined before the first step".into()))?;
            let e = engine.expect(&cfg.prior_u, law.channel, "E[(U0 - U)^2]", |x0, y| {
                let d = x0 - law.apply(y)?;
                Ok([d * d])
            })?;
            Ok(e.value[0])
        }
        Metric::MseV => {
            let law = &state.v_law;
            let e = engine.expect(&cfg.prior_v, law.channel, "E[(V0 - V)^2]", |x0, y| {
                let d = x0 - law.apply(y)?;
                Ok([d * d])
            })?;
            Ok(e.value[0])
        }
    }
}
