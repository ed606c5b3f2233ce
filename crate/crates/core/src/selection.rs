//! Scalar factor-selection rules `G(t, p, λ)` with their input derivatives,
//! and the λ-adaptation rules that feed them.
//!
//! Three families are provided: the linear rule `λ·p`, the posterior mean
//! under a scalar Gaussian channel (MMSE), and the proximal map of a separable
//! cost with a quadratic penalty.

use std::fmt;
use std::sync::Arc;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Prior;
use crate::special::{log_scaled_cdf, logistic, positive_truncated_moments};

/// Separable penalty `c(x)` applied to each factor component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarCost {
    Zero,
    L1 { weight: f64 },
    /// `γ·x` on `x ≥ 0`, `+∞` otherwise.
    NonnegativeL1 { weight: f64 },
    /// `(w/2)·x²`.
    SquaredL2 { weight: f64 },
}

impl ScalarCost {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ScalarCost::Zero => Ok(()),
            ScalarCost::L1 { weight }
            | ScalarCost::NonnegativeL1 { weight }
            | ScalarCost::SquaredL2 { weight } => {
                if weight >= 0.0 && weight.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("cost weight must be nonnegative (got {weight})")))
                }
            }
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match *self {
            ScalarCost::Zero => 0.0,
            ScalarCost::L1 { weight } => weight * x.abs(),
            ScalarCost::NonnegativeL1 { weight } => {
                if x < 0.0 {
                    f64::INFINITY
                } else {
                    weight * x
                }
            }
            ScalarCost::SquaredL2 { weight } => 0.5 * weight * x * x,
        }
    }

    /// `argmin_x −p·x + c(x) + (λ/2)·x²` and its derivative in `p`.
    pub fn prox(&self, p: f64, lambda: f64) -> Result<(f64, f64)> {
        if !(lambda > 0.0) {
            return Err(Error::NonconvexSubproblem { lambda });
        }
        let inv = 1.0 / lambda;
        Ok(match *self {
            ScalarCost::Zero => (p * inv, inv),
            ScalarCost::L1 { weight } => {
                let shrunk = p.abs() - weight;
                if shrunk > 0.0 {
                    (p.signum() * shrunk * inv, inv)
                } else {
                    (0.0, 0.0)
                }
            }
            ScalarCost::NonnegativeL1 { weight } => {
                let shrunk = p - weight;
                if shrunk > 0.0 {
                    (shrunk * inv, inv)
                } else {
                    (0.0, 0.0)
                }
            }
            ScalarCost::SquaredL2 { weight } => {
                let d = 1.0 / (lambda + weight);
                (p * d, d)
            }
        })
    }
}

/// Effective scalar channel `p = scale·X0 + N(0, noise_var)` seen by an MMSE rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Channel {
    pub scale: f64,
    pub noise_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RuleKind {
    Linear,
    Mmse(Prior),
    Prox(ScalarCost),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    U,
    V,
}

/// A componentwise selection function for one side of the factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRule {
    pub kind: RuleKind,
    pub side: Side,
    channel: Option<Channel>,
}

impl SelectionRule {
    pub fn linear(side: Side) -> Self {
        Self { kind: RuleKind::Linear, side, channel: None }
    }

    pub fn mmse(side: Side, prior: Prior) -> Result<Self> {
        prior.validate()?;
        Ok(Self { kind: RuleKind::Mmse(prior), side, channel: None })
    }

    pub fn prox(side: Side, cost: ScalarCost) -> Result<Self> {
        cost.validate()?;
        Ok(Self { kind: RuleKind::Prox(cost), side, channel: None })
    }

    pub fn channel(&self) -> Option<Channel> {
        self.channel
    }

    /// Installs the scalar channel used by MMSE rules; ignored by other kinds.
    pub fn set_channel(&mut self, channel: Channel) {
        self.channel = Some(channel);
    }

    /// The separable cost this rule minimizes against (zero for non-prox rules).
    pub fn cost(&self) -> ScalarCost {
        match self.kind {
            RuleKind::Prox(c) => c,
            _ => ScalarCost::Zero,
        }
    }

    pub fn select(&self, t: usize, p: f64, lambda: f64) -> Result<f64> {
        self.select_with_derivative(t, p, lambda).map(|(g, _)| g)
    }

    pub fn select_derivative(&self, t: usize, p: f64, lambda: f64) -> Result<f64> {
        self.select_with_derivative(t, p, lambda).map(|(_, d)| d)
    }

    /// Value and `∂/∂p` in one evaluation. The iteration index is accepted for
    /// interface symmetry; none of the built-in rules vary with it.
    pub fn select_with_derivative(&self, _t: usize, p: f64, lambda: f64) -> Result<(f64, f64)> {
        match self.kind {
            RuleKind::Linear => Ok((lambda * p, lambda)),
            RuleKind::Prox(cost) => cost.prox(p, lambda),
            RuleKind::Mmse(prior) => {
                let ch = self.channel.ok_or_else(|| {
                    Error::MissingStats("MMSE rule evaluated before its channel was set".into())
                })?;
                mmse_denoiser(&prior, ch, p)
            }
        }
    }

    /// Global Lipschitz constant of `p ↦ G(t, p, λ)`.
    pub fn lipschitz_constant(&self, lambda: f64) -> Result<f64> {
        match self.kind {
            RuleKind::Linear => Ok(lambda.abs()),
            RuleKind::Prox(ScalarCost::SquaredL2 { weight }) => {
                if lambda > 0.0 {
                    Ok(1.0 / (lambda + weight))
                } else {
                    Err(Error::NonconvexSubproblem { lambda })
                }
            }
            RuleKind::Prox(_) => {
                if lambda > 0.0 {
                    Ok(1.0 / lambda)
                } else {
                    Err(Error::NonconvexSubproblem { lambda })
                }
            }
            RuleKind::Mmse(prior) => {
                let ch = self.channel.ok_or_else(|| {
                    Error::MissingStats("MMSE rule has no channel".into())
                })?;
                mmse_lipschitz(&prior, ch)
            }
        }
    }
}

/// Posterior mean and its derivative for any supported prior.
pub fn mmse_denoiser(prior: &Prior, ch: Channel, p: f64) -> Result<(f64, f64)> {
    match *prior {
        Prior::PointMass { value } => Ok((value, 0.0)),
        Prior::Gaussian { mean, variance } => {
            let Channel { scale: a, noise_var: s2 } = ch;
            if s2 < 0.0 {
                return Err(Error::InvalidArgument(format!("negative noise variance {s2}")));
            }
            let denom = a * a * variance + s2;
            if denom == 0.0 {
                return Ok((mean, 0.0));
            }
            let gain = a * variance / denom;
            Ok((mean + gain * (p - a * mean), gain))
        }
        Prior::BernoulliExponential { sparsity, rate } => {
            if ch.scale == 0.0 {
                return Ok((prior.mean(), 0.0));
            }
            if ch.noise_var == 0.0 {
                // noiseless channel: the observation determines X0
                return Ok((p / ch.scale, 1.0 / ch.scale));
            }
            mmse_denoiser_bernoulli_exp(sparsity, rate, ch.scale, ch.noise_var, p)
        }
    }
}

/// Posterior mean of `X0 ~ (1−λ)δ0 + λ·Exp(rate)` from `p = a·X0 + N(0, σ²)`,
/// with its derivative in `p`.
///
/// The slab posterior is a normal truncated to the positive half line, so
/// the mean and variance follow from the Mills ratio; the spike/slab odds
/// are formed in log space.
pub fn mmse_denoiser_bernoulli_exp(
    sparsity: f64,
    rate: f64,
    a: f64,
    noise_var: f64,
    p: f64,
) -> Result<(f64, f64)> {
    let (mean, var) = bernoulli_exp_posterior(sparsity, rate, a, noise_var, p)?;
    Ok((mean, a * var / noise_var))
}

/// Posterior `(mean, variance)` for the Bernoulli–exponential prior.
pub fn bernoulli_exp_posterior(
    sparsity: f64,
    rate: f64,
    a: f64,
    noise_var: f64,
    p: f64,
) -> Result<(f64, f64)> {
    if !(noise_var > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be positive (got {noise_var})"
        )));
    }
    if !(0.0..=1.0).contains(&sparsity) || !(rate > 0.0) {
        return Err(Error::InvalidPrior(format!(
            "bernoulli-exponential({sparsity}, {rate})"
        )));
    }
    if sparsity == 0.0 {
        return Ok((0.0, 0.0));
    }
    if a == 0.0 {
        let m = sparsity / rate;
        return Ok((m, 2.0 * sparsity / (rate * rate) - m * m));
    }
    // p = a·x + noise with a < 0 is the same observation as −p = |a|·x + noise
    let (a, p) = if a < 0.0 { (-a, -p) } else { (a, p) };
    let sigma = noise_var.sqrt();
    let s = sigma / a;
    let z = (a * p - rate * noise_var) / (a * sigma);
    let pi1 = if sparsity >= 1.0 {
        1.0
    } else {
        let log_odds = (sparsity / (1.0 - sparsity)).ln()
            + (rate * s).ln()
            + 0.5 * (2.0 * std::f64::consts::PI).ln()
            + log_scaled_cdf(z);
        logistic(log_odds)
    };
    let (delta, var_scale) = positive_truncated_moments(z);
    let mu1 = s * delta;
    let v1 = s * s * var_scale;
    let mean = pi1 * mu1;
    let var = pi1 * v1 + pi1 * (1.0 - pi1) * mu1 * mu1;
    Ok((mean, var.max(0.0)))
}

/// Density of `p = a·X0 + N(0, σ²)` under the Bernoulli–exponential prior.
pub fn bernoulli_exp_marginal(sparsity: f64, rate: f64, a: f64, noise_var: f64, p: f64) -> f64 {
    let sigma = noise_var.sqrt();
    let log_gauss = -0.5 * p * p / noise_var - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let spike = (1.0 - sparsity) * log_gauss.exp();
    if a == 0.0 {
        return log_gauss.exp();
    }
    let (a, p) = if a < 0.0 { (-a, -p) } else { (a, p) };
    let s = sigma / a;
    let z = (a * p - rate * noise_var) / (a * sigma);
    let log_slab = sparsity.ln() + (rate * s / sigma).ln() - 0.5 * p * p / noise_var
        + log_scaled_cdf(z);
    spike + log_slab.exp()
}

fn mmse_lipschitz(prior: &Prior, ch: Channel) -> Result<f64> {
    match *prior {
        Prior::PointMass { .. } => Ok(0.0),
        Prior::Gaussian { variance, .. } => {
            let denom = ch.scale * ch.scale * variance + ch.noise_var;
            Ok(if denom == 0.0 { 0.0 } else { (ch.scale * variance / denom).abs() })
        }
        Prior::BernoulliExponential { .. } => {
            // The derivative is (a/σ²)·Var(X0 | p); its supremum is located by
            // a dense scan over the range where the posterior changes shape.
            if ch.scale == 0.0 {
                return Ok(0.0);
            }
            let sigma = ch.noise_var.sqrt();
            let a = ch.scale.abs();
            let hi = a * prior.mean() * 40.0 + 20.0 * sigma;
            let lo = -20.0 * sigma;
            let steps = 4000;
            let mut best = 0.0f64;
            for k in 0..=steps {
                let p = lo + (hi - lo) * k as f64 / steps as f64;
                let (_, d) = mmse_denoiser(prior, Channel { scale: a, noise_var: ch.noise_var }, p)?;
                best = best.max(d.abs());
            }
            Ok(best)
        }
    }
}

/// A pseudo-Lipschitz (order 2) adaptation function `φ(t, x0, x)`.
#[derive(Clone)]
pub struct LambdaFn(Arc<dyn Fn(usize, f64, f64) -> f64 + Send + Sync>);

impl LambdaFn {
    pub fn new<F: Fn(usize, f64, f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Self(Arc::new(f))
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_, _, _| c)
    }

    /// `φ(x0, x) = c·x²`.
    pub fn second_moment(c: f64) -> Self {
        Self::new(move |_, _, x| c * x * x)
    }

    pub fn eval(&self, t: usize, x0: f64, x: f64) -> f64 {
        (self.0)(t, x0, x)
    }
}

impl fmt::Debug for LambdaFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("LambdaFn(..)")
    }
}

/// Adaptation functions for both sides: `λ_u(t)` averages `phi_u` over
/// `(v0, v(t))`, `λ_v(t)` averages `phi_v` over `(u0, u(t+1))`.
#[derive(Debug, Clone)]
pub struct LambdaSchedule {
    pub phi_u: LambdaFn,
    pub phi_v: LambdaFn,
}

impl LambdaSchedule {
    pub fn constant(c: f64) -> Self {
        Self { phi_u: LambdaFn::constant(c), phi_v: LambdaFn::constant(c) }
    }

    /// Asymptotic counterpart of the descent rule with zero damping:
    /// `λ_u = β·E[V²]`, `λ_v = E[U²]`.
    pub fn second_moments(beta: f64) -> Self {
        Self { phi_u: LambdaFn::second_moment(beta), phi_v: LambdaFn::second_moment(1.0) }
    }
}

/// How one λ is produced.
#[derive(Debug, Clone)]
pub enum LambdaRule {
    /// `λ = μ + ‖x‖²/m`.
    Descent,
    /// `λ = (1/len) Σ φ(t, x0_k, x_k)`.
    Analysis(LambdaFn),
}

/// Inputs to [`lambda_update`]; only the fields relevant to the rule are read.
#[derive(Debug, Clone, Default)]
pub struct LambdaStats<'a> {
    pub t: usize,
    pub mu: Option<f64>,
    pub norm_sq_over_m: Option<f64>,
    pub truth: Option<ArrayView1<'a, f64>>,
    pub estimate: Option<ArrayView1<'a, f64>>,
}

pub fn lambda_update(rule: &LambdaRule, stats: &LambdaStats<'_>) -> Result<f64> {
    match rule {
        LambdaRule::Descent => {
            let mu = stats.mu.ok_or_else(|| Error::MissingStats("damping factor".into()))?;
            let norm = stats
                .norm_sq_over_m
                .ok_or_else(|| Error::MissingStats("squared norm over m".into()))?;
            Ok(mu + norm)
        }
        LambdaRule::Analysis(phi) => {
            let x = stats.estimate.ok_or_else(|| Error::MissingStats("current estimate".into()))?;
            let x0 = stats.truth.ok_or_else(|| Error::MissingStats("true factor".into()))?;
            if x.len() != x0.len() || x.is_empty() {
                return Err(Error::DimensionMismatch(format!(
                    "estimate has {} entries, truth has {}",
                    x.len(),
                    x0.len()
                )));
            }
            let sum: f64 = x0.iter().zip(x.iter()).map(|(&a, &b)| phi.eval(stats.t, a, b)).sum();
            Ok(sum / x.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn prox_closed_forms() {
        let r = SelectionRule::prox(Side::U, ScalarCost::Zero).unwrap();
        assert_eq!(r.select(0, 2.0, 4.0).unwrap(), 0.5);
        let r = SelectionRule::prox(Side::U, ScalarCost::L1 { weight: 0.3 }).unwrap();
        assert!(close(r.select(0, 1.0, 1.0).unwrap(), 0.7, 1e-15));
        assert_eq!(r.select_derivative(0, 0.1, 1.0).unwrap(), 0.0);
        assert_eq!(r.select_derivative(0, 1.0, 1.0).unwrap(), 1.0);
        // kink belongs to the dead zone
        assert_eq!(r.select_derivative(0, 0.3, 1.0).unwrap(), 0.0);
        let r = SelectionRule::prox(Side::V, ScalarCost::NonnegativeL1 { weight: 0.5 }).unwrap();
        assert_eq!(r.select(0, -3.0, 2.0).unwrap(), 0.0);
        assert!(close(r.select(0, 1.5, 2.0).unwrap(), 0.5, 1e-15));
        let r = SelectionRule::prox(Side::V, ScalarCost::SquaredL2 { weight: 1.0 }).unwrap();
        assert!(close(r.select(0, 3.0, 2.0).unwrap(), 1.0, 1e-15));
    }

    #[test]
    fn prox_rejects_nonpositive_lambda() {
        let r = SelectionRule::prox(Side::U, ScalarCost::Zero).unwrap();
        let err = r.select(0, 1.0, 0.0).unwrap_err();
        assert!(err.to_string().contains("nonconvex scalar subproblem"));
        assert!(r.select(0, 1.0, -1.0).is_err());
    }

    #[test]
    fn linear_rule_value_and_slope() {
        let r = SelectionRule::linear(Side::U);
        assert_eq!(r.select(3, 2.5, 0.8).unwrap(), 2.0);
        assert_eq!(r.select_derivative(3, -7.0, 0.8).unwrap(), 0.8);
        assert_eq!(r.lipschitz_constant(-0.8).unwrap(), 0.8);
    }

    #[test]
    fn gaussian_mmse_example() {
        let mut r = SelectionRule::mmse(Side::U, Prior::gaussian(0.0, 1.0).unwrap()).unwrap();
        assert!(r.select(0, 2.0, 1.0).is_err());
        r.set_channel(Channel { scale: 1.0, noise_var: 1.0 });
        assert!(close(r.select(0, 2.0, 1.0).unwrap(), 1.0, 1e-15));
        assert!(close(r.lipschitz_constant(1.0).unwrap(), 0.5, 1e-15));
    }

    #[test]
    fn bernoulli_exp_trivial_cases() {
        for p in [-3.0, 0.0, 2.0, 10.0] {
            assert_eq!(mmse_denoiser_bernoulli_exp(0.0, 1.0, 1.0, 0.5, p).unwrap(), (0.0, 0.0));
            let (m, d) = mmse_denoiser_bernoulli_exp(0.1, 2.0, 0.0, 0.5, p).unwrap();
            assert!(close(m, 0.05, 1e-15) && d == 0.0);
        }
        assert!(mmse_denoiser_bernoulli_exp(0.1, 1.0, 1.0, 0.0, 1.0).is_err());
        assert!(mmse_denoiser_bernoulli_exp(0.1, 1.0, 1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn bernoulli_exp_negative_scale_mirrors() {
        let (m1, d1) = mmse_denoiser_bernoulli_exp(0.2, 1.0, 0.7, 0.3, 1.1).unwrap();
        let (m2, d2) = mmse_denoiser_bernoulli_exp(0.2, 1.0, -0.7, 0.3, -1.1).unwrap();
        assert!(close(m1, m2, 1e-15));
        assert!(close(d1, -d2, 1e-15));
    }

    #[test]
    fn bernoulli_exp_output_nonnegative_in_extreme_tails() {
        for p in [-1e3, -50.0, -8.0, 0.0, 8.0, 50.0, 1e3] {
            let (m, d) = mmse_denoiser_bernoulli_exp(0.1, 1.0, 1.0, 0.25, p).unwrap();
            assert!(m >= 0.0 && m.is_finite() && d.is_finite() && d >= 0.0, "p = {p}: {m} {d}");
        }
    }

    #[test]
    fn lambda_update_modes() {
        let d = LambdaRule::Descent;
        let s = LambdaStats { mu: Some(0.0), norm_sq_over_m: Some(0.7), ..Default::default() };
        assert_eq!(lambda_update(&d, &s).unwrap(), 0.7);
        let s = LambdaStats { mu: Some(-0.1), norm_sq_over_m: Some(0.7), ..Default::default() };
        assert!(close(lambda_update(&d, &s).unwrap(), 0.6, 1e-15));
        let s = LambdaStats { mu: Some(0.0), ..Default::default() };
        assert!(matches!(lambda_update(&d, &s), Err(Error::MissingStats(_))));

        let x = array![1.0, 2.0, 3.0];
        let x0 = array![0.0, 0.0, 0.0];
        let a = LambdaRule::Analysis(LambdaFn::second_moment(1.0));
        let s = LambdaStats { truth: Some(x0.view()), estimate: Some(x.view()), ..Default::default() };
        assert!(close(lambda_update(&a, &s).unwrap(), 14.0 / 3.0, 1e-15));
        let s = LambdaStats { estimate: Some(x.view()), ..Default::default() };
        assert!(lambda_update(&a, &s).is_err());
    }
}
