//! Factor priors and generation of spiked rank-one instances
//! `A = u0·v0ᵀ + √m·W`.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar law of the entries of `u0` or `v0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Prior {
    Gaussian { mean: f64, variance: f64 },
    /// `(1 − sparsity)·δ0 + sparsity·Exp(rate)`.
    BernoulliExponential {
        sparsity: f64,
        #[serde(default = "default_rate")]
        rate: f64,
    },
    PointMass { value: f64 },
}

fn default_rate() -> f64 {
    1.0
}

impl Prior {
    pub fn gaussian(mean: f64, variance: f64) -> Result<Self> {
        let p = Prior::Gaussian { mean, variance };
        p.validate()?;
        Ok(p)
    }

    pub fn bernoulli_exponential(sparsity: f64, rate: f64) -> Result<Self> {
        let p = Prior::BernoulliExponential { sparsity, rate };
        p.validate()?;
        Ok(p)
    }

    pub fn point_mass(value: f64) -> Result<Self> {
        let p = Prior::PointMass { value };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Prior::Gaussian { mean, variance } => {
                if !mean.is_finite() || !(variance > 0.0 && variance.is_finite()) {
                    return Err(Error::InvalidPrior(format!(
                        "gaussian needs finite mean and positive variance (got {mean}, {variance})"
                    )));
                }
            }
            Prior::BernoulliExponential { sparsity, rate } => {
                if !(sparsity > 0.0 && sparsity <= 1.0) {
                    return Err(Error::InvalidPrior(format!(
                        "bernoulli-exponential sparsity must lie in (0, 1] (got {sparsity})"
                    )));
                }
                if !(rate > 0.0 && rate.is_finite()) {
                    return Err(Error::InvalidPrior(format!(
                        "bernoulli-exponential rate must be positive (got {rate})"
                    )));
                }
            }
            Prior::PointMass { value } => {
                if !value.is_finite() {
                    return Err(Error::InvalidPrior(format!("point mass at {value}")));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Prior::Gaussian { mean, .. } => mean,
            Prior::BernoulliExponential { sparsity, rate } => sparsity / rate,
            Prior::PointMass { value } => value,
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            Prior::Gaussian { mean, variance } => mean * mean + variance,
            Prior::BernoulliExponential { sparsity, rate } => 2.0 * sparsity / (rate * rate),
            Prior::PointMass { value } => value * value,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Prior::Gaussian { variance, .. } => variance,
            Prior::BernoulliExponential { sparsity, rate } => {
                sparsity * (2.0 - sparsity) / (rate * rate)
            }
            Prior::PointMass { .. } => 0.0,
        }
    }

    /// Draws one value.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::Gaussian { mean, variance } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + variance.sqrt() * z
            }
            Prior::BernoulliExponential { sparsity, rate } => {
                let u: f64 = rng.random();
                if u < sparsity {
                    Exp::new(rate).expect("validated rate").sample(rng)
                } else {
                    0.0
                }
            }
            Prior::PointMass { value } => value,
        }
    }

    /// Draws `count` i.i.d. values.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Array1<f64> {
        Array1::from_iter((0..count).map(|_| self.draw(rng)))
    }
}

/// `(E[X], E[X²])`.
pub fn prior_moments(prior: &Prior) -> (f64, f64) {
    (prior.mean(), prior.second_moment())
}

/// I.i.d. draws from `prior`, reproducible from `seed`.
pub fn sample_prior(prior: &Prior, count: usize, seed: u64) -> Array1<f64> {
    let mut rng = stream_rng(seed, 0);
    prior.sample(&mut rng, count)
}

/// Independent generator number `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_U0: u64 = 0;
const STREAM_V0: u64 = 1;
const STREAM_W: u64 = 2;

/// A realized instance of the spiked rank-one model.
#[derive(Debug, Clone)]
pub struct RankOneProblem {
    pub m: usize,
    pub n: usize,
    pub u0: Array1<f64>,
    pub v0: Array1<f64>,
    pub a: Array2<f64>,
    pub tau_w: f64,
    pub beta: f64,
}

impl RankOneProblem {
    /// Assembles an instance from explicit parts; `a` must be `m × n`.
    pub fn from_parts(u0: Array1<f64>, v0: Array1<f64>, a: Array2<f64>, tau_w: f64) -> Result<Self> {
        let (m, n) = (u0.len(), v0.len());
        if m == 0 || n == 0 {
            return Err(Error::DimensionMismatch("factors must be nonempty".into()));
        }
        if a.dim() != (m, n) {
            return Err(Error::DimensionMismatch(format!(
                "matrix is {:?}, factors imply ({m}, {n})",
                a.dim()
            )));
        }
        if !(tau_w > 0.0 && tau_w.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau_w must be positive (got {tau_w})")));
        }
        Ok(Self { m, n, u0, v0, a, tau_w, beta: n as f64 / m as f64 })
    }

    /// Empirical `(‖u0‖²/m, ‖v0‖²/n)` of this realization.
    pub fn empirical_taus(&self) -> (f64, f64) {
        (self.u0.dot(&self.u0) / self.m as f64, self.v0.dot(&self.v0) / self.n as f64)
    }
}

/// The noise matrix `W` (entries `N(0, tau_w)`) that [`generate_problem`]
/// uses for the given seed, before scaling by `√m`.
pub fn noise_matrix(m: usize, n: usize, tau_w: f64, seed: u64) -> Array2<f64> {
    let mut rng = stream_rng(seed, STREAM_W);
    let sd = tau_w.sqrt();
    Array2::from_shape_simple_fn((m, n), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        sd * z
    })
}

/// Draws `u0`, `v0` and `W` from independent streams of `seed` and forms
/// `A = u0·v0ᵀ + √m·W`.
pub fn generate_problem(
    m: usize,
    n: usize,
    prior_u: &Prior,
    prior_v: &Prior,
    tau_w: f64,
    seed: u64,
) -> Result<RankOneProblem> {
    if m == 0 || n == 0 {
        return Err(Error::DimensionMismatch(format!("m = {m}, n = {n} must be positive")));
    }
    m.checked_mul(n)
        .filter(|&c| c <= isize::MAX as usize / std::mem::size_of::<f64>())
        .ok_or_else(|| Error::DimensionMismatch(format!("{m} x {n} matrix overflows")))?;
    prior_u.validate()?;
    prior_v.validate()?;
    if !(tau_w > 0.0 && tau_w.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau_w must be positive (got {tau_w})")));
    }
    let u0 = prior_u.sample(&mut stream_rng(seed, STREAM_U0), m);
    let v0 = prior_v.sample(&mut stream_rng(seed, STREAM_V0), n);
    let mut a = noise_matrix(m, n, tau_w, seed);
    let root_m = (m as f64).sqrt();
    for ((i, j), x) in a.indexed_iter_mut() {
        *x = u0[i] * v0[j] + root_m * *x;
    }
    RankOneProblem::from_parts(u0, v0, a, tau_w)
}

/// `τ_w = τ_u·τ_v·10^(−snr/10)`.
pub fn snr_to_tau_w(snr_db: f64, tau_u: f64, tau_v: f64) -> f64 {
    tau_u * tau_v * 10f64.powf(-snr_db / 10.0)
}

/// `10·log10(τ_u·τ_v/τ_w)`.
pub fn tau_w_to_snr(tau_w: f64, tau_u: f64, tau_v: f64) -> f64 {
    10.0 * (tau_u * tau_v / tau_w).log10()
}
