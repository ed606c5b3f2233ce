//! Numerical integration primitives: Gauss–Hermite rules for Gaussian
//! expectations and a globally adaptive Gauss–Kronrod (7, 15) integrator for
//! vector-valued integrands on a finite interval.

use crate::error::{Error, Result};

/// Nodes and weights for `E[f(Z)]`, `Z ~ N(0, 1)` (probabilists' scaling).
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Builds an `n`-point rule by Newton iteration on the physicists'
    /// Hermite polynomials, then rescales to the standard normal weight.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Hermite rule needs at least one node");
        const PIM4: f64 = 0.751_125_544_464_942_5;
        const EPS: f64 = 1e-14;
        let nf = n as f64;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let half = n.div_ceil(2);
        let mut z = 0.0f64;
        for i in 0..half {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = PIM4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= EPS {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[n / 2] = 0.0;
        }
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut nodes: Vec<f64> = x.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
        let mut weights: Vec<f64> = w.iter().map(|v| v / sqrt_pi).collect();
        nodes.reverse();
        weights.reverse();
        Self { nodes, weights }
    }

    /// `E[f(Z)]` for standard normal `Z`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct Integral<const K: usize> {
    pub value: [f64; K],
    pub error: f64,
    pub evaluations: usize,
}

#[derive(Clone, Copy)]
struct Segment<const K: usize> {
    a: f64,
    b: f64,
    value: [f64; K],
    /// Kronrod estimate of `∫|f_k|`, the scale for relative tolerances.
    magnitude: [f64; K],
    error: [f64; K],
}

fn gk15<const K: usize, F: FnMut(f64) -> [f64; K]>(f: &mut F, a: f64, b: f64) -> Segment<K> {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kron = [0.0; K];
    let mut gauss = [0.0; K];
    let mut magnitude = [0.0; K];
    for k in 0..K {
        kron[k] = WGK[7] * fc[k];
        gauss[k] = WG[3] * fc[k];
        magnitude[k] = WGK[7] * fc[k].abs();
    }
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        for k in 0..K {
            let s = f1[k] + f2[k];
            kron[k] += WGK[j] * s;
            magnitude[k] += WGK[j] * (f1[k].abs() + f2[k].abs());
            if j % 2 == 1 {
                gauss[k] += WG[j / 2] * s;
            }
        }
    }
    let mut error = [0.0; K];
    for k in 0..K {
        kron[k] *= half;
        gauss[k] *= half;
        magnitude[k] *= half.abs();
        error[k] = (kron[k] - gauss[k]).abs();
    }
    Segment { a, b, value: kron, magnitude, error }
}

/// Globally adaptive Gauss–Kronrod integration of a vector-valued function
/// over `[a, b]`.
///
/// Component `k` has converged once its summed error estimate is below
/// `max(abs_tol[k], rel_tol·∫|f_k|)`; the segment contributing most to the
/// worst unconverged component is bisected next.
pub fn integrate<const K: usize, F>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: [f64; K],
    rel_tol: f64,
    max_segments: usize,
) -> Result<Integral<K>>
where
    F: FnMut(f64) -> [f64; K],
{
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidArgument("integration limits must be finite".into()));
    }
    if a == b {
        return Ok(Integral { value: [0.0; K], error: 0.0, evaluations: 0 });
    }
    let mut segments = vec![gk15(&mut f, a, b)];
    let mut evaluations = 15;
    loop {
        let mut total = [0.0; K];
        let mut magnitude = [0.0; K];
        let mut err = [0.0; K];
        for s in &segments {
            for k in 0..K {
                total[k] += s.value[k];
                magnitude[k] += s.magnitude[k];
                err[k] += s.error[k];
            }
        }
        let max_err = err.iter().fold(0.0f64, |acc, &e| acc.max(e));
        if total.iter().chain(&err).any(|v| !v.is_finite()) {
            return Err(Error::Quadrature { estimate: total[0], bound: max_err });
        }
        let mut target = [0.0; K];
        for k in 0..K {
            target[k] = abs_tol[k].max(rel_tol * magnitude[k]).max(f64::MIN_POSITIVE);
        }
        if (0..K).all(|k| err[k] <= target[k]) {
            return Ok(Integral { value: total, error: max_err, evaluations });
        }
        if segments.len() >= max_segments {
            return Err(Error::Quadrature { estimate: total[0], bound: max_err });
        }
        let badness = |s: &Segment<K>| (0..K).fold(0.0f64, |acc, k| acc.max(s.error[k] / target[k]));
        let (worst, _) = segments.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, s)| {
            let b = badness(s);
            if b > best.1 {
                (i, b)
            } else {
                best
            }
        });
        let s = segments.swap_remove(worst);
        let mid = 0.5 * (s.a + s.b);
        if mid <= s.a || mid >= s.b {
            // interval no longer splittable in floating point
            return Err(Error::Quadrature { estimate: total[0], bound: max_err });
        }
        segments.push(gk15(&mut f, s.a, mid));
        segments.push(gk15(&mut f, mid, s.b));
        evaluations += 30;
    }
}

/// Scalar convenience wrapper around [`integrate`].
pub fn integrate_scalar<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64> {
    integrate::<1, _>(|x| [f(x)], a, b, [abs_tol], rel_tol, 4000).map(|r| r.value[0])
}
