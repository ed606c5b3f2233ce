use iterfac::model::{stream_rng, Prior};
use iterfac::selection::{Channel, LambdaFn, LambdaSchedule, SelectionRule, Side};
use iterfac::state_evolution::{
    mmse_function, mmse_function_by_expectation, mmse_initial_rho_v, phase_transition_probe,
    phase_transition_threshold, scalar_equivalent_metric, se_linear_fixed_point, se_linear_recursion,
    se_linear_trajectory, se_mmse_recursion, se_mmse_trajectory, se_step, se_trajectory, ExpectationEngine,
    Metric, SEState, SeConfig,
};
use rand::Rng;

fn gaussian(mean: f64, var: f64) -> Prior {
    Prior::gaussian(mean, var).unwrap()
}

fn sparse() -> Prior {
    Prior::bernoulli_exponential(0.1, 1.0).unwrap()
}

fn linear_cfg(prior_u: Prior, prior_v: Prior, beta: f64, tau_w: f64, lu: f64, lv: f64) -> SeConfig {
    SeConfig {
        prior_u,
        prior_v,
        beta,
        tau_w,
        rule_u: SelectionRule::linear(Side::U),
        rule_v: SelectionRule::linear(Side::V),
        lambda: LambdaSchedule { phi_u: LambdaFn::constant(lu), phi_v: LambdaFn::constant(lv) },
    }
}

fn mmse_cfg(prior_u: Prior, prior_v: Prior, beta: f64, tau_w: f64) -> SeConfig {
    SeConfig {
        prior_u,
        prior_v,
        beta,
        tau_w,
        rule_u: SelectionRule::mmse(Side::U, prior_u).unwrap(),
        rule_v: SelectionRule::mmse(Side::V, prior_v).unwrap(),
        lambda: LambdaSchedule::constant(1.0),
    }
}

/// Independent composition of the two linear half steps.
fn linear_map(x: f64, beta: f64, t: f64, tau_w: f64) -> f64 {
    let ru = beta * t * x / (beta * t * x + tau_w);
    t * ru / (t * ru + tau_w)
}

#[test]
fn point_mass_start_is_deterministic() {
    let s = SEState::initial_prior_mean(&Prior::point_mass(1.5).unwrap());
    assert_eq!(s.t, 0);
    assert!((s.alpha_v0 - 2.25).abs() < 1e-15 && (s.alpha_v1 - 2.25).abs() < 1e-15);
    assert_eq!(s.rho_v, 1.0);
    assert_eq!(s.alpha_u0, 0.0);
    assert!(s.lambda_u.is_nan() && s.lambda_v.is_nan());
}

#[test]
fn linear_step_matches_closed_forms() {
    let engine = ExpectationEngine::default();
    let (pu, pv) = (gaussian(0.4, 1.3), gaussian(-0.2, 0.8));
    let (tau_u, tau_v) = (pu.second_moment(), pv.second_moment());
    let (beta, tau_w, lu, lv) = (0.6, 0.35, 0.9, 1.7);
    let cfg = linear_cfg(pu, pv, beta, tau_w, lu, lv);
    let s0 = SEState::from_rho_v(&pv, 0.4).unwrap();
    let s1 = se_step(&s0, &cfg, &engine).unwrap();
    // P = β·ᾱ_v1·U0 + N(0, β·τ_w·ᾱ_v0), U = λ_u·P
    let au1 = lu * beta * tau_u * s0.alpha_v1;
    let au0 = lu * lu * (beta * beta * tau_u * s0.alpha_v1.powi(2) + beta * tau_w * s0.alpha_v0);
    let av1 = lv * tau_v * au1;
    let av0 = lv * lv * (tau_v * au1 * au1 + tau_w * au0);
    for (got, want) in [(s1.alpha_u1, au1), (s1.alpha_u0, au0), (s1.alpha_v1, av1), (s1.alpha_v0, av0)] {
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }
    assert!((s1.lambda_u - lu).abs() < 1e-12 && (s1.lambda_v - lv).abs() < 1e-12);
    assert_eq!(s1.t, 1);
}

#[test]
fn linear_general_step_reproduces_correlation_recursion() {
    let engine = ExpectationEngine::default();
    let mut rng = stream_rng(31, 0);
    for _ in 0..20 {
        let pu = gaussian(rng.random_range(-1.0..1.0), rng.random_range(0.2..2.0));
        let pv = gaussian(rng.random_range(-1.0..1.0), rng.random_range(0.2..2.0));
        let beta = rng.random_range(0.1..3.0);
        let tau_w = rng.random_range(0.05..2.0);
        let rho_v = rng.random_range(0.01..1.0);
        let cfg = linear_cfg(pu, pv, beta, tau_w, 1.0, 1.0);
        let s1 = se_step(&SEState::from_rho_v(&pv, rho_v).unwrap(), &cfg, &engine).unwrap();
        let (ru, rv) = se_linear_recursion(rho_v, beta, pu.second_moment(), pv.second_moment(), tau_w);
        assert!((s1.rho_u - ru).abs() < 1e-8, "rho_u {} vs {ru}", s1.rho_u);
        assert!((s1.rho_v - rv).abs() < 1e-8, "rho_v {} vs {rv}", s1.rho_v);
    }
}

#[test]
fn alternative_denominator_disagrees_with_general_recursion() {
    // dropping β from the first denominator moves the fixed point to (1/6, 1/4)
    let (beta, t, tau_w) = (0.5, 1.0, 0.5);
    let mut rv: f64 = 0.5;
    let mut ru: f64 = 0.0;
    for _ in 0..10_000 {
        ru = (beta * t * rv / (t * rv + tau_w)).min(1.0);
        rv = t * ru / (t * ru + tau_w);
    }
    assert!((ru - 1.0 / 6.0).abs() < 1e-10 && (rv - 0.25).abs() < 1e-10);
    let engine = ExpectationEngine::default();
    let g = gaussian(0.0, 1.0);
    let cfg = linear_cfg(g, g, beta, tau_w, 1.0, 1.0);
    let traj = se_trajectory(SEState::from_rho_v(&g, 0.5).unwrap(), &cfg, 200, &engine).unwrap();
    let last = traj.last().unwrap();
    assert!((last.rho_u - 0.25).abs() < 1e-8 && (last.rho_v - 1.0 / 3.0).abs() < 1e-8);
}

#[test]
fn correlations_do_not_depend_on_lambda_scale() {
    let engine = ExpectationEngine::default();
    let (pu, pv) = (gaussian(0.0, 1.0), sparse());
    let start = SEState::from_rho_v(&pv, 0.3).unwrap();
    let a = se_trajectory(start.clone(), &linear_cfg(pu, pv, 0.5, 0.2, 1.0, 1.0), 4, &engine).unwrap();
    let b = se_trajectory(start, &linear_cfg(pu, pv, 0.5, 0.2, 0.3, 2.5), 4, &engine).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x.rho_u - y.rho_u).abs() < 1e-8 && (x.rho_v - y.rho_v).abs() < 1e-8);
    }
}

#[test]
fn engines_agree_within_sampling_error() {
    let gh = ExpectationEngine::default();
    let mut rng = stream_rng(47, 0);
    let priors = [gaussian(0.3, 1.0), sparse(), gaussian(-1.0, 0.5)];
    for k in 0..20 {
        let prior = priors[k % 3];
        let ch = Channel { scale: rng.random_range(0.1..2.0), noise_var: rng.random_range(0.05..2.0) };
        let lambda = rng.random_range(0.5..2.0);
        let mut rule = SelectionRule::mmse(Side::V, prior).unwrap();
        rule.set_channel(ch);
        let linear = SelectionRule::linear(Side::V);
        let f = |x0: f64, y: f64| {
            let g = rule.select(0, y, 1.0)?;
            let l = linear.select(0, y, lambda)?;
            Ok([g * g, x0 * g, l * l, x0 * l])
        };
        // a fresh stream per state keeps the comparisons independent
        let mc = ExpectationEngine::monte_carlo(100_000, 100 + k as u64).unwrap();
        let a = gh.expect(&prior, ch, "test", f).unwrap();
        let b = mc.expect(&prior, ch, "test", f).unwrap();
        for i in 0..4 {
            let dev = (a.value[i] - b.value[i]).abs();
            assert!(dev <= 3.0 * b.std_error[i], "state {k} component {i}: {dev} > 3 x {}", b.std_error[i]);
        }
    }
}

#[test]
fn linear_recursion_examples() {
    assert_eq!(se_linear_recursion(0.0, 0.5, 1.0, 1.0, 0.5), (0.0, 0.0));
    let traj = se_linear_trajectory(0.5, 0.5, 1.0, 1.0, 0.5, 2000);
    let (ru, rv) = *traj.last().unwrap();
    assert!((ru - 0.25).abs() < 1e-10 && (rv - 1.0 / 3.0).abs() < 1e-10);
    let traj = se_linear_trajectory(0.5, 0.5, 1.0, 1.0, 1.0, 2000);
    let (ru, rv) = *traj.last().unwrap();
    assert!(ru < 1e-6 && rv < 1e-6, "({ru}, {rv})");
    assert!(traj.windows(2).skip(1).all(|w| w[1].1 <= w[0].1));
}

#[test]
fn fixed_point_examples() {
    assert_eq!(se_linear_fixed_point(0.5, 1.0, 1.0, 0.0), (1.0, 1.0));
    assert_eq!(se_linear_fixed_point(0.5, 1.0, 1.0, 0.5f64.sqrt()), (0.0, 0.0));
    assert_eq!(se_linear_fixed_point(0.5, 1.0, 1.0, 0.9), (0.0, 0.0));
    let (ru, rv) = se_linear_fixed_point(0.5, 1.0, 1.0, 0.5);
    assert!((ru - 0.25).abs() < 1e-15 && (rv - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn fixed_point_found_by_bisection() {
    let mut rng = stream_rng(53, 0);
    let mut checked = 0;
    while checked < 30 {
        let beta = rng.random_range(0.1..3.0);
        let (tau_u, tau_v) = (rng.random_range(0.2..2.0), rng.random_range(0.2..2.0));
        let tau_w = rng.random_range(0.05..2.0);
        let t = tau_u * tau_v;
        if beta * t * t <= 1.05 * tau_w * tau_w {
            continue;
        }
        let g = |x: f64| linear_map(x, beta, t, tau_w) - x;
        let (mut lo, mut hi) = (1e-9, 1.0);
        assert!(g(lo) > 0.0 && g(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let rv = 0.5 * (lo + hi);
        let ru = beta * t * rv / (beta * t * rv + tau_w);
        let (fu, fv) = se_linear_fixed_point(beta, tau_u, tau_v, tau_w);
        assert!((fu - ru).abs() < 1e-10 && (fv - rv).abs() < 1e-10);
        let (iu, iv) = *se_linear_trajectory(0.7, beta, tau_u, tau_v, tau_w, 20_000).last().unwrap();
        assert!((iu - fu).abs() < 1e-10 && (iv - fv).abs() < 1e-10);
        checked += 1;
    }
}

#[test]
fn linear_trajectories_are_monotone_after_first_step() {
    for beta in [0.2, 0.5, 1.0, 2.0] {
        for tau_w in [0.1, 0.4, 0.8, 1.5] {
            for start in [0.01, 0.5, 1.0] {
                let traj = se_linear_trajectory(start, beta, 1.0, 1.0, tau_w, 200);
                let d: Vec<f64> = traj.windows(2).skip(1).map(|w| w[1].1 - w[0].1).collect();
                let up = d.iter().all(|&x| x >= -1e-15);
                let down = d.iter().all(|&x| x <= 1e-15);
                assert!(up || down, "beta {beta} tau_w {tau_w} start {start}");
            }
        }
    }
}

#[test]
fn mmse_function_examples() {
    let engine = ExpectationEngine::default();
    assert!((mmse_function(&sparse(), 0.0, &engine).unwrap() - 0.19).abs() < 1e-15);
    assert!((mmse_function(&gaussian(0.0, 1.0), 1.0, &engine).unwrap() - 0.5).abs() < 1e-15);
    assert!((mmse_function_by_expectation(&gaussian(0.0, 1.0), 1.0, &engine).unwrap() - 0.5).abs() < 1e-9);
    assert_eq!(mmse_function(&Prior::point_mass(2.0).unwrap(), 3.0, &engine).unwrap(), 0.0);
    assert!(mmse_function(&sparse(), -1.0, &engine).is_err());
    for eta in [0.1, 1.0, 10.0] {
        let a = mmse_function(&sparse(), eta, &engine).unwrap();
        let b = mmse_function_by_expectation(&sparse(), eta, &engine).unwrap();
        assert!((a - b).abs() < 1e-8, "eta {eta}: {a} vs {b}");
    }
}

#[test]
fn mmse_function_decreases_in_snr() {
    let engine = ExpectationEngine::default();
    for prior in [sparse(), Prior::bernoulli_exponential(0.5, 2.0).unwrap(), gaussian(0.3, 2.0)] {
        let grid: Vec<f64> = (0..40).map(|k| 10f64.powf(-3.0 + 0.125 * k as f64)).collect();
        let vals: Vec<f64> = grid.iter().map(|&e| mmse_function(&prior, e, &engine).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]), "{prior:?}");
        assert!(vals[0] <= prior.variance());
    }
}

#[test]
fn low_snr_expansion_matches_linear_estimation() {
    let engine = ExpectationEngine::default();
    for prior in [sparse(), Prior::bernoulli_exponential(0.4, 1.5).unwrap()] {
        let tau = prior.variance();
        let c: Vec<f64> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&eta| (mmse_function(&prior, eta, &engine).unwrap() - tau / (1.0 + eta * tau)).abs() / (eta * eta))
            .collect();
        let (lo, hi) = c.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(hi.is_finite() && hi <= 2.0 * lo, "{prior:?}: {c:?}");
    }
}

#[test]
fn mmse_recursion_examples() {
    let engine = ExpectationEngine::default();
    let g = gaussian(0.0, 1.0);
    let g2 = gaussian(0.0, 2.0);
    assert_eq!(se_mmse_recursion(0.0, 0.5, 1.0, 2.0, 0.3, &g, &g2, &engine).unwrap(), (0.0, 0.0));
    let traj = se_mmse_trajectory(0.0, 0.5, 0.3, &g, &g2, 10, &engine).unwrap();
    assert!(traj.iter().all(|&(u, v)| u == 0.0 && v == 0.0));
    assert!((mmse_initial_rho_v(&sparse()) - 0.05).abs() < 1e-15);
    assert_eq!(mmse_initial_rho_v(&g), 0.0);
}

#[test]
fn mmse_trajectories_increase_monotonically() {
    let engine = ExpectationEngine::default();
    let g = gaussian(0.0, 1.0);
    for tau_w in [0.01, 0.05, 0.1, 0.3] {
        for beta in [0.5, 1.0] {
            let traj = se_mmse_trajectory(mmse_initial_rho_v(&sparse()), beta, tau_w, &g, &sparse(), 30, &engine).unwrap();
            assert!(traj.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-12), "tau_w {tau_w} beta {beta}");
            assert!(traj.windows(2).skip(1).all(|w| w[1].0 >= w[0].0 - 1e-12));
        }
    }
}

#[test]
fn threshold_values() {
    assert_eq!(phase_transition_threshold(1.0, 1.0, 1.0), 1.0);
    assert!((phase_transition_threshold(0.5, 1.0, 1.0) - 0.7071067811865476).abs() < 1e-16);
}

#[test]
fn threshold_separates_escape_from_collapse() {
    let engine = ExpectationEngine::default();
    let (pu, pv) = (gaussian(0.0, 1.0), gaussian(0.0, 1.5));
    let beta = 0.5;
    let star = phase_transition_threshold(beta, pu.second_moment(), pv.second_moment());
    let below = phase_transition_probe(beta, 0.9 * star, &pu, &pv, &[1e-4, 1e-6, 1e-8], 10_000, &engine).unwrap();
    for p in &below {
        assert!(p.final_rho_v > 0.01, "{p:?}");
    }
    let above = phase_transition_probe(beta, 1.1 * star, &pu, &pv, &[1e-6], 10_000, &engine).unwrap();
    assert!(above[0].max_rho_v < 1e-4 && above[0].final_rho_v < 1e-6, "{:?}", above[0]);
}

#[test]
fn squared_error_identity() {
    let engine = ExpectationEngine::default();
    let (pu, pv) = (gaussian(0.2, 1.0), sparse());
    for cfg in [linear_cfg(pu, pv, 0.5, 0.1, 0.8, 1.3), mmse_cfg(pu, pv, 0.5, 0.1)] {
        let traj = se_trajectory(SEState::initial_prior_mean(&pv), &cfg, 3, &engine).unwrap();
        for s in &traj[1..] {
            let mse_u = scalar_equivalent_metric(Metric::MseU, s, &cfg, &engine).unwrap();
            let mse_v = scalar_equivalent_metric(Metric::MseV, s, &cfg, &engine).unwrap();
            let want_u = pu.second_moment() - 2.0 * s.alpha_u1 + s.alpha_u0;
            let want_v = pv.second_moment() - 2.0 * s.alpha_v1 + s.alpha_v0;
            assert!((mse_u - want_u).abs() < 1e-8, "{mse_u} vs {want_u}");
            assert!((mse_v - want_v).abs() < 1e-8, "{mse_v} vs {want_v}");
            assert_eq!(scalar_equivalent_metric(Metric::CorrV, s, &cfg, &engine).unwrap(), s.rho_v);
            assert_eq!(scalar_equivalent_metric(Metric::CorrU, s, &cfg, &engine).unwrap(), s.rho_u);
        }
        assert!(scalar_equivalent_metric(Metric::MseU, &traj[0], &cfg, &engine).is_err());
    }
}

#[test]
fn mmse_rules_reach_the_scalar_mmse() {
    let engine = ExpectationEngine::default();
    let (pu, pv) = (gaussian(0.0, 1.0), sparse());
    let (beta, tau_w) = (0.5, 0.05);
    let cfg = mmse_cfg(pu, pv, beta, tau_w);
    let traj = se_trajectory(SEState::initial_prior_mean(&pv), &cfg, 5, &engine).unwrap();
    for w in traj.windows(2) {
        let (prev, s) = (&w[0], &w[1]);
        let eta_u = beta * prev.alpha_v1 * prev.alpha_v1 / (tau_w * prev.alpha_v0);
        let e = mmse_function(&pu, eta_u, &engine).unwrap();
        assert!((scalar_equivalent_metric(Metric::MseU, s, &cfg, &engine).unwrap() - e).abs() < 1e-8);
        assert!((s.alpha_u0 - s.alpha_u1).abs() < 1e-8);
        assert!((s.alpha_u1 - (pu.second_moment() - e)).abs() < 1e-8);
        assert!((s.alpha_v0 - s.alpha_v1).abs() < 1e-8);
    }
    let rec = se_mmse_trajectory(mmse_initial_rho_v(&pv), beta, tau_w, &pu, &pv, 5, &engine).unwrap();
    for (s, &(ru, rv)) in traj.iter().zip(&rec) {
        assert!((s.rho_u - ru).abs() < 1e-8 && (s.rho_v - rv).abs() < 1e-8);
    }
}

#[test]
fn noiseless_linear_error_vanishes_with_normalized_scale() {
    let engine = ExpectationEngine::default();
    let g = gaussian(0.0, 1.0);
    let beta = 0.5;
    // λ_u = 1/(β·ᾱ_v1) makes U = U0 + noise at ρ_v = 1
    let cfg = linear_cfg(g, g, beta, 1e-14, 1.0 / beta, 1.0);
    let s1 = se_step(&SEState::from_rho_v(&g, 1.0).unwrap(), &cfg, &engine).unwrap();
    assert!(scalar_equivalent_metric(Metric::MseU, &s1, &cfg, &engine).unwrap() < 1e-12);
    assert!(scalar_equivalent_metric(Metric::MseV, &s1, &cfg, &engine).unwrap() < 1e-12);
}

#[test]
fn invalid_start_rejected() {
    assert!(SEState::from_rho_v(&sparse(), 1.5).is_err());
    assert!(SEState::from_rho_v(&sparse(), -0.1).is_err());
    assert!(ExpectationEngine::monte_carlo(0, 1).is_err());
}
