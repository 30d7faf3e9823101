//! Outer layer of the solver: bisection on the linearization parameter
//! `β` for the signal-aware optimum, the reliable-channel closed form,
//! and the age-optimal (signal-agnostic) threshold.
//!
//! `β = mse_opt` is the root of `h(β) = E[J(W_Y, β)]`, and the sign of
//! `h` tells which side of the optimum a probe sits on: `h(β) < 0` iff
//! `mse_opt < β`. The age-optimal objective solves a separate scalar
//! root equation and also serves as the default upper bracket, since
//! signal-agnostic policies are a subset of signal-aware ones.

use thiserror::Error;

use crate::channel::{ChannelError, ChannelModel, DelayModel};
use crate::stagecost::{stage_cost, StageParams};
use crate::valueiter::{
    iterate_to_convergence, IterError, IterParams, IterState, SolveContext,
};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Iter(#[from] IterError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("could not establish a sign-changing bracket after {tried} adjustments (last bracket [{k1}, {k2}])")]
    BracketExpansion { tried: usize, k1: f64, k2: f64 },
    #[error("invalid solver configuration: {0}")]
    Config(String),
}

/// Settings of the two-layer solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Lower β bracket; default `E[Y] + eps2`.
    pub k1: Option<f64>,
    /// Upper β bracket; default: the age-optimal objective.
    pub k2: Option<f64>,
    /// Inner tolerance ε₁ (weighted-norm error of `J`).
    pub eps1: f64,
    /// Outer bisection tolerance ε₂ on the β bracket width.
    pub eps2: f64,
    /// Contraction modulus; `None` selects `(1 + α)/2`.
    pub rho: Option<f64>,
    /// Grid node count for the tabulated functions.
    pub grid_nodes: usize,
    /// Inner Gauss-Hermite node count.
    pub gh_nodes: usize,
    /// Cap on inner value-iteration steps.
    pub max_inner: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            k1: None,
            k2: None,
            eps1: 1e-6,
            eps2: 1e-6,
            rho: None,
            grid_nodes: 2001,
            gh_nodes: 64,
            max_inner: 400,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.eps1 > 0.0 && self.eps2 > 0.0) {
            return Err(SolverError::Config("tolerances must be positive".into()));
        }
        if let (Some(k1), Some(k2)) = (self.k1, self.k2) {
            if k1 >= k2 {
                return Err(SolverError::Config(format!("k1 = {k1} must be below k2 = {k2}")));
            }
        }
        Ok(())
    }

    pub fn iter_params(&self) -> IterParams {
        IterParams {
            grid_nodes: self.grid_nodes,
            gh_nodes: self.gh_nodes,
            eps1: self.eps1,
            rho: self.rho,
            max_inner: self.max_inner,
        }
    }
}

/// Converged output of the signal-aware solve.
#[derive(Debug, Clone)]
pub struct SolverResult {
    /// The optimal long-run average MSE (the β root).
    pub mse_opt: f64,
    /// Threshold at the root.
    pub v: f64,
    /// Per-iteration thresholds of the final inner solve.
    pub v_history: Vec<f64>,
    /// Outer bisection iterations.
    pub outer_iters: usize,
    /// Recorded probes `(β, E[J(W_Y, β)])`.
    pub h_values: Vec<(f64, f64)>,
}

/// Output of the signal-agnostic (age-threshold) solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgeResult {
    /// Optimal long-run average age (equal to its MSE).
    pub age_opt: f64,
    /// Age threshold `age_opt - E[Y]/(1-α)`.
    pub threshold: f64,
    /// Whether the threshold can never exceed the post-delivery age, so
    /// the policy degenerates to zero-wait.
    pub is_zero_wait: bool,
}

/// `E[J(W_Y, β)]` against the tabulated value function.
pub fn epoch_value(state: &IterState, delay: &DelayModel) -> Result<f64, SolverError> {
    Ok(delay.expect_over_wy(0.0, |x| state.j.eval(x))?)
}

/// Convenience composition: inner solve at `β`, then the epoch value.
pub fn h_of_beta(beta: f64, channel: &ChannelModel, cfg: &SolverConfig) -> Result<f64, SolverError> {
    cfg.validate()?;
    let cap = resolve_beta_cap(beta, channel, cfg)?;
    let ctx = SolveContext::new(channel, cap, &cfg.iter_params())?;
    let state = iterate_to_convergence(&ctx, beta)?;
    epoch_value(&state, channel.delay())
}

/// Same as [`h_of_beta`] but reusing a prebuilt context across probes.
pub fn h_of_beta_in(ctx: &SolveContext, beta: f64) -> Result<(f64, IterState), SolverError> {
    let state = iterate_to_convergence(ctx, beta)?;
    let h = ctx
        .channel()
        .delay()
        .expect_over_wy_with(ctx.gh(), 0.0, |x| state.j.eval(x))?;
    Ok((h, state))
}

fn resolve_beta_cap(beta: f64, channel: &ChannelModel, cfg: &SolverConfig) -> Result<f64, SolverError> {
    let base = match cfg.k2 {
        Some(k2) => k2,
        None => solve_age_opt(channel, cfg)?.age_opt,
    };
    Ok(base.max(beta))
}

/// Dinkelbach bisection on `β` (the signal-aware optimum).
///
/// The default bracket is `[E[Y] + ε₂, age_opt]` and is adjusted
/// automatically when an endpoint sign disagrees: the lower end shrinks
/// toward `E[Y]`, the upper end doubles (rebuilding the grid).
pub fn solve_mse_opt(channel: &ChannelModel, cfg: &SolverConfig) -> Result<SolverResult, SolverError> {
    cfg.validate()?;
    let (mean_y, _) = channel.delay().moments();
    let mut k1 = cfg.k1.unwrap_or(mean_y + cfg.eps2);
    let mut k2 = match cfg.k2 {
        Some(k2) => k2,
        None => solve_age_opt(channel, cfg)?.age_opt,
    };
    if k1 >= k2 {
        return Err(SolverError::Config(format!("bracket [{k1}, {k2}] is empty")));
    }

    let mut ctx = SolveContext::new(channel, k2, &cfg.iter_params())?;
    let mut h_values: Vec<(f64, f64)> = Vec::new();

    // A probe below the feasible range counts as a positive sign.
    let probe = |ctx: &SolveContext,
                     beta: f64,
                     h_values: &mut Vec<(f64, f64)>|
     -> Result<bool, SolverError> {
        match h_of_beta_in(ctx, beta) {
            Ok((h, _)) => {
                h_values.push((beta, h));
                Ok(h < 0.0)
            }
            Err(SolverError::Iter(IterError::NoSignChange { .. })) => Ok(false),
            Err(e) => Err(e),
        }
    };

    let mut adjustments = 0usize;
    while probe(&ctx, k1, &mut h_values)? {
        // h(k1) < 0: the optimum sits below; shrink toward E[Y].
        k1 = mean_y + 0.5 * (k1 - mean_y);
        adjustments += 1;
        if adjustments > 60 {
            return Err(SolverError::BracketExpansion { tried: adjustments, k1, k2 });
        }
    }
    while !probe(&ctx, k2, &mut h_values)? {
        k2 *= 2.0;
        adjustments += 1;
        if adjustments > 60 {
            return Err(SolverError::BracketExpansion { tried: adjustments, k1, k2 });
        }
        ctx = SolveContext::new(channel, k2, &cfg.iter_params())?;
    }

    let mut outer_iters = 0usize;
    while k2 - k1 > cfg.eps2 && outer_iters < 200 {
        let beta = 0.5 * (k1 + k2);
        if probe(&ctx, beta, &mut h_values)? {
            k2 = beta;
        } else {
            k1 = beta;
        }
        outer_iters += 1;
    }

    let mse_opt = 0.5 * (k1 + k2);
    let state = iterate_to_convergence(&ctx, mse_opt)?;
    Ok(SolverResult {
        mse_opt,
        v: state.v_n,
        v_history: state.v_history,
        outer_iters,
        h_values,
    })
}

/// Reliable-channel (`α = 0`) solution by scalar bisection on
/// `E[g(W_Y, √(3(β - E[Y])), β)] = 0`; the threshold is the closed form
/// `√(3(β - E[Y]))`. Serves as an independent oracle for
/// [`solve_mse_opt`] at `α = 0`.
pub fn reliable_closed_form(delay: &DelayModel, cfg: &SolverConfig) -> Result<SolverResult, SolverError> {
    cfg.validate()?;
    let (mean_y, mean_y2) = delay.moments();
    let phi = |beta: f64| -> Result<f64, SolverError> {
        let v = (3.0 * (beta - mean_y)).max(0.0).sqrt();
        Ok(delay.expect_over_wy(0.0, |x| {
            stage_cost(&StageParams { w: x, v, beta, mean_y, mean_y2 })
        })?)
    };

    let mut h_values = Vec::new();
    let mut lo = mean_y * (1.0 + 1e-12) + 1e-12;
    let mut hi = mean_y + mean_y.max(1.0);
    let mut tries = 0usize;
    while phi(hi)? > 0.0 {
        hi *= 2.0;
        tries += 1;
        if tries > 60 {
            return Err(SolverError::BracketExpansion { tried: tries, k1: lo, k2: hi });
        }
    }
    let mut outer_iters = 0usize;
    while hi - lo > cfg.eps2 && outer_iters < 200 {
        let beta = 0.5 * (lo + hi);
        let value = phi(beta)?;
        h_values.push((beta, value));
        if value < 0.0 {
            hi = beta;
        } else {
            lo = beta;
        }
        outer_iters += 1;
    }
    let mse_opt = 0.5 * (lo + hi);
    let v = (3.0 * (mse_opt - mean_y)).max(0.0).sqrt();
    Ok(SolverResult { mse_opt, v, v_history: vec![v], outer_iters, h_values })
}

/// Age-optimal (signal-agnostic) solve.
///
/// The root function expands `∫_a^b t dt = (b² - a²)/2` with
/// `b = max(w̄, Y) + Y'`, `w̄ = β - E[Y]/(1-α)`, and eliminates the
/// geometric resampling sum through `E[Y'] = E[Y]/(1-α)` and
/// `E[Y'²] = E[Y²]/(1-α) + 2α E[Y]²/(1-α)²`; only one-dimensional
/// expectations over `Y` remain.
pub fn solve_age_opt(channel: &ChannelModel, cfg: &SolverConfig) -> Result<AgeResult, SolverError> {
    cfg.validate()?;
    let alpha = channel.alpha();
    let delay = channel.delay();
    let (mean_y, mean_y2) = delay.moments();
    let succ = 1.0 - alpha;
    let ey_prime = mean_y / succ;
    let ey_prime2 = mean_y2 / succ + 2.0 * alpha * mean_y * mean_y / (succ * succ);

    let root_fn = |beta: f64| -> f64 {
        let wbar = beta - ey_prime;
        let mut e_max1 = 0.0; // E[max(wbar, Y)]
        let mut e_max2 = 0.0; // E[max(wbar, Y)^2]
        let mut e_stop = 0.0; // E[max(beta - Y, E[Y]/(1-alpha))]
        for &(y, q) in delay.quad_nodes() {
            let m = wbar.max(y);
            e_max1 += q * m;
            e_max2 += q * m * m;
            e_stop += q * (beta - y).max(ey_prime);
        }
        0.5 * (e_max2 + 2.0 * e_max1 * ey_prime + ey_prime2 - mean_y2) - beta * e_stop
    };

    let mut lo = ey_prime;
    if root_fn(lo) <= 0.0 {
        return Ok(AgeResult {
            age_opt: lo,
            threshold: 0.0,
            is_zero_wait: true,
        });
    }
    let mut hi = lo + mean_y.max(1.0);
    let mut tries = 0usize;
    while root_fn(hi) > 0.0 {
        hi = lo + (hi - lo) * 2.0;
        tries += 1;
        if tries > 60 {
            return Err(SolverError::BracketExpansion { tried: tries, k1: lo, k2: hi });
        }
    }
    for _ in 0..200 {
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if root_fn(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let age_opt = 0.5 * (lo + hi);
    let threshold = age_opt - ey_prime;
    let is_zero_wait = threshold <= delay.min_support() + 1e-9;
    Ok(AgeResult { age_opt, threshold, is_zero_wait })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    #[test]
    fn age_solver_reduces_to_renewal_reward_for_constant_reliable() {
        let channel = ChannelModel::new(0.0, DelayModel::constant(6.0).unwrap()).unwrap();
        let res = solve_age_opt(&channel, &cfg()).unwrap();
        assert_abs_diff_eq!(res.age_opt, 9.0, epsilon = 1e-9);
        assert_abs_diff_eq!(res.threshold, 3.0, epsilon = 1e-9);
        assert!(res.is_zero_wait);

        // F(3c/2) = 0 analytically for any constant c.
        for c in [1.0, 2.5, 6.0] {
            let ch = ChannelModel::new(0.0, DelayModel::constant(c).unwrap()).unwrap();
            let r = solve_age_opt(&ch, &cfg()).unwrap();
            assert_abs_diff_eq!(r.age_opt, 1.5 * c, epsilon = 1e-9 * c.max(1.0));
        }
    }

    #[test]
    fn age_solver_keeps_zero_wait_for_constant_delay_any_alpha() {
        for alpha in [0.0, 0.3, 0.65] {
            let channel = ChannelModel::new(alpha, DelayModel::constant(6.0).unwrap()).unwrap();
            let res = solve_age_opt(&channel, &cfg()).unwrap();
            assert!(res.is_zero_wait, "alpha = {alpha}: {res:?}");
            assert!(res.age_opt >= 6.0 / (1.0 - alpha));
        }
    }

    #[test]
    fn age_solver_waits_for_heavy_tailed_delay() {
        let channel =
            ChannelModel::new(0.65, DelayModel::lognormal_normalized(1.5).unwrap()).unwrap();
        let res = solve_age_opt(&channel, &cfg()).unwrap();
        assert!(!res.is_zero_wait);
        assert!(res.threshold > 0.0);
        assert!(res.age_opt > 1.0 / 0.35);
    }

    #[test]
    fn reliable_closed_form_identity_and_small_delay_limit() {
        let delay = DelayModel::constant(6.0).unwrap();
        let res = reliable_closed_form(&delay, &cfg()).unwrap();
        assert_abs_diff_eq!(
            res.v,
            (3.0 * (res.mse_opt - 6.0)).sqrt(),
            epsilon = 1e-12
        );
        // The optimum beats the zero-wait (= age-optimal) policy at 9.0
        // and exceeds the delay floor.
        assert!(res.mse_opt > 6.0 && res.mse_opt < 9.0, "mse_opt = {}", res.mse_opt);

        // Vanishing delay drives both outputs to zero.
        let tiny = DelayModel::constant(1e-4).unwrap();
        let res = reliable_closed_form(&tiny, &cfg()).unwrap();
        assert!(res.mse_opt < 1e-3, "mse_opt = {}", res.mse_opt);
        assert!(res.v < 0.05, "v = {}", res.v);
    }

    #[test]
    fn grid_solver_matches_scalar_oracle_on_reliable_channel() {
        let delay = DelayModel::constant(6.0).unwrap();
        let channel = ChannelModel::new(0.0, delay.clone()).unwrap();
        let grid = solve_mse_opt(&channel, &cfg()).unwrap();
        let oracle = reliable_closed_form(&delay, &cfg()).unwrap();
        assert!(
            ((grid.mse_opt - oracle.mse_opt) / oracle.mse_opt).abs() < 1e-6,
            "grid {} vs oracle {}",
            grid.mse_opt,
            oracle.mse_opt
        );
    }

    #[test]
    fn epoch_value_signs_bracket_the_root() {
        let channel = ChannelModel::new(0.3, DelayModel::constant(6.0).unwrap()).unwrap();
        let res = solve_mse_opt(&channel, &cfg()).unwrap();
        let below = h_of_beta(0.9 * res.mse_opt, &channel, &cfg()).unwrap();
        let above = h_of_beta(1.1 * res.mse_opt, &channel, &cfg()).unwrap();
        assert!(below > 0.0, "h below the root should be positive: {below}");
        assert!(above < 0.0, "h above the root should be negative: {above}");
        let at = h_of_beta(res.mse_opt, &channel, &cfg()).unwrap();
        assert!(at.abs() < below.min(-above), "h at root not smallest: {at}");
    }

    #[test]
    fn epoch_value_matches_scalar_closed_form_on_reliable_channel() {
        let delay = DelayModel::constant(6.0).unwrap();
        let channel = ChannelModel::new(0.0, delay.clone()).unwrap();
        let (mean_y, mean_y2) = delay.moments();
        let params = cfg();
        let ctx = SolveContext::new(&channel, 14.0, &params.iter_params()).unwrap();
        for beta in [8.0, 9.5, 11.0] {
            let (h, _) = h_of_beta_in(&ctx, beta).unwrap();
            let v = (3.0 * (beta - 6.0)).sqrt();
            let scalar = delay
                .expect_over_wy(0.0, |x| {
                    stage_cost(&StageParams { w: x, v, beta, mean_y, mean_y2 })
                })
                .unwrap();
            assert!(
                (h - scalar).abs() < 1e-6 * scalar.abs().max(1.0),
                "beta {beta}: grid {h} vs scalar {scalar}"
            );
        }
    }

    #[test]
    fn recorded_h_values_decrease_in_beta() {
        let channel = ChannelModel::new(0.3, DelayModel::constant(6.0).unwrap()).unwrap();
        let res = solve_mse_opt(&channel, &cfg()).unwrap();
        let mut probes = res.h_values.clone();
        probes.sort_by(|a, b| a.0.total_cmp(&b.0));
        probes.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-12);
        for pair in probes.windows(2) {
            assert!(
                pair[1].1 < pair[0].1,
                "h not decreasing: {:?} -> {:?}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn unreliable_channel_optimum_sits_between_reliable_and_age_optimal() {
        let delay = DelayModel::constant(6.0).unwrap();
        let channel = ChannelModel::new(0.3, delay.clone()).unwrap();
        let res = solve_mse_opt(&channel, &cfg()).unwrap();
        let reliable = reliable_closed_form(&delay, &cfg()).unwrap();
        let age = solve_age_opt(&channel, &cfg()).unwrap();
        assert!(
            res.mse_opt > reliable.mse_opt && res.mse_opt < age.age_opt,
            "mse {} not in ({}, {})",
            res.mse_opt,
            reliable.mse_opt,
            age.age_opt
        );
        // Known operating point for this channel.
        assert!((res.mse_opt - 11.0).abs() < 0.5, "mse_opt = {}", res.mse_opt);
    }

    #[test]
    fn age_optimal_objective_is_a_valid_upper_bracket() {
        // Signal-agnostic policies are a subset of signal-aware ones, so
        // h evaluated at the age-optimal objective must be negative.
        let channels = [
            ChannelModel::new(0.3, DelayModel::constant(6.0).unwrap()).unwrap(),
            ChannelModel::new(0.65, DelayModel::lognormal_normalized(1.5).unwrap()).unwrap(),
        ];
        for channel in channels {
            let cfg = SolverConfig { eps2: 1e-3, ..SolverConfig::default() };
            let age = solve_age_opt(&channel, &cfg).unwrap();
            let h = h_of_beta(age.age_opt, &channel, &cfg).unwrap();
            assert!(h < 0.0, "h(age_opt = {}) = {h} should be negative", age.age_opt);
        }
    }

    #[test]
    fn returned_threshold_is_consistent_with_its_own_root() {
        let channel = ChannelModel::new(0.3, DelayModel::constant(6.0).unwrap()).unwrap();
        let cfg = SolverConfig::default();
        let res = solve_mse_opt(&channel, &cfg).unwrap();
        assert!(res.v > 0.0 && res.v <= (3.0 * res.mse_opt).sqrt());
        let ctx = SolveContext::new(&channel, res.mse_opt * 1.5, &cfg.iter_params()).unwrap();
        let state = iterate_to_convergence(&ctx, res.mse_opt).unwrap();
        assert!((state.v_n - res.v).abs() < 1e-6, "{} vs {}", state.v_n, res.v);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let channel = ChannelModel::new(0.3, DelayModel::constant(6.0).unwrap()).unwrap();
        let bad = SolverConfig { k1: Some(12.0), k2: Some(10.0), ..SolverConfig::default() };
        assert!(solve_mse_opt(&channel, &bad).is_err());
        let bad = SolverConfig { eps2: 0.0, ..SolverConfig::default() };
        assert!(solve_mse_opt(&channel, &bad).is_err());
    }
}
