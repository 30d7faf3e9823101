//! Closed-form quantities for one stage of the hitting-time policy.
//!
//! A stage starts with estimation error `w`, waits until the error first
//! reaches `±v`, then holds the sample in flight for the random delay.
//! The identities used here: `E[τ] = v² - w²`, the exit point is `+v`
//! with probability `(v+w)/(2v)`, and `E[∫₀^τ X_t² dt] = (v⁴ - w⁴)/6`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageCostError {
    #[error("exit law needs |w| <= v and v > 0, got w = {w}, v = {v}")]
    OutsideBand { w: f64, v: f64 },
}

/// Inputs of the per-stage cost `g(w, v, β)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageParams {
    /// Estimation error at the start of the stage.
    pub w: f64,
    /// Sampling threshold, `v >= 0`.
    pub v: f64,
    /// Objective-linearization parameter (units of MSE).
    pub beta: f64,
    /// `E[Y]` of the transmission delay.
    pub mean_y: f64,
    /// `E[Y²]` of the transmission delay.
    pub mean_y2: f64,
}

/// Per-stage cost
/// `g = ½E[Y²] + E[Y]w² - E[Y]β + (v⁴-w⁴)₊/6 - (β-E[Y])(v²-w²)₊`.
///
/// Even in `w` and continuous at `|w| = v`; both max terms vanish there.
pub fn stage_cost(p: &StageParams) -> f64 {
    let w2 = p.w * p.w;
    let v2 = p.v * p.v;
    let quartic = (v2 * v2 - w2 * w2).max(0.0);
    let quadratic = (v2 - w2).max(0.0);
    0.5 * p.mean_y2 + p.mean_y * w2 - p.mean_y * p.beta + quartic / 6.0
        - (p.beta - p.mean_y) * quadratic
}

/// `E[τ] = (v² - w²)₊` for the hitting time of `±v` from `w`.
pub fn expected_hitting_time(w: f64, v: f64) -> f64 {
    (v * v - w * w).max(0.0)
}

/// Exit law of the hitting time: `+v` or `-v` with the odds of a
/// martingale stopped at the band edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitLaw {
    pub v: f64,
    pub p_plus: f64,
    pub p_minus: f64,
}

impl ExitLaw {
    /// Probability-weighted mean of the exit point; equals the start `w`.
    pub fn mean(&self) -> f64 {
        self.p_plus * self.v - self.p_minus * self.v
    }
}

/// Exit distribution over `{+v, -v}` starting from `w` with `|w| <= v`.
pub fn exit_distribution(w: f64, v: f64) -> Result<ExitLaw, StageCostError> {
    if v.is_nan() || w.is_nan() || v <= 0.0 || w.abs() > v {
        return Err(StageCostError::OutsideBand { w, v });
    }
    let p_plus = (v + w) / (2.0 * v);
    Ok(ExitLaw {
        v,
        p_plus,
        p_minus: 1.0 - p_plus,
    })
}

/// `E[∫₀^τ X_t² dt] = (v⁴ - w⁴)₊ / 6` along the hitting stage.
pub fn expected_sq_integral(w: f64, v: f64) -> f64 {
    let w2 = w * w;
    let v2 = v * v;
    (v2 * v2 - w2 * w2).max(0.0) / 6.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_distr::Distribution;
    use rand_pcg::Pcg64Mcg;
    use proptest::prelude::*;

    fn normal(rng: &mut Pcg64Mcg) -> f64 {
        rand_distr::StandardNormal.sample(rng)
    }

    /// Simulates one hitting stage from `w` with threshold `v` on a time
    /// grid, returning (tau, exit_value, ∫ X² dt).
    fn simulate_stage(w: f64, v: f64, dt: f64, rng: &mut Pcg64Mcg) -> (f64, f64, f64) {
        let sqrt_dt = dt.sqrt();
        let mut x = w;
        let mut t = 0.0;
        let mut integral = 0.0;
        while x.abs() < v {
            integral += x * x * dt;
            x += sqrt_dt * normal(rng);
            t += dt;
        }
        (t, x, integral)
    }

    #[test]
    fn stage_cost_known_values() {
        // Stop region: w = 4 >= v = sqrt(15); max terms vanish.
        let p = StageParams { w: 4.0, v: 15.0_f64.sqrt(), beta: 11.0, mean_y: 6.0, mean_y2: 36.0 };
        assert_abs_diff_eq!(stage_cost(&p), 48.0, epsilon = 1e-12);

        // Continuation region from w = 0:
        // 18 - 66 + 225/6 - 5*15 = -85.5.
        let p0 = StageParams { w: 0.0, ..p };
        assert_abs_diff_eq!(stage_cost(&p0), -85.5, epsilon = 1e-12);
    }

    #[test]
    fn stage_cost_monte_carlo_oracle_stop_region() {
        // w >= v: the stage is zero-wait, cost = ∫₀^Y (w+W_t)² dt - βY.
        let (w, beta, y) = (4.0, 11.0, 6.0);
        let p = StageParams { w, v: 15.0_f64.sqrt(), beta, mean_y: y, mean_y2: y * y };
        let mut rng = Pcg64Mcg::seed_from_u64(21);
        let dt = 0.01;
        let steps = (y / dt).round() as usize;
        let sqrt_dt = dt.sqrt();
        let n = 100_000usize;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let mut x = w;
            let mut integral = 0.0;
            for _ in 0..steps {
                integral += x * x * dt;
                x += sqrt_dt * normal(&mut rng);
            }
            let cost = integral - beta * y;
            sum += cost;
            sum2 += cost * cost;
        }
        let mean = sum / n as f64;
        let se = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
        // Left-Riemann bias of the time integral is Y·dt/2 = 0.03.
        assert!(
            (mean - stage_cost(&p)).abs() <= 3.0 * se + 0.05,
            "oracle {mean} vs closed form {} (3se {})",
            stage_cost(&p),
            3.0 * se
        );
    }

    #[test]
    fn stage_cost_monte_carlo_oracle_hitting_region() {
        let (v, beta, y) = (15.0_f64.sqrt(), 11.0, 6.0);
        let p = StageParams { w: 0.0, v, beta, mean_y: y, mean_y2: y * y };
        let mut rng = Pcg64Mcg::seed_from_u64(22);
        let dt = 2.5e-4;
        let post_dt = 0.01;
        let post_steps = (y / post_dt).round() as usize;
        let n = 4_000usize;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let (tau, exit, integral) = simulate_stage(0.0, v, dt, &mut rng);
            // Continue the path through the in-flight window of length Y.
            let mut x = exit;
            let mut post = 0.0;
            let sqrt_post = post_dt.sqrt();
            for _ in 0..post_steps {
                post += x * x * post_dt;
                x += sqrt_post * normal(&mut rng);
            }
            let cost = integral + post - beta * (tau + y);
            sum += cost;
            sum2 += cost * cost;
        }
        let mean = sum / n as f64;
        let se = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - stage_cost(&p)).abs() <= 3.0 * se + 1.5,
            "oracle {mean} vs closed form {} (3se {})",
            stage_cost(&p),
            3.0 * se
        );
    }

    #[test]
    fn stage_cost_is_continuous_at_the_boundary() {
        for (v, beta, ey, ey2) in [(2.0, 11.0, 6.0, 36.0), (0.7, 1.9, 1.0, 2.7)] {
            let at = |w: f64| stage_cost(&StageParams { w, v, beta, mean_y: ey, mean_y2: ey2 });
            let boundary = 0.5 * ey2 + ey * v * v - ey * beta;
            assert_abs_diff_eq!(at(v), boundary, epsilon = 1e-12);
            assert_abs_diff_eq!(at(v - 1e-9), boundary, epsilon = 1e-6);
            assert_abs_diff_eq!(at(v + 1e-9), boundary, epsilon = 1e-6);
        }
    }

    #[test]
    fn hitting_time_trivial_values() {
        assert_abs_diff_eq!(expected_hitting_time(0.0, 2.0), 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(expected_hitting_time(2.0, 2.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(expected_hitting_time(3.0, 2.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(expected_hitting_time(1.0, 2.0), 3.0, epsilon = 1e-15);
    }

    #[test]
    fn hitting_time_and_integral_monte_carlo() {
        let mut rng = Pcg64Mcg::seed_from_u64(23);
        let dt = 1e-4;
        let n = 20_000usize;
        let (mut st, mut st2, mut si, mut si2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let (tau, _, integral) = simulate_stage(1.0, 2.0, dt, &mut rng);
            st += tau;
            st2 += tau * tau;
            si += integral;
            si2 += integral * integral;
        }
        let nf = n as f64;
        let mean_tau = st / nf;
        let se_tau = ((st2 / nf - mean_tau * mean_tau) / nf).sqrt();
        assert!(
            (mean_tau - expected_hitting_time(1.0, 2.0)).abs() <= 3.0 * se_tau + 0.03,
            "tau {mean_tau} (3se {})",
            3.0 * se_tau
        );
        let mean_int = si / nf;
        let se_int = ((si2 / nf - mean_int * mean_int) / nf).sqrt();
        assert!(
            (mean_int - expected_sq_integral(1.0, 2.0)).abs() <= 3.0 * se_int + 0.05,
            "integral {mean_int} vs 2.5 (3se {})",
            3.0 * se_int
        );
    }

    #[test]
    fn exit_law_values_and_rejection() {
        let sym = exit_distribution(0.0, 2.0).unwrap();
        assert_abs_diff_eq!(sym.p_plus, 0.5, epsilon = 1e-15);

        let law = exit_distribution(1.0, 2.0).unwrap();
        assert_abs_diff_eq!(law.p_plus, 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(law.p_minus, 0.25, epsilon = 1e-15);

        let edge = exit_distribution(2.0, 2.0).unwrap();
        assert_abs_diff_eq!(edge.p_plus, 1.0, epsilon = 1e-15);

        assert!(exit_distribution(3.0, 2.0).is_err());
        assert!(exit_distribution(0.0, 0.0).is_err());
    }

    #[test]
    fn sq_integral_values() {
        assert_abs_diff_eq!(expected_sq_integral(0.0, 1.0), 1.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(expected_sq_integral(2.0, 2.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(expected_sq_integral(1.0, 2.0), 2.5, epsilon = 1e-15);
    }

    proptest! {
        /// g reconstructs from the stage primitives:
        /// g = E[∫X²] - β·E[τ] + E[Y]·max(w², v²) + ½E[Y²] - E[Y]β.
        #[test]
        fn stage_cost_reconstructs_from_primitives(
            w in -6.0..6.0f64,
            v in 0.0..5.0f64,
            beta in 0.1..30.0f64,
        ) {
            let (ey, ey2) = (6.0, 36.0);
            let p = StageParams { w, v, beta, mean_y: ey, mean_y2: ey2 };
            let rebuilt = expected_sq_integral(w, v) - beta * expected_hitting_time(w, v)
                + ey * (w * w).max(v * v) + 0.5 * ey2 - ey * beta;
            prop_assert!((stage_cost(&p) - rebuilt).abs() <= 1e-12 * stage_cost(&p).abs().max(1.0));
        }

        /// Even in w.
        #[test]
        fn stage_cost_is_even(w in -6.0..6.0f64, v in 0.0..5.0f64, beta in 0.1..30.0f64) {
            let p = StageParams { w, v, beta, mean_y: 3.0, mean_y2: 10.0 };
            let m = StageParams { w: -w, ..p };
            prop_assert_eq!(stage_cost(&p), stage_cost(&m));
        }

        /// The exit law is a martingale law: mean equals the start point.
        #[test]
        fn exit_law_is_martingale(v in 0.01..10.0f64, frac in -1.0..1.0f64) {
            let w = frac * v;
            let law = exit_distribution(w, v).unwrap();
            prop_assert!((law.mean() - w).abs() <= 1e-12 * v.max(1.0));
        }
    }
}
