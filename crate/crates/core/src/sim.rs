//! Monte Carlo simulator of the full sampling loop: Wiener source,
//! sampler policy, unreliable channel, and the last-delivered-value
//! estimator. Produces time-average MSE, age, and sampling rates.
//!
//! The source advances on a fixed time grid by Gaussian increments
//! `√dt·N(0,1)`. Threshold crossings are detected at grid times only;
//! the induced bias is controlled by the dt-refinement check rather
//! than corrected for. Deliveries land on the first grid time at or
//! after `S + Y`. A failed delivery leaves the estimate unchanged.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64Mcg;
use thiserror::Error;

use crate::channel::{standard_normal, ChannelModel, DelayKind};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    BadConfig(String),
    #[error("non-finite path value encountered (diverged accumulator)")]
    NonFinitePath,
    #[error("trace sink error: {0}")]
    Trace(#[from] std::io::Error),
}

/// Sampling policy driven by the simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    /// Sample when the instantaneous estimation error reaches `±v`.
    SignalAwareThreshold(f64),
    /// Sample when the age reaches `a`.
    AgeThreshold(f64),
    /// Sample immediately upon feedback.
    ZeroWait,
}

impl Policy {
    fn validate(&self) -> Result<(), SimError> {
        let ok = match self {
            Policy::SignalAwareThreshold(v) => *v >= 0.0 && v.is_finite(),
            Policy::AgeThreshold(a) => *a >= 0.0 && a.is_finite(),
            Policy::ZeroWait => true,
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::BadConfig(format!("bad policy parameter in {self:?}")))
        }
    }
}

/// Time grid, horizon, and replication settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Time step of the Euler grid.
    pub dt: f64,
    /// Simulated time per replication.
    pub horizon: f64,
    /// Independent replications.
    pub replications: usize,
    /// Base seed; replication `k` derives its own stream from `(seed, k)`.
    pub seed: u64,
    /// Fraction of the horizon discarded before measuring.
    pub warmup_fraction: f64,
}

impl SimConfig {
    /// Default step: `10⁻³·E[Y]`.
    pub fn default_dt(channel: &ChannelModel) -> f64 {
        1e-3 * channel.delay().moments().0
    }

    /// Range checks plus soft warnings (returned, not printed).
    pub fn validate(&self, channel: &ChannelModel) -> Result<Vec<String>, SimError> {
        if self.dt <= 0.0 || !self.dt.is_finite() {
            return Err(SimError::BadConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if let DelayKind::Constant { value } = channel.delay().kind() {
            if self.dt > value / 100.0 {
                return Err(SimError::BadConfig(format!(
                    "dt = {} must not exceed min-support/100 = {}",
                    self.dt,
                    value / 100.0
                )));
            }
        }
        if self.horizon.is_nan() || self.horizon <= 0.0 {
            return Err(SimError::BadConfig("horizon must be positive".into()));
        }
        if self.replications == 0 {
            return Err(SimError::BadConfig("need at least one replication".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(SimError::BadConfig(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        let mut warnings = Vec::new();
        let (mean_y, _) = channel.delay().moments();
        let rough_epoch = mean_y / (1.0 - channel.alpha());
        if self.horizon < 100.0 * rough_epoch {
            warnings.push(format!(
                "horizon {} covers fewer than 100 expected epochs (rough epoch {rough_epoch:.3})",
                self.horizon
            ));
        }
        Ok(warnings)
    }
}

/// Time-average outputs of one replication or an aggregate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimResult {
    pub avg_mse: f64,
    pub avg_age: f64,
    pub sampling_rate: f64,
    pub successful_rate: f64,
    pub ci_halfwidth_mse: f64,
    pub ci_halfwidth_age: f64,
    pub epochs_observed: u64,
}

/// Deterministic per-replication stream derived from `(seed, k)`.
pub fn replication_rng(seed: u64, k: u64) -> Pcg64Mcg {
    // splitmix64 mixing keeps streams decorrelated for adjacent k.
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    Pcg64Mcg::seed_from_u64(z)
}

struct PathAccumulator {
    mse_int: f64,
    age_int: f64,
    samples: u64,
    successes: u64,
}

/// Runs one replication with its own rng stream.
pub fn run_replication<R: Rng + ?Sized>(
    policy: Policy,
    channel: &ChannelModel,
    sc: &SimConfig,
    rng: &mut R,
) -> Result<SimResult, SimError> {
    run_core(policy, channel, sc, rng, 0, &mut std::io::sink())
}

/// Same as [`run_replication`], dumping `(t, w, what, age)` CSV rows
/// every `decimate` steps.
pub fn run_replication_with_trace<R: Rng + ?Sized, W: Write>(
    policy: Policy,
    channel: &ChannelModel,
    sc: &SimConfig,
    rng: &mut R,
    decimate: usize,
    sink: &mut W,
) -> Result<SimResult, SimError> {
    run_core(policy, channel, sc, rng, decimate.max(1), sink)
}

fn run_core<R: Rng + ?Sized, W: Write>(
    policy: Policy,
    channel: &ChannelModel,
    sc: &SimConfig,
    rng: &mut R,
    decimate: usize,
    sink: &mut W,
) -> Result<SimResult, SimError> {
    policy.validate()?;
    sc.validate(channel)?;

    let dt = sc.dt;
    let steps = (sc.horizon / dt).round().max(1.0) as u64;
    let warm_steps = (steps as f64 * sc.warmup_fraction).floor() as u64;
    let acc = match policy {
        Policy::SignalAwareThreshold(v) => step_loop(
            channel,
            dt,
            steps,
            warm_steps,
            rng,
            decimate,
            sink,
            #[inline(always)]
            |_t, err, _age| err.abs() >= v,
        )?,
        Policy::AgeThreshold(a) => step_loop(
            channel,
            dt,
            steps,
            warm_steps,
            rng,
            decimate,
            sink,
            #[inline(always)]
            |_t, _err, age| age >= a,
        )?,
        Policy::ZeroWait => step_loop(
            channel,
            dt,
            steps,
            warm_steps,
            rng,
            decimate,
            sink,
            #[inline(always)]
            |_t, _err, _age| true,
        )?,
    };

    let measured = (steps - warm_steps) as f64 * dt;
    if !(acc.mse_int.is_finite() && acc.age_int.is_finite()) {
        return Err(SimError::NonFinitePath);
    }
    Ok(SimResult {
        avg_mse: acc.mse_int / measured,
        avg_age: acc.age_int / measured,
        sampling_rate: acc.samples as f64 / measured,
        successful_rate: acc.successes as f64 / measured,
        ci_halfwidth_mse: 0.0,
        ci_halfwidth_age: 0.0,
        epochs_observed: acc.successes,
    })
}

#[allow(clippy::too_many_arguments)]
fn step_loop<R: Rng + ?Sized, W: Write, F: Fn(f64, f64, f64) -> bool>(
    channel: &ChannelModel,
    dt: f64,
    steps: u64,
    warm_steps: u64,
    rng: &mut R,
    decimate: usize,
    sink: &mut W,
    trigger: F,
) -> Result<PathAccumulator, SimError> {
    let sqrt_dt = dt.sqrt();
    let mut w = 0.0f64;
    let mut what = 0.0f64;
    // Time of the freshest successfully delivered sample. The estimator
    // starts with the exact initial value, but until something has
    // actually been delivered the age-triggered policies treat the
    // system as overdue and sample at once.
    let mut fresh_t = 0.0f64;
    let mut delivered_any = false;
    let mut in_flight = false;
    let mut deliver_step = 0u64;
    let mut sample_value = 0.0f64;
    let mut sample_t = 0.0f64;
    let mut acc = PathAccumulator { mse_int: 0.0, age_int: 0.0, samples: 0, successes: 0 };

    for k in 0..steps {
        let t = k as f64 * dt;

        // Feedback is instantaneous: resolve a due delivery before the
        // sampler acts at the same grid time.
        if in_flight && k >= deliver_step {
            in_flight = false;
            if channel.sample_success(rng) {
                what = sample_value;
                fresh_t = sample_t;
                delivered_any = true;
                if k >= warm_steps {
                    acc.successes += 1;
                }
            }
        }

        let trigger_age = if delivered_any { t - fresh_t } else { f64::INFINITY };
        if !in_flight && trigger(t, w - what, trigger_age) {
            let y = channel.delay().sample(rng);
            in_flight = true;
            sample_value = w;
            sample_t = t;
            deliver_step = k + ((y / dt).ceil() as u64).max(1);
            if k >= warm_steps {
                acc.samples += 1;
            }
        }

        if k >= warm_steps {
            let err = w - what;
            acc.mse_int += err * err * dt;
            acc.age_int += (t - fresh_t) * dt;
        }

        if decimate != 0 && k.is_multiple_of(decimate as u64) {
            writeln!(sink, "{},{},{},{}", t, w, what, t - fresh_t)?;
        }

        w += sqrt_dt * standard_normal(rng);
    }
    Ok(acc)
}

/// Runs every replication on its derived stream, in order.
pub fn run_replications(
    policy: Policy,
    channel: &ChannelModel,
    sc: &SimConfig,
) -> Result<Vec<SimResult>, SimError> {
    (0..sc.replications)
        .map(|k| {
            let mut rng = replication_rng(sc.seed, k as u64);
            run_replication(policy, channel, sc, &mut rng)
        })
        .collect()
}

/// Mean of per-replication averages with normal-approximation CIs.
pub fn aggregate(reps: &[SimResult]) -> SimResult {
    assert!(!reps.is_empty());
    let n = reps.len() as f64;
    let mean = |f: fn(&SimResult) -> f64| reps.iter().map(f).sum::<f64>() / n;
    let avg_mse = mean(|r| r.avg_mse);
    let avg_age = mean(|r| r.avg_age);
    let halfwidth = |f: fn(&SimResult) -> f64, m: f64| {
        if reps.len() < 2 {
            return 0.0;
        }
        let var = reps.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    };
    SimResult {
        avg_mse,
        avg_age,
        sampling_rate: mean(|r| r.sampling_rate),
        successful_rate: mean(|r| r.successful_rate),
        ci_halfwidth_mse: halfwidth(|r| r.avg_mse, avg_mse),
        ci_halfwidth_age: halfwidth(|r| r.avg_age, avg_age),
        epochs_observed: reps.iter().map(|r| r.epochs_observed).sum(),
    }
}

/// Replicated experiment: aggregate of [`run_replications`].
pub fn run_experiment(
    policy: Policy,
    channel: &ChannelModel,
    sc: &SimConfig,
) -> Result<SimResult, SimError> {
    if sc.replications < 2 {
        return Err(SimError::BadConfig("experiments need at least 2 replications".into()));
    }
    Ok(aggregate(&run_replications(policy, channel, sc)?))
}

/// Empirical hitting-stage statistics with standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_tau: f64,
    pub se_tau: f64,
    pub mean_exit_abs: f64,
    pub exit_plus_frequency: f64,
    pub se_exit_plus: f64,
    pub mean_sq_integral: f64,
    pub se_sq_integral: f64,
    pub stages: usize,
}

/// Simulates hitting stages of threshold `v` from a forced start `w0`,
/// measuring the stage identities directly. Each stage restarts at `w0`.
pub fn epoch_statistics<R: Rng + ?Sized>(
    v: f64,
    w0: f64,
    stages: usize,
    dt: f64,
    rng: &mut R,
) -> Result<EpochStats, SimError> {
    if v.is_nan() || w0.is_nan() || v <= 0.0 || w0.abs() >= v {
        return Err(SimError::BadConfig(format!(
            "stage needs 0 < v and |w0| < v, got v = {v}, w0 = {w0}"
        )));
    }
    if dt.is_nan() || dt <= 0.0 {
        return Err(SimError::BadConfig("dt must be positive".into()));
    }
    let sqrt_dt = dt.sqrt();
    let (mut s_tau, mut s_tau2) = (0.0, 0.0);
    let (mut s_int, mut s_int2) = (0.0, 0.0);
    let mut s_abs = 0.0;
    let mut plus = 0u64;
    for _ in 0..stages {
        let mut x = w0;
        let mut t = 0.0;
        let mut integral = 0.0;
        while x.abs() < v {
            integral += x * x * dt;
            x += sqrt_dt * standard_normal(rng);
            t += dt;
        }
        s_tau += t;
        s_tau2 += t * t;
        s_int += integral;
        s_int2 += integral * integral;
        s_abs += x.abs();
        if x > 0.0 {
            plus += 1;
        }
    }
    let n = stages as f64;
    let mean_tau = s_tau / n;
    let mean_int = s_int / n;
    let p_plus = plus as f64 / n;
    Ok(EpochStats {
        mean_tau,
        se_tau: ((s_tau2 / n - mean_tau * mean_tau) / n).sqrt(),
        mean_exit_abs: s_abs / n,
        exit_plus_frequency: p_plus,
        se_exit_plus: (p_plus * (1.0 - p_plus) / n).sqrt(),
        mean_sq_integral: mean_int,
        se_sq_integral: ((s_int2 / n - mean_int * mean_int) / n).sqrt(),
        stages,
    })
}
