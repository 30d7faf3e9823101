//! The unreliable channel: i.i.d. failure probability, i.i.d. random
//! transmission delay `Y`, and expectations over the Gaussian increment
//! `W_Y` accumulated while a sample is in flight.
//!
//! `W_Y` is the value of a standard Wiener process after an independent
//! random time `Y`, so its law is the Gaussian scale mixture
//! `f(x) = E_Y[ φ(x; 0, Y) ]`. Every expectation the solver needs reduces
//! to a tensor quadrature: an outer rule over `Y` and an inner
//! Gauss-Hermite rule for the conditional normal.

use std::sync::OnceLock;

use rand::{Rng, RngExt};
use rand_distr::{Distribution, LogNormal, StandardNormal};
use thiserror::Error;

use crate::quad::GaussHermite;

/// Default node count of the inner Gauss-Hermite rule.
pub const DEFAULT_GH_NODES: usize = 64;
/// Default node count of the outer delay rule for the lognormal family.
pub const DEFAULT_DELAY_NODES: usize = 64;
/// Conditional-normal integration is clipped at this many standard
/// deviations around the mean, per delay node.
pub const CONDITIONAL_CLIP_SDS: f64 = 8.0;

/// Lognormal delay nodes below this weight are dropped; the remaining
/// weights are renormalized. Keeps convolution kernels bounded without
/// moving the quadrature moments at any tested scale.
const NODE_WEIGHT_FLOOR: f64 = 1e-20;

/// Closed-form vs. quadrature moments must agree to this relative error
/// at construction, otherwise the node count is too small for the model.
const MOMENT_CHECK_REL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("delay support must be strictly positive, got {0}")]
    NonPositiveSupport(f64),
    #[error("probability out of range: {0}")]
    BadProbability(f64),
    #[error("lognormal scale must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("failure probability must lie in [0, 1), got {0}")]
    BadAlpha(f64),
    #[error("quadrature for this delay model is under-resolved: relative moment error {err:.2e} with {nodes} nodes")]
    UnderResolved { err: f64, nodes: usize },
    #[error("integrand returned a non-finite value at x = {0}")]
    NonFiniteIntegrand(f64),
}

/// The distribution family of the transmission delay.
#[derive(Debug, Clone, PartialEq)]
pub enum DelayKind {
    /// Deterministic delay `Y ≡ value`.
    Constant { value: f64 },
    /// `Y = y1` with probability `p1`, else `y2`.
    TwoPoint { y1: f64, p1: f64, y2: f64 },
    /// `Y = e^{σA} / E[e^{σA}]` with `A` standard normal; mean is exactly 1.
    LognormalNormalized { sigma: f64 },
}

/// A transmission-delay distribution together with its quadrature nodes.
///
/// Nodes `(y_j, q_j)` satisfy `Σ q_j = 1` and represent `Y` in every
/// numeric expectation. For the bounded families the nodes are the exact
/// support; for the lognormal they are a Gauss-Hermite rule in the
/// underlying normal variable.
#[derive(Debug, Clone)]
pub struct DelayModel {
    kind: DelayKind,
    quad: Vec<(f64, f64)>,
}

impl DelayModel {
    pub fn constant(value: f64) -> Result<Self, ChannelError> {
        if value <= 0.0 || !value.is_finite() {
            return Err(ChannelError::NonPositiveSupport(value));
        }
        Ok(Self {
            kind: DelayKind::Constant { value },
            quad: vec![(value, 1.0)],
        })
    }

    pub fn two_point(y1: f64, p1: f64, y2: f64) -> Result<Self, ChannelError> {
        for y in [y1, y2] {
            if y <= 0.0 || !y.is_finite() {
                return Err(ChannelError::NonPositiveSupport(y));
            }
        }
        if !(0.0..=1.0).contains(&p1) {
            return Err(ChannelError::BadProbability(p1));
        }
        Ok(Self {
            kind: DelayKind::TwoPoint { y1, p1, y2 },
            quad: vec![(y1, p1), (y2, 1.0 - p1)],
        })
    }

    pub fn lognormal_normalized(sigma: f64) -> Result<Self, ChannelError> {
        Self::lognormal_normalized_with_nodes(sigma, DEFAULT_DELAY_NODES)
    }

    /// Lognormal model with an explicit outer node count (used by the
    /// grid-refinement checks).
    pub fn lognormal_normalized_with_nodes(sigma: f64, nodes: usize) -> Result<Self, ChannelError> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(ChannelError::BadSigma(sigma));
        }
        // Y = exp(σ A - σ²/2); map the A-rule through the exponential.
        let rule = GaussHermite::new(nodes);
        let mut quad: Vec<(f64, f64)> = rule
            .standard_normal_pairs()
            .into_iter()
            .filter(|&(_, p)| p >= NODE_WEIGHT_FLOOR)
            .map(|(z, p)| ((sigma * z - 0.5 * sigma * sigma).exp(), p))
            .collect();
        let mass: f64 = quad.iter().map(|(_, p)| p).sum();
        for (_, p) in &mut quad {
            *p /= mass;
        }
        let model = Self {
            kind: DelayKind::LognormalNormalized { sigma },
            quad,
        };
        let (m1, m2) = model.moments();
        let (q1, q2) = model.quadrature_moments();
        let err = ((q1 - m1) / m1).abs().max(((q2 - m2) / m2).abs());
        if err > MOMENT_CHECK_REL {
            return Err(ChannelError::UnderResolved { err, nodes });
        }
        Ok(model)
    }

    pub fn kind(&self) -> &DelayKind {
        &self.kind
    }

    /// Quadrature nodes `(y, weight)` over the delay; weights sum to 1.
    pub fn quad_nodes(&self) -> &[(f64, f64)] {
        &self.quad
    }

    /// Exact `(E[Y], E[Y²])`.
    pub fn moments(&self) -> (f64, f64) {
        match self.kind {
            DelayKind::Constant { value } => (value, value * value),
            DelayKind::TwoPoint { y1, p1, y2 } => (
                p1 * y1 + (1.0 - p1) * y2,
                p1 * y1 * y1 + (1.0 - p1) * y2 * y2,
            ),
            // E[Y^s] = exp(s(s-1)σ²/2) for the mean-one lognormal.
            DelayKind::LognormalNormalized { sigma } => (1.0, (sigma * sigma).exp()),
        }
    }

    /// `(E[Y], E[Y²])` as seen by the quadrature nodes.
    pub fn quadrature_moments(&self) -> (f64, f64) {
        let m1 = self.quad.iter().map(|&(y, q)| q * y).sum();
        let m2 = self.quad.iter().map(|&(y, q)| q * y * y).sum();
        (m1, m2)
    }

    /// Infimum of the support (0 for the lognormal family).
    pub fn min_support(&self) -> f64 {
        match self.kind {
            DelayKind::Constant { value } => value,
            DelayKind::TwoPoint { y1, y2, .. } => y1.min(y2),
            DelayKind::LognormalNormalized { .. } => 0.0,
        }
    }

    /// Quantile of the quadrature measure: smallest node `y` whose
    /// cumulative weight reaches `p`. Used for grid sizing.
    pub fn quantile(&self, p: f64) -> f64 {
        let mut nodes = self.quad.clone();
        nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        for (y, q) in &nodes {
            acc += q;
            if acc >= p {
                return *y;
            }
        }
        nodes.last().map(|&(y, _)| y).unwrap_or(0.0)
    }

    /// Density of `W_Y` at `x`: the Gaussian mixture `E_Y[φ(x; 0, Y)]`.
    pub fn wy_density(&self, x: f64) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        self.quad
            .iter()
            .map(|&(y, q)| q * (-0.5 * x * x / y).exp() / (two_pi * y).sqrt())
            .sum()
    }

    /// `E[f(w + W_Y)]` by tensor quadrature with the default inner rule.
    pub fn expect_over_wy<F: Fn(f64) -> f64>(&self, w: f64, f: F) -> Result<f64, ChannelError> {
        self.expect_over_wy_with(default_gh(), w, f)
    }

    /// `E[f(w + W_Y)]` with an explicit inner Gauss-Hermite rule.
    ///
    /// Per delay node the conditional normal is clipped at
    /// [`CONDITIONAL_CLIP_SDS`] standard deviations and the kept weights
    /// renormalized, so constants integrate to themselves exactly.
    pub fn expect_over_wy_with<F: Fn(f64) -> f64>(
        &self,
        rule: &GaussHermite,
        w: f64,
        f: F,
    ) -> Result<f64, ChannelError> {
        let pairs = clipped_normal_pairs(rule);
        let mut total = 0.0;
        for &(y, q) in &self.quad {
            let sd = y.sqrt();
            let mut inner = 0.0;
            for &(z, p) in &pairs {
                let x = w + sd * z;
                let fx = f(x);
                if !fx.is_finite() {
                    return Err(ChannelError::NonFiniteIntegrand(x));
                }
                inner += p * fx;
            }
            total += q * inner;
        }
        Ok(total)
    }

    /// `E[|W_Y|] = √(2/π) · E[√Y]` from the delay quadrature.
    pub fn mean_abs_wy(&self) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        self.quad.iter().map(|&(y, q)| q * c * y.sqrt()).sum()
    }

    /// Draws one transmission delay.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            DelayKind::Constant { value } => value,
            DelayKind::TwoPoint { y1, p1, y2 } => {
                if rng.random::<f64>() < p1 {
                    y1
                } else {
                    y2
                }
            }
            DelayKind::LognormalNormalized { sigma } => {
                let dist = LogNormal::new(-0.5 * sigma * sigma, sigma)
                    .expect("validated at construction");
                dist.sample(rng)
            }
        }
    }
}

/// Standard-normal pairs of `rule`, clipped at [`CONDITIONAL_CLIP_SDS`]
/// and renormalized to unit mass.
pub(crate) fn clipped_normal_pairs(rule: &GaussHermite) -> Vec<(f64, f64)> {
    let mut pairs: Vec<(f64, f64)> = rule
        .standard_normal_pairs()
        .into_iter()
        .filter(|&(z, _)| z.abs() <= CONDITIONAL_CLIP_SDS)
        .collect();
    let mass: f64 = pairs.iter().map(|(_, p)| p).sum();
    for (_, p) in &mut pairs {
        *p /= mass;
    }
    pairs
}

fn default_gh() -> &'static GaussHermite {
    static RULE: OnceLock<GaussHermite> = OnceLock::new();
    RULE.get_or_init(|| GaussHermite::new(DEFAULT_GH_NODES))
}

/// Failure probability plus delay model: the stochastic environment.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    alpha: f64,
    delay: DelayModel,
}

impl ChannelModel {
    pub fn new(alpha: f64, delay: DelayModel) -> Result<Self, ChannelError> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(ChannelError::BadAlpha(alpha));
        }
        Ok(Self { alpha, delay })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn delay(&self) -> &DelayModel {
        &self.delay
    }

    /// Draws the outcome of one transmission attempt (true = delivered).
    pub fn sample_success<R: Rng + ?Sized>(&self, rng: &mut R) -> bool {
        rng.random::<f64>() >= self.alpha
    }
}

/// Draws a standard normal increment scale; split out so simulation code
/// shares one sampler.
#[inline]
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_pcg::Pcg64Mcg;

    #[test]
    fn constant_and_two_point_moments_are_exact() {
        let c = DelayModel::constant(6.0).unwrap();
        assert_eq!(c.moments(), (6.0, 36.0));
        let tp = DelayModel::two_point(2.0, 0.5, 4.0).unwrap();
        assert_eq!(tp.moments(), (3.0, 10.0));
    }

    #[test]
    fn lognormal_moments_match_monte_carlo() {
        let model = DelayModel::lognormal_normalized(1.5).unwrap();
        let (m1, m2) = model.moments();
        assert_abs_diff_eq!(m1, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m2, (2.25_f64).exp(), epsilon = 1e-12);

        let mut rng = Pcg64Mcg::seed_from_u64(7);
        let n = 10_000_000usize;
        let (mut s1, mut s2, mut s4) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let y = model.sample(&mut rng);
            s1 += y;
            s2 += y * y;
            s4 += y * y * y * y;
        }
        let nf = n as f64;
        let (mean, mean2) = (s1 / nf, s2 / nf);
        let se_mean = ((mean2 - mean * mean) / nf).sqrt();
        let se_mean2 = ((s4 / nf - mean2 * mean2) / nf).sqrt();
        assert!((mean - m1).abs() <= 3.0 * se_mean, "mean {mean} vs {m1}");
        assert!(
            (mean2 - m2).abs() <= 3.0 * se_mean2,
            "second moment {mean2} vs {m2} (3se = {})",
            3.0 * se_mean2
        );
    }

    #[test]
    fn quadrature_moments_match_closed_form() {
        let models = [
            DelayModel::constant(6.0).unwrap(),
            DelayModel::constant(1.0).unwrap(),
            DelayModel::two_point(2.0, 0.5, 4.0).unwrap(),
            DelayModel::lognormal_normalized(0.5).unwrap(),
            DelayModel::lognormal_normalized(1.0).unwrap(),
            DelayModel::lognormal_normalized(1.5).unwrap(),
        ];
        for m in &models {
            let (e1, e2) = m.moments();
            let (q1, q2) = m.quadrature_moments();
            assert!(((q1 - e1) / e1).abs() < 1e-8, "{:?}: E[Y] {q1} vs {e1}", m.kind());
            assert!(((q2 - e2) / e2).abs() < 1e-8, "{:?}: E[Y²] {q2} vs {e2}", m.kind());
            let mass: f64 = m.quad_nodes().iter().map(|(_, q)| q).sum();
            assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn support_must_be_positive_and_alpha_below_one() {
        assert!(DelayModel::constant(0.0).is_err());
        assert!(DelayModel::constant(-1.0).is_err());
        assert!(DelayModel::two_point(0.0, 0.5, 4.0).is_err());
        assert!(ChannelModel::new(1.0, DelayModel::constant(1.0).unwrap()).is_err());
        assert!(ChannelModel::new(-0.1, DelayModel::constant(1.0).unwrap()).is_err());
    }

    #[test]
    fn wy_density_single_kernel_and_mixture_values() {
        let c1 = DelayModel::constant(1.0).unwrap();
        assert_abs_diff_eq!(
            c1.wy_density(0.0),
            1.0 / (2.0 * std::f64::consts::PI).sqrt(),
            epsilon = 1e-12
        );

        // Two-point mixture value at x = 1, checked against a Monte Carlo
        // histogram of W_Y in a small bin around 1.
        let tp = DelayModel::two_point(1.0, 0.5, 4.0).unwrap();
        let expected = 0.5 * (-0.5_f64).exp() / (2.0 * std::f64::consts::PI).sqrt()
            + 0.5 * (-0.125_f64).exp() / (8.0 * std::f64::consts::PI).sqrt();
        assert_abs_diff_eq!(tp.wy_density(1.0), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(tp.wy_density(1.0), 0.209002, epsilon = 1e-5);

        let mut rng = Pcg64Mcg::seed_from_u64(11);
        let n = 4_000_000usize;
        let half_bin = 0.05;
        let mut hits = 0u64;
        for _ in 0..n {
            let y = tp.sample(&mut rng);
            let w = y.sqrt() * standard_normal(&mut rng);
            if (w - 1.0).abs() <= half_bin {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / n as f64;
        let density_hat = p_hat / (2.0 * half_bin);
        let se = (p_hat * (1.0 - p_hat) / n as f64).sqrt() / (2.0 * half_bin);
        assert!(
            (density_hat - tp.wy_density(1.0)).abs() <= 3.0 * se + 2e-4,
            "histogram {density_hat} vs density {}",
            tp.wy_density(1.0)
        );
    }

    #[test]
    fn wy_density_is_symmetric_and_normalized() {
        let models = [
            DelayModel::constant(6.0).unwrap(),
            DelayModel::two_point(2.0, 0.5, 4.0).unwrap(),
        ];
        for m in &models {
            for x in [0.3, 1.7, 5.0, 11.0] {
                assert_abs_diff_eq!(m.wy_density(x), m.wy_density(-x), epsilon = 1e-15);
                assert!(m.wy_density(x) > 0.0);
            }
            // Trapezoid over ±8√ymax with 10^4 points.
            let ymax = m.quad_nodes().iter().map(|&(y, _)| y).fold(0.0, f64::max);
            let l = 8.0 * ymax.sqrt();
            let n = 10_000usize;
            let h = 2.0 * l / n as f64;
            let mut integral = 0.0;
            for i in 0..=n {
                let x = -l + i as f64 * h;
                let weight = if i == 0 || i == n { 0.5 } else { 1.0 };
                integral += weight * m.wy_density(x) * h;
            }
            assert!((integral - 1.0).abs() < 1e-6, "integral {integral}");
        }

        // The lognormal mixture has both very narrow and very wide
        // components; resolve the narrow ones with a finer grid over the
        // mass-carrying range.
        let m = DelayModel::lognormal_normalized(1.5).unwrap();
        let relevant: Vec<f64> = m
            .quad_nodes()
            .iter()
            .filter(|&&(_, q)| q > 1e-13)
            .map(|&(y, _)| y)
            .collect();
        let ymax = relevant.iter().fold(0.0_f64, |a, &b| a.max(b));
        let l = 8.0 * ymax.sqrt();
        let n = 400_000usize;
        let h = 2.0 * l / n as f64;
        let mut integral = 0.0;
        for i in 0..=n {
            let x = -l + i as f64 * h;
            let weight = if i == 0 || i == n { 0.5 } else { 1.0 };
            integral += weight * m.wy_density(x) * h;
        }
        assert!((integral - 1.0).abs() < 1e-6, "lognormal integral {integral}");
    }

    #[test]
    fn expect_over_wy_basic_identities() {
        let c6 = DelayModel::constant(6.0).unwrap();
        assert_abs_diff_eq!(c6.expect_over_wy(0.4, |_| 1.0).unwrap(), 1.0, epsilon = 1e-13);
        assert_abs_diff_eq!(c6.expect_over_wy(2.5, |x| x).unwrap(), 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c6.expect_over_wy(0.0, |x| x * x).unwrap(), 6.0, epsilon = 1e-10);
    }

    #[test]
    fn expect_over_wy_second_moment_identity() {
        // E[(w + W_Y)²] = w² + E[Y] for every model and offset.
        let models = [
            DelayModel::constant(6.0).unwrap(),
            DelayModel::two_point(2.0, 0.5, 4.0).unwrap(),
            DelayModel::lognormal_normalized(1.5).unwrap(),
        ];
        for m in &models {
            let (ey, _) = m.moments();
            for w in [-3.0, 0.0, 0.7, 4.2] {
                let got = m.expect_over_wy(w, |x| x * x).unwrap();
                let want = w * w + ey;
                assert!(
                    ((got - want) / want).abs() < 1e-6,
                    "{:?} w={w}: {got} vs {want}",
                    m.kind()
                );
            }
        }
    }

    #[test]
    fn expect_over_wy_reports_non_finite_integrands() {
        let c = DelayModel::constant(1.0).unwrap();
        let err = c.expect_over_wy(0.0, |x| 1.0 / (x - x)).unwrap_err();
        assert!(matches!(err, ChannelError::NonFiniteIntegrand(_)));
    }

    #[test]
    fn sampling_matches_declared_distributions() {
        let mut rng = Pcg64Mcg::seed_from_u64(3);
        let c6 = DelayModel::constant(6.0).unwrap();
        for _ in 0..100 {
            assert_eq!(c6.sample(&mut rng), 6.0);
        }

        let ch = ChannelModel::new(0.0, c6).unwrap();
        for _ in 0..100 {
            assert!(ch.sample_success(&mut rng));
        }

        let ln = DelayModel::lognormal_normalized(1.5).unwrap();
        let n = 1_000_000usize;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let y = ln.sample(&mut rng);
            s1 += y;
            s2 += y * y;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean}, 3se {}", 3.0 * se);
    }

    #[test]
    fn lognormal_under_resolution_is_reported() {
        // A handful of nodes cannot carry the σ = 1.5 second moment.
        let err = DelayModel::lognormal_normalized_with_nodes(1.5, 8).unwrap_err();
        assert!(matches!(err, ChannelError::UnderResolved { .. }));
    }
}
