//! Inner loop of the threshold solver: the tabulated recursions for
//! `G^x_n` and `J_n`, the per-iteration threshold root, and the
//! weighted-norm convergence test.
//!
//! For a fixed linearization parameter `β` the iteration is
//!
//! ```text
//! G^x_n(w) = E[Y]·w + α·E[ G^x_{n-1}(x)·1{|x| ≥ v_{n-1}}
//!                         + (βx - x³/3)·1{|x| < v_{n-1}} ],  x = w + W_Y
//! v_n      = unique positive root of G^x_n(w) + w³/3 - βw
//! J_n(w)   = g(w, v_n, β) + α·E[ J_{n-1}(max(|w|, v_n) + W_Y) ]
//! ```
//!
//! with `v_0 = 0`, so the first step reduces to `G^x_1(w) = E[Y]·w` and
//! `v_1 = √(3(β - E[Y]))`. The iterates contract in the weighted sup-norm
//! `‖f‖ = sup |f(w)| / max(b̄, w²)` with modulus `ρ`.

mod grid;

pub use grid::{ConvolutionKernel, GridError, GridFunction, GridSpec, Parity, Tail};

use thiserror::Error;

use crate::channel::{ChannelModel, CONDITIONAL_CLIP_SDS};
use crate::quad::{GaussHermite, GaussLegendre};
use crate::stagecost::{stage_cost, StageParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IterError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("no sign change of the root function on (0, sqrt(3*beta)] at beta = {beta}")]
    NoSignChange { beta: f64 },
    #[error("beta = {beta} must exceed E[Y] = {mean_y}")]
    BetaInfeasible { beta: f64, mean_y: f64 },
    #[error("contraction modulus rho = {rho} must lie in (alpha, 1) with alpha = {alpha}")]
    BadRho { rho: f64, alpha: f64 },
    #[error("no admissible weight bound found after {0} doublings")]
    WeightSearchFailed(usize),
}

/// Weighted sup-norm parameters: `u(w) = max(b̄, w²)` and the contraction
/// modulus `ρ ∈ (α, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormWeights {
    pub bbar: f64,
    pub rho: f64,
}

/// Left side of the admissibility inequality
/// `E[1 + 2|W_Y|/√b̄ + W_Y²/b̄] ≤ ρ/α`, from the delay quadrature.
pub fn weight_expectation(channel: &ChannelModel, bbar: f64) -> f64 {
    let (mean_y, _) = channel.delay().moments();
    1.0 + 2.0 * channel.delay().mean_abs_wy() / bbar.sqrt() + mean_y / bbar
}

/// Smallest `b̄` in a doubling search that satisfies the admissibility
/// inequality, verified by quadrature. For `α = 0` any positive value
/// works; the delay scale is returned as a sentinel.
pub fn choose_norm_weights(channel: &ChannelModel, rho: f64) -> Result<NormWeights, IterError> {
    let alpha = channel.alpha();
    if !(rho > alpha && rho < 1.0) {
        return Err(IterError::BadRho { rho, alpha });
    }
    let (mean_y, _) = channel.delay().moments();
    if alpha == 0.0 {
        return Ok(NormWeights { bbar: mean_y.max(1.0), rho });
    }
    let bound = rho / alpha;
    let mut bbar = mean_y.max(1e-6);
    for _ in 0..200 {
        if weight_expectation(channel, bbar) <= bound {
            return Ok(NormWeights { bbar, rho });
        }
        bbar *= 2.0;
    }
    Err(IterError::WeightSearchFailed(200))
}

/// `‖f‖ = sup |f(w)| / max(b̄, w²)` over the grid nodes, with the tail's
/// limiting ratio `|a2|` included.
pub fn weighted_norm(f: &GridFunction, nw: &NormWeights) -> f64 {
    let spec = *f.spec();
    let mut best = f.tail().a2.abs();
    for (i, &v) in f.values().iter().enumerate() {
        let w = spec.node(i);
        let u = nw.bbar.max(w * w);
        let r = v.abs() / u;
        if r > best {
            best = r;
        }
    }
    best
}

/// Inner-loop settings shared by every `β` probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterParams {
    /// Grid node count (forced odd).
    pub grid_nodes: usize,
    /// Inner Gauss-Hermite node count.
    pub gh_nodes: usize,
    /// Inner tolerance ε₁ on the weighted norm of `J`.
    pub eps1: f64,
    /// Contraction modulus; `None` selects `(1 + α)/2`.
    pub rho: Option<f64>,
    /// Hard cap on value-iteration steps.
    pub max_inner: usize,
}

impl Default for IterParams {
    fn default() -> Self {
        Self { grid_nodes: 2001, gh_nodes: 64, eps1: 1e-6, rho: None, max_inner: 400 }
    }
}

/// Precomputed machinery for one channel: grid, quadrature, convolution
/// kernel, and norm weights. All `β` probes of a solve share it.
#[derive(Debug, Clone)]
pub struct SolveContext {
    channel: ChannelModel,
    mean_y: f64,
    mean_y2: f64,
    grid: GridSpec,
    gh: GaussHermite,
    kernel: ConvolutionKernel,
    norm: NormWeights,
    eps1: f64,
    max_inner: usize,
    gl_rules: Vec<GaussLegendre>,
}

/// Node counts of the prebuilt Gauss-Legendre rules used by the
/// band-correction integrals.
const GL_SIZES: [usize; 6] = [12, 16, 24, 32, 48, 64];

impl SolveContext {
    /// `beta_cap` is the largest `β` the outer loop may probe; it sizes
    /// the grid as `w_max = √(3·beta_cap) + 8·√(q99 of Y)`.
    pub fn new(channel: &ChannelModel, beta_cap: f64, params: &IterParams) -> Result<Self, IterError> {
        let (mean_y, mean_y2) = channel.delay().moments();
        let w_max = (3.0 * beta_cap).sqrt() + 8.0 * channel.delay().quantile(0.99).sqrt();
        let grid = GridSpec::new(w_max, params.grid_nodes);
        let gh = GaussHermite::new(params.gh_nodes);
        let kernel = ConvolutionKernel::build(&grid, channel.delay(), &gh);
        let rho = params.rho.unwrap_or(0.5 * (1.0 + channel.alpha()));
        let norm = choose_norm_weights(channel, rho)?;
        Ok(Self {
            channel: channel.clone(),
            mean_y,
            mean_y2,
            grid,
            gh,
            kernel,
            norm,
            eps1: params.eps1,
            max_inner: params.max_inner,
            gl_rules: GL_SIZES.iter().map(|&n| GaussLegendre::new(n)).collect(),
        })
    }

    fn gl_rule(&self, wanted: usize) -> &GaussLegendre {
        let idx = GL_SIZES
            .iter()
            .position(|&n| n >= wanted)
            .unwrap_or(GL_SIZES.len() - 1);
        &self.gl_rules[idx]
    }

    /// `∫_{-v}^{v} d(x) f_{W_Y}(x - w) dx` for a band-supported smooth
    /// integrand `d`, integrated per delay node in the normalized
    /// increment variable with the same ±8-standard-deviation clip as
    /// the tensor quadrature. Node counts adapt to the band-to-spread
    /// ratio of each component.
    fn band_integral<F: Fn(f64) -> f64>(&self, v: f64, w: f64, d: &F) -> f64 {
        const FRAC_1_SQRT_2PI: f64 = 0.3989422804014327;
        let mut total = 0.0;
        for &(y, qy) in self.channel.delay().quad_nodes() {
            let sd = y.sqrt();
            let lo = ((-v - w) / sd).max(-CONDITIONAL_CLIP_SDS);
            let hi = ((v - w) / sd).min(CONDITIONAL_CLIP_SDS);
            if lo >= hi {
                continue;
            }
            // Resolve the finer of the two scales: the unit normal and
            // the band-supported integrand (width ~ v/2 in x).
            let scale = (v / (2.0 * sd)).min(1.0);
            let wanted = (3.0 * (hi - lo) / scale).ceil() as usize;
            let rule = self.gl_rule(wanted);
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            let mut inner = 0.0;
            for (&t, &wt) in rule.nodes().iter().zip(rule.weights()) {
                let u = mid + half * t;
                let phi = FRAC_1_SQRT_2PI * (-0.5 * u * u).exp();
                inner += wt * d(w + sd * u) * phi;
            }
            total += qy * half * inner;
        }
        total
    }

    pub fn channel(&self) -> &ChannelModel {
        &self.channel
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn gh(&self) -> &GaussHermite {
        &self.gh
    }

    pub fn norm_weights(&self) -> &NormWeights {
        &self.norm
    }

    pub fn mean_y(&self) -> f64 {
        self.mean_y
    }

    pub fn mean_y2(&self) -> f64 {
        self.mean_y2
    }

    pub fn eps1(&self) -> f64 {
        self.eps1
    }
}

/// One `G^x` step. `v_prev = 0` (the convention for the first step) makes
/// the continuation indicator empty, so `G^x_1(w) = E[Y]·w`.
pub fn gx_update(
    ctx: &SolveContext,
    gx_prev: &GridFunction,
    v_prev: f64,
    beta: f64,
) -> Result<GridFunction, IterError> {
    let spec = *ctx.grid();
    let alpha = ctx.channel.alpha();

    // Split the branchy expectation into a smooth part plus a band
    // correction: E[q(w + W_Y)] = E[G^x_{n-1}(w + W_Y)] + ∫ band d·f,
    // with d(x) = βx - x³/3 - G^x_{n-1}(x) supported on |x| < v_{n-1}
    // and vanishing at the edges (the root condition). The kernel then
    // only ever sees the smooth iterate, not the branch switch.
    let conv = ctx.kernel.apply(gx_prev);
    let mut values = vec![0.0; spec.len()];
    let mid = spec.mid();
    let correct = alpha > 0.0 && v_prev > 0.0;
    let d = |x: f64| beta * x - x * x * x / 3.0 - gx_prev.eval(x);
    for i in mid..spec.len() {
        let w = spec.node(i);
        let mut value = ctx.mean_y * w + alpha * conv[i];
        if correct {
            value += alpha * ctx.band_integral(v_prev, w, &d);
        }
        values[i] = value;
    }
    Ok(GridFunction::from_values(spec, Parity::Odd, values)?)
}

/// Tolerance on the residual of the threshold root.
fn root_tolerance(beta: f64) -> f64 {
    1e-10 * beta.powf(1.5).max(1.0)
}

/// Unique positive root of `r(w) = G^x_n(w) + w³/3 - βw` on
/// `(0, √(3β)]`, found by bracketing, bisection, and Newton refinement.
pub fn solve_threshold(gx: &GridFunction, beta: f64) -> Result<f64, IterError> {
    let r = |w: f64| gx.eval(w) + w * w * w / 3.0 - beta * w;
    let rp = |w: f64| gx.eval_deriv(w) + w * w - beta;

    let mut hi = (3.0 * beta).sqrt();
    let mut r_hi = r(hi);
    // The bound guarantees r(√(3β)) >= 0; absorb rounding by nudging up.
    let mut widen = 0;
    while r_hi < 0.0 && widen < 8 {
        hi *= 1.25;
        r_hi = r(hi);
        widen += 1;
    }
    if r_hi < 0.0 {
        return Err(IterError::NoSignChange { beta });
    }

    let mut lo = hi;
    let mut found = false;
    for _ in 0..60 {
        lo *= 0.5;
        if r(lo) < 0.0 {
            found = true;
            break;
        }
        hi = lo;
    }
    if !found {
        return Err(IterError::NoSignChange { beta });
    }

    let tol = root_tolerance(beta);
    let mut w = 0.5 * (lo + hi);
    for _ in 0..200 {
        let rw = r(w);
        if rw.abs() < tol {
            return Ok(w);
        }
        if rw < 0.0 {
            lo = w;
        } else {
            hi = w;
        }
        // Newton step when it stays inside the bracket, else bisect.
        let d = rp(w);
        let newton = w - rw / d;
        w = if d != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Ok(w)
}

/// One `J` iterate together with its smooth/band decomposition.
///
/// Inside the band `|w| < v` the iterate is a known quartic plus the
/// constant continuation value, so `J = smooth + band·1{|w| < v}` with
/// `smooth(w) = ½E[Y²] + E[Y]w² - E[Y]β + α·E[J_prev(w + W_Y)]` smooth
/// across the band edge. The next step convolves `smooth` through the
/// kernel and restores the band part by an exact band integral, keeping
/// the branch switch out of the Gauss-Hermite rule.
#[derive(Debug, Clone)]
pub struct JIterate {
    /// The tabulated iterate `J_n` (even).
    pub j: GridFunction,
    smooth: GridFunction,
    v: f64,
}

impl JIterate {
    /// The zero function `J_0`.
    pub fn initial(spec: GridSpec) -> Self {
        Self {
            j: GridFunction::zero(spec, Parity::Even),
            smooth: GridFunction::zero(spec, Parity::Even),
            v: 0.0,
        }
    }
}

/// One `J` step: `J_n(w) = g(w, v_n, β) + α·E[J_{n-1}(max(|w|, v_n) + W_Y)]`.
pub fn j_update(
    ctx: &SolveContext,
    prev: &JIterate,
    v_n: f64,
    beta: f64,
) -> Result<JIterate, IterError> {
    let spec = *ctx.grid();
    let alpha = ctx.channel.alpha();
    let n = spec.len();
    let mid = spec.mid();

    // E[J_{n-1}(w + W_Y)] at every node: kernel on the smooth part plus
    // the band restoration; even in w, so the right half determines it.
    let base = ctx.kernel.apply(&prev.smooth);
    let mut conv = vec![0.0; n];
    let band = |x: f64| prev.j.eval(x) - prev.smooth.eval(x);
    for i in mid..n {
        let w = spec.node(i);
        let mut value = base[i];
        if prev.v > 0.0 {
            value += ctx.band_integral(prev.v, w, &band);
        }
        conv[i] = value;
    }
    for i in 0..mid {
        conv[i] = conv[n - 1 - i];
    }
    let conv_gf = GridFunction::from_values(spec, Parity::Even, conv.clone())?;
    let at_vn = conv_gf.eval(v_n);

    let quad_of = |w: f64| 0.5 * ctx.mean_y2 + ctx.mean_y * w * w - ctx.mean_y * beta;
    let mut values = Vec::with_capacity(n);
    let mut smooth_values = Vec::with_capacity(n);
    for (i, &conv_i) in conv.iter().enumerate() {
        let w = spec.node(i);
        let g = stage_cost(&StageParams {
            w,
            v: v_n,
            beta,
            mean_y: ctx.mean_y,
            mean_y2: ctx.mean_y2,
        });
        let continuation = if w.abs() >= v_n { conv_i } else { at_vn };
        values.push(g + alpha * continuation);
        smooth_values.push(quad_of(w) + alpha * conv_i);
    }
    Ok(JIterate {
        j: GridFunction::from_values(spec, Parity::Even, values)?,
        smooth: GridFunction::from_values(spec, Parity::Even, smooth_values)?,
        v: v_n,
    })
}

/// State after the inner loop converged (or hit its iteration budget).
#[derive(Debug, Clone)]
pub struct IterState {
    /// Number of value-iteration steps performed.
    pub n: usize,
    pub beta: f64,
    /// Converged threshold `v_n(β)`.
    pub v_n: f64,
    /// Final `G^x_n` (odd).
    pub gx: GridFunction,
    /// Final `J_n` (even).
    pub j: GridFunction,
    /// Last weighted-norm difference `‖J_n - J_{n-1}‖`.
    pub norm_j_diff: f64,
    /// Thresholds of every iteration, in order.
    pub v_history: Vec<f64>,
    /// Weighted-norm differences per iteration (starting at n = 2).
    pub norm_diffs: Vec<f64>,
}

/// Runs the value iteration at `β` until the paper's iteration count
/// `m = ⌈-log_ρ(‖J₁‖/ε₁)⌉` or the early norm exit
/// `‖J_n - J_{n-1}‖ < ε₁(1-ρ)/ρ`, whichever comes first.
pub fn iterate_to_convergence(ctx: &SolveContext, beta: f64) -> Result<IterState, IterError> {
    let planned = planned_iterations(ctx, beta)?;
    run_value_iteration(ctx, beta, planned, true)
}

/// Runs exactly `steps` value-iteration steps (no early exit); used by
/// structure checks that need a fixed-length iterate sequence.
pub fn run_iterations(ctx: &SolveContext, beta: f64, steps: usize) -> Result<IterState, IterError> {
    run_value_iteration(ctx, beta, steps.max(1), false)
}

fn planned_iterations(ctx: &SolveContext, beta: f64) -> Result<usize, IterError> {
    if beta <= ctx.mean_y {
        return Err(IterError::BetaInfeasible { beta, mean_y: ctx.mean_y });
    }
    // With a reliable channel the recursion term vanishes and J_2 = J_1.
    if ctx.channel.alpha() == 0.0 {
        return Ok(1);
    }
    Ok(ctx.max_inner)
}

fn run_value_iteration(
    ctx: &SolveContext,
    beta: f64,
    cap: usize,
    early_exit: bool,
) -> Result<IterState, IterError> {
    if beta <= ctx.mean_y {
        return Err(IterError::BetaInfeasible { beta, mean_y: ctx.mean_y });
    }
    let spec = *ctx.grid();
    let rho = ctx.norm.rho;

    let mut gx = gx_update(ctx, &GridFunction::zero(spec, Parity::Odd), 0.0, beta)?;
    let mut v = solve_threshold(&gx, beta)?;
    let mut j = j_update(ctx, &JIterate::initial(spec), v, beta)?;
    let mut v_history = vec![v];
    let mut norm_diffs = Vec::new();
    let mut last_diff = f64::INFINITY;
    let mut steps = 1usize;

    let m = if early_exit {
        let j1_norm = weighted_norm(&j.j, &ctx.norm);
        let ratio = j1_norm / ctx.eps1;
        let planned = if ratio <= 1.0 {
            1
        } else {
            (ratio.ln() / (1.0 / rho).ln()).ceil() as usize
        };
        planned.clamp(1, cap)
    } else {
        cap
    };
    let exit_level = ctx.eps1 * (1.0 - rho) / rho;

    for _ in 2..=m {
        let gx_next = gx_update(ctx, &gx, v, beta)?;
        let v_next = solve_threshold(&gx_next, beta)?;
        let j_next = j_update(ctx, &j, v_next, beta)?;
        let diff = weighted_norm(&j_next.j.sub(&j.j)?, &ctx.norm);
        gx = gx_next;
        v = v_next;
        j = j_next;
        steps += 1;
        v_history.push(v);
        norm_diffs.push(diff);
        last_diff = diff;
        if early_exit && diff < exit_level {
            break;
        }
    }

    Ok(IterState {
        n: steps,
        beta,
        v_n: v,
        gx,
        j: j.j,
        norm_j_diff: if steps == 1 { 0.0 } else { last_diff },
        v_history,
        norm_diffs,
    })
}
