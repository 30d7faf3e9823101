//! Tabulated even/odd functions on a symmetric uniform grid, with
//! polynomial tail extrapolation and a precomputed convolution kernel
//! for expectations against the `W_Y` mixture.
//!
//! Inside `[-w_max, w_max]` evaluation is 4-point (cubic) Lagrange
//! interpolation; beyond, a fitted `a2·w² + a1·|w| + a0` tail (times
//! `sign(w)` for odd functions). Cubic interpolation reproduces cubics
//! exactly, which keeps the tabulated recursions faithful wherever the
//! underlying functions are piecewise polynomial.

use thiserror::Error;

use crate::channel::{clipped_normal_pairs, DelayModel};
use crate::quad::GaussHermite;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("non-finite value at node {index} (w = {w}); grid too small or inputs diverged")]
    NonFiniteNode { index: usize, w: f64 },
    #[error("grid mismatch between operands")]
    SpecMismatch,
}

/// Symmetric uniform grid on `[-w_max, w_max]` with an odd node count,
/// so zero is a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    w_max: f64,
    n: usize,
}

impl GridSpec {
    pub fn new(w_max: f64, n: usize) -> Self {
        assert!(w_max > 0.0 && w_max.is_finite());
        assert!(n >= 9, "grid needs a sensible node count");
        let n = if n.is_multiple_of(2) { n + 1 } else { n };
        Self { w_max, n }
    }

    pub fn w_max(&self) -> f64 {
        self.w_max
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.w_max / (self.n - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        -self.w_max + self.spacing() * i as f64
    }

    /// Node position for a possibly out-of-range signed index.
    fn node_signed(&self, i: isize) -> f64 {
        -self.w_max + self.spacing() * i as f64
    }

    pub fn mid(&self) -> usize {
        self.n / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

/// Tail coefficients: `f(w) ≈ a2·w² + a1·|w| + a0` for `|w| > w_max`,
/// negated on the left branch for odd functions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tail {
    pub a2: f64,
    pub a1: f64,
    pub a0: f64,
}

impl Tail {
    fn magnitude(&self, a: f64) -> f64 {
        (self.a2 * a + self.a1) * a + self.a0
    }
}

/// An even or odd real function of the estimation error, tabulated on a
/// [`GridSpec`] with a fitted tail.
#[derive(Debug, Clone)]
pub struct GridFunction {
    spec: GridSpec,
    parity: Parity,
    values: Vec<f64>,
    tail: Tail,
}

/// Fraction of the grid (on each side) used for the tail fit.
const TAIL_FIT_FRACTION: f64 = 0.10;

impl GridFunction {
    /// Builds from `f` evaluated on the non-negative nodes; the left half
    /// is mirrored so the declared parity holds exactly.
    pub fn from_fn<F: Fn(f64) -> f64>(spec: GridSpec, parity: Parity, f: F) -> Self {
        let mid = spec.mid();
        let mut values = vec![0.0; spec.len()];
        for (i, slot) in values.iter_mut().enumerate().skip(mid) {
            *slot = f(spec.node(i));
        }
        let mut out = Self { spec, parity, values, tail: Tail::default() };
        out.mirror();
        out.refit_tail();
        out
    }

    /// Builds from precomputed values on the full grid; the right half is
    /// kept and mirrored.
    pub fn from_values(spec: GridSpec, parity: Parity, values: Vec<f64>) -> Result<Self, GridError> {
        assert_eq!(values.len(), spec.len());
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(GridError::NonFiniteNode { index: i, w: spec.node(i) });
            }
        }
        let mut out = Self { spec, parity, values, tail: Tail::default() };
        out.mirror();
        out.refit_tail();
        Ok(out)
    }

    pub fn zero(spec: GridSpec, parity: Parity) -> Self {
        Self { spec, parity, values: vec![0.0; spec.len()], tail: Tail::default() }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn parity(&self) -> Parity {
        self.parity
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tail(&self) -> &Tail {
        &self.tail
    }

    fn mirror(&mut self) {
        let mid = self.spec.mid();
        let n = self.spec.len();
        match self.parity {
            Parity::Even => {
                for i in 0..mid {
                    self.values[i] = self.values[n - 1 - i];
                }
            }
            Parity::Odd => {
                self.values[mid] = 0.0;
                for i in 0..mid {
                    self.values[i] = -self.values[n - 1 - i];
                }
            }
        }
    }

    /// Refits the tail by least squares on the outer nodes of the right
    /// half (quadratic for even functions, linear for odd ones), then
    /// shifts the constant so the tail meets the boundary node exactly.
    pub fn refit_tail(&mut self) {
        let n = self.spec.len();
        let count = ((n as f64 * TAIL_FIT_FRACTION) as usize).max(4).min(n / 2);
        let start = n - count;
        let ws: Vec<f64> = (start..n).map(|i| self.spec.node(i)).collect();
        let fs: Vec<f64> = (start..n).map(|i| self.values[i]).collect();

        let mut tail = match self.parity {
            Parity::Even => fit_quadratic(&ws, &fs),
            Parity::Odd => fit_linear(&ws, &fs),
        };
        let boundary = self.values[n - 1];
        tail.a0 += boundary - tail.magnitude(self.spec.w_max());
        self.tail = tail;
    }

    /// Evaluates everywhere: cubic interpolation inside, tail outside.
    pub fn eval(&self, x: f64) -> f64 {
        let a = x.abs();
        if a > self.spec.w_max() {
            let t = self.tail.magnitude(a);
            return match self.parity {
                Parity::Even => t,
                Parity::Odd => t * x.signum(),
            };
        }
        let h = self.spec.spacing();
        let u = (x + self.spec.w_max()) / h;
        let i0 = (u.floor() as isize).clamp(1, self.spec.len() as isize - 3) as usize;
        let t = u - i0 as f64;
        let c = cubic_weights(t);
        c[0] * self.values[i0 - 1]
            + c[1] * self.values[i0]
            + c[2] * self.values[i0 + 1]
            + c[3] * self.values[i0 + 2]
    }

    /// Derivative by interpolating the cubic stencil's derivative; used by
    /// the Newton refinement of the threshold root.
    pub fn eval_deriv(&self, x: f64) -> f64 {
        let a = x.abs();
        if a > self.spec.w_max() {
            let d = 2.0 * self.tail.a2 * a + self.tail.a1;
            return match self.parity {
                Parity::Even => d * x.signum(),
                Parity::Odd => d,
            };
        }
        let h = self.spec.spacing();
        let u = (x + self.spec.w_max()) / h;
        let i0 = (u.floor() as isize).clamp(1, self.spec.len() as isize - 3) as usize;
        let t = u - i0 as f64;
        let c = cubic_deriv_weights(t);
        (c[0] * self.values[i0 - 1]
            + c[1] * self.values[i0]
            + c[2] * self.values[i0 + 1]
            + c[3] * self.values[i0 + 2])
            / h
    }

    /// Node-wise difference with matching spec and parity.
    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction, GridError> {
        if self.spec != other.spec || self.parity != other.parity {
            return Err(GridError::SpecMismatch);
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(GridFunction {
            spec: self.spec,
            parity: self.parity,
            values,
            tail: Tail {
                a2: self.tail.a2 - other.tail.a2,
                a1: self.tail.a1 - other.tail.a1,
                a0: self.tail.a0 - other.tail.a0,
            },
        })
    }
}

fn cubic_weights(t: f64) -> [f64; 4] {
    [
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t * t - 1.0) * (t - 2.0) / 2.0,
        -t * (t + 1.0) * (t - 2.0) / 2.0,
        t * (t * t - 1.0) / 6.0,
    ]
}

fn cubic_deriv_weights(t: f64) -> [f64; 4] {
    [
        -(3.0 * t * t - 6.0 * t + 2.0) / 6.0,
        (3.0 * t * t - 4.0 * t - 1.0) / 2.0,
        -(3.0 * t * t - 2.0 * t - 2.0) / 2.0,
        (3.0 * t * t - 1.0) / 6.0,
    ]
}

/// Least-squares quadratic through `(w, f)`, solved in a centered
/// variable for conditioning.
fn fit_quadratic(ws: &[f64], fs: &[f64]) -> Tail {
    let wc = ws.iter().sum::<f64>() / ws.len() as f64;
    let mut m = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for (&w, &f) in ws.iter().zip(fs) {
        let u = w - wc;
        let basis = [u * u, u, 1.0];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] += basis[r] * basis[c];
            }
            b[r] += basis[r] * f;
        }
    }
    let sol = solve3(m, b);
    let (b2, b1, b0) = (sol[0], sol[1], sol[2]);
    Tail {
        a2: b2,
        a1: b1 - 2.0 * b2 * wc,
        a0: b0 - b1 * wc + b2 * wc * wc,
    }
}

fn fit_linear(ws: &[f64], fs: &[f64]) -> Tail {
    let n = ws.len() as f64;
    let sw: f64 = ws.iter().sum();
    let sww: f64 = ws.iter().map(|w| w * w).sum();
    let sf: f64 = fs.iter().sum();
    let swf: f64 = ws.iter().zip(fs).map(|(w, f)| w * f).sum();
    let det = n * sww - sw * sw;
    let a1 = (n * swf - sw * sf) / det;
    let a0 = (sf - a1 * sw) / n;
    Tail { a2: 0.0, a1, a0 }
}

#[allow(clippy::needless_range_loop)]
fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&a, &bb| m[a][col].abs().total_cmp(&m[bb][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        b.swap(col, pivot);
        let d = m[col][col];
        for row in (col + 1)..3 {
            let f = m[row][col] / d;
            for c in col..3 {
                m[row][c] -= f * m[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for c in (row + 1)..3 {
            acc -= m[row][c] * x[c];
        }
        x[row] = acc / m[row][row];
    }
    x
}

/// Sparse convolution kernel: `out[i] ≈ E[f(w_i + W_Y)]` for every grid
/// node at once.
///
/// Each (delay node, Gauss-Hermite node) pair contributes its weight,
/// spread over four integer grid offsets with cubic interpolation
/// coefficients. Applying the kernel to node samples of `f` is then the
/// same tensor quadrature as [`DelayModel::expect_over_wy`], evaluated
/// through the grid representation of `f`.
#[derive(Debug, Clone)]
pub struct ConvolutionKernel {
    taps: Vec<(i32, f64)>,
    pad: usize,
}

impl ConvolutionKernel {
    pub fn build(spec: &GridSpec, delay: &DelayModel, rule: &GaussHermite) -> Self {
        let h = spec.spacing();
        let pairs = clipped_normal_pairs(rule);
        let mut acc: std::collections::BTreeMap<i32, f64> = std::collections::BTreeMap::new();
        for &(y, q) in delay.quad_nodes() {
            let sd = y.sqrt();
            for &(z, p) in &pairs {
                let pos = sd * z / h;
                let i0 = pos.floor();
                let t = pos - i0;
                let c = cubic_weights(t);
                let base = i0 as i32;
                for (k, ck) in c.iter().enumerate() {
                    if *ck != 0.0 {
                        *acc.entry(base - 1 + k as i32).or_insert(0.0) += q * p * ck;
                    }
                }
            }
        }
        let taps: Vec<(i32, f64)> = acc.into_iter().collect();
        let pad = taps
            .iter()
            .map(|&(o, _)| o.unsigned_abs() as usize)
            .max()
            .unwrap_or(0);
        Self { taps, pad }
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    /// `out[i] = E[f(w_i + W_Y)]` for every node index `i`. Positions
    /// beyond the grid use the tail extrapolation of `f`.
    pub fn apply(&self, f: &GridFunction) -> Vec<f64> {
        let spec = *f.spec();
        let n = spec.len();
        let pad = self.pad;
        let mut ext = vec![0.0f64; n + 2 * pad];
        for (idx, slot) in ext.iter_mut().enumerate() {
            let signed = idx as isize - pad as isize;
            if signed >= 0 && (signed as usize) < n {
                *slot = f.values()[signed as usize];
            } else {
                *slot = f.eval(spec.node_signed(signed));
            }
        }
        let mut out = vec![0.0f64; n];
        for &(off, wt) in &self.taps {
            let start = (pad as isize + off as isize) as usize;
            let src = &ext[start..start + n];
            for (o, s) in out.iter_mut().zip(src) {
                *o += wt * s;
            }
        }
        out
    }
}
