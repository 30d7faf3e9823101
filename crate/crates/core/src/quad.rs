//! Gauss quadrature nodes and weights.
//!
//! Gauss-Hermite integrates `e^(-x^2) * f(x)` over the real line:
//! `∫ e^(-x^2) f(x) dx ≈ Σ w_i f(x_i)`, exact for polynomials up to
//! degree `2n - 1`; weights sum to `√π`. Gauss-Legendre integrates over
//! `[-1, 1]` with weights summing to 2.

use std::f64::consts::PI;

/// Nodes and weights of an `n`-point Gauss-Hermite rule.
///
/// Nodes are stored in ascending order; the rule is symmetric about 0.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Computes the rule from the eigenvalues of the Jacobi matrix
    /// (QL iteration), polished by Newton steps on the orthonormal
    /// Hermite recurrence; weights come from the derivative identity
    /// `w = 2 / h̃ₙ'(x)²`. Stable for rules of any practical size.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Hermite rule needs at least one node");
        // Jacobi matrix of the (physicists') Hermite weight: zero
        // diagonal, off-diagonal sqrt(k/2).
        let d = vec![0.0; n];
        let e: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
        let mut nodes = tridiag_eigenvalues(d, e);

        // Polish and symmetrize: eigenvalues of a symmetric rule come in
        // ± pairs up to roundoff.
        for x in nodes.iter_mut() {
            *x = hermite_newton_polish(n, *x);
        }
        let m = n / 2;
        for i in 0..m {
            let mag = 0.5 * (nodes[n - 1 - i] - nodes[i]);
            nodes[n - 1 - i] = mag;
            nodes[i] = -mag;
        }
        if n % 2 == 1 {
            nodes[m] = 0.0;
        }

        let weights: Vec<f64> = nodes
            .iter()
            .map(|&x| {
                let (_, dh) = hermite_ortho(n, x);
                2.0 / (dh * dh)
            })
            .collect();
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Pairs `(z_i, p_i)` such that `E[f(Z)] ≈ Σ p_i f(z_i)` for `Z ~ N(0,1)`.
    ///
    /// This is the probabilist change of variables `z = √2 x`, `p = w/√π`;
    /// the `p_i` sum to 1.
    pub fn standard_normal_pairs(&self) -> Vec<(f64, f64)> {
        let sqrt_pi = PI.sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| (std::f64::consts::SQRT_2 * x, w / sqrt_pi))
            .collect()
    }
}

/// Value and derivative of the orthonormal Hermite polynomial `h̃ₙ` at
/// `x` via the three-term recurrence.
fn hermite_ortho(n: usize, x: f64) -> (f64, f64) {
    let mut p1 = 1.0 / PI.powf(0.25);
    let mut p2 = 0.0;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = x * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, (2.0 * n as f64).sqrt() * p2)
}

fn hermite_newton_polish(n: usize, mut x: f64) -> f64 {
    for _ in 0..8 {
        let (p, dp) = hermite_ortho(n, x);
        if dp == 0.0 {
            break;
        }
        let step = p / dp;
        x -= step;
        if step.abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// Eigenvalues of a symmetric tridiagonal matrix by the QL algorithm
/// with implicit shifts (no eigenvectors). `off[i]` couples `i`, `i+1`.
fn tridiag_eigenvalues(mut d: Vec<f64>, off: Vec<f64>) -> Vec<f64> {
    let n = d.len();
    if n == 1 {
        return d;
    }
    let mut e = off;
    e.push(0.0);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m < n - 1 {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter <= 64, "QL iteration failed to converge");
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut restart = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    restart = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if restart {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    d.sort_by(f64::total_cmp);
    d
}

/// Nodes and weights of an `n`-point Gauss-Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = 1.0;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
                }
                pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 {
                    break;
                }
            }
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}
