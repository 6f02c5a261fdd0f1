//! Gauss–Hermite rules for expectations under Gaussian laws.

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 64;
const RANK_TOL: f64 = 1e-14;

/// Nodes and weights with `Σ w_k f(x_k) = E[f(Z)]`, `Z ~ N(0, 1)`, exact for
/// polynomials of degree `≤ 2n − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Newton iteration on the orthonormal physicists' recurrence, then
    /// rescaled to the standard normal.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n > MAX_ORDER {
            return Err(Error::UnsupportedOrder(n));
        }
        let pim4 = std::f64::consts::PI.powf(-0.25);
        let nf = n as f64;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut z = 0.0f64;
        for i in 0..n.div_ceil(2) {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let sqrt2 = std::f64::consts::SQRT_2;
        let mut nodes: Vec<f64> = x.iter().map(|t| t * sqrt2).collect();
        let mut weights: Vec<f64> = w.iter().map(|t| t / sqrt_pi).collect();
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        // Ascending order.
        nodes.reverse();
        weights.reverse();
        Ok(Self { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// `E[f(σZ)]`.
    pub fn expect_1d(&self, sigma: f64, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(sigma * x)).sum()
    }

    /// `E[f(u, v)]` for a centred pair with covariance `[[suu, suv], [suv, svv]]`.
    /// The covariance is factored through its eigendecomposition; directions
    /// with negligible variance are dropped, so rank-one and rank-zero laws are
    /// handled by one- and zero-dimensional rules.
    pub fn expect_2d(&self, suu: f64, svv: f64, suv: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
        let (l1, l2, c, s) = sym_eig2(suu, svv, suv);
        let scale = l1.abs().max(l2.abs()).max(f64::MIN_POSITIVE);
        let r1 = l1 > RANK_TOL * scale && l1 > 0.0;
        let r2 = l2 > RANK_TOL * scale && l2 > 0.0;
        // Columns of the factor: (c, s)·√l1 and (−s, c)·√l2.
        let a1 = if r1 { l1.sqrt() } else { 0.0 };
        let a2 = if r2 { l2.sqrt() } else { 0.0 };
        match (r1, r2) {
            (false, false) => f(0.0, 0.0),
            (true, false) => self.expect_1d(1.0, |z| f(c * a1 * z, s * a1 * z)),
            (false, true) => self.expect_1d(1.0, |z| f(-s * a2 * z, c * a2 * z)),
            (true, true) => {
                let mut acc = 0.0;
                for (&x, &wx) in self.nodes.iter().zip(&self.weights) {
                    let (u0, v0) = (c * a1 * x, s * a1 * x);
                    let mut inner = 0.0;
                    for (&y, &wy) in self.nodes.iter().zip(&self.weights) {
                        inner += wy * f(u0 - s * a2 * y, v0 + c * a2 * y);
                    }
                    acc += wx * inner;
                }
                acc
            }
        }
    }
}

/// Eigenvalues `l1 ≥ l2` of a symmetric 2×2 matrix and the unit eigenvector
/// `(c, s)` of `l1`.
fn sym_eig2(a: f64, b: f64, off: f64) -> (f64, f64, f64, f64) {
    if off == 0.0 {
        return if a >= b { (a, b, 1.0, 0.0) } else { (b, a, 0.0, 1.0) };
    }
    let mean = 0.5 * (a + b);
    let half = 0.5 * (a - b);
    let r = half.hypot(off);
    let l1 = mean + r;
    let l2 = mean - r;
    // Eigenvector of l1: (off, l1 − a) or (l1 − b, off), whichever is better conditioned.
    let (x, y) = if half >= 0.0 { (r + half, off) } else { (off, r - half) };
    let n = x.hypot(y);
    (l1, l2, x / n, y / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_moments_are_exact() {
        let gh = GaussHermite::new(6).unwrap();
        let moments = [1.0, 0.0, 1.0, 0.0, 3.0, 0.0, 15.0, 0.0, 105.0, 0.0, 945.0];
        for (k, &m) in moments.iter().enumerate() {
            let e = gh.expect_1d(1.0, |x| x.powi(k as i32));
            assert!((e - m).abs() < 1e-11 * m.max(1.0), "k={k}: {e}");
        }
    }

    #[test]
    fn weights_sum_to_one_for_many_orders() {
        for n in 1..=40 {
            let gh = GaussHermite::new(n).unwrap();
            let s: f64 = gh.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-13, "n={n}: {s}");
            assert!(gh.nodes.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn bad_orders_are_rejected() {
        assert!(matches!(GaussHermite::new(0), Err(Error::UnsupportedOrder(0))));
        assert!(GaussHermite::new(MAX_ORDER + 1).is_err());
    }

    #[test]
    fn bivariate_second_moments() {
        let gh = GaussHermite::new(4).unwrap();
        let (suu, svv, suv) = (1.3, 0.4, -0.5);
        assert!((gh.expect_2d(suu, svv, suv, |u, _| u * u) - suu).abs() < 1e-13);
        assert!((gh.expect_2d(suu, svv, suv, |_, v| v * v) - svv).abs() < 1e-13);
        assert!((gh.expect_2d(suu, svv, suv, |u, v| u * v) - suv).abs() < 1e-13);
        // Isserlis: E[u²v²] = suu·svv + 2 suv².
        let e = gh.expect_2d(suu, svv, suv, |u, v| u * u * v * v);
        assert!((e - (suu * svv + 2.0 * suv * suv)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_covariances() {
        let gh = GaussHermite::new(4).unwrap();
        // u = v: rank one.
        let e = gh.expect_2d(2.0, 2.0, 2.0, |u, v| u * v);
        assert!((e - 2.0).abs() < 1e-13);
        let e = gh.expect_2d(2.0, 2.0, -2.0, |u, v| u * v);
        assert!((e + 2.0).abs() < 1e-13);
        assert_eq!(gh.expect_2d(0.0, 0.0, 0.0, |u, v| 3.0 + u + v), 3.0);
        let e = gh.expect_2d(0.0, 1.5, 0.0, |u, v| v * v + u);
        assert!((e - 1.5).abs() < 1e-13);
    }
}
