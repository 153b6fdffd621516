//! Quasi-Newton minimisation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the Newton decrement `sqrt(g^T H g)` falls below this.
    pub tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iter: 200, tol: 1e-10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub decrement: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Final inverse-Hessian approximation, row-major.
    #[serde(skip)]
    pub inv_hessian: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(h: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| dot(&h[i * n..(i + 1) * n], v)).collect()
}

/// BFGS with backtracking (Armijo) line search, started from the inverse
/// Hessian guess `h0` (row-major `n x n`).
pub fn bfgs(
    f: impl Fn(&[f64]) -> f64,
    grad: impl Fn(&[f64]) -> Vec<f64>,
    x0: &[f64],
    h0: Vec<f64>,
    opts: &BfgsOptions,
) -> BfgsResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut h = h0;
    let mut fx = f(&x);
    let mut g = grad(&x);
    let mut it = 0;
    let mut converged = false;
    let mut decrement;
    loop {
        let p: Vec<f64> = mat_vec(&h, &g).into_iter().map(|v| -v).collect();
        let mut slope = dot(&g, &p);
        decrement = (-slope).max(0.0).sqrt();
        if decrement <= opts.tol || !fx.is_finite() {
            converged = decrement <= opts.tol;
            break;
        }
        if it >= opts.max_iter {
            break;
        }
        it += 1;
        let p = if slope >= 0.0 {
            // lost positive definiteness: restart along steepest descent
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
            slope = -dot(&g, &g);
            g.iter().map(|v| -v).collect()
        } else {
            p
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + t * b).collect();
            let fnew = f(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * t * slope {
                accepted = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            // no decrease possible at this resolution
            converged = decrement <= opts.tol.sqrt();
            break;
        };
        let gn = grad(&xn);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            let hy = mat_vec(&h, &y);
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            let c = (1.0 + yhy * rho) * rho;
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += c * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        x = xn;
        fx = fnew;
        g = gn;
    }
    BfgsResult {
        grad_norm: dot(&g, &g).sqrt(),
        x,
        value: fx,
        decrement,
        iterations: it,
        converged,
        inv_hessian: h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let g = |x: &[f64]| vec![-2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]), 200.0 * (x[1] - x[0] * x[0])];
        let r = bfgs(f, g, &[-1.2, 1.0], vec![1.0, 0.0, 0.0, 1.0], &BfgsOptions { max_iter: 500, tol: 1e-12 });
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-8 && (r.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn quadratic_with_exact_inverse_is_one_step() {
        let a = [4.0, 1.0, 1.0, 3.0];
        let inv = [3.0 / 11.0, -1.0 / 11.0, -1.0 / 11.0, 4.0 / 11.0];
        let f = |x: &[f64]| 0.5 * (a[0] * x[0] * x[0] + 2.0 * a[1] * x[0] * x[1] + a[3] * x[1] * x[1]) - x[0];
        let g = |x: &[f64]| vec![a[0] * x[0] + a[1] * x[1] - 1.0, a[2] * x[0] + a[3] * x[1]];
        let r = bfgs(f, g, &[0.0, 0.0], inv.to_vec(), &BfgsOptions::default());
        assert!(r.iterations <= 2);
        assert!((r.x[0] - 3.0 / 11.0).abs() < 1e-14);
    }
}
