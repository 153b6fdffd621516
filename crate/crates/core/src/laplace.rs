//! Rate functional over piecewise-constant controls, its constrained and
//! penalised minimisers, first and second variations of the skeleton, the
//! Taylor terms `g_1`, `g_2`, the critical-point identity and tail probes.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fbm::{cm_norm_sq, cm_shift_on, cov, gram_form, increment_lags, ControlVector, FbmPathSet, Hurst, TimeGrid};
use crate::fields::{norm, SharedFields, VectorFieldSystem};
use crate::linalg;
use crate::optim::{bfgs, BfgsOptions};
use crate::young::{hoelder_norm_values, integrate, PathStatus, Scheme};

/// `1/2 phi^T G phi`, half the squared Cameron–Martin norm of the control.
pub fn rate_norm(phi: &ControlVector, hurst: Hurst) -> f64 {
    0.5 * cm_norm_sq(phi, hurst)
}

pub type Functional = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Objective {
    /// Endpoint constraint `Phi_T(x0, k) = y`.
    Target(Vec<f64>),
    /// Endpoint cost `F(Phi_T(x0, k))`.
    Functional(Functional),
}

#[derive(Clone)]
pub struct RateProblem {
    pub fields: SharedFields,
    pub x0: Vec<f64>,
    pub objective: Objective,
    /// Control grid.
    pub grid: TimeGrid,
    pub hurst: Hurst,
    /// Skeleton sub-steps per control step.
    pub refine: usize,
}

impl RateProblem {
    pub fn target(fields: SharedFields, x0: Vec<f64>, y: Vec<f64>, grid: TimeGrid, hurst: Hurst) -> Self {
        RateProblem { fields, x0, objective: Objective::Target(y), grid, hurst, refine: 4 }
    }

    pub fn functional(fields: SharedFields, x0: Vec<f64>, f: Functional, grid: TimeGrid, hurst: Hurst) -> Self {
        RateProblem { fields, x0, objective: Objective::Functional(f), grid, hurst, refine: 4 }
    }

    fn check(&self) -> Result<()> {
        let d = self.fields.dim();
        if self.x0.len() != d {
            return invalid("x0 does not match the field dimension");
        }
        if let Objective::Target(y) = &self.objective {
            if y.len() != d {
                return invalid("target does not match the field dimension");
            }
        }
        if self.refine == 0 {
            return invalid("refine must be positive");
        }
        Ok(())
    }
}

/// Linear map from controls to Cameron–Martin paths on a fine grid, and the
/// skeleton endpoint evaluated through it.
struct SkeletonMap<'a> {
    fields: &'a dyn VectorFieldSystem,
    x0: &'a [f64],
    fine: TimeGrid,
    n: usize,
    d: usize,
    /// `kmat[i * n + j] = R(s_i, t_{j+1}) - R(s_i, t_j)`
    kmat: Vec<f64>,
}

impl<'a> SkeletonMap<'a> {
    fn new(prob: &'a RateProblem) -> Self {
        let fine = prob.grid.refined(prob.refine);
        let n = prob.grid.n_steps();
        let h = prob.hurst.value();
        let mut kmat = vec![0.0; (fine.n_steps() + 1) * n];
        for i in 0..=fine.n_steps() {
            let s = fine.point(i);
            for j in 0..n {
                kmat[i * n + j] = cov(s, prob.grid.point(j + 1), h) - cov(s, prob.grid.point(j), h);
            }
        }
        SkeletonMap { fields: prob.fields.as_ref(), x0: &prob.x0, fine, n, d: prob.fields.dim(), kmat }
    }

    fn k_path(&self, phi: &[f64]) -> Vec<f64> {
        let (n, d) = (self.n, self.d);
        let mut k = vec![0.0; (self.fine.n_steps() + 1) * d];
        for i in 0..=self.fine.n_steps() {
            let row = &self.kmat[i * n..(i + 1) * n];
            for kk in 0..d {
                k[i * d + kk] = (0..n).map(|j| row[j] * phi[j * d + kk]).sum();
            }
        }
        k
    }

    fn endpoint_of_k(&self, k: &[f64]) -> Result<Vec<f64>> {
        let (x, status) = integrate(self.fields, Scheme::Heun, &self.fine, k, 1, self.x0, 1.0, 0.0, false);
        match status {
            PathStatus::Ok => Ok(x),
            PathStatus::BlowUp { step } => Err(Error::BlowUp { step }),
            PathStatus::NonFinite { step } => Err(Error::NonFinite { step }),
        }
    }

    fn endpoint(&self, phi: &[f64]) -> Result<Vec<f64>> {
        self.endpoint_of_k(&self.k_path(phi))
    }

    /// Endpoint and its central-difference Jacobian `J[r * (n d) + j d + kk]`.
    fn jacobian(&self, phi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, d) = (self.n, self.d);
        let m = n * d;
        let k = self.k_path(phi);
        let x = self.endpoint_of_k(&k)?;
        let h = 1e-6 * (1.0 + phi.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        let cols: Vec<Result<Vec<f64>>> = (0..m)
            .into_par_iter()
            .map(|c| {
                let (j, kk) = (c / d, c % d);
                let mut kp = k.clone();
                let mut km = k.clone();
                for i in 0..=self.fine.n_steps() {
                    let w = h * self.kmat[i * n + j];
                    kp[i * d + kk] += w;
                    km[i * d + kk] -= w;
                }
                let a = self.endpoint_of_k(&kp)?;
                let b = self.endpoint_of_k(&km)?;
                Ok(a.iter().zip(&b).map(|(p, q)| (p - q) / (2.0 * h)).collect())
            })
            .collect();
        let mut jac = vec![0.0; d * m];
        for (c, col) in cols.into_iter().enumerate() {
            let col = col?;
            for r in 0..d {
                jac[r * m + c] = col[r];
            }
        }
        Ok((x, jac))
    }
}

/// Block-diagonal Gram operator `G (x) I_d` on controls and its inverse.
struct GramOp {
    n: usize,
    d: usize,
    lag: Vec<f64>,
    inv: Vec<f64>,
}

impl GramOp {
    fn new(grid: &TimeGrid, hurst: Hurst, d: usize) -> Result<Self> {
        let n = grid.n_steps();
        let lag = increment_lags(grid, hurst.value());
        let g: Vec<f64> = (0..n * n).map(|c| lag[(c / n).abs_diff(c % n)]).collect();
        let inv = linalg::inverse(&g, n).ok_or_else(|| Error::IllConditioned("increment Gram matrix is singular".into()))?;
        Ok(GramOp { n, d, lag, inv })
    }

    fn apply(&self, phi: &[f64]) -> Vec<f64> {
        self.blockwise(phi, |j, l| self.lag[j.abs_diff(l)])
    }

    fn solve(&self, v: &[f64]) -> Vec<f64> {
        self.blockwise(v, |j, l| self.inv[j * self.n + l])
    }

    fn blockwise(&self, v: &[f64], m: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let (n, d) = (self.n, self.d);
        let mut out = vec![0.0; n * d];
        for j in 0..n {
            for l in 0..n {
                let w = m(j, l);
                for kk in 0..d {
                    out[j * d + kk] += w * v[l * d + kk];
                }
            }
        }
        out
    }

    fn half_norm(&self, phi: &[f64]) -> f64 {
        (0..self.d)
            .map(|kk| {
                let c: Vec<f64> = phi.iter().skip(kk).step_by(self.d).copied().collect();
                0.5 * gram_form(&c, &c, &self.lag)
            })
            .sum()
    }

    fn dense_inverse(&self) -> Vec<f64> {
        let m = self.n * self.d;
        let mut h = vec![0.0; m * m];
        for j in 0..self.n {
            for l in 0..self.n {
                for kk in 0..self.d {
                    h[(j * self.d + kk) * m + l * self.d + kk] = self.inv[j * self.n + l];
                }
            }
        }
        h
    }

    /// `(A + J^T W J)^{-1}` with `A = G (x) I` and a symmetric `d x d` weight `W`,
    /// via the Woodbury identity.
    fn woodbury_inverse(&self, jac: &[f64], w: &[f64]) -> Vec<f64> {
        let d = self.d;
        let m = self.n * d;
        let ainv = self.dense_inverse();
        // Z = A^{-1} J^T  (m x d)
        let mut z = vec![0.0; m * d];
        for r in 0..d {
            let col = self.solve(&jac[r * m..(r + 1) * m]);
            for c in 0..m {
                z[c * d + r] = col[c];
            }
        }
        // S = I + W J Z  (d x d)
        let mut jz = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                jz[a * d + b] = (0..m).map(|c| jac[a * m + c] * z[c * d + b]).sum();
            }
        }
        let mut s = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                s[a * d + b] = if a == b { 1.0 } else { 0.0 } + (0..d).map(|e| w[a * d + e] * jz[e * d + b]).sum::<f64>();
            }
        }
        let Some(sinv) = linalg::inverse(&s, d) else { return ainv };
        // T = S^{-1} W  (d x d)
        let mut t = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                t[a * d + b] = (0..d).map(|e| sinv[a * d + e] * w[e * d + b]).sum();
            }
        }
        let mut h = ainv;
        for p in 0..m {
            let zp = &z[p * d..(p + 1) * d];
            let tz: Vec<f64> = (0..d).map(|b| (0..d).map(|a| zp[a] * t[a * d + b]).sum()).collect();
            for q in 0..m {
                let zq = &z[q * d..(q + 1) * d];
                h[p * m + q] -= tz.iter().zip(zq).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        h
    }
}

/// Central-difference gradient and Hessian of an endpoint functional.
fn functional_derivatives(f: &Functional, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = z.len();
    let h = 1e-6 * (1.0 + norm(z));
    let mut g = vec![0.0; d];
    let mut zp = z.to_vec();
    for a in 0..d {
        zp[a] = z[a] + h;
        let fp = f(&zp);
        zp[a] = z[a] - h;
        let fm = f(&zp);
        zp[a] = z[a];
        g[a] = (fp - fm) / (2.0 * h);
    }
    let hh = 1e-4 * (1.0 + norm(z));
    let f0 = f(z);
    let mut hess = vec![0.0; d * d];
    for a in 0..d {
        for b in a..d {
            let v = if a == b {
                zp[a] = z[a] + hh;
                let fp = f(&zp);
                zp[a] = z[a] - hh;
                let fm = f(&zp);
                zp[a] = z[a];
                (fp - 2.0 * f0 + fm) / (hh * hh)
            } else {
                let mut e = |sa: f64, sb: f64| {
                    zp[a] = z[a] + sa * hh;
                    zp[b] = z[b] + sb * hh;
                    let v = f(&zp);
                    zp[a] = z[a];
                    zp[b] = z[b];
                    v
                };
                (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * hh * hh)
            };
            hess[a * d + b] = v;
            hess[b * d + a] = v;
        }
    }
    (g, hess)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: usize,
    pub penalty: f64,
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinimizerResult {
    pub phi: ControlVector,
    /// `1/2 |k|^2` in target mode, `F(Phi_T) + 1/2 |k|^2` in functional mode.
    pub value: f64,
    pub endpoint: Vec<f64>,
    pub endpoint_residual: f64,
    /// Norm of the gradient of the Lagrangian (target mode) or objective.
    pub grad_norm: f64,
    /// Lagrange multiplier of the endpoint constraint, or `grad F(Phi_T)`.
    pub multiplier: Vec<f64>,
    pub hessian_spectrum_sample: Vec<f64>,
    /// A non-positive directional second difference was observed.
    pub h2_violation: bool,
    pub converged: bool,
    pub trace: Vec<StageTrace>,
    pub polish_iterations: usize,
}

/// Penalty stages of the endpoint minimiser.
pub const PENALTY_STAGES: usize = 6;

/// Minimise `1/2 phi^T G phi` subject to `Phi_T(x0, k(phi)) = y`.
///
/// Augmented-Lagrangian continuation (penalty x10 per stage, 6 stages) with
/// BFGS inner loops on finite-difference gradients, then Gauss–Newton SQP
/// steps on the KKT system until the constraint residual stalls.
pub fn minimize_rate_endpoint(prob: &RateProblem) -> Result<MinimizerResult> {
    prob.check()?;
    let Objective::Target(y) = &prob.objective else {
        return invalid("minimize_rate_endpoint needs a target endpoint");
    };
    let d = prob.fields.dim();
    let n = prob.grid.n_steps();
    let m = n * d;
    let map = SkeletonMap::new(prob);
    let gram = GramOp::new(&prob.grid, prob.hurst, d)?;
    let resid_of = |x: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(a, b)| a - b).collect() };

    if prob.x0.iter().zip(y).all(|(a, b)| a == b) {
        let phi = ControlVector::zeros(prob.grid, d);
        return Ok(MinimizerResult {
            phi,
            value: 0.0,
            endpoint: prob.x0.clone(),
            endpoint_residual: 0.0,
            grad_norm: 0.0,
            multiplier: vec![0.0; d],
            hessian_spectrum_sample: vec![],
            h2_violation: false,
            converged: true,
            trace: vec![],
            polish_iterations: 0,
        });
    }

    let t2h = prob.grid.horizon().powf(2.0 * prob.hurst.value());
    // start from the flat-space answer through sigma(x0)^{-1}
    let s0 = prob.fields.sigma(&prob.x0);
    let dy: Vec<f64> = y.iter().zip(&prob.x0).map(|(a, b)| a - b).collect();
    let u0 = linalg::solve(&s0, d, &dy).unwrap_or_else(|| vec![0.0; d]);
    let mut phi: Vec<f64> = (0..n).flat_map(|_| u0.iter().map(|u| u / t2h)).collect();
    let mut lambda = vec![0.0; d];
    let mut mu = 1.0 / t2h;
    let mut trace = Vec::new();

    for stage in 0..PENALTY_STAGES {
        let (_, jac) = map.jacobian(&phi)?;
        let w: Vec<f64> = (0..d * d).map(|c| if c / d == c % d { mu } else { 0.0 }).collect();
        let h0 = gram.woodbury_inverse(&jac, &w);
        let lam = lambda.clone();
        let obj = |p: &[f64]| -> f64 {
            match map.endpoint(p) {
                Ok(x) => {
                    let c = resid_of(&x);
                    gram.half_norm(p) + lam.iter().zip(&c).map(|(l, v)| l * v).sum::<f64>() + 0.5 * mu * c.iter().map(|v| v * v).sum::<f64>()
                }
                Err(_) => f64::INFINITY,
            }
        };
        let grad = |p: &[f64]| -> Vec<f64> {
            let mut g = gram.apply(p);
            if let Ok((x, jac)) = map.jacobian(p) {
                let c = resid_of(&x);
                for r in 0..d {
                    let coef = lam[r] + mu * c[r];
                    for col in 0..m {
                        g[col] += coef * jac[r * m + col];
                    }
                }
            }
            g
        };
        let res = bfgs(obj, grad, &phi, h0, &BfgsOptions { max_iter: 40, tol: 1e-11 });
        phi = res.x;
        let x = map.endpoint(&phi)?;
        let c = resid_of(&x);
        for r in 0..d {
            lambda[r] += mu * c[r];
        }
        trace.push(StageTrace {
            stage,
            penalty: mu,
            value: gram.half_norm(&phi),
            residual: norm(&c),
            iterations: res.iterations,
        });
        mu *= 10.0;
    }

    // Gauss–Newton SQP: phi <- -A^{-1} J^T nu with nu from the linearised constraint
    let kkt = |phi: &[f64], lambda: &[f64]| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let (x, jac) = map.jacobian(phi)?;
        let c = resid_of(&x);
        let mut g = gram.apply(phi);
        for r in 0..d {
            for col in 0..m {
                g[col] += lambda[r] * jac[r * m + col];
            }
        }
        let stat = gram.solve(&g);
        let merit = norm(&c) + gram_dual_norm(&g, &stat);
        Ok((merit, c, jac))
    };
    let (mut merit, mut c, mut jac) = kkt(&phi, &lambda)?;
    let mut polish = 0;
    for _ in 0..30 {
        // Z = A^{-1} J^T, S = J Z
        let zt: Vec<Vec<f64>> = (0..d).map(|r| gram.solve(&jac[r * m..(r + 1) * m])).collect();
        let mut s = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                s[a * d + b] = (0..m).map(|col| jac[a * m + col] * zt[b][col]).sum();
            }
        }
        let jphi: Vec<f64> = (0..d).map(|a| (0..m).map(|col| jac[a * m + col] * phi[col]).sum()).collect();
        let rhs: Vec<f64> = (0..d).map(|a| jphi[a] - c[a]).collect();
        let Some(nu) = linalg::solve(&s, d, &rhs) else { break };
        let cand: Vec<f64> = (0..m).map(|col| (0..d).map(|a| zt[a][col] * nu[a]).sum()).collect();
        let Ok((mc, cc, jc)) = kkt(&cand, &nu) else { break };
        if !(mc < merit) {
            break;
        }
        polish += 1;
        let step: f64 = cand.iter().zip(&phi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        phi = cand;
        lambda = nu;
        merit = mc;
        c = cc;
        jac = jc;
        if step < 1e-14 * (1.0 + phi.iter().fold(0.0f64, |a, v| a.max(v.abs()))) {
            break;
        }
    }

    let x = map.endpoint(&phi)?;
    let mut g = gram.apply(&phi);
    for r in 0..d {
        for col in 0..m {
            g[col] += lambda[r] * jac[r * m + col];
        }
    }
    let grad_norm = norm(&g);
    let residual = norm(&resid_of(&x));
    let scale = norm(&gram.apply(&phi)).max(1e-300);
    let phi_cv = ControlVector::new(prob.grid, d, phi)?;
    let mut result = MinimizerResult {
        value: gram.half_norm(phi_cv.as_slice()),
        phi: phi_cv,
        endpoint: x,
        endpoint_residual: residual,
        grad_norm,
        multiplier: lambda,
        hessian_spectrum_sample: vec![],
        h2_violation: false,
        converged: residual < 1e-8 && grad_norm < 1e-6 * scale.max(1.0),
        trace,
        polish_iterations: polish,
    };
    let spec = hessian_directional(prob, &result, 8, 0)?;
    result.h2_violation = spec.iter().any(|&v| v <= 0.0);
    result.hessian_spectrum_sample = spec;
    Ok(result)
}

fn gram_dual_norm(g: &[f64], ginv_g: &[f64]) -> f64 {
    g.iter().zip(ginv_g).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
}

/// Minimise `F(Phi_T(x0, k(phi))) + 1/2 phi^T G phi` by BFGS from `starts`
/// initial controls (zero, then seeded random ones), followed by Gauss–Newton
/// polishing of the best.
pub fn minimize_free_energy(prob: &RateProblem, starts: usize, seed: u64) -> Result<MinimizerResult> {
    prob.check()?;
    let Objective::Functional(f) = &prob.objective else {
        return invalid("minimize_free_energy needs an endpoint functional");
    };
    let d = prob.fields.dim();
    let n = prob.grid.n_steps();
    let m = n * d;
    let map = SkeletonMap::new(prob);
    let gram = GramOp::new(&prob.grid, prob.hurst, d)?;
    let obj = |p: &[f64]| -> f64 {
        match map.endpoint(p) {
            Ok(x) => f(&x) + gram.half_norm(p),
            Err(_) => f64::INFINITY,
        }
    };
    let grad = |p: &[f64]| -> Vec<f64> {
        let mut g = gram.apply(p);
        if let Ok((x, jac)) = map.jacobian(p) {
            let (gf, _) = functional_derivatives(f, &x);
            for r in 0..d {
                for col in 0..m {
                    g[col] += gf[r] * jac[r * m + col];
                }
            }
        }
        g
    };
    let t2h = prob.grid.horizon().powf(2.0 * prob.hurst.value());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in 0..starts.max(1) {
        let x0: Vec<f64> = if s == 0 {
            vec![0.0; m]
        } else {
            let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
            (0..n).flat_map(|_| u.iter().map(|v| v / t2h.sqrt())).collect()
        };
        let h0 = {
            let (x, jac) = map.jacobian(&x0)?;
            let (_, hf) = functional_derivatives(f, &x);
            gram.woodbury_inverse(&jac, &psd_part(&hf, d))
        };
        let res = bfgs(obj, grad, &x0, h0, &BfgsOptions { max_iter: 200, tol: 1e-11 });
        if best.as_ref().is_none_or(|b| res.value < b.1) {
            best = Some((res.x, res.value));
        }
    }
    let (mut phi, mut value) = best.expect("at least one start");
    let mut polish = 0;
    for _ in 0..20 {
        let (x, jac) = map.jacobian(&phi)?;
        let (gf, hf) = functional_derivatives(f, &x);
        let mut g = gram.apply(&phi);
        for r in 0..d {
            for col in 0..m {
                g[col] += gf[r] * jac[r * m + col];
            }
        }
        let hinv = gram.woodbury_inverse(&jac, &psd_part(&hf, d));
        let step: Vec<f64> = (0..m).map(|p| (0..m).map(|q| hinv[p * m + q] * g[q]).sum()).collect();
        let cand: Vec<f64> = phi.iter().zip(&step).map(|(a, b)| a - b).collect();
        let vc = obj(&cand);
        if !(vc <= value) {
            break;
        }
        polish += 1;
        let size = step.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        phi = cand;
        value = vc;
        if size < 1e-14 * (1.0 + phi.iter().fold(0.0f64, |a, v| a.max(v.abs()))) {
            break;
        }
    }
    let x = map.endpoint(&phi)?;
    let g = grad(&phi);
    let grad_norm = norm(&g);
    let (gf, _) = functional_derivatives(f, &x);
    let scale = norm(&gram.apply(&phi)).max(norm(&gf)).max(1.0);
    let phi_cv = ControlVector::new(prob.grid, d, phi)?;
    let mut result = MinimizerResult {
        phi: phi_cv,
        value,
        endpoint: x,
        endpoint_residual: 0.0,
        grad_norm,
        multiplier: gf,
        hessian_spectrum_sample: vec![],
        h2_violation: false,
        converged: grad_norm < 1e-7 * scale,
        trace: vec![],
        polish_iterations: polish,
    };
    let spec = hessian_directional(prob, &result, 8, seed)?;
    result.h2_violation = spec.iter().any(|&v| v <= 0.0);
    result.hessian_spectrum_sample = spec;
    Ok(result)
}

/// Symmetric part of `h` with negative eigen-directions dropped (crudely: the
/// matrix itself if positive semi-definite, zero otherwise).
fn psd_part(h: &[f64], d: usize) -> Vec<f64> {
    let ev = linalg::symmetric_eigenvalues(h, d);
    if ev.first().is_some_and(|&e| e >= 0.0) {
        h.to_vec()
    } else {
        vec![0.0; d * d]
    }
}

/// Central second differences of the objective (functional mode) or of the
/// Lagrangian restricted to the constraint tangent space (target mode) along
/// random unit directions.
pub fn hessian_directional(prob: &RateProblem, result: &MinimizerResult, n_directions: usize, seed: u64) -> Result<Vec<f64>> {
    prob.check()?;
    let d = prob.fields.dim();
    let m = prob.grid.n_steps() * d;
    let map = SkeletonMap::new(prob);
    let gram = GramOp::new(&prob.grid, prob.hurst, d)?;
    let phi = result.phi.as_slice();
    let lam = &result.multiplier;
    let lagrangian = |p: &[f64]| -> Result<f64> {
        let x = map.endpoint(p)?;
        Ok(match &prob.objective {
            Objective::Target(y) => gram.half_norm(p) + lam.iter().zip(x.iter().zip(y)).map(|(l, (a, b))| l * (a - b)).sum::<f64>(),
            Objective::Functional(f) => gram.half_norm(p) + f(&x),
        })
    };
    let tangent_basis = match &prob.objective {
        Objective::Target(_) => Some(map.jacobian(phi)?.1),
        Objective::Functional(_) => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l0 = lagrangian(phi)?;
    let scale = phi.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let h = 1e-3 * scale;
    let mut out = Vec::with_capacity(n_directions);
    for _ in 0..n_directions {
        let mut e: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        if let Some(jac) = &tangent_basis {
            project_out_rows(&mut e, jac, d, m);
        }
        let en = norm(&e);
        if en == 0.0 {
            continue;
        }
        e.iter_mut().for_each(|v| *v /= en);
        let pp: Vec<f64> = phi.iter().zip(&e).map(|(a, b)| a + h * b).collect();
        let pm: Vec<f64> = phi.iter().zip(&e).map(|(a, b)| a - h * b).collect();
        out.push((lagrangian(&pp)? - 2.0 * l0 + lagrangian(&pm)?) / (h * h));
    }
    Ok(out)
}

/// Remove from `e` its component in the row space of `jac` (`d x m`).
fn project_out_rows(e: &mut [f64], jac: &[f64], d: usize, m: usize) {
    let mut jjt = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            jjt[a * d + b] = (0..m).map(|c| jac[a * m + c] * jac[b * m + c]).sum();
        }
    }
    let je: Vec<f64> = (0..d).map(|a| (0..m).map(|c| jac[a * m + c] * e[c]).sum()).collect();
    if let Some(coef) = linalg::solve(&jjt, d, &je) {
        for c in 0..m {
            e[c] -= (0..d).map(|a| jac[a * m + c] * coef[a]).sum::<f64>();
        }
    }
}

// ---------------------------------------------------------------------------
// Variations

/// Skeleton `phi`, first variation `chi` and second variation `psi` on a grid,
/// each flat `(N + 1) x d`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Variations {
    pub grid: TimeGrid,
    pub dim: usize,
    pub phi: Vec<f64>,
    pub chi: Vec<f64>,
    pub psi: Vec<f64>,
}

/// Heun steps of the augmented system driven by `(gamma, k)`:
///
/// ```text
/// d phi = sigma(phi) d gamma
/// d chi = sigma(phi) dk + sum_i dV_i(phi) chi d gamma^i
/// d psi = 2 sum_i dV_i(phi) chi dk^i + sum_i d^2V_i(phi)[chi, chi] d gamma^i + sum_i dV_i(phi) psi d gamma^i
/// ```
///
/// The scheme is the Heun step of the skeleton differentiated in the
/// direction `k`, so `chi` and `psi` are the derivatives of the discrete flow.
struct Augmented<'a> {
    fields: &'a dyn VectorFieldSystem,
    d: usize,
    second: bool,
    sigma: Vec<f64>,
    jac: Vec<f64>,
    dd: Vec<f64>,
}

impl<'a> Augmented<'a> {
    fn new(fields: &'a dyn VectorFieldSystem, second: bool) -> Self {
        let d = fields.dim();
        Augmented { fields, d, second, sigma: vec![0.0; d * d], jac: vec![0.0; d * d * d], dd: vec![0.0; d * d] }
    }

    /// Increment of `z = (phi, chi, psi)` for driver increments `(dg, dk)`.
    fn rhs(&mut self, z: &[f64], dg: &[f64], dk: &[f64], out: &mut [f64]) {
        let d = self.d;
        let (phi, rest) = z.split_at(d);
        let (chi, psi) = rest.split_at(d);
        self.fields.sigma_into(phi, &mut self.sigma);
        self.fields.jacobians_into(phi, &mut self.jac);
        if self.second {
            self.fields.second_directional_into(phi, chi, &mut self.dd);
        }
        for r in 0..d {
            let srow = &self.sigma[r * d..(r + 1) * d];
            out[r] = srow.iter().zip(dg).map(|(a, b)| a * b).sum();
            let mut c = srow.iter().zip(dk).map(|(a, b)| a * b).sum::<f64>();
            let mut p = 0.0;
            for i in 0..d {
                let jrow = &self.jac[(i * d + r) * d..(i * d + r + 1) * d];
                let jchi: f64 = jrow.iter().zip(chi).map(|(a, b)| a * b).sum();
                c += jchi * dg[i];
                if self.second {
                    let jpsi: f64 = jrow.iter().zip(psi).map(|(a, b)| a * b).sum();
                    p += 2.0 * jchi * dk[i] + self.dd[i * d + r] * dg[i] + jpsi * dg[i];
                }
            }
            out[d + r] = c;
            out[2 * d + r] = p;
        }
    }

    fn run(&mut self, x0: &[f64], gpath: &[f64], kpath: &[f64], keep: bool) -> Result<Vec<f64>> {
        let d = self.d;
        let steps = gpath.len() / d - 1;
        let mut z = vec![0.0; 3 * d];
        z[..d].copy_from_slice(x0);
        let mut out = if keep { z.clone() } else { Vec::new() };
        let (mut f1, mut f2, mut zt) = (vec![0.0; 3 * d], vec![0.0; 3 * d], vec![0.0; 3 * d]);
        let (mut dg, mut dk) = (vec![0.0; d], vec![0.0; d]);
        for i in 0..steps {
            for a in 0..d {
                dg[a] = gpath[(i + 1) * d + a] - gpath[i * d + a];
                dk[a] = kpath[(i + 1) * d + a] - kpath[i * d + a];
            }
            self.rhs(&z, &dg, &dk, &mut f1);
            for a in 0..3 * d {
                zt[a] = z[a] + f1[a];
            }
            self.rhs(&zt, &dg, &dk, &mut f2);
            for a in 0..3 * d {
                z[a] += 0.5 * (f1[a] + f2[a]);
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: i + 1 });
            }
            if norm(&z[..d]) > crate::young::BLOWUP_RADIUS {
                return Err(Error::BlowUp { step: i + 1 });
            }
            if keep {
                out.extend_from_slice(&z);
            }
        }
        Ok(if keep { out } else { z })
    }
}

fn split_augmented(z: &[f64], d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (mut a, mut b, mut c) = (Vec::new(), Vec::new(), Vec::new());
    for row in z.chunks_exact(3 * d) {
        a.extend_from_slice(&row[..d]);
        b.extend_from_slice(&row[d..2 * d]);
        c.extend_from_slice(&row[2 * d..]);
    }
    (a, b, c)
}

/// First and second variations of the skeleton along `gamma` in the direction `k`,
/// both given as controls on the same grid; solved on that grid refined `refine` times.
pub fn variations(
    fields: &dyn VectorFieldSystem,
    x0: &[f64],
    gamma: &ControlVector,
    k: &ControlVector,
    hurst: Hurst,
    refine: usize,
) -> Result<Variations> {
    let d = fields.dim();
    if gamma.dim() != d || k.dim() != d || x0.len() != d {
        return invalid("variation inputs must match the field dimension");
    }
    if gamma.grid() != k.grid() {
        return Err(Error::GridMismatch("gamma and k controls use different grids".into()));
    }
    let fine = gamma.grid().refined(refine.max(1));
    let gp = cm_shift_on(gamma, hurst, &fine);
    let kp = cm_shift_on(k, hurst, &fine);
    let z = Augmented::new(fields, true).run(x0, &gp, &kp, true)?;
    let (phi, chi, psi) = split_augmented(&z, d);
    Ok(Variations { grid: fine, dim: d, phi, chi, psi })
}

/// Skeleton endpoint along a control, on the control grid refined `refine` times.
pub fn skeleton_of_control(
    fields: &dyn VectorFieldSystem,
    x0: &[f64],
    gamma: &ControlVector,
    hurst: Hurst,
    refine: usize,
) -> Result<Vec<f64>> {
    let fine = gamma.grid().refined(refine.max(1));
    let gp = cm_shift_on(gamma, hurst, &fine);
    let (x, st) = integrate(fields, Scheme::Heun, &fine, &gp, 1, x0, 1.0, 0.0, true);
    match st {
        PathStatus::Ok => Ok(x),
        PathStatus::BlowUp { step } => Err(Error::BlowUp { step }),
        PathStatus::NonFinite { step } => Err(Error::NonFinite { step }),
    }
}

/// Taylor terms of `Z^eps = phi + eps g_1 + eps^2 g_2 / 2 + ...`, where `Z^eps`
/// solves `dZ = sigma(Z)(dk_gamma + eps dB)`. Each of `g1`, `g2` is flat
/// `n_paths x (N + 1) x d` on the path grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaylorTerms {
    pub grid: TimeGrid,
    pub dim: usize,
    pub n_paths: usize,
    pub phi: Vec<f64>,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

impl TaylorTerms {
    pub fn g1_path(&self, p: usize) -> &[f64] {
        let s = (self.grid.n_steps() + 1) * self.dim;
        &self.g1[p * s..(p + 1) * s]
    }
    pub fn g2_path(&self, p: usize) -> &[f64] {
        let s = (self.grid.n_steps() + 1) * self.dim;
        &self.g2[p * s..(p + 1) * s]
    }
}

fn gamma_on_paths(gamma: &ControlVector, paths: &FbmPathSet, d: usize) -> Result<Vec<f64>> {
    if paths.dim() != d || gamma.dim() != d {
        return invalid("paths, control and fields must share the dimension");
    }
    if (paths.grid().horizon() - gamma.grid().horizon()).abs() > 1e-12 * gamma.grid().horizon() {
        return Err(Error::GridMismatch("control and paths have different horizons".into()));
    }
    Ok(cm_shift_on(gamma, paths.hurst(), paths.grid()))
}

/// `g_1` and `g_2` for every path of the batch, along the skeleton of `gamma`.
pub fn taylor_g(fields: &dyn VectorFieldSystem, x0: &[f64], gamma: &ControlVector, paths: &FbmPathSet) -> Result<TaylorTerms> {
    let d = fields.dim();
    let gp = gamma_on_paths(gamma, paths, d)?;
    type Split = (Vec<f64>, Vec<f64>, Vec<f64>);
    let per: Vec<Result<Split>> = (0..paths.n_paths())
        .into_par_iter()
        .map(|p| {
            let z = Augmented::new(fields, true).run(x0, &gp, paths.path(p), true)?;
            Ok(split_augmented(&z, d))
        })
        .collect();
    let mut phi = Vec::new();
    let (mut g1, mut g2) = (Vec::new(), Vec::new());
    for (p, r) in per.into_iter().enumerate() {
        let (a, b, c) = r?;
        if p == 0 {
            phi = a;
        }
        g1.extend(b);
        g2.extend(c);
    }
    Ok(TaylorTerms { grid: *paths.grid(), dim: d, n_paths: paths.n_paths(), phi, g1, g2 })
}

/// Per-path `(lhs, rhs)` of the critical-point identity with summary statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaCheck {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub correlation: f64,
    pub mean_abs_discrepancy: f64,
    pub max_abs_discrepancy: f64,
}

/// At a critical point `phi*`: `dF(phi_T) g_1(T) = - sum_j <phi*_j, dB_j>` per path.
///
/// In target mode `dF` is the constraint multiplier. The path grid must refine
/// the control grid.
pub fn theta_prime_identity(prob: &RateProblem, min: &MinimizerResult, paths: &FbmPathSet) -> Result<ThetaCheck> {
    prob.check()?;
    if prob.fields.has_drift() {
        return invalid("the identity is stated for drift-free systems");
    }
    let d = prob.fields.dim();
    let phi = &min.phi;
    let nc = phi.grid().n_steps();
    let nb = paths.grid().n_steps();
    if !nb.is_multiple_of(nc) {
        return Err(Error::GridMismatch(format!("path grid of {nb} steps does not refine the control grid of {nc}")));
    }
    let ratio = nb / nc;
    let gp = gamma_on_paths(phi, paths, d)?;
    let fields = prob.fields.as_ref();
    let dfz: Vec<f64> = match &prob.objective {
        Objective::Target(_) => min.multiplier.clone(),
        Objective::Functional(f) => {
            let z = Augmented::new(fields, false).run(&prob.x0, &gp, &vec![0.0; gp.len()], false)?;
            functional_derivatives(f, &z[..d]).0
        }
    };
    let pairs: Vec<Result<(f64, f64)>> = (0..paths.n_paths())
        .into_par_iter()
        .map(|p| {
            let path = paths.path(p);
            let z = Augmented::new(fields, false).run(&prob.x0, &gp, path, false)?;
            let lhs: f64 = dfz.iter().zip(&z[d..2 * d]).map(|(a, b)| a * b).sum();
            let mut rhs = 0.0;
            for j in 0..nc {
                for kk in 0..d {
                    let db = path[(j + 1) * ratio * d + kk] - path[j * ratio * d + kk];
                    rhs -= phi.as_slice()[j * d + kk] * db;
                }
            }
            Ok((lhs, rhs))
        })
        .collect();
    let mut lhs = Vec::with_capacity(pairs.len());
    let mut rhs = Vec::with_capacity(pairs.len());
    for r in pairs {
        let (a, b) = r?;
        lhs.push(a);
        rhs.push(b);
    }
    let disc: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).collect();
    Ok(ThetaCheck {
        correlation: correlation(&lhs, &rhs),
        mean_abs_discrepancy: disc.iter().sum::<f64>() / disc.len().max(1) as f64,
        max_abs_discrepancy: disc.iter().cloned().fold(0.0, f64::max),
        lhs,
        rhs,
    })
}

pub(crate) fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

// ---------------------------------------------------------------------------
// Tail probes

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailTable {
    pub r: Vec<f64>,
    pub exceed: Vec<usize>,
    pub log_p: Vec<f64>,
    /// `"r^2"` for `g_1`, `"r"` for `g_2`.
    pub regressor: String,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailProbe {
    pub t: f64,
    pub lambda: f64,
    pub n_paths: usize,
    pub g1: TailTable,
    pub g2: TailTable,
}

/// Probability levels used for the default `r` grid.
pub const TAIL_LEVELS: [f64; 11] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.98, 0.99, 0.995, 0.998, 0.999];

fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

fn tail_table(norms: &mut [f64], r_grid: Option<&[f64]>, square: bool) -> TailTable {
    norms.sort_by(f64::total_cmp);
    let n = norms.len();
    let r: Vec<f64> = match r_grid {
        Some(g) => g.to_vec(),
        None => TAIL_LEVELS
            .iter()
            .filter(|&&q| (1.0 - q) * n as f64 >= 50.0)
            .map(|&q| norms[((q * n as f64) as usize).min(n - 1)])
            .collect(),
    };
    let exceed: Vec<usize> = r.iter().map(|&rv| n - norms.partition_point(|&v| v < rv)).collect();
    let keep: Vec<usize> = (0..r.len()).filter(|&i| exceed[i] > 0).collect();
    let x: Vec<f64> = keep.iter().map(|&i| if square { r[i] * r[i] } else { r[i] }).collect();
    let log_p: Vec<f64> = exceed.iter().map(|&e| (e as f64 / n as f64).ln()).collect();
    let y: Vec<f64> = keep.iter().map(|&i| log_p[i]).collect();
    let (slope, intercept, r_squared) = if x.len() >= 2 { linear_fit(&x, &y) } else { (f64::NAN, f64::NAN, f64::NAN) };
    TailTable { r, exceed, log_p, regressor: if square { "r^2".into() } else { "r".into() }, slope, intercept, r_squared }
}

/// Empirical `log P(||g_i||_{lambda, t} >= r)` for `g_1` (fitted against `r^2`)
/// and `g_2` (fitted against `r`). Paths live on `[0, 1]`; `t` must be a grid point.
pub fn tail_probe(
    fields: &dyn VectorFieldSystem,
    x0: &[f64],
    gamma: &ControlVector,
    paths: &FbmPathSet,
    t: f64,
    lambda: f64,
    r_grid: Option<(&[f64], &[f64])>,
) -> Result<TailProbe> {
    let d = fields.dim();
    let gp = gamma_on_paths(gamma, paths, d)?;
    let grid = *paths.grid();
    let last = grid
        .index_of(t)
        .filter(|&i| i > 0)
        .ok_or_else(|| Error::InvalidParameter(format!("t = {t} is not a positive grid point")))?;
    if !(lambda > 0.5 && lambda < 1.0) {
        return invalid("lambda must lie in (1/2, 1)");
    }
    let norms: Vec<Result<(f64, f64)>> = (0..paths.n_paths())
        .into_par_iter()
        .map(|p| {
            let z = Augmented::new(fields, true).run(x0, &gp[..(last + 1) * d], &paths.path(p)[..(last + 1) * d], true)?;
            let (_, g1, g2) = split_augmented(&z, d);
            Ok((
                hoelder_norm_values(&g1, d, grid.dt(), lambda, last),
                hoelder_norm_values(&g2, d, grid.dt(), lambda, last),
            ))
        })
        .collect();
    let mut n1 = Vec::with_capacity(norms.len());
    let mut n2 = Vec::with_capacity(norms.len());
    for r in norms {
        let (a, b) = r?;
        n1.push(a);
        n2.push(b);
    }
    Ok(TailProbe {
        t,
        lambda,
        n_paths: paths.n_paths(),
        g1: tail_table(&mut n1, r_grid.map(|g| g.0), true),
        g2: tail_table(&mut n2, r_grid.map(|g| g.1), false),
    })
}
