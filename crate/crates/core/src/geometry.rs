//! Riemannian structure making `V_1, ..., V_d` orthonormal: metric,
//! structure constants, exponential map and geodesic distance by shooting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fields::{norm, StructureConstants, VectorFieldSystem};
use crate::linalg;
use crate::young::BLOWUP_RADIUS;

/// Smallest `|det sigma|` accepted as elliptic.
pub const ELLIPTICITY_THRESHOLD: f64 = 1e-10;

/// `sigma(x)` with the fields as columns; fails when `|det sigma(x)| < 1e-10`.
pub fn sigma_matrix(fields: &dyn VectorFieldSystem, x: &[f64]) -> Result<Vec<f64>> {
    let d = fields.dim();
    if x.len() != d {
        return invalid(format!("point has dimension {}, fields {d}", x.len()));
    }
    let s = fields.sigma(x);
    let det = linalg::det(&s, d);
    if !(det.abs() >= ELLIPTICITY_THRESHOLD) {
        return Err(Error::Ellipticity { point: x.to_vec(), det: det.abs() });
    }
    Ok(s)
}

/// Metric `Gamma = (sigma sigma^T)^{-1}`.
pub fn metric(fields: &dyn VectorFieldSystem, x: &[f64]) -> Result<Vec<f64>> {
    let d = fields.dim();
    let s = sigma_matrix(fields, x)?;
    let mut sst = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            sst[i * d + j] = (0..d).map(|k| s[i * d + k] * s[j * d + k]).sum();
        }
    }
    let g = linalg::inverse(&sst, d).ok_or_else(|| Error::Ellipticity { point: x.to_vec(), det: 0.0 })?;
    if !linalg::is_spd(&g, d) {
        return Err(Error::IllConditioned(format!("metric at {x:?} is not positive definite")));
    }
    Ok(g)
}

/// Axis-aligned box in which the fields are assumed elliptic and bounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl WorkingBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return invalid("working box needs lo < hi in every coordinate");
        }
        Ok(WorkingBox { lo, hi })
    }

    pub fn cube(dim: usize, half_width: f64) -> Self {
        WorkingBox { lo: vec![-half_width; dim], hi: vec![half_width; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    /// Tensor lattice with `m` points per axis (endpoints included).
    pub fn lattice(&self, m: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        let total = m.pow(d as u32);
        (0..total)
            .map(|mut idx| {
                (0..d)
                    .map(|k| {
                        let j = idx % m;
                        idx /= m;
                        let f = if m == 1 { 0.5 } else { j as f64 / (m - 1) as f64 };
                        self.lo[k] + f * (self.hi[k] - self.lo[k])
                    })
                    .collect()
            })
            .collect()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| self.lo.iter().zip(&self.hi).map(|(a, b)| rng.random_range(*a..*b)).collect())
            .collect()
    }

    /// Ellipticity on a `5^d` lattice for `d <= 3`, on 512 random points above.
    pub fn certify_ellipticity(&self, fields: &dyn VectorFieldSystem) -> Result<()> {
        if fields.dim() != self.dim() {
            return invalid("working box and fields differ in dimension");
        }
        let pts = if self.dim() <= 3 { self.lattice(5) } else { self.sample(512, 0) };
        for p in pts {
            sigma_matrix(fields, &p)?;
        }
        Ok(())
    }
}

/// `[V_i, V_j](x) = DV_j V_i - DV_i V_j`.
pub fn lie_bracket(fields: &dyn VectorFieldSystem, i: usize, j: usize, x: &[f64]) -> Vec<f64> {
    let d = fields.dim();
    let s = fields.sigma(x);
    let jac = fields.jacobians(x);
    bracket_from(&s, &jac, d, i, j)
}

pub(crate) fn bracket_from(s: &[f64], jac: &[f64], d: usize, i: usize, j: usize) -> Vec<f64> {
    (0..d)
        .map(|r| {
            (0..d)
                .map(|c| jac[(j * d + r) * d + c] * s[c * d + i] - jac[(i * d + r) * d + c] * s[c * d + j])
                .sum()
        })
        .collect()
}

/// Structure constants recovered at sample points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructureReport {
    pub points: Vec<Vec<f64>>,
    /// `omega[p]` uses the layout of [`StructureConstants`].
    pub omega: Vec<Vec<f64>>,
    pub max_expansion_residual: f64,
    pub max_antisymmetry_defect: f64,
    /// Largest deviation from the structure constants declared by the fields, if any.
    pub max_deviation_from_declared: Option<f64>,
    pub constant_in_x: bool,
    pub tol: f64,
    pub pass: bool,
}

/// Solve `[V_i, V_j](x) = sum_l omega^l_{ij}(x) V_l(x)` at each point.
pub fn check_structure(fields: &dyn VectorFieldSystem, points: &[Vec<f64>], tol: f64) -> Result<StructureReport> {
    let d = fields.dim();
    let declared = fields.structure_constants();
    let mut omegas = Vec::with_capacity(points.len());
    let mut resid: f64 = 0.0;
    let mut anti: f64 = 0.0;
    let mut dev: f64 = 0.0;
    for x in points {
        let s = sigma_matrix(fields, x)?;
        let jac = fields.jacobians(x);
        let mut om = vec![0.0; d * d * d];
        for i in 0..d {
            for j in 0..d {
                let br = bracket_from(&s, &jac, d, i, j);
                let w = linalg::solve(&s, d, &br).ok_or_else(|| Error::Ellipticity { point: x.clone(), det: 0.0 })?;
                let back = linalg::mat_vec(&s, d, &w);
                for r in 0..d {
                    resid = resid.max((back[r] - br[r]).abs());
                }
                for l in 0..d {
                    om[(i * d + j) * d + l] = w[l];
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                for l in 0..d {
                    anti = anti.max((om[(i * d + j) * d + l] + om[(i * d + l) * d + j]).abs());
                    if let Some(w) = &declared {
                        dev = dev.max((om[(i * d + j) * d + l] - w.get(i, j, l)).abs());
                    }
                }
            }
        }
        omegas.push(om);
    }
    let constant_in_x = omegas
        .windows(2)
        .all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| (a - b).abs() <= tol));
    let deviation = declared.as_ref().map(|_| dev);
    let pass = resid <= tol && anti <= tol && deviation.is_none_or(|v| v <= tol);
    Ok(StructureReport {
        points: points.to_vec(),
        omega: omegas,
        max_expansion_residual: resid,
        max_antisymmetry_defect: anti,
        max_deviation_from_declared: deviation,
        constant_in_x,
        tol,
        pass,
    })
}

/// Christoffel symbols of the frame, `Gamma^l_{ij} = omega^l_{ij} / 2`, same layout as `omega`.
pub fn christoffel(omega: &StructureConstants) -> Vec<f64> {
    omega.as_slice().iter().map(|w| 0.5 * w).collect()
}

/// Steps of the fixed-step RK4 integrator behind [`exp_map`].
pub const EXP_MAP_STEPS: usize = 256;

/// Time-1 flow of `x' = sum_i u_i V_i(x)` (classical RK4).
pub fn exp_map(fields: &dyn VectorFieldSystem, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    flow_rk4(|p, out| sigma_times(fields, p, u, out), x, EXP_MAP_STEPS)
}

fn sigma_times(fields: &dyn VectorFieldSystem, x: &[f64], u: &[f64], out: &mut [f64]) {
    let d = x.len();
    let s = fields.sigma(x);
    for r in 0..d {
        out[r] = (0..d).map(|i| s[r * d + i] * u[i]).sum();
    }
}

/// Time-1 flow of an autonomous field by RK4 with `steps` steps.
pub fn flow_rk4(f: impl Fn(&[f64], &mut [f64]), x: &[f64], steps: usize) -> Result<Vec<f64>> {
    flow_rk4_path(f, x, steps, false).map(|mut p| p.split_off(p.len() - x.len()))
}

/// As [`flow_rk4`], optionally keeping the whole path `(steps + 1) x d`.
pub fn flow_rk4_path(f: impl Fn(&[f64], &mut [f64]), x: &[f64], steps: usize, keep: bool) -> Result<Vec<f64>> {
    let d = x.len();
    let h = 1.0 / steps as f64;
    let mut y = x.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut path = if keep { x.to_vec() } else { Vec::new() };
    for step in 0..steps {
        f(&y, &mut k1);
        for r in 0..d {
            tmp[r] = y[r] + 0.5 * h * k1[r];
        }
        f(&tmp, &mut k2);
        for r in 0..d {
            tmp[r] = y[r] + 0.5 * h * k2[r];
        }
        f(&tmp, &mut k3);
        for r in 0..d {
            tmp[r] = y[r] + h * k3[r];
        }
        f(&tmp, &mut k4);
        for r in 0..d {
            y[r] += h / 6.0 * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: step + 1 });
        }
        if norm(&y) > BLOWUP_RADIUS {
            return Err(Error::BlowUp { step: step + 1 });
        }
        if keep {
            path.extend_from_slice(&y);
        }
    }
    Ok(if keep { path } else { y })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ShootingOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        ShootingOptions { tol: 1e-10, max_iter: 50, restarts: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceResult {
    /// Initial velocity coefficients of the geodesic, `y = exp_map(x, u)`.
    pub u: Vec<f64>,
    pub distance: f64,
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    /// 0 for the start at the origin, `k` for the `k`-th perturbed start.
    pub start: usize,
}

fn newton_shoot(
    fields: &dyn VectorFieldSystem,
    x: &[f64],
    y: &[f64],
    u0: Vec<f64>,
    opts: &ShootingOptions,
) -> (Vec<f64>, f64, usize) {
    let d = x.len();
    let resid = |u: &[f64]| -> Option<Vec<f64>> {
        exp_map(fields, x, u).ok().map(|e| e.iter().zip(y).map(|(a, b)| a - b).collect())
    };
    let mut u = u0;
    let Some(mut f) = resid(&u) else {
        return (u, f64::INFINITY, 0);
    };
    let mut fnorm = norm(&f);
    let mut iters = 0;
    while iters < opts.max_iter && fnorm > opts.tol {
        iters += 1;
        // central-difference Jacobian of u -> exp_map(x, u)
        let h = 1e-6 * (1.0 + norm(&u));
        let mut jac = vec![0.0; d * d];
        let mut ok = true;
        for c in 0..d {
            let mut up = u.clone();
            let mut um = u.clone();
            up[c] += h;
            um[c] -= h;
            match (exp_map(fields, x, &up), exp_map(fields, x, &um)) {
                (Ok(a), Ok(b)) => {
                    for r in 0..d {
                        jac[r * d + c] = (a[r] - b[r]) / (2.0 * h);
                    }
                }
                _ => ok = false,
            }
        }
        if !ok {
            break;
        }
        let Some(step) = linalg::solve(&jac, d, &f) else { break };
        // backtracking on the residual norm
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand: Vec<f64> = u.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            if let Some(fc) = resid(&cand) {
                let nc = norm(&fc);
                if nc < fnorm || nc <= opts.tol {
                    u = cand;
                    f = fc;
                    fnorm = nc;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (u, fnorm, iters)
}

/// Geodesic distance by Newton shooting on `u -> exp_map(x, u) - y`, started at
/// `u = 0` and, on failure, from random perturbations of radius `0.5 |y - x|`.
pub fn distance(fields: &dyn VectorFieldSystem, x: &[f64], y: &[f64]) -> Result<DistanceResult> {
    distance_with(fields, x, y, &ShootingOptions::default())
}

pub fn distance_with(fields: &dyn VectorFieldSystem, x: &[f64], y: &[f64], opts: &ShootingOptions) -> Result<DistanceResult> {
    let d = fields.dim();
    if x.len() != d || y.len() != d {
        return invalid("distance endpoints must match the field dimension");
    }
    sigma_matrix(fields, x)?;
    sigma_matrix(fields, y)?;
    let radius = 0.5 * norm(&x.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<DistanceResult> = None;
    for start in 0..=opts.restarts {
        let u0: Vec<f64> = if start == 0 {
            vec![0.0; d]
        } else {
            (0..d).map(|_| radius * rng.random_range(-1.0..1.0)).collect()
        };
        let (u, res, iters) = newton_shoot(fields, x, y, u0, opts);
        let cand = DistanceResult {
            distance: norm(&u),
            converged: res <= opts.tol,
            u,
            residual: res,
            iterations: iters,
            start,
        };
        let better = match &best {
            None => true,
            Some(b) => (cand.converged && !b.converged) || (cand.converged == b.converged && cand.residual < b.residual),
        };
        if better {
            best = Some(cand);
        }
        if best.as_ref().is_some_and(|b| b.converged) {
            break;
        }
    }
    Ok(best.expect("at least one start"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{ConstantFrame, LinearFields, So3Frame};

    #[test]
    fn orthonormal_frame_identity_metric() {
        let f = ConstantFrame::orthonormal(3);
        assert_eq!(sigma_matrix(&f, &[0.0; 3]).unwrap(), f.matrix());
        let g = metric(&f, &[1.0, 2.0, 3.0]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((g[i * 3 + j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
        let two = ConstantFrame::new(2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        assert!((metric(&two, &[0.0, 0.0]).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn frame_is_orthonormal_under_metric() {
        let f = So3Frame;
        for x in WorkingBox::cube(3, 0.9).lattice(3) {
            let g = metric(&f, &x).unwrap();
            let s = f.sigma(&x);
            for i in 0..3 {
                for j in 0..3 {
                    let v: f64 = (0..3)
                        .flat_map(|a| (0..3).map(move |b| (a, b)))
                        .map(|(a, b)| s[a * 3 + i] * g[a * 3 + b] * s[b * 3 + j])
                        .sum();
                    assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn singular_sigma_rejected() {
        let f = ConstantFrame::new(2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(sigma_matrix(&f, &[0.0, 0.0]), Err(Error::Ellipticity { .. })));
        assert!(WorkingBox::cube(2, 1.0).certify_ellipticity(&f).is_err());
        assert!(WorkingBox::cube(3, 1.0).certify_ellipticity(&So3Frame).is_ok());
    }

    #[test]
    fn so3_structure_constants_recovered() {
        let pts = WorkingBox::cube(3, 0.8).sample(10, 3);
        let rep = check_structure(&So3Frame, &pts, 1e-7).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.constant_in_x);
        let c = check_structure(&ConstantFrame::orthonormal(2), &[vec![0.0, 0.0]], 1e-12).unwrap();
        assert!(c.omega[0].iter().all(|&w| w == 0.0));
    }

    #[test]
    fn linear_field_bracket_is_commutator() {
        // V_i = A_i x + c_i: [V_1, V_2] = A_2 (A_1 x + c_1) - A_1 (A_2 x + c_2)
        let a1 = vec![0.0, 1.0, -1.0, 0.0];
        let a2 = vec![1.0, 0.0, 0.0, -1.0];
        let c1 = vec![1.0, 0.0];
        let c2 = vec![0.0, 1.0];
        let f = LinearFields::new(2, vec![a1.clone(), a2.clone()], vec![c1.clone(), c2.clone()]).unwrap();
        let x = [0.3, -0.4];
        let v1: Vec<f64> = linalg::mat_vec(&a1, 2, &x).iter().zip(&c1).map(|(a, b)| a + b).collect();
        let v2: Vec<f64> = linalg::mat_vec(&a2, 2, &x).iter().zip(&c2).map(|(a, b)| a + b).collect();
        let e: Vec<f64> = linalg::mat_vec(&a2, 2, &v1).iter().zip(linalg::mat_vec(&a1, 2, &v2)).map(|(a, b)| a - b).collect();
        let b = lie_bracket(&f, 0, 1, &x);
        for r in 0..2 {
            assert!((b[r] - e[r]).abs() < 1e-14);
        }
    }

    #[test]
    fn christoffel_is_half_omega() {
        let g = christoffel(&StructureConstants::levi_civita());
        assert_eq!(g[3 + 2], 0.5);
        assert_eq!(g[3 * 3 + 2], -0.5);
        assert!(christoffel(&StructureConstants::zeros(2)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exp_map_basics() {
        let f = ConstantFrame::orthonormal(2);
        assert_eq!(exp_map(&f, &[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        let e = exp_map(&f, &[1.0, 2.0], &[0.5, -1.0]).unwrap();
        assert!((e[0] - 1.5).abs() < 1e-14 && (e[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn so3_distance_is_rotation_angle() {
        let x = [0.1, -0.2, 0.3];
        let y = [0.3, 0.0, 0.2];
        let r = distance(&So3Frame, &x, &y).unwrap();
        assert!(r.converged);
        let angle = So3Frame::rotation_distance(&x, &y);
        assert!((r.distance - angle).abs() < 1e-8, "{} vs {angle}", r.distance);
        assert_eq!(distance(&So3Frame, &x, &x).unwrap().distance, 0.0);
    }
}
