//! Hölder norms, Young integrals and Young differential equations
//!
//! ```text
//! X_t = x_0 + int_0^t b(eps, X_s) ds + eps sum_i int_0^t V_i(X_s) dB^i_s
//! ```
//!
//! driven by paths of Hölder regularity above 1/2.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fbm::{FbmPathSet, TimeGrid};
use crate::fields::VectorFieldSystem;

/// Solutions leaving this ball are flagged as blown up.
pub const BLOWUP_RADIUS: f64 = 1e6;

/// Path on a uniform grid together with the Hölder exponent used for its norm.
/// `values[i * dim + k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoelderPath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
    lambda: f64,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.5 && lambda < 1.0 {
        Ok(())
    } else {
        invalid(format!("Hölder exponent must lie in (1/2, 1), got {lambda}"))
    }
}

impl HoelderPath {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if dim == 0 || values.len() != (grid.n_steps() + 1) * dim {
            return invalid("path values do not match grid and dimension");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("path values must be finite");
        }
        Ok(HoelderPath { grid, dim, values, lambda })
    }

    /// Path `p` of an fBm batch with the default exponent `H - 0.05`.
    pub fn from_fbm(paths: &FbmPathSet, p: usize) -> Self {
        HoelderPath {
            grid: *paths.grid(),
            dim: paths.dim(),
            values: paths.path(p).to_vec(),
            lambda: paths.hurst().default_lambda(),
        }
    }

    /// Sample `f` on the grid.
    pub fn from_fn(grid: TimeGrid, dim: usize, lambda: f64, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let values = grid.points().into_iter().flat_map(f).collect();
        HoelderPath::new(grid, dim, values, lambda)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    #[inline]
    pub fn value(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.dim + k]
    }
    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
    pub fn endpoint(&self) -> &[f64] {
        self.point(self.grid.n_steps())
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        self.lambda = lambda;
        Ok(self)
    }

    pub fn coordinate(&self, k: usize) -> HoelderPath {
        HoelderPath {
            grid: self.grid,
            dim: 1,
            values: self.values.iter().skip(k).step_by(self.dim).copied().collect(),
            lambda: self.lambda,
        }
    }

    /// Every `stride`-th grid point.
    pub fn subsample(&self, stride: usize) -> Result<HoelderPath> {
        let n = self.grid.n_steps();
        if stride == 0 || !n.is_multiple_of(stride) {
            return invalid(format!("stride {stride} does not divide {n}"));
        }
        let grid = TimeGrid::new(self.grid.horizon(), n / stride)?;
        let values = (0..=n / stride).flat_map(|i| self.point(i * stride).iter().copied()).collect();
        Ok(HoelderPath { grid, dim: self.dim, values, lambda: self.lambda })
    }
}

/// `sup_{[0,t]} |f| + sup_{s<u<=t} |f(u) - f(s)| / (u - s)^lambda` over grid points.
pub fn hoelder_norm(f: &HoelderPath, lambda: f64, t: f64) -> Result<f64> {
    let idx = f
        .grid
        .index_of(t)
        .ok_or_else(|| Error::InvalidParameter(format!("t = {t} is not a grid point")))?;
    Ok(hoelder_norm_values(f.values(), f.dim(), f.grid.dt(), lambda, idx))
}

pub(crate) fn hoelder_norm_values(values: &[f64], dim: usize, dt: f64, lambda: f64, last: usize) -> f64 {
    let pt = |i: usize| &values[i * dim..(i + 1) * dim];
    let mut sup: f64 = 0.0;
    for i in 0..=last {
        sup = sup.max(pt(i).iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    // |f(u) - f(s)| / (u - s)^lambda, with the lag powers computed once
    let lag_pow: Vec<f64> = (0..=last).map(|m| (m as f64 * dt).powf(-lambda)).collect();
    let mut hol: f64 = 0.0;
    for i in 0..last {
        let a = pt(i);
        for j in i + 1..=last {
            let b = pt(j);
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum();
            hol = hol.max(d2.sqrt() * lag_pow[j - i]);
        }
    }
    sup + hol
}

/// Sup-difference between two successive refinement levels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RefinementLevel {
    pub steps: usize,
    pub sup_diff: f64,
}

/// Young integral with refinement diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct YoungIntegral {
    /// `int_0^t g^a df^b` at component `a * dim_f + b`.
    pub integral: HoelderPath,
    pub levels: Vec<RefinementLevel>,
    pub observed_rate: f64,
    pub error_estimate: f64,
    pub converged: bool,
}

const INTEGRAL_RTOL: f64 = 1e-8;
const MAX_LEVELS: usize = 6;

fn left_point_sums(g: &HoelderPath, f: &HoelderPath, stride: usize) -> Vec<f64> {
    let n = g.grid.n_steps() / stride;
    let (mg, mf) = (g.dim, f.dim);
    let mut out = vec![0.0; (n + 1) * mg * mf];
    for i in 0..n {
        let (j0, j1) = (i * stride, (i + 1) * stride);
        for a in 0..mg {
            let ga = g.value(j0, a);
            for b in 0..mf {
                let df = f.value(j1, b) - f.value(j0, b);
                out[(i + 1) * mg * mf + a * mf + b] = out[i * mg * mf + a * mf + b] + ga * df;
            }
        }
    }
    out
}

/// Least-squares slope of `y` against `x`.
pub(crate) fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Left-point Riemann–Stieltjes sums `sum_j g(t_j) (f(t_{j+1}) - f(t_j))`,
/// accumulated along the grid, with the sums on the coarser sub-grids
/// (strides 2, 4, ...) used to measure convergence.
pub fn young_integral(g: &HoelderPath, f: &HoelderPath) -> Result<YoungIntegral> {
    if g.grid != f.grid {
        return Err(Error::GridMismatch("integrand and integrator grids differ".into()));
    }
    if g.lambda + f.lambda <= 1.0 {
        return Err(Error::NonConvergent(format!(
            "Hölder exponents {} + {} do not exceed 1",
            g.lambda, f.lambda
        )));
    }
    let n = g.grid.n_steps();
    let m = g.dim * f.dim;
    let finest = left_point_sums(g, f, 1);
    let scale = finest.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let mut levels = Vec::new();
    let mut prev = finest.clone();
    let mut stride = 1;
    while levels.len() + 1 < MAX_LEVELS && n.is_multiple_of(2 * stride) && n / (2 * stride) >= 2 {
        let coarse = left_point_sums(g, f, 2 * stride);
        let mut diff: f64 = 0.0;
        for i in 0..=n / (2 * stride) {
            for c in 0..m {
                diff = diff.max((coarse[i * m + c] - prev[2 * i * m + c]).abs());
            }
        }
        stride *= 2;
        levels.push(RefinementLevel { steps: n / stride, sup_diff: diff });
        prev = coarse;
    }
    let first = levels.first().map(|l| l.sup_diff).unwrap_or(0.0);
    let tiny = first <= INTEGRAL_RTOL * scale;
    let positive: Vec<&RefinementLevel> = levels.iter().filter(|l| l.sup_diff > 0.0).collect();
    let observed_rate = if positive.len() >= 2 {
        let x: Vec<f64> = positive.iter().map(|l| -(l.steps as f64).log2()).collect();
        let y: Vec<f64> = positive.iter().map(|l| l.sup_diff.log2()).collect();
        ls_slope(&x, &y)
    } else {
        f64::NAN
    };
    let (converged, error_estimate) = if tiny {
        (true, first)
    } else if observed_rate.is_finite() && observed_rate > 0.05 {
        let rho = 2f64.powf(-observed_rate);
        (true, first * rho / (1.0 - rho))
    } else {
        return Err(Error::NonConvergent(format!(
            "successive sums differ by {first:e} with no observed decay"
        )));
    };
    Ok(YoungIntegral {
        integral: HoelderPath { grid: g.grid, dim: m, values: finest, lambda: f.lambda },
        levels,
        observed_rate,
        error_estimate,
        converged,
    })
}

// ---------------------------------------------------------------------------
// Solver

/// Time-stepping scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// `X + sigma dY + 1/2 sum_j dY^j dV_j (sigma dY)`.
    Taylor,
    /// Derivative-free predictor–corrector with the same order.
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub base_steps: usize,
    pub refinement_levels: usize,
    pub richardson: bool,
    pub scheme: Scheme,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { base_steps: 16, refinement_levels: 3, richardson: false, scheme: Scheme::Taylor }
    }
}

impl SolverConfig {
    /// Settings for smooth (Cameron–Martin) drivers.
    pub fn smooth() -> Self {
        SolverConfig { base_steps: 16, refinement_levels: 3, richardson: true, scheme: Scheme::Heun }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_steps < 16 {
            return invalid(format!("base_steps must be at least 16, got {}", self.base_steps));
        }
        if self.refinement_levels < 2 {
            return invalid(format!("refinement_levels must be at least 2, got {}", self.refinement_levels));
        }
        Ok(())
    }
}

/// Outcome of integrating one path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathStatus {
    Ok,
    BlowUp { step: usize },
    NonFinite { step: usize },
}

impl PathStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, PathStatus::Ok)
    }
}

/// Reusable buffers for one step of the schemes.
pub(crate) struct Stepper<'a> {
    fields: &'a dyn VectorFieldSystem,
    scheme: Scheme,
    drift_eps: f64,
    sigma: Vec<f64>,
    sigma2: Vec<f64>,
    jac: Vec<f64>,
    w: Vec<f64>,
    b0: Vec<f64>,
    b1: Vec<f64>,
    pred: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(fields: &'a dyn VectorFieldSystem, scheme: Scheme, drift_eps: f64) -> Self {
        let d = fields.dim();
        Stepper {
            fields,
            scheme,
            drift_eps,
            sigma: vec![0.0; d * d],
            sigma2: vec![0.0; d * d],
            jac: vec![0.0; d * d * d],
            w: vec![0.0; d],
            b0: vec![0.0; d],
            b1: vec![0.0; d],
            pred: vec![0.0; d],
        }
    }

    /// Advance `x` by one step with noise increment `y` (already scaled) and time step `dt`.
    pub(crate) fn step(&mut self, x: &mut [f64], y: &[f64], dt: f64) {
        let d = x.len();
        let drift = self.fields.has_drift();
        self.fields.sigma_into(x, &mut self.sigma);
        for r in 0..d {
            self.w[r] = (0..d).map(|i| self.sigma[r * d + i] * y[i]).sum();
        }
        if drift {
            self.fields.drift_into(self.drift_eps, x, &mut self.b0);
        }
        match self.scheme {
            Scheme::Taylor => {
                self.fields.jacobians_into(x, &mut self.jac);
                for r in 0..d {
                    self.pred[r] = x[r] + self.w[r] + if drift { self.b0[r] * dt } else { 0.0 };
                }
                let mut corr = vec![0.0; d];
                for (j, &yj) in y.iter().enumerate() {
                    if yj == 0.0 && !drift {
                        continue;
                    }
                    let jj = &self.jac[j * d * d..(j + 1) * d * d];
                    for r in 0..d {
                        let row = &jj[r * d..(r + 1) * d];
                        let mut s: f64 = row.iter().zip(&self.w).map(|(a, b)| a * b).sum();
                        if drift {
                            // d V_j . b cross term
                            s += row.iter().zip(&self.b0).map(|(a, b)| a * b).sum::<f64>() * dt;
                        }
                        corr[r] += 0.5 * yj * s;
                    }
                }
                if drift {
                    self.fields.drift_into(self.drift_eps, &self.pred, &mut self.b1);
                }
                for r in 0..d {
                    x[r] += self.w[r] + corr[r];
                    if drift {
                        x[r] += 0.5 * (self.b0[r] + self.b1[r]) * dt;
                    }
                }
            }
            Scheme::Heun => {
                for r in 0..d {
                    self.pred[r] = x[r] + self.w[r] + if drift { self.b0[r] * dt } else { 0.0 };
                }
                self.fields.sigma_into(&self.pred, &mut self.sigma2);
                if drift {
                    self.fields.drift_into(self.drift_eps, &self.pred, &mut self.b1);
                }
                for r in 0..d {
                    let w2: f64 = (0..d).map(|i| self.sigma2[r * d + i] * y[i]).sum();
                    x[r] += 0.5 * (self.w[r] + w2);
                    if drift {
                        x[r] += 0.5 * (self.b0[r] + self.b1[r]) * dt;
                    }
                }
            }
        }
    }
}

/// Integrate along `driver` (flat `(n + 1) x d`) using every `stride`-th point.
/// Returns the solution on the coarse grid (or just the endpoint) and its status.
#[allow(clippy::too_many_arguments)]
pub(crate) fn integrate(
    fields: &dyn VectorFieldSystem,
    scheme: Scheme,
    grid: &TimeGrid,
    driver: &[f64],
    stride: usize,
    x0: &[f64],
    noise_scale: f64,
    drift_eps: f64,
    keep_path: bool,
) -> (Vec<f64>, PathStatus) {
    let d = fields.dim();
    let n = grid.n_steps() / stride;
    let dt = grid.dt() * stride as f64;
    let mut stepper = Stepper::new(fields, scheme, drift_eps);
    let mut x = x0.to_vec();
    let mut y = vec![0.0; d];
    let mut out = if keep_path { Vec::with_capacity((n + 1) * d) } else { Vec::new() };
    if keep_path {
        out.extend_from_slice(&x);
    }
    for i in 0..n {
        let (a, b) = (i * stride * d, (i + 1) * stride * d);
        for k in 0..d {
            y[k] = noise_scale * (driver[b + k] - driver[a + k]);
        }
        stepper.step(&mut x, &y, dt);
        if x.iter().any(|v| !v.is_finite()) {
            return (fill_nan(out, keep_path, n, d), PathStatus::NonFinite { step: i + 1 });
        }
        if x.iter().map(|v| v * v).sum::<f64>() > BLOWUP_RADIUS * BLOWUP_RADIUS {
            return (fill_nan(out, keep_path, n, d), PathStatus::BlowUp { step: i + 1 });
        }
        if keep_path {
            out.extend_from_slice(&x);
        }
    }
    if !keep_path {
        out = x;
    }
    (out, PathStatus::Ok)
}

fn fill_nan(mut out: Vec<f64>, keep_path: bool, n: usize, d: usize) -> Vec<f64> {
    if keep_path {
        out.resize((n + 1) * d, f64::NAN);
        out
    } else {
        vec![f64::NAN; d]
    }
}

/// Solution path with refinement diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdeSolution {
    pub grid: TimeGrid,
    pub dim: usize,
    /// `(n + 1) x d`, row-major by time.
    pub values: Vec<f64>,
    pub status: PathStatus,
    /// Sup-differences between the solutions at successive refinement levels, finest first.
    pub levels: Vec<RefinementLevel>,
    pub observed_order: Option<f64>,
    pub error_estimate: f64,
    pub richardson: bool,
}

impl SdeSolution {
    pub fn endpoint(&self) -> &[f64] {
        &self.values[self.values.len() - self.dim..]
    }
    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

#[allow(clippy::too_many_arguments)]
fn solve_levels(
    fields: &dyn VectorFieldSystem,
    driver: &HoelderPath,
    x0: &[f64],
    noise_scale: f64,
    drift_eps: f64,
    cfg: &SolverConfig,
) -> Result<SdeSolution> {
    cfg.validate()?;
    let d = fields.dim();
    if driver.dim() != d || x0.len() != d {
        return invalid(format!(
            "dimension mismatch: fields {d}, driver {}, x0 {}",
            driver.dim(),
            x0.len()
        ));
    }
    let grid = *driver.grid();
    let n = grid.n_steps();
    let mut n_levels = 0;
    while n_levels < cfg.refinement_levels {
        let stride = 1usize << n_levels;
        if !n.is_multiple_of(stride) || n / stride < cfg.base_steps {
            break;
        }
        n_levels += 1;
    }
    if n_levels < 2 {
        return invalid(format!(
            "driver grid of {n} steps is too coarse for base_steps {} with two refinement levels",
            cfg.base_steps
        ));
    }
    let mut sols = Vec::with_capacity(n_levels);
    for l in 0..n_levels {
        let (v, status) = integrate(fields, cfg.scheme, &grid, driver.values(), 1 << l, x0, noise_scale, drift_eps, true);
        if l == 0 && !status.is_ok() {
            return Ok(SdeSolution {
                grid,
                dim: d,
                values: v,
                status,
                levels: vec![],
                observed_order: None,
                error_estimate: f64::INFINITY,
                richardson: false,
            });
        }
        sols.push(v);
    }
    // sup-difference between level l and l+1 at the points of level l+1
    let mut levels = Vec::new();
    for l in 0..n_levels - 1 {
        let (fine, coarse) = (&sols[l], &sols[l + 1]);
        let nc = n >> (l + 1);
        let mut diff: f64 = 0.0;
        for i in 0..=nc {
            for k in 0..d {
                diff = diff.max((coarse[i * d + k] - fine[2 * i * d + k]).abs());
            }
        }
        levels.push(RefinementLevel { steps: n >> l, sup_diff: diff });
    }
    let observed_order = if levels.len() >= 2 && levels[0].sup_diff > 0.0 && levels[1].sup_diff > 0.0 {
        Some((levels[1].sup_diff / levels[0].sup_diff).log2())
    } else {
        None
    };
    let p = observed_order.unwrap_or(1.0).clamp(0.1, 4.0);
    let first = levels[0].sup_diff;
    let mut values = sols.remove(0);
    let mut error_estimate = first / (2f64.powf(p) - 1.0);
    let richardson = cfg.richardson;
    if richardson {
        // second-order extrapolation at the even points; the correction is
        // interpolated linearly onto the odd points
        let coarse = &sols[0];
        let mut corr = vec![0.0; (n / 2 + 1) * d];
        for i in 0..=n / 2 {
            for k in 0..d {
                corr[i * d + k] = (values[2 * i * d + k] - coarse[i * d + k]) / 3.0;
            }
        }
        for i in 0..=n {
            for k in 0..d {
                let c = if i % 2 == 0 {
                    corr[(i / 2) * d + k]
                } else {
                    0.5 * (corr[(i / 2) * d + k] + corr[(i / 2 + 1) * d + k])
                };
                values[i * d + k] += c;
            }
        }
        error_estimate = if sols.len() >= 2 {
            // difference of the extrapolants from the two finest pairs, third order assumed
            let (c1, c2) = (&sols[0], &sols[1]);
            let mut diff: f64 = 0.0;
            for i in 0..=n / 4 {
                for k in 0..d {
                    let r0 = values[4 * i * d + k];
                    let r1 = c1[2 * i * d + k] + (c1[2 * i * d + k] - c2[i * d + k]) / 3.0;
                    diff = diff.max((r0 - r1).abs());
                }
            }
            diff / 7.0
        } else {
            first / 3.0
        };
    }
    Ok(SdeSolution {
        grid,
        dim: d,
        values,
        status: PathStatus::Ok,
        levels,
        observed_order,
        error_estimate,
        richardson,
    })
}

/// Solve the Young SDE along `driver`. The driver grid is the finest level;
/// coarser levels take every 2nd, 4th, ... point.
pub fn solve_young_sde(
    fields: &dyn VectorFieldSystem,
    driver: &HoelderPath,
    x0: &[f64],
    eps: f64,
    cfg: &SolverConfig,
) -> Result<SdeSolution> {
    if !eps.is_finite() {
        return invalid("eps must be finite");
    }
    solve_levels(fields, driver, x0, eps, eps, cfg)
}

/// Deterministic flow `du = sigma(u) dk + b(0, u) dt` along a Cameron–Martin path.
pub fn solve_skeleton(fields: &dyn VectorFieldSystem, k: &HoelderPath, x0: &[f64]) -> Result<SdeSolution> {
    solve_levels(fields, k, x0, 1.0, 0.0, &SolverConfig::smooth())
}

/// Skeleton endpoint on a single level, without refinement.
pub fn skeleton_endpoint(
    fields: &dyn VectorFieldSystem,
    grid: &TimeGrid,
    k: &[f64],
    x0: &[f64],
) -> (Vec<f64>, PathStatus) {
    integrate(fields, Scheme::Heun, grid, k, 1, x0, 1.0, 0.0, false)
}

/// Endpoint of one SDE path on a single level.
pub fn sde_endpoint(
    fields: &dyn VectorFieldSystem,
    scheme: Scheme,
    grid: &TimeGrid,
    driver: &[f64],
    x0: &[f64],
    eps: f64,
) -> (Vec<f64>, PathStatus) {
    integrate(fields, scheme, grid, driver, 1, x0, eps, eps, false)
}

/// Full single-level solution path (flat `(n + 1) x d`).
pub fn sde_path(
    fields: &dyn VectorFieldSystem,
    scheme: Scheme,
    grid: &TimeGrid,
    driver: &[f64],
    x0: &[f64],
    eps: f64,
) -> (Vec<f64>, PathStatus) {
    integrate(fields, scheme, grid, driver, 1, x0, eps, eps, true)
}

/// Drift-only flow `dx = b(0, x) dt` on the grid.
pub fn solve_drift_ode(fields: &dyn VectorFieldSystem, grid: &TimeGrid, x0: &[f64], scheme: Scheme) -> (Vec<f64>, PathStatus) {
    let zero = vec![0.0; (grid.n_steps() + 1) * fields.dim()];
    integrate(fields, scheme, grid, &zero, 1, x0, 0.0, 0.0, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{ConstantFrame, LinearFields};

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn norm_of_constant_and_identity() {
        let g = grid(50);
        let c = HoelderPath::from_fn(g, 1, 0.6, |_| vec![-2.5]).unwrap();
        assert!((hoelder_norm(&c, 0.6, 1.0).unwrap() - 2.5).abs() < 1e-15);
        let id = HoelderPath::from_fn(g, 1, 0.6, |t| vec![t]).unwrap();
        assert!((hoelder_norm(&id, 0.6, 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert!(hoelder_norm(&id, 0.6, 0.505).is_err());
        let a = hoelder_norm(&id, 0.6, 0.5).unwrap();
        assert!(a <= hoelder_norm(&id, 0.6, 1.0).unwrap());
    }

    #[test]
    fn integral_of_one_is_increment() {
        let g = grid(64);
        let one = HoelderPath::from_fn(g, 1, 0.9, |_| vec![1.0]).unwrap();
        let f = HoelderPath::from_fn(g, 1, 0.9, |t| vec![(3.0 * t).sin()]).unwrap();
        let r = young_integral(&one, &f).unwrap();
        for i in 0..=64 {
            assert!((r.integral.value(i, 0) - (3.0 * g.point(i)).sin()).abs() < 1e-14);
        }
        assert!(r.converged);
    }

    #[test]
    fn oscillating_driver_is_rejected() {
        let g = grid(64);
        let saw = HoelderPath::from_fn(g, 1, 0.6, |t| vec![((t * 64.0).round() as i64 % 2) as f64]).unwrap();
        assert!(matches!(young_integral(&saw, &saw), Err(Error::NonConvergent(_))));
    }

    #[test]
    fn smooth_integral_refines_at_first_order() {
        // int_0^1 t dt^2 = 2/3, left-point error ~ 1/n
        let g = grid(1024);
        let a = HoelderPath::from_fn(g, 1, 0.9, |t| vec![t]).unwrap();
        let b = HoelderPath::from_fn(g, 1, 0.9, |t| vec![t * t]).unwrap();
        let r = young_integral(&a, &b).unwrap();
        assert!((r.observed_rate - 1.0).abs() < 0.05, "{}", r.observed_rate);
        let err = (r.integral.endpoint()[0] - 2.0 / 3.0).abs();
        assert!(err < 2.0 * r.error_estimate && err > 0.5 * r.error_estimate);
    }

    #[test]
    fn constant_fields_are_exact() {
        let g = grid(32);
        let s = ConstantFrame::new(1, vec![1.7]).unwrap();
        let drv = HoelderPath::from_fn(g, 1, 0.7, |t| vec![(7.0 * t).sin() * t]).unwrap();
        let sol = solve_young_sde(&s, &drv, &[0.3], 1.0, &SolverConfig::default()).unwrap();
        for i in 0..=32 {
            assert!((sol.values[i] - 0.3 - 1.7 * drv.value(i, 0)).abs() < 1e-13);
        }
    }

    #[test]
    fn linear_field_smooth_driver_second_order() {
        // dX = X dh, X = x0 exp(h)
        let g = grid(256);
        let drv = HoelderPath::from_fn(g, 1, 0.9, |t| vec![(2.0 * t).sin()]).unwrap();
        let f = LinearFields::identity_1d();
        let cfg = SolverConfig { refinement_levels: 4, ..SolverConfig::default() };
        let sol = solve_young_sde(&f, &drv, &[1.0], 1.0, &cfg).unwrap();
        let ord = sol.observed_order.unwrap();
        assert!((ord - 2.0).abs() < 0.2, "order {ord}");
        let err: f64 = (0..=256).map(|i| (sol.values[i] - drv.value(i, 0).exp()).abs()).fold(0.0, f64::max);
        assert!(err < 3.0 * sol.error_estimate + 1e-12, "{err} vs {}", sol.error_estimate);
        let rich = solve_young_sde(&f, &drv, &[1.0], 1.0, &SolverConfig { richardson: true, ..cfg }).unwrap();
        let err_r: f64 = (0..=256).map(|i| (rich.values[i] - drv.value(i, 0).exp()).abs()).fold(0.0, f64::max);
        assert!(err_r < 0.1 * err);
    }

    #[test]
    fn eps_zero_is_drift_ode() {
        let base: crate::fields::SharedFields = std::sync::Arc::new(ConstantFrame::orthonormal(2));
        let f = crate::fields::Drifted::new(base, |_, x, out| {
            out[0] = -x[1];
            out[1] = x[0];
        });
        let g = grid(64);
        let drv = HoelderPath::from_fn(g, 2, 0.7, |t| vec![t.sin(), t * t]).unwrap();
        let sol = solve_young_sde(&f, &drv, &[1.0, 0.0], 0.0, &SolverConfig::default()).unwrap();
        let (ode, st) = solve_drift_ode(&f, &g, &[1.0, 0.0], Scheme::Taylor);
        assert!(st.is_ok());
        assert_eq!(sol.values, ode);
        // rotation by angle 1
        assert!((ode[128] - 1f64.cos()).abs() < 1e-4);
    }

    #[test]
    fn blow_up_is_flagged() {
        let f = crate::fields::FnFields::new(1, "cubic", |x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0] * x[0]);
        let g = grid(64);
        let drv = HoelderPath::from_fn(g, 1, 0.9, |t| vec![50.0 * t]).unwrap();
        let sol = solve_young_sde(&f, &drv, &[1.0], 1.0, &SolverConfig { scheme: Scheme::Heun, ..Default::default() }).unwrap();
        assert!(!sol.status.is_ok());
    }
}
