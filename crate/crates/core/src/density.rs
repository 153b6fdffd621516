//! Monte Carlo transition densities of `X_t`, on-diagonal and off-diagonal
//! asymptotics, the tangent-process density and the constant `q_H(omega)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fbm::{cov, FbmPathSet, FbmSampler, Hurst, SamplerTag, TimeGrid};
use crate::fields::{StructureConstants, VectorFieldSystem};
use crate::geometry::{self, WorkingBox};
use crate::lie::{self, Word};
use crate::linalg;
use crate::quadrature::gauss_hermite;
use crate::rng::{chunk_rng, derive_seed};
use crate::young::{sde_endpoint, PathStatus, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Kde,
    Histogram,
    /// Exact Gaussian conditioning on the fBm bridge; tangent densities only.
    Bridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// Product Gaussian kernel, Silverman bandwidth `1.06 s n^{-1/5}`.
    Gaussian,
    /// Fourth-order Gaussian kernel `((d+2)/2 - |u|^2/2) phi(u)`, bandwidth `s n^{-1/(d+8)}`.
    Gaussian4,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DensityOptions {
    pub hurst: Hurst,
    pub estimator: Estimator,
    pub kernel: Kernel,
    /// Multiplies the default bandwidth rule.
    pub bandwidth_scale: f64,
    /// Subtract the kernel sum of the first-order tangent `x + t^H sigma(x) B_1`
    /// and add back its exact Gaussian density.
    pub control_variate: bool,
    pub bootstrap: usize,
    /// Steps of the driver grid on `[0, 1]`.
    pub n_steps: usize,
    pub sampler: SamplerTag,
    pub max_blowup_fraction: f64,
}

impl DensityOptions {
    pub fn new(hurst: Hurst) -> Self {
        DensityOptions {
            hurst,
            estimator: Estimator::Kde,
            kernel: Kernel::Gaussian,
            bandwidth_scale: 1.0,
            control_variate: false,
            bootstrap: 200,
            n_steps: 64,
            sampler: SamplerTag::Cholesky,
            max_blowup_fraction: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub t: f64,
    pub eval_points: Vec<Vec<f64>>,
    pub p_hat: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Estimated smoothing bias magnitude per point.
    pub bias_bound: Vec<f64>,
    pub n_paths: usize,
    pub n_blowups: usize,
    pub estimator: Estimator,
    pub kernel: Kernel,
    pub bandwidth: Vec<f64>,
    pub control_variate: bool,
}

/// Endpoints `X_t` for a ladder of times, all driven by the same paths on
/// `[0, 1]` through `X_t =_d` solution with noise `t^H B`.
#[derive(Debug, Clone)]
pub struct EndpointSample {
    pub dim: usize,
    pub n_paths: usize,
    pub x0: Vec<f64>,
    pub t_values: Vec<f64>,
    /// Per time, `n_paths x d`; rows of paths that blew up are NaN.
    pub points: Vec<Vec<f64>>,
    pub blowups: Vec<usize>,
    /// `B_1` per path, `n_paths x d`.
    pub b1: Vec<f64>,
    /// `sigma(x0)`.
    pub sigma0: Vec<f64>,
    pub hurst: Hurst,
}

pub fn sample_endpoints(
    fields: &dyn VectorFieldSystem,
    x0: &[f64],
    t_values: &[f64],
    n_paths: usize,
    opts: &DensityOptions,
    seed: u64,
) -> Result<EndpointSample> {
    let d = fields.dim();
    if x0.len() != d {
        return invalid("start point does not match the field dimension");
    }
    if t_values.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return invalid("times must be positive");
    }
    if n_paths < 2 {
        return invalid("need at least two paths");
    }
    let h = opts.hurst.value();
    let grid = TimeGrid::new(1.0, opts.n_steps)?;
    let sampler = FbmSampler::new(grid, d, opts.hurst, opts.sampler, seed)?;
    let eps: Vec<f64> = t_values.iter().map(|t| t.powf(h)).collect();
    let nt = t_values.len();
    let chunks = sampler.map_chunks(n_paths, |_, set| {
        let mut pts = vec![Vec::with_capacity(set.n_paths() * d); nt];
        let mut blow = vec![0usize; nt];
        let mut b1 = Vec::with_capacity(set.n_paths() * d);
        for p in 0..set.n_paths() {
            let path = set.path(p);
            b1.extend_from_slice(set.endpoint(p));
            for (ti, &e) in eps.iter().enumerate() {
                let (x, st) = sde_endpoint(fields, Scheme::Taylor, &grid, path, x0, e);
                if st == PathStatus::Ok {
                    pts[ti].extend_from_slice(&x);
                } else {
                    blow[ti] += 1;
                    pts[ti].extend(std::iter::repeat_n(f64::NAN, d));
                }
            }
        }
        (pts, blow, b1)
    });
    let mut points = vec![Vec::with_capacity(n_paths * d); nt];
    let mut blowups = vec![0; nt];
    let mut b1 = Vec::with_capacity(n_paths * d);
    for (pts, blow, b) in chunks {
        for ti in 0..nt {
            points[ti].extend(pts[ti].iter());
            blowups[ti] += blow[ti];
        }
        b1.extend(b);
    }
    for &b in &blowups {
        if b as f64 > opts.max_blowup_fraction * n_paths as f64 {
            return Err(Error::TooManyBlowUps { blowups: b, total: n_paths });
        }
    }
    Ok(EndpointSample {
        dim: d,
        n_paths,
        x0: x0.to_vec(),
        t_values: t_values.to_vec(),
        points,
        blowups,
        b1,
        sigma0: fields.sigma(x0),
        hurst: opts.hurst,
    })
}

/// Per-coordinate `min(sd, IQR / 1.349)`, robust to a few far-out paths.
fn column_spread(points: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let mut v: Vec<f64> = points.iter().skip(k).step_by(d).copied().filter(|v| v.is_finite()).collect();
            let sd = lie::mean_and_se(&v).1 * (v.len() as f64).sqrt();
            v.sort_by(f64::total_cmp);
            let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
            let iqr = (q(0.75) - q(0.25)) / 1.349;
            if iqr > 0.0 { sd.min(iqr) } else { sd }
        })
        .collect()
}

/// Default per-coordinate bandwidth for `n` samples with coordinate spreads `sd`.
pub fn default_bandwidth(kernel: Kernel, sd: &[f64], n: usize, scale: f64) -> Vec<f64> {
    let d = sd.len() as f64;
    let n = n as f64;
    let f = match kernel {
        Kernel::Gaussian => 1.06 * n.powf(-0.2),
        Kernel::Gaussian4 => n.powf(-1.0 / (d + 8.0)),
    };
    sd.iter().map(|s| scale * f * s).collect()
}

fn kernel_value(kernel: Kernel, u: &[f64], h: &[f64]) -> f64 {
    let d = u.len();
    let mut r2 = 0.0;
    let mut norm = 1.0;
    for k in 0..d {
        let z = u[k] / h[k];
        r2 += z * z;
        norm *= h[k];
    }
    let base = (-0.5 * r2).exp() / ((2.0 * std::f64::consts::PI).powf(d as f64 / 2.0) * norm);
    match kernel {
        Kernel::Gaussian => base,
        Kernel::Gaussian4 => base * ((d as f64 + 2.0) / 2.0 - 0.5 * r2),
    }
}

fn gaussian_density(mean: &[f64], cov: &[f64], y: &[f64]) -> f64 {
    let d = mean.len();
    let diff: Vec<f64> = y.iter().zip(mean).map(|(a, b)| a - b).collect();
    let det = linalg::det(cov, d);
    let Some(z) = linalg::solve(cov, d, &diff) else { return 0.0 };
    let q: f64 = diff.iter().zip(&z).map(|(a, b)| a * b).sum();
    (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powf(d as f64 / 2.0) * det.abs().sqrt())
}

struct PointContribs {
    values: Vec<f64>,
    offset: f64,
    bias: f64,
}

fn point_contributions(
    sample: &EndpointSample,
    ti: usize,
    y: &[f64],
    h: &[f64],
    opts: &DensityOptions,
) -> PointContribs {
    let d = sample.dim;
    let pts = &sample.points[ti];
    let s = sample.t_values[ti].powf(sample.hurst.value());
    let kernel = opts.kernel;
    let vol: f64 = h.iter().map(|v| 2.0 * v).product();
    let tangent = |p: usize| -> Vec<f64> {
        let b = &sample.b1[p * d..(p + 1) * d];
        (0..d)
            .map(|r| sample.x0[r] + s * (0..d).map(|c| sample.sigma0[r * d + c] * b[c]).sum::<f64>())
            .collect()
    };
    let eval = |z: &[f64]| -> f64 {
        let u: Vec<f64> = z.iter().zip(y).map(|(a, b)| a - b).collect();
        match opts.estimator {
            Estimator::Histogram => {
                if u.iter().zip(h).all(|(a, b)| a.abs() < *b) {
                    1.0 / vol
                } else {
                    0.0
                }
            }
            _ => kernel_value(kernel, &u, h),
        }
    };
    let values: Vec<f64> = (0..sample.n_paths)
        .into_par_iter()
        .map(|p| {
            let z = &pts[p * d..(p + 1) * d];
            let kx = if z[0].is_finite() { eval(z) } else { 0.0 };
            if opts.control_variate {
                kx - eval(&tangent(p))
            } else {
                kx
            }
        })
        .collect();
    let offset = if opts.control_variate {
        let mut c = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                c[a * d + b] = s * s * (0..d).map(|k| sample.sigma0[a * d + k] * sample.sigma0[b * d + k]).sum::<f64>();
            }
        }
        gaussian_density(&sample.x0, &c, y)
    } else {
        0.0
    };
    // second-order smoothing bias 1/2 sum_k h_k^2 d_k^2 p, from the Gaussian kernel
    let bias = match (opts.estimator, kernel) {
        (Estimator::Histogram, _) | (_, Kernel::Gaussian) => {
            let acc: f64 = (0..sample.n_paths)
                .into_par_iter()
                .map(|p| {
                    let z = &pts[p * d..(p + 1) * d];
                    if !z[0].is_finite() {
                        return 0.0;
                    }
                    let u: Vec<f64> = z.iter().zip(y).map(|(a, b)| a - b).collect();
                    let k = kernel_value(Kernel::Gaussian, &u, h);
                    0.5 * k * u.iter().zip(h).map(|(a, b)| (a / b) * (a / b) - 1.0).sum::<f64>()
                })
                .sum();
            (acc / sample.n_paths as f64).abs()
        }
        (_, Kernel::Gaussian4) => {
            // Richardson: bias(h) ~ 4/3 (p(h) - p(h / sqrt 2))
            let h2: Vec<f64> = h.iter().map(|v| v / 2f64.sqrt()).collect();
            let diff: f64 = (0..sample.n_paths)
                .into_par_iter()
                .map(|p| {
                    let z = &pts[p * d..(p + 1) * d];
                    if !z[0].is_finite() {
                        return 0.0;
                    }
                    let u: Vec<f64> = z.iter().zip(y).map(|(a, b)| a - b).collect();
                    kernel_value(Kernel::Gaussian4, &u, h) - kernel_value(Kernel::Gaussian4, &u, &h2)
                })
                .sum();
            (4.0 / 3.0 * diff / sample.n_paths as f64).abs()
        }
    };
    PointContribs { values, offset, bias }
}

/// Bootstrap replicates of the means of several per-path series resampled jointly.
pub fn bootstrap_means(series: &[&[f64]], reps: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = series.first().map_or(0, |s| s.len());
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = chunk_rng(seed, r as u64);
            let mut acc = vec![0.0; series.len()];
            for _ in 0..n {
                let i = rng.random_range(0..n);
                for (a, s) in acc.iter_mut().zip(series) {
                    *a += s[i];
                }
            }
            acc.iter().map(|a| a / n as f64).collect()
        })
        .collect()
}

fn replicate_sd(reps: &[Vec<f64>], j: usize) -> f64 {
    let v: Vec<f64> = reps.iter().map(|r| r[j]).collect();
    lie::mean_and_se(&v).1 * (v.len() as f64).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Density estimate of one time of an endpoint sample at several points.
pub fn estimate_from_sample(
    sample: &EndpointSample,
    ti: usize,
    eval_points: &[Vec<f64>],
    opts: &DensityOptions,
    seed: u64,
) -> Result<DensityEstimate> {
    let d = sample.dim;
    if opts.estimator == Estimator::Bridge {
        return invalid("the bridge estimator applies to tangent densities only");
    }
    if eval_points.iter().any(|y| y.len() != d) {
        return invalid("evaluation point dimension mismatch");
    }
    let ok = sample.n_paths - sample.blowups[ti];
    let h = default_bandwidth(opts.kernel, &column_spread(&sample.points[ti], d), ok, opts.bandwidth_scale);
    let contribs: Vec<PointContribs> = eval_points.iter().map(|y| point_contributions(sample, ti, y, &h, opts)).collect();
    let series: Vec<&[f64]> = contribs.iter().map(|c| c.values.as_slice()).collect();
    let reps = bootstrap_means(&series, opts.bootstrap, derive_seed(seed, ti as u64));
    Ok(DensityEstimate {
        t: sample.t_values[ti],
        eval_points: eval_points.to_vec(),
        p_hat: contribs.iter().map(|c| (mean(&c.values) + c.offset).max(0.0)).collect(),
        stderr: (0..contribs.len()).map(|j| replicate_sd(&reps, j)).collect(),
        bias_bound: contribs.iter().map(|c| c.bias).collect(),
        n_paths: sample.n_paths,
        n_blowups: sample.blowups[ti],
        estimator: opts.estimator,
        kernel: opts.kernel,
        bandwidth: h,
        control_variate: opts.control_variate,
    })
}

/// Monte Carlo estimate of `p(t; x, y)` at each `y` in `eval_points`.
pub fn mc_density(
    fields: &dyn VectorFieldSystem,
    x: &[f64],
    t: f64,
    n_paths: usize,
    eval_points: &[Vec<f64>],
    opts: &DensityOptions,
    seed: u64,
) -> Result<DensityEstimate> {
    let sample = sample_endpoints(fields, x, &[t], n_paths, opts, seed)?;
    estimate_from_sample(&sample, 0, eval_points, opts, seed)
}

/// Histogram with `bins` cells per axis on `bx`; returns its integral over the box.
pub fn histogram_mass(sample: &EndpointSample, ti: usize, bx: &WorkingBox, bins: usize) -> Result<f64> {
    let d = sample.dim;
    if bx.dim() != d || bins == 0 {
        return invalid("histogram box or bin count invalid");
    }
    let mut counts = vec![0usize; bins.pow(d as u32)];
    for z in sample.points[ti].chunks_exact(d) {
        if !z[0].is_finite() || !bx.contains(z) {
            continue;
        }
        let mut idx = 0;
        for k in 0..d {
            let w = (bx.hi[k] - bx.lo[k]) / bins as f64;
            let c = (((z[k] - bx.lo[k]) / w) as usize).min(bins - 1);
            idx = idx * bins + c;
        }
        counts[idx] += 1;
    }
    let cell = bx.volume() / counts.len() as f64;
    Ok(counts.iter().map(|&c| c as f64 / (sample.n_paths as f64 * cell) * cell).sum())
}

/// `(2 pi)^{-d/2} / |det sigma(x)|`.
pub fn a0_closed_form(fields: &dyn VectorFieldSystem, x: &[f64]) -> Result<f64> {
    let d = fields.dim();
    if x.len() != d {
        return invalid("point does not match the field dimension");
    }
    let det = linalg::det(&fields.sigma(x), d);
    if det.abs() < geometry::ELLIPTICITY_THRESHOLD {
        return Err(Error::Ellipticity { point: x.to_vec(), det: det.abs() });
    }
    Ok((2.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0) / det.abs())
}

// ---------------------------------------------------------------------------
// Ladder fits

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsymptoticsFit {
    pub hurst: f64,
    pub dim: usize,
    pub k: usize,
    pub t_values: Vec<f64>,
    /// `t^{Hd} p_hat(t; x, x)`.
    pub scaled_density: Vec<f64>,
    pub scaled_stderr: Vec<f64>,
    /// Exponents `2 k H` of the basis.
    pub exponents: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub stderr: Vec<f64>,
    /// 95% half-widths.
    pub ci_half_width: Vec<f64>,
    /// `sqrt(sum w r^2)` of the weighted residuals.
    pub residual_norm: f64,
    pub condition_number: f64,
    /// `c_0` refitted without the largest `t`.
    pub c0_without_largest_t: Option<f64>,
    pub n_paths: usize,
    pub n_blowups: usize,
    pub a0_closed_form: Option<f64>,
}

fn wls(x: &[f64], rows: usize, cols: usize, y: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    linalg::weighted_least_squares(x, rows, cols, y, w)
        .map(|r| r.0)
        .ok_or_else(|| Error::IllConditioned("singular design matrix".into()))
}

fn weighted_condition(x: &[f64], rows: usize, cols: usize, w: &[f64]) -> f64 {
    let xs: Vec<f64> = (0..rows * cols).map(|c| x[c] * w[c / cols].sqrt()).collect();
    linalg::condition_number(&xs, rows, cols)
}

/// Weighted fit of `t^{Hd} p_hat(t; x, x)` on `{1, t^{2H}, ..., t^{2KH}}`,
/// with standard errors from a path bootstrap across the whole ladder.
pub fn ondiag_fit(
    fields: &dyn VectorFieldSystem,
    x: &[f64],
    t_values: &[f64],
    n_paths: usize,
    k: usize,
    seed: u64,
    opts: &DensityOptions,
) -> Result<AsymptoticsFit> {
    if k > 2 {
        return invalid("at most two correction terms");
    }
    if t_values.len() < k + 2 || t_values.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
        return invalid(format!("need at least {} times in (0, 1]", k + 2));
    }
    let d = fields.dim();
    let h = opts.hurst.value();
    let sample = sample_endpoints(fields, x, t_values, n_paths, opts, seed)?;
    let nt = t_values.len();
    let mut contribs = Vec::with_capacity(nt);
    for ti in 0..nt {
        let ok = n_paths - sample.blowups[ti];
        let bw = default_bandwidth(opts.kernel, &column_spread(&sample.points[ti], d), ok, opts.bandwidth_scale);
        contribs.push(point_contributions(&sample, ti, x, &bw, opts));
    }
    let scale: Vec<f64> = t_values.iter().map(|t| t.powf(h * d as f64)).collect();
    let yv: Vec<f64> = (0..nt).map(|i| scale[i] * (mean(&contribs[i].values) + contribs[i].offset)).collect();
    let series: Vec<&[f64]> = contribs.iter().map(|c| c.values.as_slice()).collect();
    let reps = bootstrap_means(&series, opts.bootstrap, derive_seed(seed, 0xf17));
    let ys: Vec<f64> = (0..nt).map(|i| scale[i] * replicate_sd(&reps, i)).collect();
    let exponents: Vec<f64> = (0..=k).map(|j| 2.0 * j as f64 * h).collect();
    let design: Vec<f64> = t_values.iter().flat_map(|&t| exponents.iter().map(move |&e| t.powf(e))).collect();
    let w: Vec<f64> = ys.iter().map(|s| 1.0 / (s * s).max(1e-300)).collect();
    let cond = weighted_condition(&design, nt, k + 1, &w);
    if cond > 1e8 {
        return Err(Error::IllConditioned(format!("design condition number {cond:e}")));
    }
    let coefficients = wls(&design, nt, k + 1, &yv, &w)?;
    let boot: Vec<Vec<f64>> = reps
        .iter()
        .map(|r| {
            let yr: Vec<f64> = (0..nt).map(|i| scale[i] * (r[i] + contribs[i].offset)).collect();
            wls(&design, nt, k + 1, &yr, &w)
        })
        .collect::<Result<_>>()?;
    let stderr: Vec<f64> = (0..=k).map(|j| replicate_sd(&boot, j)).collect();
    let residual_norm = (0..nt)
        .map(|i| {
            let fit: f64 = (0..=k).map(|j| design[i * (k + 1) + j] * coefficients[j]).sum();
            w[i] * (yv[i] - fit).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    let c0_without_largest_t = if nt > k + 1 {
        let drop = (0..nt).max_by(|&a, &b| t_values[a].total_cmp(&t_values[b])).unwrap();
        let keep: Vec<usize> = (0..nt).filter(|&i| i != drop).collect();
        let dx: Vec<f64> = keep.iter().flat_map(|&i| design[i * (k + 1)..(i + 1) * (k + 1)].to_vec()).collect();
        let dy: Vec<f64> = keep.iter().map(|&i| yv[i]).collect();
        let dw: Vec<f64> = keep.iter().map(|&i| w[i]).collect();
        wls(&dx, keep.len(), k + 1, &dy, &dw).ok().map(|c| c[0])
    } else {
        None
    };
    Ok(AsymptoticsFit {
        hurst: h,
        dim: d,
        k,
        t_values: t_values.to_vec(),
        scaled_density: yv,
        scaled_stderr: ys,
        exponents,
        ci_half_width: stderr.iter().map(|s| 1.96 * s).collect(),
        coefficients,
        stderr,
        residual_norm,
        condition_number: cond,
        c0_without_largest_t,
        n_paths,
        n_blowups: sample.blowups.iter().copied().max().unwrap_or(0),
        a0_closed_form: a0_closed_form(fields, x).ok(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OffDiagFit {
    pub t_values: Vec<f64>,
    /// False where the density was not distinguishable from zero.
    pub used: Vec<bool>,
    /// `1 / (2 t^{2H})`.
    pub regressor: Vec<f64>,
    /// `-log(t^{Hd} p_hat(t; x, y))`.
    pub neg_log_density: Vec<f64>,
    pub neg_log_stderr: Vec<f64>,
    pub slope: f64,
    pub slope_stderr: f64,
    pub intercept: f64,
    /// Coefficient of the `t^{2H}` regressor when included.
    pub nuisance: Option<f64>,
    pub distance_sq: Option<f64>,
    pub n_paths: usize,
}

/// Slope of `-log(t^{Hd} p_hat(t; x, y))` against `1/(2 t^{2H})`, which tends to
/// `d^2(x, y)`. With `nuisance` a `t^{2H}` column absorbs the first correction.
#[allow(clippy::too_many_arguments)]
pub fn offdiag_exponent(
    fields: &dyn VectorFieldSystem,
    x: &[f64],
    y: &[f64],
    t_values: &[f64],
    n_paths: usize,
    seed: u64,
    opts: &DensityOptions,
    nuisance: bool,
) -> Result<OffDiagFit> {
    let d = fields.dim();
    if y.len() != d {
        return invalid("target does not match the field dimension");
    }
    let h = opts.hurst.value();
    let sample = sample_endpoints(fields, x, t_values, n_paths, opts, seed)?;
    let nt = t_values.len();
    let mut contribs = Vec::with_capacity(nt);
    for ti in 0..nt {
        let ok = n_paths - sample.blowups[ti];
        let bw = default_bandwidth(opts.kernel, &column_spread(&sample.points[ti], d), ok, opts.bandwidth_scale);
        contribs.push(point_contributions(&sample, ti, y, &bw, opts));
    }
    let series: Vec<&[f64]> = contribs.iter().map(|c| c.values.as_slice()).collect();
    let reps = bootstrap_means(&series, opts.bootstrap, derive_seed(seed, 0x0ff));
    let p: Vec<f64> = contribs.iter().map(|c| mean(&c.values) + c.offset).collect();
    let se: Vec<f64> = (0..nt).map(|i| replicate_sd(&reps, i)).collect();
    let used: Vec<bool> = (0..nt).map(|i| p[i] > 5.0 * se[i]).collect();
    let idx: Vec<usize> = (0..nt).filter(|&i| used[i]).collect();
    let cols = if nuisance { 3 } else { 2 };
    if idx.len() < cols {
        return invalid(format!("only {} times have a density distinguishable from zero", idx.len()));
    }
    let scale = |t: f64| t.powf(h * d as f64);
    let regressor: Vec<f64> = t_values.iter().map(|t| 1.0 / (2.0 * t.powf(2.0 * h))).collect();
    let neg_log: Vec<f64> = (0..nt).map(|i| -(scale(t_values[i]) * p[i]).ln()).collect();
    let neg_log_se: Vec<f64> = (0..nt).map(|i| se[i] / p[i]).collect();
    let design: Vec<f64> = idx
        .iter()
        .flat_map(|&i| {
            let mut row = vec![1.0, regressor[i]];
            if nuisance {
                row.push(t_values[i].powf(2.0 * h));
            }
            row
        })
        .collect();
    let w: Vec<f64> = idx.iter().map(|&i| 1.0 / neg_log_se[i].powi(2).max(1e-300)).collect();
    let yv: Vec<f64> = idx.iter().map(|&i| neg_log[i]).collect();
    let beta = wls(&design, idx.len(), cols, &yv, &w)?;
    let boot: Vec<f64> = reps
        .iter()
        .filter_map(|r| {
            let yr: Vec<f64> = idx.iter().map(|&i| -(scale(t_values[i]) * (r[i] + contribs[i].offset)).max(1e-300).ln()).collect();
            wls(&design, idx.len(), cols, &yr, &w).ok().map(|b| b[1])
        })
        .collect();
    let slope_stderr = lie::mean_and_se(&boot).1 * (boot.len() as f64).sqrt();
    let distance_sq = if x == y {
        Some(0.0)
    } else {
        geometry::distance(fields, x, y).ok().filter(|r| r.converged).map(|r| r.distance * r.distance)
    };
    Ok(OffDiagFit {
        t_values: t_values.to_vec(),
        used,
        regressor,
        neg_log_density: neg_log,
        neg_log_stderr: neg_log_se,
        slope: beta[1],
        slope_stderr,
        intercept: beta[0],
        nuisance: nuisance.then(|| beta[2]),
        distance_sq,
        n_paths,
    })
}

// ---------------------------------------------------------------------------
// Tangent process and q_H

/// Per-path quantities of the fBm bridge on `[0, 1]`: `B = m B_1 + Bhat` with
/// `m(s) = R(s, 1)` and `Bhat` independent of `B_1`.
#[derive(Debug, Clone)]
pub struct BridgeSample {
    pub dim: usize,
    pub n_paths: usize,
    /// Pairs `(i, j)`, `i < j`.
    pub pairs: Vec<(usize, usize)>,
    /// `Ahat^{ij} = int Bhat^i dBhat^j - int Bhat^j dBhat^i`, `n_paths x pairs`.
    pub area: Vec<f64>,
    /// `beta^j = int m dBhat^j - int Bhat^j dm`, `n_paths x d`.
    pub beta: Vec<f64>,
}

fn pairs_of(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect()
}

fn shoelace(x: impl Iterator<Item = f64> + Clone, y: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = x.collect();
    let ys: Vec<f64> = y.collect();
    (0..xs.len() - 1).map(|k| xs[k] * ys[k + 1] - ys[k] * xs[k + 1]).sum()
}

fn bridge_of_set(set: &FbmPathSet, m: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = set.dim();
    let n = set.grid().n_steps();
    let pairs = pairs_of(d);
    let mut area = Vec::with_capacity(set.n_paths() * pairs.len());
    let mut beta = Vec::with_capacity(set.n_paths() * d);
    for p in 0..set.n_paths() {
        let path = set.path(p);
        let b1 = set.endpoint(p);
        let hat: Vec<f64> = (0..=n).flat_map(|i| (0..d).map(move |k| (i, k))).map(|(i, k)| path[i * d + k] - m[i] * b1[k]).collect();
        let coord = |k: usize| hat.iter().skip(k).step_by(d).copied();
        for &(i, j) in &pairs {
            area.push(shoelace(coord(i), coord(j)));
        }
        for k in 0..d {
            beta.push(shoelace(m.iter().copied(), coord(k)));
        }
    }
    (area, beta)
}

pub fn bridge_sample(dim: usize, hurst: Hurst, n_paths: usize, n_steps: usize, sampler: SamplerTag, seed: u64) -> Result<BridgeSample> {
    let grid = TimeGrid::new(1.0, n_steps)?;
    let s = FbmSampler::new(grid, dim, hurst, sampler, seed)?;
    let m: Vec<f64> = grid.points().iter().map(|&t| cov(t, 1.0, hurst.value())).collect();
    let chunks = s.map_chunks(n_paths, |_, set| bridge_of_set(&set, &m));
    let (mut area, mut beta) = (Vec::new(), Vec::new());
    for (a, b) in chunks {
        area.extend(a);
        beta.extend(b);
    }
    Ok(BridgeSample { dim, n_paths, pairs: pairs_of(dim), area, beta })
}

/// Density at zero of `Z = s sigma B_1 + (s^2 / 2) sum_{i<j} w_ij A^{ij}_1`
/// conditional on one bridge sample: `Z` is affine in `B_1`.
fn conditional_density_at_zero(sigma: &[f64], w: &[Vec<f64>], s: f64, area: &[f64], beta: &[f64]) -> f64 {
    let d = beta.len();
    let mut m: Vec<f64> = sigma.iter().map(|v| s * v).collect();
    let mut c = vec![0.0; d];
    let half = 0.5 * s * s;
    for (pi, (i, j)) in pairs_of(d).into_iter().enumerate() {
        let wij = &w[pi];
        for k in 0..d {
            c[k] += half * wij[k] * area[pi];
            m[k * d + i] += half * wij[k] * beta[j];
            m[k * d + j] -= half * wij[k] * beta[i];
        }
    }
    let det = linalg::det(&m, d);
    let Some(u) = linalg::solve(&m, d, &c) else { return 0.0 };
    let q: f64 = u.iter().map(|v| v * v).sum();
    (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powf(d as f64 / 2.0) * det.abs())
}

/// Density at zero of `sum_{|I| <= n} Lambda_I(B)_t V_I(x)`, `n` in `{1, 2}`.
///
/// `Kde` and `Histogram` estimate it from samples of the vector; `Bridge` averages
/// the exact conditional density given the fBm bridge.
pub fn tangent_density(
    fields: &dyn VectorFieldSystem,
    x: &[f64],
    t: f64,
    n: usize,
    n_paths: usize,
    seed: u64,
    opts: &DensityOptions,
) -> Result<DensityEstimate> {
    let d = fields.dim();
    if !(1..=2).contains(&n) {
        return invalid("tangent order must be 1 or 2");
    }
    if !(t > 0.0) || x.len() != d {
        return invalid("tangent density needs t > 0 and a point of the field dimension");
    }
    let s = t.powf(opts.hurst.value());
    let sigma = fields.sigma(x);
    let brackets: Vec<Vec<f64>> = pairs_of(d)
        .into_iter()
        .map(|(i, j)| if n == 2 { geometry::lie_bracket(fields, i, j, x) } else { vec![0.0; d] })
        .collect();
    if opts.estimator == Estimator::Bridge {
        let bs = bridge_sample(d, opts.hurst, n_paths, opts.n_steps, opts.sampler, seed)?;
        let np = bs.pairs.len();
        let vals: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| conditional_density_at_zero(&sigma, &brackets, s, &bs.area[p * np..(p + 1) * np], &bs.beta[p * d..(p + 1) * d]))
            .collect();
        let (m, se) = lie::mean_and_se(&vals);
        return Ok(DensityEstimate {
            t,
            eval_points: vec![vec![0.0; d]],
            p_hat: vec![m],
            stderr: vec![se],
            bias_bound: vec![0.0],
            n_paths,
            n_blowups: 0,
            estimator: Estimator::Bridge,
            kernel: opts.kernel,
            bandwidth: vec![],
            control_variate: false,
        });
    }
    let grid = TimeGrid::new(1.0, opts.n_steps)?;
    let sampler = FbmSampler::new(grid, d, opts.hurst, opts.sampler, seed)?;
    let perms = [lie::weighted_perms(1), lie::weighted_perms(2)];
    let words: Vec<(Word, Vec<f64>)> = Word::up_to(d, n)
        .into_iter()
        .filter(|w| w.len() == 1 || w.letters()[0] != w.letters()[1])
        .map(|w| lie::lie_bracket_field(fields, &w, x).map(|b| (w, b)))
        .collect::<Result<_>>()?;
    let chunks = sampler.map_chunks(n_paths, |_, set| {
        let mut out = Vec::with_capacity(set.n_paths() * d);
        for p in 0..set.n_paths() {
            let mut z = vec![0.0; d];
            for (w, b) in &words {
                let c = s.powi(w.len() as i32) * lie::lambda_of_path(set.path(p), d, w, opts.n_steps, &perms[w.len() - 1]);
                for k in 0..d {
                    z[k] += c * b[k];
                }
            }
            out.extend(z);
        }
        out
    });
    let points: Vec<f64> = chunks.into_iter().flatten().collect();
    let sample = EndpointSample {
        dim: d,
        n_paths,
        x0: vec![0.0; d],
        t_values: vec![t],
        points: vec![points],
        blowups: vec![0],
        b1: vec![],
        sigma0: sigma,
        hurst: opts.hurst,
    };
    let mut o = *opts;
    o.control_variate = false;
    estimate_from_sample(&sample, 0, &[vec![0.0; d]], &o, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QhMethod {
    Fit,
    Quadrature,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QhOptions {
    pub n_steps: usize,
    pub sampler: SamplerTag,
    /// Times of the fit ladder.
    pub t_values: Vec<f64>,
    /// Gauss–Hermite nodes per dimension.
    pub gh_order: usize,
}

impl Default for QhOptions {
    fn default() -> Self {
        QhOptions { n_steps: 256, sampler: SamplerTag::Cholesky, t_values: vec![0.2, 0.1, 0.05, 0.025], gh_order: 20 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QhEstimate {
    pub method: QhMethod,
    pub value: f64,
    pub stderr: f64,
    pub n_paths: usize,
    /// Fit method: `t`, and `(2 pi)^{d/2} t^{Hd} p_theta(t; 0) - 1` with its error.
    pub t_values: Vec<f64>,
    pub ladder: Vec<f64>,
    pub ladder_stderr: Vec<f64>,
}

/// Tensor Gauss–Hermite moments `int e^{-|l|^2/2} l_a l_b dl` and
/// `int e^{-|l|^2/2} l_a l_b l_c l_e dl`.
fn gh_moments(d: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_hermite(order);
    let mut g2 = vec![0.0; d * d];
    let mut g4 = vec![0.0; d * d * d * d];
    let total = order.pow(d as u32);
    let r2 = std::f64::consts::SQRT_2;
    for mut c in 0..total {
        let mut lam = vec![0.0; d];
        let mut wt = 2f64.powf(d as f64 / 2.0);
        for l in lam.iter_mut() {
            let i = c % order;
            c /= order;
            *l = r2 * x[i];
            wt *= w[i];
        }
        for a in 0..d {
            for b in 0..d {
                let ab = wt * lam[a] * lam[b];
                g2[a * d + b] += ab;
                for cc in 0..d {
                    for e in 0..d {
                        g4[((a * d + b) * d + cc) * d + e] += ab * lam[cc] * lam[e];
                    }
                }
            }
        }
    }
    (g2, g4)
}

/// `q_H(omega)` from the bridge decomposition.
///
/// `Quadrature`: given the bridge, `theta_1 = B_1 + (1/2)(vhat + L B_1)` with
/// `vhat_k = sum_{i<j} omega^k_ij Ahat^{ij}`, `L_kp = sum_j omega^k_pj beta^j`; the
/// `B_1`-expectation inside the `lambda`-integral is Gaussian and the integral is
/// done by tensor Gauss–Hermite quadrature.
///
/// `Fit`: the exact conditional density of `theta_t` at zero over a `t` ladder,
/// regressed on `-q t^{2H} + r t^{4H}`.
pub fn qh_estimate(
    omega: &StructureConstants,
    hurst: Hurst,
    n_paths: usize,
    seed: u64,
    method: QhMethod,
    opts: &QhOptions,
) -> Result<QhEstimate> {
    let d = omega.dim();
    if method == QhMethod::Quadrature && d > 3 {
        return invalid("quadrature method supports d <= 3");
    }
    if n_paths < 2 {
        return invalid("need at least two paths");
    }
    let bs = bridge_sample(d, hurst, n_paths, opts.n_steps, opts.sampler, seed)?;
    let pairs = bs.pairs.clone();
    let np = pairs.len();
    let parts = |p: usize| -> (Vec<f64>, Vec<f64>) {
        let area = &bs.area[p * np..(p + 1) * np];
        let beta = &bs.beta[p * d..(p + 1) * d];
        let mut v = vec![0.0; d];
        for (pi, &(i, j)) in pairs.iter().enumerate() {
            for k in 0..d {
                v[k] += omega.get(i, j, k) * area[pi];
            }
        }
        let mut l = vec![0.0; d * d];
        for k in 0..d {
            for q in 0..d {
                l[k * d + q] = (0..d).map(|j| omega.get(q, j, k) * beta[j]).sum();
            }
        }
        (v, l)
    };
    match method {
        QhMethod::Quadrature => {
            let (g2, g4) = gh_moments(d, opts.gh_order);
            let norm = 1.0 / (8.0 * (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0));
            let vals: Vec<f64> = (0..n_paths)
                .into_par_iter()
                .map(|p| {
                    let (v, l) = parts(p);
                    let mut acc = 0.0;
                    for a in 0..d {
                        for b in 0..d {
                            let llt: f64 = (0..d).map(|q| l[a * d + q] * l[b * d + q]).sum();
                            acc += g2[a * d + b] * (v[a] * v[b] + llt);
                            for c in 0..d {
                                for e in 0..d {
                                    acc -= g4[((a * d + b) * d + c) * d + e] * l[a * d + b] * l[c * d + e];
                                }
                            }
                        }
                    }
                    norm * acc
                })
                .collect();
            let (value, stderr) = lie::mean_and_se(&vals);
            Ok(QhEstimate { method, value, stderr, n_paths, t_values: vec![], ladder: vec![], ladder_stderr: vec![] })
        }
        QhMethod::Fit => {
            let ts = &opts.t_values;
            if ts.len() < 3 || ts.iter().any(|&t| !(t > 0.0)) {
                return invalid("fit method needs at least three positive times");
            }
            let s2: Vec<f64> = ts.iter().map(|t| t.powf(2.0 * hurst.value())).collect();
            // OLS of g_t / s_t^2 on [-1, s_t^2]; the q coefficient is linear in g
            let nt = ts.len();
            let x: Vec<f64> = s2.iter().flat_map(|&s| [-1.0, s]).collect();
            let xtx = [
                x.iter().step_by(2).map(|v| v * v).sum::<f64>(),
                (0..nt).map(|i| x[2 * i] * x[2 * i + 1]).sum::<f64>(),
                (0..nt).map(|i| x[2 * i] * x[2 * i + 1]).sum::<f64>(),
                x.iter().skip(1).step_by(2).map(|v| v * v).sum::<f64>(),
            ];
            let inv = linalg::inverse(&xtx, 2).ok_or_else(|| Error::IllConditioned("fit ladder is degenerate".into()))?;
            let coef: Vec<f64> = (0..nt).map(|i| (inv[0] * x[2 * i] + inv[1] * x[2 * i + 1]) / s2[i]).collect();
            let per: Vec<(f64, Vec<f64>)> = (0..n_paths)
                .into_par_iter()
                .map(|p| {
                    let (v, l) = parts(p);
                    let g: Vec<f64> = ts
                        .iter()
                        .map(|&t| {
                            let half_s = 0.5 * t.powf(hurst.value());
                            let m: Vec<f64> = (0..d * d).map(|c| if c / d == c % d { 1.0 } else { 0.0 } + half_s * l[c]).collect();
                            let rhs: Vec<f64> = v.iter().map(|a| half_s * a).collect();
                            let u = linalg::solve(&m, d, &rhs).unwrap_or_else(|| vec![f64::INFINITY; d]);
                            let q: f64 = u.iter().map(|a| a * a).sum();
                            (-0.5 * q).exp() / linalg::det(&m, d).abs() - 1.0
                        })
                        .collect();
                    let qp = g.iter().zip(&coef).map(|(a, b)| a * b).sum();
                    (qp, g)
                })
                .collect();
            let qs: Vec<f64> = per.iter().map(|r| r.0).collect();
            let (value, stderr) = lie::mean_and_se(&qs);
            let (mut ladder, mut ladder_stderr) = (Vec::new(), Vec::new());
            for ti in 0..nt {
                let g: Vec<f64> = per.iter().map(|r| r.1[ti]).collect();
                let (m, se) = lie::mean_and_se(&g);
                ladder.push(m);
                ladder_stderr.push(se);
            }
            Ok(QhEstimate { method, value, stderr, n_paths, t_values: ts.clone(), ladder, ladder_stderr })
        }
    }
}

/// `|a - b| / sqrt(se_a^2 + se_b^2)`.
pub fn qh_discrepancy(a: &QhEstimate, b: &QhEstimate) -> f64 {
    let se = (a.stderr * a.stderr + b.stderr * b.stderr).sqrt();
    if se == 0.0 {
        if a.value == b.value { 0.0 } else { f64::INFINITY }
    } else {
        (a.value - b.value).abs() / se
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{ConstantFrame, So3Frame};

    fn h07() -> Hurst {
        Hurst::new(0.7).unwrap()
    }

    #[test]
    fn a0_values() {
        let one = ConstantFrame::new(1, vec![2.0]).unwrap();
        assert!((a0_closed_form(&one, &[0.3]).unwrap() - 0.199_471_140_200_716_35).abs() < 1e-12);
        let two = ConstantFrame::orthonormal(2);
        assert!((a0_closed_form(&two, &[0.0, 0.0]).unwrap() - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-15);
        let scaled = ConstantFrame::new(2, vec![3.0, 0.0, 0.0, 3.0]).unwrap();
        assert!((a0_closed_form(&scaled, &[0.0, 0.0]).unwrap() * 9.0 - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-15);
        let singular = ConstantFrame::new(2, vec![1.0, 1.0, 1.0, 1.0]);
        if let Ok(s) = singular {
            assert!(matches!(a0_closed_form(&s, &[0.0, 0.0]), Err(Error::Ellipticity { .. })));
        }
    }

    #[test]
    fn fourth_order_kernel_integrates_to_one() {
        // 1-d: int ((3/2) - u^2/2) phi(u) du = 1
        let (x, w) = gauss_hermite(20);
        let s: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * (1.5 - xi * xi)).sum::<f64>() / std::f64::consts::PI.sqrt();
        assert!((s - 1.0).abs() < 1e-12);
        let k = kernel_value(Kernel::Gaussian4, &[0.0, 0.0], &[1.0, 1.0]);
        assert!((k - 2.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-15);
    }

    #[test]
    fn control_variate_is_exact_for_constant_fields() {
        let f = ConstantFrame::orthonormal(2);
        let mut o = DensityOptions::new(h07());
        o.control_variate = true;
        o.bootstrap = 20;
        let est = mc_density(&f, &[0.0, 0.0], 0.5, 2000, &[vec![0.0, 0.0], vec![0.3, -0.2]], &o, 1).unwrap();
        let s2 = 0.5f64.powf(1.4);
        for (y, p) in est.eval_points.iter().zip(&est.p_hat) {
            let r2 = y[0] * y[0] + y[1] * y[1];
            let e = (-r2 / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2);
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_omega_gives_zero() {
        let z = StructureConstants::zeros(3);
        for m in [QhMethod::Fit, QhMethod::Quadrature] {
            let q = qh_estimate(&z, h07(), 50, 1, m, &QhOptions { n_steps: 32, ..Default::default() }).unwrap();
            assert_eq!(q.value, 0.0);
            assert_eq!(q.stderr, 0.0);
        }
    }

    #[test]
    fn gh_second_moment() {
        let (g2, g4) = gh_moments(2, 20);
        let c = 2.0 * std::f64::consts::PI;
        assert!((g2[0] - c).abs() < 1e-10 && g2[1].abs() < 1e-12);
        // E l_0^4 = 3, E l_0^2 l_1^2 = 1 under N(0, I)
        assert!((g4[0] - 3.0 * c).abs() < 1e-9);
        assert!((g4[2 + 1] - c).abs() < 1e-9);
    }

    #[test]
    fn bridge_n1_matches_gaussian_value() {
        let f = So3Frame;
        let x = [0.1, 0.2, 0.3];
        let mut o = DensityOptions::new(h07());
        o.estimator = Estimator::Bridge;
        o.n_steps = 16;
        let est = tangent_density(&f, &x, 0.5, 1, 50, 3, &o).unwrap();
        let e = a0_closed_form(&f, &x).unwrap() / 0.5f64.powf(0.7 * 3.0);
        assert!((est.p_hat[0] - e).abs() < 1e-12 * e);
    }
}
