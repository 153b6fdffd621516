//! Fractional Brownian motion: covariance, Volterra kernel, path samplers,
//! Cameron–Martin shifts and Girsanov weights.
//!
//! The covariance of a one-dimensional fBm with Hurst index `H` is
//!
//! ```text
//! R(t, s) = 1/2 (t^{2H} + s^{2H} - |t - s|^{2H})
//! ```
//!
//! Cameron–Martin elements are handled exclusively through piecewise-constant
//! controls `phi` on the increments of a uniform grid: the element `k` is the
//! covariance of `B` with the linear functional `sum_j <phi_j, dB_j>`.

use std::collections::HashMap;
use std::sync::Mutex;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quadrature::{gl64, tanh_sinh};
use crate::rng::{chunk_rng, chunk_ranges, DEFAULT_CHUNK};

/// Hurst index in the regular range `1/2 < H < 1`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Hurst(f64);

impl Hurst {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.5 && value < 1.0 {
            Ok(Hurst(value))
        } else {
            Err(Error::Hurst(value))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// Default Hölder exponent used for norms of paths driven by this fBm.
    pub fn default_lambda(self) -> f64 {
        (self.0 - 0.05).max(0.5 + 1e-3)
    }
}

impl TryFrom<f64> for Hurst {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Hurst::new(v)
    }
}

impl From<Hurst> for f64 {
    fn from(h: Hurst) -> f64 {
        h.0
    }
}

/// Uniform grid `0 = t_0 < t_1 < ... < t_n = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return invalid(format!("horizon must be positive, got {horizon}"));
        }
        if n_steps == 0 {
            return invalid("grid needs at least one step");
        }
        Ok(TimeGrid { horizon, n_steps })
    }

    /// Reject a list of time points that is not a uniform grid starting at 0.
    pub fn from_points(points: &[f64]) -> Result<Self> {
        if points.len() < 2 || points[0] != 0.0 {
            return invalid("grid must start at t=0 and contain at least two points");
        }
        let n = points.len() - 1;
        let grid = TimeGrid::new(points[n], n)?;
        let tol = 1e-9 * grid.horizon;
        for (i, &p) in points.iter().enumerate() {
            if (p - grid.point(i)).abs() > tol {
                return invalid(format!("non-uniform grid at index {i}"));
            }
        }
        Ok(grid)
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    #[inline]
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }
    #[inline]
    pub fn point(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            self.horizon * i as f64 / self.n_steps as f64
        }
    }
    pub fn points(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.point(i)).collect()
    }

    /// Index of `t` if it lies on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let i = x.round();
        if i >= 0.0 && (x - i).abs() < 1e-9 && (i as usize) <= self.n_steps {
            Some(i as usize)
        } else {
            None
        }
    }

    /// Grid with each step split into `factor` sub-steps.
    pub fn refined(&self, factor: usize) -> TimeGrid {
        TimeGrid { horizon: self.horizon, n_steps: self.n_steps * factor.max(1) }
    }
}

#[inline]
pub(crate) fn cov(t: f64, s: f64, h: f64) -> f64 {
    let two_h = 2.0 * h;
    0.5 * (t.powf(two_h) + s.powf(two_h) - (t - s).abs().powf(two_h))
}

/// Covariance `R(t, s)` of one coordinate of fBm.
pub fn covariance(t: f64, s: f64, hurst: Hurst) -> Result<f64> {
    if !(t >= 0.0 && s >= 0.0) {
        return invalid(format!("covariance needs t, s >= 0, got ({t}, {s})"));
    }
    Ok(cov(t, s, hurst.value()))
}

/// Covariance matrix `[R(t_i, t_j)]` for `i, j = 1..n` (the origin is omitted).
pub fn covariance_matrix(grid: &TimeGrid, hurst: Hurst) -> Vec<f64> {
    let n = grid.n_steps();
    let h = hurst.value();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = cov(grid.point(i + 1), grid.point(j + 1), h);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    m
}

/// Gram matrix of the increments, `G_{jl} = Cov(dB_j, dB_l)`, row-major n x n.
pub fn increment_gram(grid: &TimeGrid, hurst: Hurst) -> Vec<f64> {
    let n = grid.n_steps();
    let two_h = 2.0 * hurst.value();
    let scale = grid.dt().powf(two_h);
    let lag: Vec<f64> = (0..n)
        .map(|m| {
            let m = m as f64;
            0.5 * scale * ((m + 1.0).powf(two_h) + (m - 1.0).abs().powf(two_h) - 2.0 * m.powf(two_h))
        })
        .collect();
    let mut g = vec![0.0; n * n];
    for j in 0..n {
        for l in 0..n {
            g[j * n + l] = lag[j.abs_diff(l)];
        }
    }
    g
}

/// `sum_{j,l} G_{jl} a_j b_l` for the increment Gram matrix, using its Toeplitz structure.
pub(crate) fn gram_form(a: &[f64], b: &[f64], lag: &[f64]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for j in 0..n {
        let mut row = 0.0;
        for l in 0..n {
            row += lag[j.abs_diff(l)] * b[l];
        }
        s += a[j] * row;
    }
    s
}

pub(crate) fn increment_lags(grid: &TimeGrid, h: f64) -> Vec<f64> {
    let two_h = 2.0 * h;
    let scale = grid.dt().powf(two_h);
    (0..grid.n_steps())
        .map(|m| {
            let m = m as f64;
            0.5 * scale * ((m + 1.0).powf(two_h) + (m - 1.0).abs().powf(two_h) - 2.0 * m.powf(two_h))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Volterra kernel

/// `s^{1/2-H} int_s^t (u-s)^{H-3/2} u^{H-1/2} du` without the constant.
///
/// With `v = (u-s)^{H-1/2}` the singular factor disappears:
/// `(u-s)^{H-3/2} du = dv / (H-1/2)`.
fn kernel_shape(t: f64, s: f64, h: f64) -> f64 {
    let a = h - 0.5;
    let p = 1.0 / a;
    let v_max = (t - s).powf(a);
    let f = |v: f64| (s + v.powf(p)).powf(a);
    // the integrand bends where v^p ~ s; split there so small s stays resolved
    let knee = s.powf(a);
    let inner = if knee < 0.5 * v_max {
        gl64(f, 0.0, knee) + gl64(f, knee, v_max)
    } else {
        gl64(f, 0.0, v_max)
    };
    s.powf(-a) * inner / a
}

fn calibrate_constant(h: f64) -> f64 {
    // int_0^1 shape(1, s)^2 ds. shape^2 ~ s^{1-2H} at 0; with s = w^q,
    // q = 1/(2-2H), the integrand in w is bounded at the origin.
    let q = 1.0 / (2.0 - 2.0 * h);
    let integral = tanh_sinh(
        |w, _, dw| {
            if dw <= 0.0 || w <= 0.0 {
                return 0.0;
            }
            let s = w.powf(q);
            if s < 1e-250 {
                // shape(1, s) ~ s^{1/2-H} / (2H - 1)
                let a = h - 0.5;
                return q / (4.0 * a * a);
            }
            let k = kernel_shape(1.0, s, h);
            q * w.powf(q - 1.0) * k * k
        },
        0.0,
        1.0,
        1e-12,
    );
    1.0 / integral.sqrt()
}

/// Normalising constant `c_H` of the Volterra kernel, calibrated numerically so
/// that `int_0^1 K_H(1, s)^2 ds = 1`. Cached per `H`.
pub fn volterra_constant(hurst: Hurst) -> f64 {
    static CACHE: Mutex<Option<HashMap<u64, f64>>> = Mutex::new(None);
    let key = hurst.value().to_bits();
    if let Some(v) = CACHE.lock().unwrap().as_ref().and_then(|m| m.get(&key).copied()) {
        return v;
    }
    let c = calibrate_constant(hurst.value());
    CACHE.lock().unwrap().get_or_insert_with(HashMap::new).insert(key, c);
    c
}

/// Volterra kernel `K_H(t, s)` for `0 < s < t`, so that `B_t = int_0^t K_H(t, s) d beta_s`.
pub fn volterra_kernel(t: f64, s: f64, hurst: Hurst) -> Result<f64> {
    if !(s > 0.0 && s < t && t.is_finite()) {
        return invalid(format!("volterra kernel needs 0 < s < t, got t={t}, s={s}"));
    }
    Ok(volterra_constant(hurst) * kernel_shape(t, s, hurst.value()))
}

// ---------------------------------------------------------------------------
// Sampling

/// Which construction produced a path set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerTag {
    Cholesky,
    Volterra,
}

impl SamplerTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SamplerTag::Cholesky => "cholesky",
            SamplerTag::Volterra => "volterra",
        }
    }
}

/// Batch of `d`-dimensional fBm paths on a uniform grid.
///
/// `values` is laid out path-major: `values[(p * (n + 1) + i) * d + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FbmPathSet {
    grid: TimeGrid,
    dim: usize,
    hurst: Hurst,
    n_paths: usize,
    values: Vec<f64>,
    seed: u64,
    sampler: SamplerTag,
}

impl FbmPathSet {
    /// Assemble a path set from raw values; checks shape, origin and finiteness.
    pub fn from_raw(
        grid: TimeGrid,
        dim: usize,
        hurst: Hurst,
        values: Vec<f64>,
        seed: u64,
        sampler: SamplerTag,
    ) -> Result<Self> {
        let stride = (grid.n_steps() + 1) * dim;
        if dim == 0 || !values.len().is_multiple_of(stride) {
            return invalid("path values do not match grid and dimension");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("path values must be finite");
        }
        let n_paths = values.len() / stride;
        for p in 0..n_paths {
            if values[p * stride..p * stride + dim].iter().any(|&v| v != 0.0) {
                return invalid(format!("path {p} does not start at the origin"));
            }
        }
        Ok(FbmPathSet { grid, dim, hurst, n_paths, values, seed, sampler })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn hurst(&self) -> Hurst {
        self.hurst
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn sampler(&self) -> SamplerTag {
        self.sampler
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Path `p` as a flat `(n + 1) x d` slice.
    pub fn path(&self, p: usize) -> &[f64] {
        let stride = (self.grid.n_steps() + 1) * self.dim;
        &self.values[p * stride..(p + 1) * stride]
    }

    #[inline]
    pub fn value(&self, p: usize, i: usize, k: usize) -> f64 {
        self.values[(p * (self.grid.n_steps() + 1) + i) * self.dim + k]
    }

    /// Increments of path `p` as a flat `n x d` vector.
    pub fn increments(&self, p: usize) -> Vec<f64> {
        increments_of(self.path(p), self.dim)
    }

    pub fn endpoint(&self, p: usize) -> &[f64] {
        let path = self.path(p);
        &path[path.len() - self.dim..]
    }

    pub fn paths(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact((self.grid.n_steps() + 1) * self.dim)
    }
}

pub(crate) fn increments_of(path: &[f64], dim: usize) -> Vec<f64> {
    path.windows(2 * dim)
        .step_by(dim)
        .flat_map(|w| (0..dim).map(move |k| w[dim + k] - w[k]))
        .collect()
}

/// Shared factor of both samplers: `B_{t_i} = sum_{j <= i} L_{ij} z_j` with
/// `z` standard normal, stored lower-triangular row-major.
#[derive(Debug, Clone)]
pub struct FbmSampler {
    grid: TimeGrid,
    dim: usize,
    hurst: Hurst,
    tag: SamplerTag,
    seed: u64,
    chunk_size: usize,
    factor: Vec<f64>,
    jittered: bool,
}

/// Largest grid accepted by the samplers.
pub const MAX_SAMPLER_STEPS: usize = 8192;

fn cholesky_lower(a: &[f64], n: usize) -> std::result::Result<Vec<f64>, usize> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(i);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

impl FbmSampler {
    pub fn new(grid: TimeGrid, dim: usize, hurst: Hurst, tag: SamplerTag, seed: u64) -> Result<Self> {
        let n = grid.n_steps();
        if n > MAX_SAMPLER_STEPS {
            return invalid(format!("grid has {n} steps; samplers accept at most {MAX_SAMPLER_STEPS}"));
        }
        if dim == 0 {
            return invalid("dimension must be positive");
        }
        let (factor, jittered) = match tag {
            SamplerTag::Cholesky => {
                let mut c = covariance_matrix(&grid, hurst);
                match cholesky_lower(&c, n) {
                    Ok(l) => (l, false),
                    Err(_) => {
                        let jitter = 1e-12 * grid.horizon().powf(2.0 * hurst.value());
                        for i in 0..n {
                            c[i * n + i] += jitter;
                        }
                        let l = cholesky_lower(&c, n).map_err(|pivot| Error::NotPositiveDefinite { pivot })?;
                        (l, true)
                    }
                }
            }
            SamplerTag::Volterra => {
                let dt = grid.dt();
                let sq = dt.sqrt();
                let c_h = volterra_constant(hurst);
                let h = hurst.value();
                let mut l = vec![0.0; n * n];
                l.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                    let t = grid.point(i + 1);
                    for (j, v) in row.iter_mut().enumerate().take(i + 1) {
                        let s = (j as f64 + 0.5) * dt;
                        *v = c_h * kernel_shape(t, s, h) * sq;
                    }
                });
                (l, false)
            }
        };
        Ok(FbmSampler { grid, dim, hurst, tag, seed, chunk_size: DEFAULT_CHUNK, factor, jittered })
    }

    pub fn with_chunk_size(mut self, chunk_size: usize) -> Self {
        self.chunk_size = chunk_size.max(1);
        self
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn hurst(&self) -> Hurst {
        self.hurst
    }
    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn tag(&self) -> SamplerTag {
        self.tag
    }
    /// Whether the Cholesky factorisation needed diagonal jitter.
    pub fn jittered(&self) -> bool {
        self.jittered
    }

    /// Covariance of the sampled values at `t_1..t_n` implied by the factor, `L L^T`.
    pub fn implied_covariance(&self) -> Vec<f64> {
        let n = self.grid.n_steps();
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| self.factor[i * n + k] * self.factor[j * n + k]).sum();
                c[i * n + j] = s;
                c[j * n + i] = s;
            }
        }
        c
    }

    fn fill_chunk(&self, chunk: usize, count: usize) -> Vec<f64> {
        let n = self.grid.n_steps();
        let d = self.dim;
        let stride = (n + 1) * d;
        let mut out = vec![0.0; count * stride];
        let mut rng = chunk_rng(self.seed, chunk as u64);
        let mut z = vec![0.0; n];
        for p in 0..count {
            let path = &mut out[p * stride..(p + 1) * stride];
            for k in 0..d {
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                for i in 0..n {
                    let row = &self.factor[i * n..i * n + i + 1];
                    let v: f64 = row.iter().zip(&z).map(|(a, b)| a * b).sum();
                    path[(i + 1) * d + k] = v;
                }
            }
        }
        out
    }

    /// Run `f` on every chunk (in parallel) and return the results in chunk order.
    pub fn map_chunks<T, F>(&self, n_paths: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, FbmPathSet) -> T + Sync + Send,
    {
        chunk_ranges(n_paths, self.chunk_size)
            .into_par_iter()
            .enumerate()
            .map(|(c, (start, end))| {
                let values = self.fill_chunk(c, end - start);
                let set = FbmPathSet {
                    grid: self.grid,
                    dim: self.dim,
                    hurst: self.hurst,
                    n_paths: end - start,
                    values,
                    seed: self.seed,
                    sampler: self.tag,
                };
                f(start, set)
            })
            .collect()
    }

    pub fn sample(&self, n_paths: usize) -> FbmPathSet {
        let chunks = self.map_chunks(n_paths, |_, set| set.values);
        let values: Vec<f64> = chunks.into_iter().flatten().collect();
        FbmPathSet {
            grid: self.grid,
            dim: self.dim,
            hurst: self.hurst,
            n_paths,
            values,
            seed: self.seed,
            sampler: self.tag,
        }
    }
}

/// Exact Gaussian sampling of fBm on the grid through the Cholesky factor of `[R(t_i, t_j)]`.
pub fn sample_fbm_cholesky(grid: TimeGrid, dim: usize, n_paths: usize, hurst: Hurst, seed: u64) -> Result<FbmPathSet> {
    Ok(FbmSampler::new(grid, dim, hurst, SamplerTag::Cholesky, seed)?.sample(n_paths))
}

/// Volterra sampling `B_{t_i} = sum_j K_H(t_i, s_j*) d beta_j` with midpoint kernel evaluation.
pub fn sample_fbm_volterra(grid: TimeGrid, dim: usize, n_paths: usize, hurst: Hurst, seed: u64) -> Result<FbmPathSet> {
    Ok(FbmSampler::new(grid, dim, hurst, SamplerTag::Volterra, seed)?.sample(n_paths))
}

/// Empirical versus exact covariance on the grid, pooled over coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceCheck {
    pub entries: Vec<CovarianceEntry>,
    pub max_abs_deviation: f64,
    pub max_abs_z: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceEntry {
    pub t: f64,
    pub s: f64,
    pub empirical: f64,
    pub exact: f64,
    pub stderr: f64,
}

pub fn covariance_check(paths: &FbmPathSet) -> CovarianceCheck {
    let n = paths.grid().n_steps();
    let d = paths.dim();
    let h = paths.hurst().value();
    let count = (paths.n_paths() * d) as f64;
    let mut sum = vec![0.0; n * n];
    let mut sum_sq = vec![0.0; n * n];
    for path in paths.paths() {
        for k in 0..d {
            for i in 0..n {
                let bi = path[(i + 1) * d + k];
                for j in 0..=i {
                    let prod = bi * path[(j + 1) * d + k];
                    sum[i * n + j] += prod;
                    sum_sq[i * n + j] += prod * prod;
                }
            }
        }
    }
    let mut entries = Vec::with_capacity(n * (n + 1) / 2);
    let mut max_dev: f64 = 0.0;
    let mut max_z: f64 = 0.0;
    for i in 0..n {
        for j in 0..=i {
            let mean = sum[i * n + j] / count;
            let var = (sum_sq[i * n + j] / count - mean * mean).max(0.0);
            let se = (var / count).sqrt();
            let (t, s) = (paths.grid().point(i + 1), paths.grid().point(j + 1));
            let exact = cov(t, s, h);
            max_dev = max_dev.max((mean - exact).abs());
            if se > 0.0 {
                max_z = max_z.max((mean - exact).abs() / se);
            }
            entries.push(CovarianceEntry { t, s, empirical: mean, exact, stderr: se });
        }
    }
    CovarianceCheck { entries, max_abs_deviation: max_dev, max_abs_z: max_z }
}

// ---------------------------------------------------------------------------
// Cameron–Martin controls

/// Piecewise-constant control on the increments of a grid, `phi[j * d + k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlVector {
    grid: TimeGrid,
    dim: usize,
    phi: Vec<f64>,
}

impl ControlVector {
    pub fn new(grid: TimeGrid, dim: usize, phi: Vec<f64>) -> Result<Self> {
        if dim == 0 || phi.len() != grid.n_steps() * dim {
            return invalid(format!(
                "control has {} entries, expected {} x {}",
                phi.len(),
                grid.n_steps(),
                dim
            ));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return invalid("control entries must be finite");
        }
        Ok(ControlVector { grid, dim, phi })
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        ControlVector { grid, dim, phi: vec![0.0; grid.n_steps() * dim] }
    }

    /// The same value on every increment.
    pub fn constant(grid: TimeGrid, value: &[f64]) -> Self {
        let phi = (0..grid.n_steps()).flat_map(|_| value.iter().copied()).collect();
        ControlVector { grid, dim: value.len(), phi }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.phi
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.phi
    }

    /// Same control on a grid with every step split `factor` times; the
    /// Cameron–Martin path it represents is unchanged.
    pub fn refined(&self, factor: usize) -> ControlVector {
        let m = factor.max(1);
        let d = self.dim;
        let phi = self
            .phi
            .chunks_exact(d)
            .flat_map(|row| std::iter::repeat_n(row, m).flatten().copied())
            .collect();
        ControlVector { grid: self.grid.refined(m), dim: d, phi }
    }

    /// `sum_j <phi_j, dB_j>` against increments laid out `n x d`.
    pub fn pairing(&self, increments: &[f64]) -> f64 {
        self.phi.iter().zip(increments).map(|(a, b)| a * b).sum()
    }

    /// Per-coordinate column `phi_{., k}`.
    pub(crate) fn column(&self, k: usize) -> Vec<f64> {
        self.phi.iter().skip(k).step_by(self.dim).copied().collect()
    }
}

/// Cameron–Martin element at time `t`:
/// `k_t = sum_j phi_j (R(t, t_{j+1}) - R(t, t_j))`.
pub fn cm_shift_at(phi: &ControlVector, hurst: Hurst, t: f64) -> Vec<f64> {
    let h = hurst.value();
    let grid = phi.grid();
    let d = phi.dim();
    let mut out = vec![0.0; d];
    let mut prev = cov(t, 0.0, h);
    for j in 0..grid.n_steps() {
        let next = cov(t, grid.point(j + 1), h);
        let w = next - prev;
        for k in 0..d {
            out[k] += phi.phi[j * d + k] * w;
        }
        prev = next;
    }
    out
}

/// Cameron–Martin path of `phi` on the control's own grid, `(n + 1) x d`.
pub fn cm_shift_from_control(phi: &ControlVector, hurst: Hurst) -> Vec<f64> {
    cm_shift_on(phi, hurst, phi.grid())
}

/// Cameron–Martin path of `phi` evaluated on another grid with the same horizon.
pub fn cm_shift_on(phi: &ControlVector, hurst: Hurst, grid: &TimeGrid) -> Vec<f64> {
    (0..=grid.n_steps())
        .into_par_iter()
        .flat_map_iter(|i| cm_shift_at(phi, hurst, grid.point(i)))
        .collect()
}

/// Squared Cameron–Martin norm `phi^T G phi` (summed over coordinates).
pub fn cm_norm_sq(phi: &ControlVector, hurst: Hurst) -> f64 {
    let lag = increment_lags(phi.grid(), hurst.value());
    (0..phi.dim())
        .map(|k| {
            let c = phi.column(k);
            gram_form(&c, &c, &lag)
        })
        .sum()
}

fn check_same_grid(a: &TimeGrid, b: &TimeGrid) -> Result<()> {
    if a.n_steps() != b.n_steps() || (a.horizon() - b.horizon()).abs() > 1e-12 * a.horizon() {
        return Err(Error::GridMismatch(format!(
            "({}, {}) vs ({}, {})",
            a.horizon(),
            a.n_steps(),
            b.horizon(),
            b.n_steps()
        )));
    }
    Ok(())
}

/// Log of the likelihood ratio `dP^k / dP` of the shifted law `B + k` against
/// the law of `B`, evaluated on each path:
/// `sum_j <phi_j, dB_j> - 1/2 phi^T G phi`.
pub fn girsanov_log_weight(paths: &FbmPathSet, phi: &ControlVector) -> Result<Vec<f64>> {
    check_same_grid(paths.grid(), phi.grid())?;
    if paths.dim() != phi.dim() {
        return Err(Error::GridMismatch("path and control dimensions differ".into()));
    }
    let half_norm = 0.5 * cm_norm_sq(phi, paths.hurst());
    Ok((0..paths.n_paths())
        .into_par_iter()
        .map(|p| phi.pairing(&paths.increments(p)) - half_norm)
        .collect())
}

/// Girsanov weight per path; under the weighted law the paths have the law of `B + k`.
pub fn girsanov_weight(paths: &FbmPathSet, phi: &ControlVector) -> Result<Vec<f64>> {
    Ok(girsanov_log_weight(paths, phi)?.into_iter().map(f64::exp).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(v: f64) -> Hurst {
        Hurst::new(v).unwrap()
    }

    #[test]
    fn hurst_range() {
        assert!(Hurst::new(0.5).is_err());
        assert!(Hurst::new(1.0).is_err());
        assert!(Hurst::new(0.4).is_err());
        assert!(Hurst::new(f64::NAN).is_err());
        assert_eq!(Hurst::new(0.7).unwrap().value(), 0.7);
    }

    #[test]
    fn covariance_examples() {
        assert_eq!(covariance(1.0, 1.0, h(0.7)).unwrap(), 1.0);
        assert_eq!(covariance(3.0, 0.0, h(0.6)).unwrap(), 0.0);
        let v = covariance(2.0, 1.0, h(0.75)).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-14);
        assert!(covariance(-1.0, 1.0, h(0.7)).is_err());
    }

    #[test]
    fn grid_rejects_non_uniform_points() {
        assert!(TimeGrid::from_points(&[0.0, 0.5, 1.0]).is_ok());
        assert!(TimeGrid::from_points(&[0.0, 0.4, 1.0]).is_err());
        assert!(TimeGrid::from_points(&[0.1, 0.5, 1.0]).is_err());
        let g = TimeGrid::new(2.0, 8).unwrap();
        assert_eq!(g.index_of(0.75), Some(3));
        assert_eq!(g.index_of(0.7), None);
    }

    #[test]
    fn kernel_positive_and_domain_checked() {
        let hu = h(0.7);
        for &(t, s) in &[(1.0, 0.001), (1.0, 0.5), (1.0, 0.999), (3.0, 2.0)] {
            assert!(volterra_kernel(t, s, hu).unwrap() > 0.0);
        }
        assert!(volterra_kernel(1.0, 1.0, hu).is_err());
        assert!(volterra_kernel(1.0, 0.0, hu).is_err());
    }

    #[test]
    fn calibrated_constant_matches_closed_form() {
        // c_H^2 = H (2H - 1) / B(2 - 2H, H - 1/2)
        for &hv in &[0.55, 0.7, 0.9] {
            let exact = (hv * (2.0 * hv - 1.0) / statrs::function::beta::beta(2.0 - 2.0 * hv, hv - 0.5)).sqrt();
            let c = volterra_constant(h(hv));
            assert!((c - exact).abs() < 1e-8 * exact, "H={hv}: {c} vs {exact}");
        }
    }

    #[test]
    fn gram_matches_covariance_differences() {
        let g = TimeGrid::new(1.5, 6).unwrap();
        let hu = h(0.65);
        let gram = increment_gram(&g, hu);
        for j in 0..6 {
            for l in 0..6 {
                let (a, b, c, e) = (g.point(j), g.point(j + 1), g.point(l), g.point(l + 1));
                let hv = hu.value();
                let v = cov(b, e, hv) - cov(b, c, hv) - cov(a, e, hv) + cov(a, c, hv);
                assert!((gram[j * 6 + l] - v).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn constant_control_gives_scaled_covariance_path() {
        let t_end = 0.5;
        let g = TimeGrid::new(t_end, 32).unwrap();
        let hu = h(0.7);
        let y = [0.3, -1.2];
        let scale = t_end.powf(1.4);
        let phi = ControlVector::constant(g, &[y[0] / scale, y[1] / scale]);
        let k = cm_shift_from_control(&phi, hu);
        for i in 0..=32 {
            let t = g.point(i);
            let r = cov(t, t_end, 0.7) / scale;
            assert!((k[i * 2] - y[0] * r).abs() < 1e-12);
            assert!((k[i * 2 + 1] - y[1] * r).abs() < 1e-12);
        }
        assert!((k[64] - y[0]).abs() < 1e-12);
        let norm = cm_norm_sq(&phi, hu);
        assert!((norm - (y[0] * y[0] + y[1] * y[1]) / scale).abs() < 1e-10);
        let zero = ControlVector::zeros(g, 2);
        assert!(cm_shift_from_control(&zero, hu).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refined_control_represents_same_path() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let phi = ControlVector::new(g, 1, (0..8).map(|j| (j as f64).sin()).collect()).unwrap();
        let fine = phi.refined(4);
        let hu = h(0.8);
        for &t in &[0.1, 0.37, 0.5, 1.0] {
            let a = cm_shift_at(&phi, hu, t)[0];
            let b = cm_shift_at(&fine, hu, t)[0];
            assert!((a - b).abs() < 1e-12);
        }
        assert!((cm_norm_sq(&phi, hu) - cm_norm_sq(&fine, hu)).abs() < 1e-10);
    }

    #[test]
    fn sampler_is_deterministic_and_starts_at_zero() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let a = sample_fbm_cholesky(g, 2, 50, h(0.7), 11).unwrap();
        let b = sample_fbm_cholesky(g, 2, 50, h(0.7), 11).unwrap();
        let c = sample_fbm_cholesky(g, 2, 50, h(0.7), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values(), c.values());
        for p in 0..50 {
            assert_eq!(&a.path(p)[..2], &[0.0, 0.0]);
        }
        let v = sample_fbm_volterra(g, 1, 5, h(0.7), 1).unwrap();
        assert!(v.paths().all(|p| p[0] == 0.0));
    }

    #[test]
    fn chunking_layout_is_reproducible() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let s = FbmSampler::new(g, 1, h(0.7), SamplerTag::Cholesky, 3).unwrap().with_chunk_size(7);
        let a = s.sample(20);
        let b = s.sample(20);
        assert_eq!(a.values(), b.values());
        // first chunk is a prefix of a longer run with the same chunking
        let c = s.sample(7);
        assert_eq!(&a.values()[..c.values().len()], c.values());
    }

    #[test]
    fn girsanov_zero_control_is_one() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let paths = sample_fbm_cholesky(g, 2, 10, h(0.7), 5).unwrap();
        let w = girsanov_weight(&paths, &ControlVector::zeros(g, 2)).unwrap();
        assert!(w.iter().all(|&x| x == 1.0));
        let other = ControlVector::zeros(TimeGrid::new(1.0, 4).unwrap(), 2);
        assert!(girsanov_weight(&paths, &other).is_err());
    }
}
