//! Python module `pyfbmheat`.

use std::path::PathBuf;
use std::sync::Arc;

use fbmheat::density::{self, DensityOptions, Kernel, QhMethod, QhOptions};
use fbmheat::fbm::{self, FbmPathSet, FbmSampler, Hurst, SamplerTag, TimeGrid};
use fbmheat::fields::{ConstantFrame, LinearFields, SharedFields, So3Frame, StructureConstants};
use fbmheat::laplace::{self, RateProblem};
use fbmheat::lie::{self, Word};
use fbmheat::{geometry, io};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: fbmheat::Error) -> PyErr {
    if e.is_input_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn hurst(h: f64) -> PyResult<Hurst> {
    Hurst::new(h).map_err(to_py)
}

fn sampler_tag(s: &str) -> PyResult<SamplerTag> {
    match s {
        "cholesky" => Ok(SamplerTag::Cholesky),
        "volterra" => Ok(SamplerTag::Volterra),
        _ => Err(PyValueError::new_err(format!("unknown sampler {s:?}"))),
    }
}

/// Serialises a result through JSON into plain Python objects.
fn to_object<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (s,))?.unbind())
}

/// A batch of fBm paths on a uniform grid.
#[pyclass(name = "FbmPaths", frozen)]
struct PyFbmPaths {
    inner: FbmPathSet,
}

#[pymethods]
impl PyFbmPaths {
    #[staticmethod]
    #[pyo3(signature = (n_steps, n_paths, dim=1, hurst=0.7, horizon=1.0, seed=0, sampler="cholesky"))]
    fn sample(n_steps: usize, n_paths: usize, dim: usize, hurst: f64, horizon: f64, seed: u64, sampler: &str) -> PyResult<Self> {
        let grid = TimeGrid::new(horizon, n_steps).map_err(to_py)?;
        let s = FbmSampler::new(grid, dim, self::hurst(hurst)?, sampler_tag(sampler)?, seed).map_err(to_py)?;
        Ok(PyFbmPaths { inner: s.sample(n_paths) })
    }

    #[staticmethod]
    fn read_fbm1(path: PathBuf) -> PyResult<Self> {
        let f = std::fs::File::open(path)?;
        Ok(PyFbmPaths { inner: io::read_fbm1(std::io::BufReader::new(f)).map_err(to_py)? })
    }

    fn write_fbm1(&self, path: PathBuf) -> PyResult<()> {
        io::write_fbm1(&self.inner, std::fs::File::create(path)?).map_err(to_py)
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        io::write_paths_csv(&self.inner, std::fs::File::create(path)?).map_err(to_py)
    }

    #[getter]
    fn n_paths(&self) -> usize {
        self.inner.n_paths()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.grid().points()
    }

    /// Path `p` as a list of points.
    fn path(&self, p: usize) -> PyResult<Vec<Vec<f64>>> {
        if p >= self.inner.n_paths() {
            return Err(PyValueError::new_err("path index out of range"));
        }
        Ok(self.inner.path(p).chunks(self.inner.dim()).map(<[f64]>::to_vec).collect())
    }

    fn endpoints(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_paths()).map(|p| self.inner.endpoint(p).to_vec()).collect()
    }

    fn covariance_check(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_object(py, &fbm::covariance_check(&self.inner))
    }

    /// `Lambda_I(B)_t` per path for a word such as `"1,2"`.
    fn lambda_coefficient(&self, word: &str, t: f64) -> PyResult<Vec<f64>> {
        let w = Word::parse(word).map_err(to_py)?;
        lie::lambda_coefficient(&self.inner, &w, t).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("FbmPaths(n_paths={}, dim={}, n_steps={})", self.inner.n_paths(), self.inner.dim(), self.inner.grid().n_steps())
    }
}

/// A vector-field system from the built-in catalog.
#[pyclass(name = "Fields", frozen)]
struct PyFields {
    inner: SharedFields,
}

#[pymethods]
impl PyFields {
    #[staticmethod]
    fn orthonormal(dim: usize) -> Self {
        PyFields { inner: Arc::new(ConstantFrame::orthonormal(dim)) }
    }

    /// Constant fields with `sigma` given as rows.
    #[staticmethod]
    fn constant(sigma: Vec<Vec<f64>>) -> PyResult<Self> {
        let d = sigma.len();
        let flat: Vec<f64> = sigma.into_iter().flatten().collect();
        Ok(PyFields { inner: Arc::new(ConstantFrame::new(d, flat).map_err(to_py)?) })
    }

    #[staticmethod]
    fn linear_1d() -> Self {
        PyFields { inner: Arc::new(LinearFields::identity_1d()) }
    }

    #[staticmethod]
    fn so3_frame() -> Self {
        PyFields { inner: Arc::new(So3Frame) }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn sigma(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        geometry::sigma_matrix(self.inner.as_ref(), &x).map_err(to_py)
    }

    fn bracket(&self, i: usize, j: usize, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let d = self.inner.dim();
        if i >= d || j >= d || x.len() != d {
            return Err(PyValueError::new_err("index or point dimension out of range"));
        }
        Ok(geometry::lie_bracket(self.inner.as_ref(), i, j, &x))
    }

    fn distance(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        Ok(geometry::distance(self.inner.as_ref(), &x, &y).map_err(to_py)?.distance)
    }

    fn a0_closed_form(&self, x: Vec<f64>) -> PyResult<f64> {
        density::a0_closed_form(self.inner.as_ref(), &x).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Fields({})", self.inner.name())
    }
}

#[pyfunction]
fn covariance(t: f64, s: f64, hurst: f64) -> PyResult<f64> {
    fbm::covariance(t, s, self::hurst(hurst)?).map_err(to_py)
}

/// Minimises the rate functional from `x` to `y` over `[0, horizon]`.
#[pyfunction]
#[pyo3(signature = (fields, x, y, horizon=1.0, n_steps=64, hurst=0.7))]
fn rate_min(py: Python<'_>, fields: &PyFields, x: Vec<f64>, y: Vec<f64>, horizon: f64, n_steps: usize, hurst: f64) -> PyResult<Py<PyAny>> {
    let grid = TimeGrid::new(horizon, n_steps).map_err(to_py)?;
    let prob = RateProblem::target(fields.inner.clone(), x, y, grid, self::hurst(hurst)?);
    let r = py.detach(|| laplace::minimize_rate_endpoint(&prob)).map_err(to_py)?;
    to_object(py, &r)
}

fn kernel(name: &str) -> PyResult<Kernel> {
    match name {
        "gaussian" => Ok(Kernel::Gaussian),
        "gaussian4" => Ok(Kernel::Gaussian4),
        _ => Err(PyValueError::new_err(format!("unknown kernel {name:?}"))),
    }
}

#[pyfunction]
#[pyo3(signature = (fields, x, t, n_paths, points, hurst=0.7, kernel="gaussian", seed=0, n_steps=64))]
#[allow(clippy::too_many_arguments)]
fn mc_density(
    py: Python<'_>,
    fields: &PyFields,
    x: Vec<f64>,
    t: f64,
    n_paths: usize,
    points: Vec<Vec<f64>>,
    hurst: f64,
    kernel: &str,
    seed: u64,
    n_steps: usize,
) -> PyResult<Py<PyAny>> {
    let opts = DensityOptions { kernel: self::kernel(kernel)?, n_steps, ..DensityOptions::new(self::hurst(hurst)?) };
    let f = fields.inner.clone();
    let r = py.detach(move || density::mc_density(f.as_ref(), &x, t, n_paths, &points, &opts, seed)).map_err(to_py)?;
    to_object(py, &r)
}

#[pyfunction]
#[pyo3(signature = (fields, x, t_values, n_paths, terms=1, hurst=0.7, kernel="gaussian4", seed=0))]
#[allow(clippy::too_many_arguments)]
fn ondiag_fit(
    py: Python<'_>,
    fields: &PyFields,
    x: Vec<f64>,
    t_values: Vec<f64>,
    n_paths: usize,
    terms: usize,
    hurst: f64,
    kernel: &str,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let opts = DensityOptions { kernel: self::kernel(kernel)?, ..DensityOptions::new(self::hurst(hurst)?) };
    let f = fields.inner.clone();
    let r = py.detach(move || density::ondiag_fit(f.as_ref(), &x, &t_values, n_paths, terms, seed, &opts)).map_err(to_py)?;
    to_object(py, &r)
}

/// `q_H(scale * omega)` for `omega` in {"levi-civita", "zero"}; returns `(value, stderr)`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (n_paths, omega="levi-civita", scale=1.0, hurst=0.7, method="quadrature", seed=0, n_steps=256))]
fn qh_estimate(py: Python<'_>, n_paths: usize, omega: &str, scale: f64, hurst: f64, method: &str, seed: u64, n_steps: usize) -> PyResult<(f64, f64)> {
    let w = match omega {
        "levi-civita" => StructureConstants::levi_civita(),
        "zero" => StructureConstants::zeros(3),
        _ => return Err(PyValueError::new_err(format!("unknown omega {omega:?}"))),
    }
    .scaled(scale);
    let m = match method {
        "fit" => QhMethod::Fit,
        "quadrature" => QhMethod::Quadrature,
        _ => return Err(PyValueError::new_err(format!("unknown method {method:?}"))),
    };
    let h = self::hurst(hurst)?;
    let o = QhOptions { n_steps, ..QhOptions::default() };
    let r = py.detach(move || density::qh_estimate(&w, h, n_paths, seed, m, &o)).map_err(to_py)?;
    Ok((r.value, r.stderr))
}

#[pymodule]
fn pyfbmheat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFbmPaths>()?;
    m.add_class::<PyFields>()?;
    m.add_function(wrap_pyfunction!(covariance, m)?)?;
    m.add_function(wrap_pyfunction!(rate_min, m)?)?;
    m.add_function(wrap_pyfunction!(mc_density, m)?)?;
    m.add_function(wrap_pyfunction!(ondiag_fit, m)?)?;
    m.add_function(wrap_pyfunction!(qh_estimate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
