//! Experiment configuration: TOML with one level of sections, unknown keys rejected.

use std::sync::Arc;

use fbmheat::density::{DensityOptions, Estimator, Kernel, QhMethod};
use fbmheat::fbm::{Hurst, SamplerTag, TimeGrid};
use fbmheat::fields::{ConstantFrame, LinearFields, SharedFields, So3Frame, StructureConstants};
use fbmheat::geometry::WorkingBox;
use serde::Deserialize;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<fbmheat::Error> for ConfigError {
    fn from(e: fbmheat::Error) -> Self {
        ConfigError(e.to_string())
    }
}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub run: RunSection,
    pub fields: Option<FieldsSection>,
    #[serde(default)]
    pub fbm: FbmSection,
    #[serde(default)]
    pub points: PointsSection,
    #[serde(rename = "box")]
    pub working_box: Option<BoxSection>,
    #[serde(default)]
    pub density: DensitySection,
    #[serde(default)]
    pub expand: ExpandSection,
    #[serde(default)]
    pub qh: QhSection,
    #[serde(default)]
    pub girsanov: GirsanovSection,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldsSection {
    /// `orthonormal`, `constant`, `linear-1d`, `so3-frame` or `linear`.
    pub catalog: String,
    pub dim: Option<usize>,
    /// Row-major `d x d` for `constant`.
    pub sigma: Option<Vec<f64>>,
    /// Per-field `d x d` matrices for `linear`, row-major.
    pub a: Option<Vec<Vec<f64>>>,
    pub c: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbmSection {
    pub hurst: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub dim: Option<usize>,
    pub sampler: SamplerTag,
    pub chunk_size: Option<usize>,
    pub binary: bool,
}

impl Default for FbmSection {
    fn default() -> Self {
        FbmSection { hurst: 0.7, horizon: 1.0, n_steps: 64, n_paths: 1000, dim: None, sampler: SamplerTag::Cholesky, chunk_size: None, binary: true }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PointsSection {
    pub x: Option<Vec<f64>>,
    pub y: Option<Vec<f64>>,
    /// Extra evaluation points for `density`.
    pub eval: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(default = "default_lattice")]
    pub lattice: usize,
}

fn default_lattice() -> usize {
    3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensitySection {
    pub t: Vec<f64>,
    pub estimator: Estimator,
    pub kernel: Kernel,
    pub bandwidth_scale: f64,
    pub control_variate: bool,
    pub bootstrap: usize,
    pub n_steps: usize,
    /// Correction terms in the on-diagonal fit.
    pub terms: usize,
    /// Add the `t^{2H}` column to the off-diagonal regression.
    pub nuisance: bool,
    pub histogram_bins: usize,
}

impl Default for DensitySection {
    fn default() -> Self {
        DensitySection {
            t: vec![1.0, 0.8, 0.6, 0.45, 0.3],
            estimator: Estimator::Kde,
            kernel: Kernel::Gaussian,
            bandwidth_scale: 1.0,
            control_variate: false,
            bootstrap: 200,
            n_steps: 64,
            terms: 1,
            nuisance: false,
            histogram_bins: 10,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpandSection {
    pub orders: Vec<usize>,
    pub amplitudes: Vec<f64>,
    pub n_steps: usize,
    /// Words (one-based letters, e.g. "1,2") whose `Lambda` statistics are reported.
    pub words: Vec<String>,
}

impl Default for ExpandSection {
    fn default() -> Self {
        ExpandSection { orders: vec![1, 2, 3], amplitudes: vec![0.4, 0.2, 0.1, 0.05], n_steps: 1024, words: vec![] }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QhSection {
    /// `levi-civita`, `zero`, or explicit `d^3` values in `omega_values`.
    pub omega: String,
    pub omega_values: Option<Vec<f64>>,
    pub dim: Option<usize>,
    pub scale: f64,
    pub methods: Vec<QhMethod>,
    pub t: Option<Vec<f64>>,
    pub n_steps: usize,
}

impl Default for QhSection {
    fn default() -> Self {
        QhSection { omega: "levi-civita".into(), omega_values: None, dim: None, scale: 1.0, methods: vec![QhMethod::Fit, QhMethod::Quadrature], t: None, n_steps: 256 }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GirsanovSection {
    /// Constant control value per coordinate.
    pub phi: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        Hurst::new(self.fbm.hurst)?;
        TimeGrid::new(self.fbm.horizon, self.fbm.n_steps)?;
        if self.fbm.n_paths == 0 {
            return err("fbm.n_paths must be positive");
        }
        if let Some(f) = &self.fields {
            let fields = self.build_fields(f)?;
            let d = fields.dim();
            for (name, p) in [("points.x", &self.points.x), ("points.y", &self.points.y)] {
                if let Some(p) = p {
                    if p.len() != d {
                        return err(format!("{name} has {} coordinates, fields have dimension {d}", p.len()));
                    }
                }
            }
            if let Some(b) = &self.working_box {
                if b.lo.len() != d || b.hi.len() != d {
                    return err("box dimension does not match the fields");
                }
            }
        }
        if let Some(b) = &self.working_box {
            WorkingBox::new(b.lo.clone(), b.hi.clone())?;
        }
        if self.density.t.iter().any(|t| !(*t > 0.0)) {
            return err("density.t must be positive");
        }
        if self.density.terms > 2 {
            return err("density.terms must be 0, 1 or 2");
        }
        if self.expand.orders.iter().any(|o| !(1..=3).contains(o)) {
            return err("expand.orders must lie in 1..=3");
        }
        Ok(())
    }

    pub fn hurst(&self) -> Hurst {
        Hurst::new(self.fbm.hurst).expect("validated")
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.fbm.horizon, self.fbm.n_steps).expect("validated")
    }

    fn build_fields(&self, f: &FieldsSection) -> Result<SharedFields, ConfigError> {
        let fields: SharedFields = match f.catalog.as_str() {
            "orthonormal" => Arc::new(ConstantFrame::orthonormal(f.dim.unwrap_or(2))),
            "constant" => {
                let Some(s) = &f.sigma else { return err("fields.sigma is required for the constant catalog entry") };
                let d = (s.len() as f64).sqrt().round() as usize;
                Arc::new(ConstantFrame::new(f.dim.unwrap_or(d), s.clone())?)
            }
            "linear-1d" => Arc::new(LinearFields::identity_1d()),
            "so3-frame" => Arc::new(So3Frame),
            "linear" => {
                let (Some(a), Some(d)) = (&f.a, f.dim) else { return err("fields.a and fields.dim are required for linear fields") };
                let c = f.c.clone().unwrap_or_else(|| vec![vec![0.0; d]; a.len()]);
                Arc::new(LinearFields::new(d, a.clone(), c)?)
            }
            other => return err(format!("unknown fields.catalog {other:?}")),
        };
        Ok(fields)
    }

    pub fn fields(&self) -> Result<SharedFields, ConfigError> {
        match &self.fields {
            Some(f) => self.build_fields(f),
            None => err("this subcommand needs a [fields] section"),
        }
    }

    pub fn x(&self, d: usize) -> Vec<f64> {
        self.points.x.clone().unwrap_or_else(|| vec![0.0; d])
    }

    pub fn y(&self) -> Result<Vec<f64>, ConfigError> {
        self.points.y.clone().ok_or_else(|| ConfigError("points.y is required".into()))
    }

    pub fn working_box(&self) -> Option<WorkingBox> {
        self.working_box.as_ref().map(|b| WorkingBox::new(b.lo.clone(), b.hi.clone()).expect("validated"))
    }

    pub fn density_options(&self) -> DensityOptions {
        let d = &self.density;
        DensityOptions {
            estimator: d.estimator,
            kernel: d.kernel,
            bandwidth_scale: d.bandwidth_scale,
            control_variate: d.control_variate,
            bootstrap: d.bootstrap,
            n_steps: d.n_steps,
            sampler: self.fbm.sampler,
            ..DensityOptions::new(self.hurst())
        }
    }

    pub fn omega(&self) -> Result<StructureConstants, ConfigError> {
        let q = &self.qh;
        let base = match q.omega.as_str() {
            "levi-civita" => StructureConstants::levi_civita(),
            "zero" => StructureConstants::zeros(q.dim.unwrap_or(3)),
            "values" => {
                let Some(v) = &q.omega_values else { return err("qh.omega_values is required for omega = \"values\"") };
                let d = (v.len() as f64).cbrt().round() as usize;
                StructureConstants::new(d, v.clone())?
            }
            other => return err(format!("unknown qh.omega {other:?}")),
        };
        Ok(base.scaled(q.scale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let c = ExperimentConfig::parse("[fbm]\nhurst = 0.7\nn_steps = 64\nn_paths = 1000\ndim = 1\n").unwrap();
        assert_eq!(c.fbm.n_paths, 1000);
        assert_eq!(c.fbm.horizon, 1.0);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_hurst() {
        assert!(ExperimentConfig::parse("[fbm]\nhurst = 0.7\ncolour = 1\n").unwrap_err().0.contains("colour"));
        assert!(ExperimentConfig::parse("[fbm]\nhurst = 0.4\n").unwrap_err().0.contains("(1/2, 1)"));
        assert!(ExperimentConfig::parse("[extra]\nx = 1\n").is_err());
    }

    #[test]
    fn point_dimension_checked_at_parse_time() {
        let e = ExperimentConfig::parse("[fields]\ncatalog = \"so3-frame\"\n[points]\nx = [0.0, 0.0]\n").unwrap_err();
        assert!(e.0.contains("points.x"));
    }
}
