//! Vector-field systems `V_1, ..., V_d` on `R^d` and a small catalog.
//!
//! Matrices are row-major `d x d`. `sigma[r * d + i]` is component `r` of
//! `V_i`, so the fields are the columns of `sigma`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// `d` smooth vector fields on `R^d`, optionally with a drift `b(eps, x)`.
pub trait VectorFieldSystem: Send + Sync {
    fn dim(&self) -> usize;

    /// Fill `out` (row-major `d x d`) with `sigma(x) = (V_1(x), ..., V_d(x))`.
    fn sigma_into(&self, x: &[f64], out: &mut [f64]);

    /// Fill `out` with all Jacobians: `out[(i * d + r) * d + c] = d V_i^r / d x_c`.
    ///
    /// Central differences with step `1e-5 (1 + |x|)` unless overridden.
    fn jacobians_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let h = 1e-5 * (1.0 + norm(x));
        let mut xp = x.to_vec();
        let mut sp = vec![0.0; d * d];
        let mut sm = vec![0.0; d * d];
        for c in 0..d {
            xp[c] = x[c] + h;
            self.sigma_into(&xp, &mut sp);
            xp[c] = x[c] - h;
            self.sigma_into(&xp, &mut sm);
            xp[c] = x[c];
            for i in 0..d {
                for r in 0..d {
                    out[(i * d + r) * d + c] = (sp[r * d + i] - sm[r * d + i]) / (2.0 * h);
                }
            }
        }
    }

    /// `out[i * d + r] = sum_{a,b} d^2 V_i^r / dx_a dx_b v_a v_b`.
    fn second_directional_into(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let vn = norm(v);
        if vn == 0.0 {
            out[..d * d].iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        // difference the Jacobians along v: one order of differencing fewer
        let h = 1e-4 * (1.0 + norm(x)) / vn;
        let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
        let mut jp = vec![0.0; d * d * d];
        let mut jm = vec![0.0; d * d * d];
        self.jacobians_into(&xp, &mut jp);
        self.jacobians_into(&xm, &mut jm);
        for i in 0..d {
            for r in 0..d {
                let mut s = 0.0;
                for c in 0..d {
                    s += (jp[(i * d + r) * d + c] - jm[(i * d + r) * d + c]) * v[c];
                }
                out[i * d + r] = s / (2.0 * h);
            }
        }
    }

    /// Whether `drift_into` can be non-zero.
    fn has_drift(&self) -> bool {
        false
    }

    fn drift_into(&self, _eps: f64, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    /// Structure constants, when known in closed form and constant in `x`.
    fn structure_constants(&self) -> Option<StructureConstants> {
        None
    }

    fn name(&self) -> String;

    fn sigma(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut s = vec![0.0; d * d];
        self.sigma_into(x, &mut s);
        s
    }

    fn field(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let s = self.sigma(x);
        (0..d).map(|r| s[r * d + i]).collect()
    }

    fn jacobians(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut j = vec![0.0; d * d * d];
        self.jacobians_into(x, &mut j);
        j
    }
}

pub type SharedFields = Arc<dyn VectorFieldSystem>;

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Constant structure constants, `omega[(i * d + j) * d + l] = omega^l_{ij}`, so that
/// `[V_i, V_j] = sum_l omega^l_{ij} V_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureConstants {
    dim: usize,
    omega: Vec<f64>,
}

impl StructureConstants {
    pub fn new(dim: usize, omega: Vec<f64>) -> Result<Self> {
        if omega.len() != dim * dim * dim {
            return invalid(format!("structure table needs {} entries", dim * dim * dim));
        }
        if omega.iter().any(|v| !v.is_finite()) {
            return invalid("structure constants must be finite");
        }
        let s = StructureConstants { dim, omega };
        for i in 0..dim {
            for j in 0..dim {
                for l in 0..dim {
                    if (s.get(i, j, l) + s.get(j, i, l)).abs() > 1e-12 {
                        return invalid("structure constants must be antisymmetric in (i, j)");
                    }
                }
            }
        }
        Ok(s)
    }

    pub fn zeros(dim: usize) -> Self {
        StructureConstants { dim, omega: vec![0.0; dim * dim * dim] }
    }

    /// `omega^l_{ij} = epsilon_{ijl}` in three dimensions.
    pub fn levi_civita() -> Self {
        let mut omega = vec![0.0; 27];
        for (i, j, l, s) in [(0, 1, 2, 1.0), (1, 2, 0, 1.0), (2, 0, 1, 1.0), (1, 0, 2, -1.0), (2, 1, 0, -1.0), (0, 2, 1, -1.0)] {
            omega[(i * 3 + j) * 3 + l] = s;
        }
        StructureConstants { dim: 3, omega }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.omega[(i * self.dim + j) * self.dim + l]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.omega
    }

    pub fn scaled(&self, c: f64) -> Self {
        StructureConstants { dim: self.dim, omega: self.omega.iter().map(|v| v * c).collect() }
    }

    /// Relabel coordinates: the new index `a` is the old index `perm[a]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.dim;
        let mut omega = vec![0.0; d * d * d];
        for i in 0..d {
            for j in 0..d {
                for l in 0..d {
                    omega[(i * d + j) * d + l] = self.get(perm[i], perm[j], perm[l]);
                }
            }
        }
        StructureConstants { dim: d, omega }
    }

    /// `max |omega^l_{ij} + omega^j_{il}|`.
    pub fn antisymmetry_defect(&self) -> f64 {
        let d = self.dim;
        let mut m: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                for l in 0..d {
                    m = m.max((self.get(i, j, l) + self.get(i, l, j)).abs());
                }
            }
        }
        m
    }

    pub fn is_zero(&self) -> bool {
        self.omega.iter().all(|&v| v == 0.0)
    }
}

/// Constant fields: `sigma(x) = S` for a fixed invertible matrix.
#[derive(Debug, Clone)]
pub struct ConstantFrame {
    dim: usize,
    sigma: Vec<f64>,
}

impl ConstantFrame {
    pub fn orthonormal(dim: usize) -> Self {
        let mut sigma = vec![0.0; dim * dim];
        for i in 0..dim {
            sigma[i * dim + i] = 1.0;
        }
        ConstantFrame { dim, sigma }
    }

    /// `sigma` row-major; column `i` is `V_i`.
    pub fn new(dim: usize, sigma: Vec<f64>) -> Result<Self> {
        if dim == 0 || sigma.len() != dim * dim || sigma.iter().any(|v| !v.is_finite()) {
            return invalid("constant frame needs a finite d x d matrix");
        }
        Ok(ConstantFrame { dim, sigma })
    }

    pub fn matrix(&self) -> &[f64] {
        &self.sigma
    }
}

impl VectorFieldSystem for ConstantFrame {
    fn dim(&self) -> usize {
        self.dim
    }
    fn sigma_into(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.sigma);
    }
    fn jacobians_into(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn second_directional_into(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn structure_constants(&self) -> Option<StructureConstants> {
        Some(StructureConstants::zeros(self.dim))
    }
    fn name(&self) -> String {
        "constant".into()
    }
}

/// Affine fields `V_i(x) = A_i x + c_i`.
#[derive(Debug, Clone)]
pub struct LinearFields {
    dim: usize,
    a: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

impl LinearFields {
    /// `a[i]` is the row-major matrix `A_i`, `c[i]` the offset of field `i`.
    pub fn new(dim: usize, a: Vec<Vec<f64>>, c: Vec<Vec<f64>>) -> Result<Self> {
        if a.len() != dim || c.len() != dim {
            return invalid("linear fields need one matrix and one offset per field");
        }
        if a.iter().any(|m| m.len() != dim * dim) || c.iter().any(|v| v.len() != dim) {
            return invalid("linear field coefficient shapes do not match the dimension");
        }
        if a.iter().chain(&c).flatten().any(|v| !v.is_finite()) {
            return invalid("linear field coefficients must be finite");
        }
        Ok(LinearFields { dim, a, c })
    }

    /// The one-dimensional field `V(x) = x`.
    pub fn identity_1d() -> Self {
        LinearFields { dim: 1, a: vec![vec![1.0]], c: vec![vec![0.0]] }
    }

    pub fn matrix(&self, i: usize) -> &[f64] {
        &self.a[i]
    }
    pub fn offset(&self, i: usize) -> &[f64] {
        &self.c[i]
    }
}

impl VectorFieldSystem for LinearFields {
    fn dim(&self) -> usize {
        self.dim
    }
    fn sigma_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            for r in 0..d {
                let row = &self.a[i][r * d..(r + 1) * d];
                out[r * d + i] = self.c[i][r] + row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
            }
        }
    }
    fn jacobians_into(&self, _x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            out[i * d * d..(i + 1) * d * d].copy_from_slice(&self.a[i]);
        }
    }
    fn second_directional_into(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn name(&self) -> String {
        "linear".into()
    }
}

/// Left-invariant frame of `SO(3)` in Euler coordinates `(a, b, c)` with
/// rotation `R = R_x(a) R_y(b) R_z(c)`:
///
/// ```text
/// V_1 = ( cos c / cos b,  sin c, -tan b cos c)
/// V_2 = (-sin c / cos b,  cos c,  tan b sin c)
/// V_3 = (0, 0, 1)
/// ```
///
/// `[V_i, V_j] = sum_l epsilon_{ijl} V_l` and `det sigma = 1 / cos b`; the
/// fields are smooth and bounded with bounded derivatives for `|b| <= 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct So3Frame;

impl So3Frame {
    /// Rotation matrix `R_x(a) R_y(b) R_z(c)` (row-major 3 x 3).
    pub fn rotation(x: &[f64]) -> [f64; 9] {
        let (sa, ca) = x[0].sin_cos();
        let (sb, cb) = x[1].sin_cos();
        let (sc, cc) = x[2].sin_cos();
        let rx = [1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca];
        let ry = [cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb];
        let rz = [cc, -sc, 0.0, sc, cc, 0.0, 0.0, 0.0, 1.0];
        mat3_mul(&mat3_mul(&rx, &ry), &rz)
    }

    /// Rotation angle of `R(x)^T R(y)`, the bi-invariant distance between the
    /// corresponding rotations.
    pub fn rotation_distance(x: &[f64], y: &[f64]) -> f64 {
        let rx = So3Frame::rotation(x);
        let ry = So3Frame::rotation(y);
        let mut tr = 0.0;
        for i in 0..3 {
            for k in 0..3 {
                tr += rx[k * 3 + i] * ry[k * 3 + i];
            }
        }
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

pub(crate) fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
        }
    }
    c
}

impl VectorFieldSystem for So3Frame {
    fn dim(&self) -> usize {
        3
    }
    fn sigma_into(&self, x: &[f64], out: &mut [f64]) {
        let (sb, cb) = x[1].sin_cos();
        let (sc, cc) = x[2].sin_cos();
        let tb = sb / cb;
        // columns V_1, V_2, V_3
        out[0] = cc / cb;
        out[1] = -sc / cb;
        out[2] = 0.0;
        out[3] = sc;
        out[4] = cc;
        out[5] = 0.0;
        out[6] = -tb * cc;
        out[7] = tb * sc;
        out[8] = 1.0;
    }
    fn jacobians_into(&self, x: &[f64], out: &mut [f64]) {
        let (sb, cb) = x[1].sin_cos();
        let (sc, cc) = x[2].sin_cos();
        let tb = sb / cb;
        let sec2 = 1.0 / (cb * cb);
        out.iter_mut().for_each(|o| *o = 0.0);
        // V_1: rows r, columns (a, b, c)
        out[1] = cc * sb * sec2;
        out[2] = -sc / cb;
        out[5] = cc;
        out[7] = -cc * sec2;
        out[8] = tb * sc;
        // V_2
        out[9 + 1] = -sc * sb * sec2;
        out[9 + 2] = -cc / cb;
        out[9 + 5] = -sc;
        out[9 + 7] = sc * sec2;
        out[9 + 8] = tb * cc;
    }
    fn structure_constants(&self) -> Option<StructureConstants> {
        Some(StructureConstants::levi_civita())
    }
    fn name(&self) -> String {
        "so3-frame".into()
    }
}

type DriftFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Wraps a field system with a drift `b(eps, x)`.
pub struct Drifted {
    inner: SharedFields,
    drift: Box<DriftFn>,
}

impl Drifted {
    pub fn new(inner: SharedFields, drift: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Drifted { inner, drift: Box::new(drift) }
    }
}

impl VectorFieldSystem for Drifted {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn sigma_into(&self, x: &[f64], out: &mut [f64]) {
        self.inner.sigma_into(x, out)
    }
    fn jacobians_into(&self, x: &[f64], out: &mut [f64]) {
        self.inner.jacobians_into(x, out)
    }
    fn second_directional_into(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.inner.second_directional_into(x, v, out)
    }
    fn has_drift(&self) -> bool {
        true
    }
    fn drift_into(&self, eps: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(eps, x, out)
    }
    fn structure_constants(&self) -> Option<StructureConstants> {
        self.inner.structure_constants()
    }
    fn name(&self) -> String {
        format!("{}+drift", self.inner.name())
    }
}

/// Fields given by a closure returning `sigma(x)`; derivatives by finite differences.
pub struct FnFields<F> {
    dim: usize,
    f: F,
    label: String,
}

impl<F: Fn(&[f64], &mut [f64]) + Send + Sync> FnFields<F> {
    pub fn new(dim: usize, label: impl Into<String>, f: F) -> Self {
        FnFields { dim, f, label: label.into() }
    }
}

impl<F: Fn(&[f64], &mut [f64]) + Send + Sync> VectorFieldSystem for FnFields<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn sigma_into(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
    fn name(&self) -> String {
        self.label.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn so3_analytic_jacobian_matches_differences() {
        let f = So3Frame;
        let fd = FnFields::new(3, "fd", |x: &[f64], out: &mut [f64]| So3Frame.sigma_into(x, out));
        for x in [[0.1, 0.3, -0.7], [1.2, -0.8, 2.0], [0.0, 0.0, 0.0]] {
            let a = f.jacobians(&x);
            let b = fd.jacobians(&x);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-8, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn so3_rotation_is_orthogonal() {
        let r = So3Frame::rotation(&[0.3, -0.5, 1.1]);
        let mut rtr = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rtr[i * 3 + j] = (0..3).map(|k| r[k * 3 + i] * r[k * 3 + j]).sum();
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((rtr[i * 3 + j] - e).abs() < 1e-14);
            }
        }
        assert!(So3Frame::rotation_distance(&[0.3, -0.5, 1.1], &[0.3, -0.5, 1.1]) < 1e-7);
    }

    #[test]
    fn levi_civita_antisymmetry() {
        let w = StructureConstants::levi_civita();
        assert_eq!(w.antisymmetry_defect(), 0.0);
        assert!(StructureConstants::new(3, w.as_slice().to_vec()).is_ok());
        let mut bad = vec![0.0; 8];
        bad[1] = 1.0;
        assert!(StructureConstants::new(2, bad).is_err());
        let p = w.permuted(&[1, 0, 2]);
        assert_eq!(p.get(0, 1, 2), -1.0);
    }

    #[test]
    fn second_directional_of_linear_is_zero_and_so3_is_consistent() {
        let f = So3Frame;
        let x = [0.2, 0.4, -0.3];
        let v = [0.5, -1.0, 0.7];
        let mut out = vec![0.0; 9];
        f.second_directional_into(&x, &v, &mut out);
        // compare with a plain second difference of sigma along v
        let h = 1e-3;
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let (sp, s0, sm) = (f.sigma(&xp), f.sigma(&x), f.sigma(&xm));
        for i in 0..3 {
            for r in 0..3 {
                let dd = (sp[r * 3 + i] - 2.0 * s0[r * 3 + i] + sm[r * 3 + i]) / (h * h);
                assert!((out[i * 3 + r] - dd).abs() < 1e-5);
            }
        }
    }
}
