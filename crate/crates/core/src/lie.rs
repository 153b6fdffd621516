//! Words, permutation descents, iterated integrals over the simplex, the
//! `Lambda_I` coefficients, nested Lie brackets and the exp-Lie flow.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fbm::{FbmPathSet, TimeGrid};
use crate::fields::VectorFieldSystem;
use crate::geometry::flow_rk4;
use crate::young::{sde_endpoint, Scheme};

pub const MAX_WORD_LEN: usize = 4;
/// RK4 steps for frozen-field flows.
pub const FLOW_STEPS: usize = 256;

/// A word `(i_1, ..., i_k)` over the field indices, `1 <= k <= 4`.
/// Letters are zero-based; `Display` and `parse` use one-based letters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Word(Vec<usize>);

impl Word {
    pub fn new(letters: Vec<usize>) -> Result<Self> {
        if letters.is_empty() || letters.len() > MAX_WORD_LEN {
            return invalid(format!("word length must be in 1..={MAX_WORD_LEN}"));
        }
        Ok(Word(letters))
    }

    pub fn letters(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.0.iter().any(|&l| l >= d) {
            return invalid(format!("word {self} has a letter beyond dimension {d}"));
        }
        Ok(())
    }

    /// Parse one-based letters such as `"1,2,1"`.
    pub fn parse(s: &str) -> Result<Self> {
        let letters: std::result::Result<Vec<usize>, _> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
        match letters {
            Ok(l) if l.iter().all(|&v| v >= 1) => Word::new(l.into_iter().map(|v| v - 1).collect()),
            _ => invalid(format!("cannot parse word '{s}'")),
        }
    }

    /// Every word of length `k` over `d` letters, in lexicographic order.
    pub fn all(d: usize, k: usize) -> Vec<Word> {
        let mut out = Vec::new();
        let total = d.pow(k as u32);
        for mut c in 0..total {
            let mut l = vec![0; k];
            for slot in l.iter_mut().rev() {
                *slot = c % d;
                c /= d;
            }
            out.push(Word(l));
        }
        out
    }

    /// All words of length `1..=n`.
    pub fn up_to(d: usize, n: usize) -> Vec<Word> {
        (1..=n).flat_map(|k| Word::all(d, k)).collect()
    }

    /// `(i_{sigma^{-1}(1)}, ..., i_{sigma^{-1}(k)})` for `sigma` given as images of `0..k`.
    pub fn permuted(&self, sigma: &[usize]) -> Word {
        let mut out = vec![0; self.len()];
        for (j, &s) in sigma.iter().enumerate() {
            out[s] = self.0[j];
        }
        Word(out)
    }
}

impl TryFrom<Vec<usize>> for Word {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Word::new(v)
    }
}

impl From<Word> for Vec<usize> {
    fn from(w: Word) -> Self {
        w.0
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.0.iter().map(|l| (l + 1).to_string()).collect();
        write!(f, "({})", s.join(","))
    }
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut cur: Vec<usize> = (0..k).collect();
    let mut out = vec![cur.clone()];
    while let Some(i) = (1..k).rev().find(|&i| cur[i - 1] < cur[i]) {
        let j = (i..k).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
        cur.swap(i - 1, j);
        cur[i..].reverse();
        out.push(cur.clone());
    }
    out
}

/// Number of descents `#{j : sigma(j) > sigma(j+1)}`.
pub fn descent_count(sigma: &[usize]) -> usize {
    sigma.windows(2).filter(|w| w[0] > w[1]).count()
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `(-1)^e / (k^2 C(k-1, e))` with `e` the descent count.
pub fn lambda_weight(sigma: &[usize]) -> f64 {
    let k = sigma.len();
    let e = descent_count(sigma);
    let sign = if e.is_multiple_of(2) { 1.0 } else { -1.0 };
    sign / ((k * k) as f64 * binomial(k - 1, e))
}

/// Iterated integral `int_{Delta^k[0, t_n]} dx^I` of the piecewise-linear path
/// through `path[0..=n]` (flat `(N + 1) x d`), by Chen's identity.
pub fn signature_word(path: &[f64], dim: usize, word: &Word, n: usize) -> f64 {
    let w = word.letters();
    let k = w.len();
    let mut p = [0.0; MAX_WORD_LEN + 1];
    p[0] = 1.0;
    let mut seg = [0.0; MAX_WORD_LEN + 1];
    for i in 0..n {
        // seg[a][m]: segment signature of the subword w[a..m]
        let inc = |l: usize| path[(i + 1) * dim + w[l]] - path[i * dim + w[l]];
        for m in (1..=k).rev() {
            let mut acc = 0.0;
            // product of increments w[a..m] / (m - a)!
            let mut prod = 1.0;
            for a in (0..m).rev() {
                prod *= inc(a) / (m - a) as f64;
                seg[a] = prod;
            }
            for a in 0..m {
                acc += p[a] * seg[a];
            }
            p[m] += acc;
        }
    }
    p[k]
}

fn grid_index(paths: &FbmPathSet, t: f64) -> Result<usize> {
    paths
        .grid()
        .index_of(t)
        .ok_or_else(|| Error::InvalidParameter(format!("t = {t} is not a grid point")))
}

/// `int_{Delta^k[0,t]} dB^I` per path.
pub fn iterated_integral(paths: &FbmPathSet, word: &Word, t: f64) -> Result<Vec<f64>> {
    word.check_dim(paths.dim())?;
    let n = grid_index(paths, t)?;
    let d = paths.dim();
    Ok((0..paths.n_paths()).into_par_iter().map(|p| signature_word(paths.path(p), d, word, n)).collect())
}

/// Per-path iterated integrals and the largest change between the grid and
/// its two-fold coarsening, a proxy for the integration error.
pub fn iterated_integral_refinement(paths: &FbmPathSet, word: &Word, t: f64) -> Result<(Vec<f64>, f64)> {
    let fine = iterated_integral(paths, word, t)?;
    let n = grid_index(paths, t)?;
    if n % 2 != 0 {
        return invalid("refinement check needs an even number of steps up to t");
    }
    let d = paths.dim();
    let gap = (0..paths.n_paths())
        .into_par_iter()
        .map(|p| {
            let coarse: Vec<f64> = paths.path(p).chunks_exact(d).step_by(2).flatten().copied().collect();
            (signature_word(&coarse, d, word, n / 2) - fine[p]).abs()
        })
        .reduce(|| 0.0, f64::max);
    Ok((fine, gap))
}

pub(crate) fn lambda_of_path(path: &[f64], d: usize, word: &Word, n: usize, perms: &[(Vec<usize>, f64)]) -> f64 {
    perms.iter().map(|(s, w)| w * signature_word(path, d, &word.permuted(s), n)).sum()
}

pub(crate) fn weighted_perms(k: usize) -> Vec<(Vec<usize>, f64)> {
    permutations(k).into_iter().map(|s| {
        let w = lambda_weight(&s);
        (s, w)
    }).collect()
}

/// `Lambda_I(B)_t` per path.
pub fn lambda_coefficient(paths: &FbmPathSet, word: &Word, t: f64) -> Result<Vec<f64>> {
    word.check_dim(paths.dim())?;
    let n = grid_index(paths, t)?;
    let d = paths.dim();
    let perms = weighted_perms(word.len());
    Ok((0..paths.n_paths()).into_par_iter().map(|p| lambda_of_path(paths.path(p), d, word, n, &perms)).collect())
}

/// Nested bracket `V_I = [V_{i_1}, [V_{i_2}, ..., [V_{i_{k-1}}, V_{i_k}]]]` at `x`,
/// with `[V, W] = DW V - DV W`. The innermost bracket uses the field Jacobians;
/// outer levels differentiate by central differences with steps widening tenfold.
pub fn lie_bracket_field(fields: &dyn VectorFieldSystem, word: &Word, x: &[f64]) -> Result<Vec<f64>> {
    word.check_dim(fields.dim())?;
    if x.len() != fields.dim() {
        return invalid("point does not match the field dimension");
    }
    Ok(bracket_rec(fields, word.letters(), x))
}

fn bracket_rec(fields: &dyn VectorFieldSystem, w: &[usize], x: &[f64]) -> Vec<f64> {
    let d = fields.dim();
    match w.len() {
        1 => fields.field(w[0], x),
        2 => crate::geometry::lie_bracket(fields, w[0], w[1], x),
        m => {
            let v = fields.field(w[0], x);
            let inner = |y: &[f64]| bracket_rec(fields, &w[1..], y);
            // D(inner) v by a central difference along v
            let vn = crate::fields::norm(&v);
            let wx = inner(x);
            let mut dwv = vec![0.0; d];
            if vn > 0.0 {
                let h = 1e-5 * 10f64.powi(m as i32 - 3) * (1.0 + crate::fields::norm(x)) / vn;
                let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
                let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
                let (wp, wm) = (inner(&xp), inner(&xm));
                for r in 0..d {
                    dwv[r] = (wp[r] - wm[r]) / (2.0 * h);
                }
            }
            let mut jac = vec![0.0; d * d * d];
            fields.jacobians_into(x, &mut jac);
            let i = w[0];
            (0..d)
                .map(|r| dwv[r] - (0..d).map(|c| jac[(i * d + r) * d + c] * wx[c]).sum::<f64>())
                .collect()
        }
    }
}

/// One term `Lambda_I V_I(x)` of the exp-Lie expansion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaTerm {
    pub word: Word,
    pub coefficient: f64,
    pub bracket: Vec<f64>,
}

/// `Lambda_I(B)_t V_I(x)` for all words of length `<= n` of the path `path`.
pub fn lambda_terms(fields: &dyn VectorFieldSystem, path: &[f64], t_index: usize, x: &[f64], n: usize) -> Result<Vec<LambdaTerm>> {
    let d = fields.dim();
    let mut out = Vec::new();
    for k in 1..=n {
        let perms = weighted_perms(k);
        for w in Word::all(d, k) {
            let coefficient = lambda_of_path(path, d, &w, t_index, &perms);
            out.push(LambdaTerm { bracket: lie_bracket_field(fields, &w, x)?, word: w, coefficient });
        }
    }
    Ok(out)
}

/// Time-one flow from `x` of the frozen field `sum_{|I| <= n} Lambda_I(path)_{t} V_I`.
pub fn exp_lie_flow_path(fields: &dyn VectorFieldSystem, path: &[f64], t_index: usize, x: &[f64], n: usize) -> Result<Vec<f64>> {
    let d = fields.dim();
    if !(1..=3).contains(&n) {
        return invalid("exp-Lie order must be 1, 2 or 3");
    }
    let mut coef: Vec<(Word, f64)> = Vec::new();
    for k in 1..=n {
        let perms = weighted_perms(k);
        for w in Word::all(d, k) {
            let c = lambda_of_path(path, d, &w, t_index, &perms);
            if c != 0.0 {
                coef.push((w, c));
            }
        }
    }
    let field = |y: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (w, c) in &coef {
            let b = bracket_rec(fields, w.letters(), y);
            for r in 0..d {
                out[r] += c * b[r];
            }
        }
    };
    flow_rk4(field, x, FLOW_STEPS)
}

/// Exp-Lie approximation of `X_t^x` for every path.
pub fn exp_lie_flow(fields: &dyn VectorFieldSystem, paths: &FbmPathSet, x: &[f64], t: f64, n: usize) -> Result<Vec<Vec<f64>>> {
    if paths.dim() != fields.dim() || x.len() != fields.dim() {
        return invalid("paths, point and fields must share the dimension");
    }
    let idx = grid_index(paths, t)?;
    (0..paths.n_paths()).into_par_iter().map(|p| exp_lie_flow_path(fields, paths.path(p), idx, x, n)).collect()
}

/// Error of the order-`n` exp-Lie flow against the solution along a smooth driver
/// scaled by each amplitude.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderProbe {
    pub order: usize,
    pub amplitudes: Vec<f64>,
    pub errors: Vec<f64>,
    /// Least-squares slope of `log error` against `log amplitude`; `n + 1` in theory.
    pub slope: f64,
}

/// Smooth test driver on `[0, 1]` used by the order probe.
pub fn probe_driver(s: f64) -> [f64; 3] {
    [(2.0 * s).sin(), 1.0 - (3.0 * s).cos(), s * s]
}

/// Runs the order probe on `[0, 1]` with `n_steps` grid steps; the reference
/// solution is the Heun scheme on the same grid.
pub fn exp_lie_order_probe(
    fields: &dyn VectorFieldSystem,
    x: &[f64],
    driver: &dyn Fn(f64) -> Vec<f64>,
    amplitudes: &[f64],
    n_steps: usize,
    order: usize,
) -> Result<OrderProbe> {
    let d = fields.dim();
    if amplitudes.len() < 2 || amplitudes.iter().any(|a| !(*a > 0.0)) {
        return invalid("need at least two positive amplitudes");
    }
    let grid = TimeGrid::new(1.0, n_steps)?;
    let base: Vec<f64> = grid.points().iter().flat_map(|&s| driver(s)).collect();
    if base.len() != (n_steps + 1) * d {
        return invalid("driver dimension does not match the fields");
    }
    let mut errors = Vec::with_capacity(amplitudes.len());
    for &a in amplitudes {
        // shifted to start at the origin
        let path: Vec<f64> = base.iter().enumerate().map(|(i, v)| a * (v - base[i % d])).collect();
        let (exact, st) = sde_endpoint(fields, Scheme::Heun, &grid, &path, x, 1.0);
        if !st.is_ok() {
            return Err(Error::NonConvergent("reference solution failed".into()));
        }
        let approx = exp_lie_flow_path(fields, &path, n_steps, x, order)?;
        errors.push(approx.iter().zip(&exact).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt());
    }
    let lx: Vec<f64> = amplitudes.iter().map(|a| a.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.max(1e-300).ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Ok(OrderProbe { order, amplitudes: amplitudes.to_vec(), errors, slope: sxy / sxx })
}

/// `(V_{i_1} ... V_{i_m} f)(x)` as the mixed derivative `d^m/ds_1...ds_m` at zero of
/// `f(y_m)`, `y_j = y_{j-1} + s_j V_{i_j}(y_{j-1})`, `y_0 = x`. Central stencil on
/// `2^m` points with one Richardson step in the width.
pub fn differential_operator(fields: &dyn VectorFieldSystem, f: &dyn Fn(&[f64]) -> f64, word: &Word, x: &[f64]) -> Result<f64> {
    word.check_dim(fields.dim())?;
    let m = word.len();
    let base = match m {
        1 => 1e-5,
        2 => 1e-4,
        3 => 1e-3,
        _ => 1e-2,
    };
    let stencil = |h: f64| -> f64 {
        let mut acc = 0.0;
        for mask in 0..(1usize << m) {
            let mut y = x.to_vec();
            let mut sign = 1.0;
            for (j, &i) in word.letters().iter().enumerate() {
                let s = if mask >> j & 1 == 1 { h } else { sign = -sign; -h };
                let v = fields.field(i, &y);
                for r in 0..y.len() {
                    y[r] += s * v[r];
                }
            }
            acc += sign * f(&y);
        }
        acc / (2.0 * h).powi(m as i32)
    };
    let (a, b) = (stencil(base), stencil(2.0 * base));
    Ok((4.0 * a - b) / 3.0)
}

/// Monte Carlo mean and standard error of a per-path sample.
pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionTerm {
    pub k: usize,
    /// Exponent `2 k H` of `t`.
    pub power: f64,
    pub coefficient: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanExpansion {
    pub f_at_x: f64,
    pub terms: Vec<ExpansionTerm>,
}

impl MeanExpansion {
    /// `f(x) + sum_k c_k t^{2kH}`.
    pub fn evaluate(&self, t: f64) -> f64 {
        self.f_at_x + self.terms.iter().map(|c| c.coefficient * t.powf(c.power)).sum::<f64>()
    }
}

/// Coefficients of `E f(X_t^x) = f(x) + sum_{k<=n} c_k t^{2kH} + ...`, with
/// `c_k = sum_{|I| = 2k} (V_I f)(x) E int_{Delta^{2k}[0,1]} dB^I`; the paths must
/// live on `[0, 1]`.
pub fn mean_expansion(
    fields: &dyn VectorFieldSystem,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    x: &[f64],
    n: usize,
    paths: &FbmPathSet,
) -> Result<MeanExpansion> {
    if !(1..=2).contains(&n) {
        return invalid("expansion order must be 1 or 2");
    }
    if paths.dim() != fields.dim() || x.len() != fields.dim() {
        return invalid("paths, point and fields must share the dimension");
    }
    let last = grid_index(paths, 1.0)?;
    let d = fields.dim();
    let h = paths.hurst().value();
    let mut terms = Vec::new();
    for k in 1..=n {
        let words = Word::all(d, 2 * k);
        let ops: Vec<f64> = words.iter().map(|w| differential_operator(fields, f, w, x)).collect::<Result<_>>()?;
        let active: Vec<(usize, f64)> = ops.iter().copied().enumerate().filter(|(_, c)| *c != 0.0).collect();
        let per: Vec<f64> = (0..paths.n_paths())
            .into_par_iter()
            .map(|p| active.iter().map(|&(i, c)| c * signature_word(paths.path(p), d, &words[i], last)).sum())
            .collect();
        let (coefficient, stderr) = mean_and_se(&per);
        terms.push(ExpansionTerm { k, power: 2.0 * k as f64 * h, coefficient, stderr });
    }
    Ok(MeanExpansion { f_at_x: f(x), terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{sample_fbm_cholesky, Hurst, SamplerTag, TimeGrid};
    use crate::fields::{ConstantFrame, LinearFields, So3Frame};

    #[test]
    fn descents_small_cases() {
        assert_eq!(descent_count(&[0, 1, 2, 3]), 0);
        assert_eq!(descent_count(&[3, 2, 1, 0]), 3);
        let counts: Vec<usize> = permutations(3).iter().map(|s| descent_count(s)).collect();
        assert_eq!(counts.iter().filter(|&&e| e == 0).count(), 1);
        assert_eq!(counts.iter().filter(|&&e| e == 1).count(), 4);
        assert_eq!(counts.iter().filter(|&&e| e == 2).count(), 1);
    }

    #[test]
    fn permuted_word_inverts_sigma() {
        let w = Word::new(vec![0, 1, 2]).unwrap();
        // sigma: 0->1, 1->2, 2->0, so position 1 receives letter 0
        assert_eq!(w.permuted(&[1, 2, 0]).letters(), &[2, 0, 1]);
    }

    #[test]
    fn word_parse_and_display() {
        let w = Word::parse("1, 2,1").unwrap();
        assert_eq!(w.letters(), &[0, 1, 0]);
        assert_eq!(w.to_string(), "(1,2,1)");
        assert!(Word::parse("0").is_err());
        assert!(Word::new(vec![0; 5]).is_err());
    }

    fn linear_path(n: usize, d: usize, t: f64) -> Vec<f64> {
        (0..=n).flat_map(|i| vec![t * i as f64 / n as f64; d]).collect()
    }

    #[test]
    fn simplex_volume_for_linear_driver() {
        let path = linear_path(7, 2, 0.8);
        for k in 1..=4 {
            let w = Word::new(vec![0; k]).unwrap();
            let fact: f64 = (1..=k).map(|v| v as f64).product();
            let mixed = Word::new((0..k).map(|i| i % 2).collect()).unwrap();
            let e = 0.8f64.powi(k as i32) / fact;
            assert!((signature_word(&path, 2, &w, 7) - e).abs() < 1e-14);
            assert!((signature_word(&path, 2, &mixed, 7) - e).abs() < 1e-14);
        }
    }

    #[test]
    fn level_two_antisymmetry_and_square() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let paths = sample_fbm_cholesky(g, 2, 20, Hurst::new(0.7).unwrap(), 3).unwrap();
        let l12 = lambda_coefficient(&paths, &Word::new(vec![0, 1]).unwrap(), 1.0).unwrap();
        let l21 = lambda_coefficient(&paths, &Word::new(vec![1, 0]).unwrap(), 1.0).unwrap();
        let sq = iterated_integral(&paths, &Word::new(vec![0, 0]).unwrap(), 0.5).unwrap();
        let a12 = iterated_integral(&paths, &Word::new(vec![0, 1]).unwrap(), 1.0).unwrap();
        let a21 = iterated_integral(&paths, &Word::new(vec![1, 0]).unwrap(), 1.0).unwrap();
        for p in 0..20 {
            assert!((l12[p] + l21[p]).abs() < 1e-15);
            assert!((l12[p] - 0.25 * (a12[p] - a21[p])).abs() < 1e-15);
            let b = paths.value(p, 32, 0);
            assert!((sq[p] - 0.5 * b * b).abs() < 1e-13);
        }
    }

    #[test]
    fn linear_field_bracket_is_commutator() {
        // V_i = A_i x: [V_i, V_j] = (A_j A_i - A_i A_j) x
        let a = [0.0, 1.0, -1.0, 0.0, 0.5, 0.0, 0.2, -0.3];
        let f = LinearFields::new(2, vec![a[..4].to_vec(), a[4..].to_vec()], vec![vec![0.0; 2]; 2]).unwrap();
        let x = [0.3, -0.7];
        let ai = |i: usize| &a[i * 4..(i + 1) * 4];
        let mm = |p: &[f64], q: &[f64]| -> Vec<f64> {
            vec![p[0] * q[0] + p[1] * q[2], p[0] * q[1] + p[1] * q[3], p[2] * q[0] + p[3] * q[2], p[2] * q[1] + p[3] * q[3]]
        };
        let comm: Vec<f64> = mm(ai(1), ai(0)).iter().zip(mm(ai(0), ai(1))).map(|(p, q)| p - q).collect();
        let e = [comm[0] * x[0] + comm[1] * x[1], comm[2] * x[0] + comm[3] * x[1]];
        let b = lie_bracket_field(&f, &Word::new(vec![0, 1]).unwrap(), &x).unwrap();
        assert!((b[0] - e[0]).abs() < 1e-9 && (b[1] - e[1]).abs() < 1e-9);
        // [V_0, [V_0, V_1]] = (C A_0 - A_0 C) x with C = A_1 A_0 - A_0 A_1
        let c3: Vec<f64> = mm(&comm, ai(0)).iter().zip(mm(ai(0), &comm)).map(|(p, q)| p - q).collect();
        let e3 = [c3[0] * x[0] + c3[1] * x[1], c3[2] * x[0] + c3[3] * x[1]];
        let b3 = lie_bracket_field(&f, &Word::new(vec![0, 0, 1]).unwrap(), &x).unwrap();
        assert!((b3[0] - e3[0]).abs() < 1e-7 && (b3[1] - e3[1]).abs() < 1e-7);
    }

    #[test]
    fn constant_fields_brackets_vanish_and_flow_is_linear() {
        let f = ConstantFrame::new(2, vec![1.0, 0.3, 0.0, 2.0]).unwrap();
        for w in Word::up_to(2, 3).into_iter().filter(|w| w.len() >= 2) {
            let b = lie_bracket_field(&f, &w, &[0.1, 0.2]).unwrap();
            assert!(b.iter().all(|v| v.abs() < 1e-9), "{w}");
        }
        let g = TimeGrid::new(1.0, 16).unwrap();
        let paths = sample_fbm_cholesky(g, 2, 3, Hurst::new(0.7).unwrap(), 1).unwrap();
        let out = exp_lie_flow(&f, &paths, &[0.1, 0.2], 0.5, 1).unwrap();
        for p in 0..3 {
            let b = [paths.value(p, 8, 0), paths.value(p, 8, 1)];
            assert!((out[p][0] - (0.1 + b[0] + 0.3 * b[1])).abs() < 1e-12);
            assert!((out[p][1] - (0.2 + 2.0 * b[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn differential_operator_second_order() {
        // V = d/dx, f = x^2: V V f = 2
        let f = ConstantFrame::orthonormal(1);
        let w = Word::new(vec![0, 0]).unwrap();
        let v = differential_operator(&f, &|z: &[f64]| z[0] * z[0], &w, &[0.4]).unwrap();
        assert!((v - 2.0).abs() < 1e-8);
        // so3: V_1 V_2 f - V_2 V_1 f = [V_1, V_2] f
        let s = So3Frame;
        let g = |z: &[f64]| z[0].sin() * z[1] + z[2] * z[2];
        let x = [0.1, 0.2, -0.3];
        let a = differential_operator(&s, &g, &Word::new(vec![0, 1]).unwrap(), &x).unwrap();
        let b = differential_operator(&s, &g, &Word::new(vec![1, 0]).unwrap(), &x).unwrap();
        let br = lie_bracket_field(&s, &Word::new(vec![0, 1]).unwrap(), &x).unwrap();
        let grad = [x[0].cos() * x[1], x[0].sin(), 2.0 * x[2]];
        let e: f64 = br.iter().zip(grad).map(|(p, q)| p * q).sum();
        assert!((a - b - e).abs() < 1e-7, "{} {}", a - b, e);
    }

    #[test]
    fn first_coefficient_for_square() {
        let g = TimeGrid::new(1.0, 32).unwrap();
        let paths = crate::fbm::FbmSampler::new(g, 1, Hurst::new(0.7).unwrap(), SamplerTag::Cholesky, 2)
            .unwrap()
            .sample(4000);
        let m = mean_expansion(&ConstantFrame::orthonormal(1), &|z: &[f64]| z[0] * z[0], &[0.0], 1, &paths).unwrap();
        assert!((m.terms[0].coefficient - 1.0).abs() < 4.0 * m.terms[0].stderr);
        let lin = mean_expansion(&ConstantFrame::orthonormal(2), &|z: &[f64]| z[0] - 2.0 * z[1], &[0.0, 0.0], 1, &crate::fbm::sample_fbm_cholesky(g, 2, 10, Hurst::new(0.7).unwrap(), 1).unwrap()).unwrap();
        assert!(lin.terms[0].coefficient.abs() < 1e-8);
    }
}
