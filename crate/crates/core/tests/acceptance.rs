//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use fbmheat::density::{self, DensityOptions, Kernel, QhMethod, QhOptions};
use fbmheat::fbm::{self, ControlVector, FbmSampler, Hurst, SamplerTag, TimeGrid};
use fbmheat::fields::{ConstantFrame, LinearFields, SharedFields, So3Frame, StructureConstants};
use fbmheat::geometry::{self, WorkingBox};
use fbmheat::laplace::{self, Functional, RateProblem};
use fbmheat::lie::{self, Word};
use fbmheat::young::{self, Scheme};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn h07() -> Hurst {
    Hurst::new(0.7).unwrap()
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

// Independent covariance of fBm.
fn fbm_cov(t: f64, s: f64, h: f64) -> f64 {
    0.5 * (t.powf(2.0 * h) + s.powf(2.0 * h) - (t - s).abs().powf(2.0 * h))
}

fn fbm_fidelity() -> Outcome {
    let t0 = Instant::now();
    let h = h07();
    let grid = TimeGrid::new(1.0, 16).unwrap();
    let paths = FbmSampler::new(grid, 1, h, SamplerTag::Cholesky, 101).unwrap().sample(200_000);
    let n = 16;
    let mut worst_z: f64 = 0.0;
    for i in 1..=n {
        for j in 1..=i {
            let prods: Vec<f64> = (0..paths.n_paths()).map(|p| paths.value(p, i, 0) * paths.value(p, j, 0)).collect();
            let (m, se) = mean_se(&prods);
            let exact = fbm_cov(grid.point(i), grid.point(j), 0.7);
            worst_z = worst_z.max((m - exact).abs() / se);
        }
    }
    let vgrid = TimeGrid::new(1.0, 256).unwrap();
    let vs = FbmSampler::new(vgrid, 1, h, SamplerTag::Volterra, 102).unwrap();
    let implied = vs.implied_covariance();
    let mut worst_v: f64 = 0.0;
    for i in 0..256 {
        for j in 0..256 {
            worst_v = worst_v.max((implied[i * 256 + j] - fbm_cov(vgrid.point(i + 1), vgrid.point(j + 1), 0.7)).abs());
        }
    }
    // sampled Volterra paths against the same target, pooled over a few lags
    let vp = vs.sample(20_000);
    let mut worst_vs: f64 = 0.0;
    for &(i, j) in &[(256, 256), (256, 128), (128, 128), (64, 32), (200, 50)] {
        let prods: Vec<f64> = (0..vp.n_paths()).map(|p| vp.value(p, i, 0) * vp.value(p, j, 0)).collect();
        let (m, se) = mean_se(&prods);
        worst_vs = worst_vs.max(((m - fbm_cov(vgrid.point(i), vgrid.point(j), 0.7)).abs() - 4.0 * se).max(0.0));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst_z <= 4.0 && worst_v <= 0.02 && worst_vs <= 0.02 && secs < 120.0,
        format!("cholesky max|z|={worst_z:.2} (<=4); volterra implied max dev={worst_v:.4}, sampled excess={worst_vs:.4} (<=0.02); {secs:.1}s"),
    )
}

fn young_exactness() -> Outcome {
    let fields = LinearFields::identity_1d();
    let h = h07();
    let n = 1 << 12;
    let grid = TimeGrid::new(1.0, n).unwrap();
    let paths = FbmSampler::new(grid, 1, h, SamplerTag::Cholesky, 202).unwrap().sample(100);
    let x0 = 1.0;
    let mut sup: f64 = 0.0;
    let mut errs = [0.0f64; 3];
    for p in 0..paths.n_paths() {
        let drv = paths.path(p);
        for (lvl, stride) in [1usize, 2, 4].iter().enumerate() {
            let g = TimeGrid::new(1.0, n / stride).unwrap();
            let sub: Vec<f64> = (0..=n / stride).map(|i| drv[i * stride]).collect();
            let (sol, st) = young::sde_path(&fields, Scheme::Taylor, &g, &sub, &[x0], 1.0);
            assert!(st.is_ok());
            let e = (0..=n / stride).map(|i| (sol[i] - x0 * sub[i].exp()).abs()).fold(0.0, f64::max);
            errs[lvl] += e / paths.n_paths() as f64;
            if lvl == 0 {
                sup = sup.max(e);
            }
        }
    }
    let order = 0.5 * ((errs[2] / errs[0]).log2());
    outcome(sup <= 1e-3 && order >= 1.3, format!("sup error={sup:.2e} (<=1e-3); observed order={order:.2} (>=1.3)"))
}

fn girsanov() -> Outcome {
    let h = h07();
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let paths = fbm::sample_fbm_cholesky(grid, 2, 100_000, h, 303).unwrap();
    let phis = [
        ControlVector::constant(grid, &[0.5, -0.3]),
        ControlVector::new(grid, 2, (0..64).map(|c| if c % 2 == 0 { (c as f64 / 20.0).sin() } else { 0.4 - c as f64 / 100.0 }).collect()).unwrap(),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for phi in &phis {
        let w = fbm::girsanov_weight(&paths, phi).unwrap();
        let (mw, sw) = mean_se(&w);
        let shift = fbm::cm_shift_at(phi, h, 1.0);
        ok &= (mw - 1.0).abs() <= 4.0 * sw;
        let mut zmax: f64 = 0.0;
        for k in 0..2 {
            let v: Vec<f64> = (0..paths.n_paths()).map(|p| w[p] * paths.endpoint(p)[k]).collect();
            let (m, se) = mean_se(&v);
            zmax = zmax.max((m - shift[k]).abs() / se);
        }
        ok &= zmax <= 4.0;
        detail.push(format!("E[w]-1={:.4}/se {:.4}, max|z| of B_T vs k_T={zmax:.2}", mw - 1.0, sw));
    }
    outcome(ok, detail.join("; "))
}

fn rate_distance() -> Outcome {
    let h = h07();
    let flat: SharedFields = Arc::new(ConstantFrame::orthonormal(2));
    let x = vec![0.1, -0.2];
    let y = vec![0.5, 0.1];
    let mut ok = true;
    let mut detail = Vec::new();
    for t in [0.5, 1.0] {
        let grid = TimeGrid::new(t, 64).unwrap();
        let r = laplace::minimize_rate_endpoint(&RateProblem::target(flat.clone(), x.clone(), y.clone(), grid, h)).unwrap();
        let t2h = t.powf(1.4);
        let expect = ((y[0] - x[0]).powi(2) + (y[1] - x[1]).powi(2)) / (2.0 * t2h);
        let cdev = r
            .phi
            .as_slice()
            .chunks(2)
            .flat_map(|row| [(row[0] - (y[0] - x[0]) / t2h).abs(), (row[1] - (y[1] - x[1]) / t2h).abs()])
            .fold(0.0, f64::max);
        ok &= (r.value - expect).abs() <= 1e-6 && cdev <= 1e-4;
        detail.push(format!("T={t}: |value err|={:.1e}, control sup dev={cdev:.1e}", (r.value - expect).abs()));
    }
    let so3: SharedFields = Arc::new(So3Frame);
    let x = vec![0.1, -0.2, 0.3];
    let y = vec![0.4, 0.1, -0.1];
    let d = geometry::distance(so3.as_ref(), &x, &y).unwrap().distance;
    let r = laplace::minimize_rate_endpoint(&RateProblem::target(so3, x, y, TimeGrid::new(1.0, 64).unwrap(), h)).unwrap();
    let rel = r.value / (d * d / 2.0) - 1.0;
    ok &= rel.abs() <= 0.02;
    detail.push(format!("so3: value/(d^2/2)-1={rel:.2e}"));
    outcome(ok, detail.join("; "))
}

fn geodesics() -> Outcome {
    let sigma = vec![1.5, 0.3, -0.2, 0.8];
    let cf = ConstantFrame::new(2, sigma.clone()).unwrap();
    let x = [0.2, -0.1];
    let y = [-0.4, 0.5];
    // |sigma^{-1}(y-x)| via the 2x2 inverse
    let det = sigma[0] * sigma[3] - sigma[1] * sigma[2];
    let v = [y[0] - x[0], y[1] - x[1]];
    let u = [(sigma[3] * v[0] - sigma[1] * v[1]) / det, (-sigma[2] * v[0] + sigma[0] * v[1]) / det];
    let expect = (u[0] * u[0] + u[1] * u[1]).sqrt();
    let got = geometry::distance(&cf, &x, &y).unwrap().distance;
    let flat_err = (got - expect).abs();
    let bx = WorkingBox::cube(3, 0.4);
    let pts = bx.sample(60, 505);
    let dist = |a: &[f64], b: &[f64]| geometry::distance(&So3Frame, a, b).unwrap().distance;
    let mut sym: f64 = 0.0;
    let mut tri: f64 = 0.0;
    for k in 0..20 {
        let (a, b, c) = (&pts[3 * k], &pts[3 * k + 1], &pts[3 * k + 2]);
        let ab = dist(a, b);
        sym = sym.max((ab - dist(b, a)).abs());
        tri = tri.max(ab - dist(a, c) - dist(c, b));
    }
    outcome(
        flat_err <= 1e-8 && sym <= 1e-6 && tri <= 1e-6,
        format!("constant-general |d - |sigma^-1(y-x)||={flat_err:.1e}; so3 max asymmetry={sym:.1e}, max triangle excess={tri:.1e}"),
    )
}

fn lambda_machinery() -> Outcome {
    let h = h07();
    let grid = TimeGrid::new(1.0, 256).unwrap();
    let paths = fbm::sample_fbm_cholesky(grid, 3, 200, h, 606).unwrap();
    let mut lvl1: f64 = 0.0;
    for i in 0..3 {
        let w = Word::new(vec![i]).unwrap();
        let l = lie::lambda_coefficient(&paths, &w, 0.75).unwrap();
        let idx = grid.index_of(0.75).unwrap();
        for (p, v) in l.iter().enumerate() {
            lvl1 = lvl1.max((v - paths.value(p, idx, i)).abs());
        }
    }
    let mut anti: f64 = 0.0;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let a = lie::lambda_coefficient(&paths, &Word::new(vec![i, j]).unwrap(), 1.0).unwrap();
        let b = lie::lambda_coefficient(&paths, &Word::new(vec![j, i]).unwrap(), 1.0).unwrap();
        anti = anti.max(a.iter().zip(&b).map(|(p, q)| (p + q).abs()).fold(0.0, f64::max));
    }
    let drv = |s: f64| lie::probe_driver(s).iter().map(|v| 0.5 * v).collect::<Vec<f64>>();
    let probe = lie::exp_lie_order_probe(&So3Frame, &[0.1, 0.2, -0.1], &drv, &[0.8, 0.4, 0.2, 0.1], 2048, 2).unwrap();
    outcome(
        lvl1 <= 1e-12 && anti <= 1e-12 && (probe.slope - 3.0).abs() <= 0.3,
        format!("max|Lambda_(i)-B^i|={lvl1:.1e}; max|Lambda_(i,j)+Lambda_(j,i)|={anti:.1e}; N=2 order slope={:.3} (3±0.3)", probe.slope),
    )
}

fn on_diagonal() -> Outcome {
    let t0 = Instant::now();
    let h = h07();
    let flat = ConstantFrame::orthonormal(2);
    let mut o = DensityOptions::new(h);
    o.kernel = Kernel::Gaussian4;
    o.n_steps = 16;
    let ts = [0.3, 0.6, 1.0];
    let s = density::sample_endpoints(&flat, &[0.0, 0.0], &ts, 400_000, &o, 707).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for (ti, t) in ts.iter().enumerate() {
        let e = density::estimate_from_sample(&s, ti, &[vec![0.0, 0.0]], &o, 707).unwrap();
        let r = 2.0 * std::f64::consts::PI * t.powf(1.4) * e.p_hat[0];
        ok &= (r - 1.0).abs() <= 0.02;
        detail.push(format!("t={t}: {r:.4}"));
    }
    let mut o3 = DensityOptions::new(h);
    o3.kernel = Kernel::Gaussian4;
    let x = [0.1, 0.2, 0.3];
    let fit = density::ondiag_fit(&So3Frame, &x, &[0.05, 0.1, 0.15, 0.2, 0.3, 0.4], 400_000, 1, 708, &o3).unwrap();
    // exact a0 for the so3 frame: (2 pi)^{-3/2} |cos b|
    let a0 = (2.0 * std::f64::consts::PI).powf(-1.5) * x[1].cos();
    let rel = fit.coefficients[0] / a0 - 1.0;
    ok &= rel.abs() <= 0.05;
    let secs = t0.elapsed().as_secs_f64();
    ok &= secs < 900.0;
    detail.push(format!("so3 c0={:.5} a0={a0:.5} rel={rel:+.4} (±0.05); {secs:.0}s", fit.coefficients[0]));
    outcome(ok, detail.join("; "))
}

fn off_diagonal() -> Outcome {
    let h = h07();
    let o = DensityOptions { n_steps: 16, ..DensityOptions::new(h) };
    let r1 = density::offdiag_exponent(&ConstantFrame::orthonormal(1), &[0.0], &[0.5], &[0.5, 0.35, 0.25, 0.18, 0.12], 400_000, 808, &o, false).unwrap();
    let x = [0.1, -0.2, 0.3];
    let y = [0.25, -0.05, 0.1];
    let o3 = DensityOptions { n_steps: 32, ..DensityOptions::new(h) };
    let r3 = density::offdiag_exponent(&So3Frame, &x, &y, &[0.3, 0.2, 0.14, 0.1, 0.07, 0.05], 400_000, 809, &o3, false).unwrap();
    let eucl = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let d = geometry::distance(&So3Frame, &x, &y).unwrap().distance;
    let d2 = d * d;
    let rel1 = r1.slope / 0.25 - 1.0;
    let rel3 = r3.slope / d2 - 1.0;
    outcome(
        rel1.abs() <= 0.10 && rel3.abs() <= 0.15 && (0.25..=0.35).contains(&eucl),
        format!("d=1 slope={:.4} vs 0.25 rel={rel1:+.3} (±0.10); so3 |y-x|={eucl:.3} d={d:.3}, slope={:.4} vs d^2={d2:.4} rel={rel3:+.3} (±0.15)", r1.slope, r3.slope),
    )
}

fn qh_consistency() -> Outcome {
    let h = h07();
    let o = QhOptions::default();
    let eps = StructureConstants::levi_civita();
    let fit = density::qh_estimate(&eps, h, 40_000, 901, QhMethod::Fit, &o).unwrap();
    let quad = density::qh_estimate(&eps, h, 40_000, 902, QhMethod::Quadrature, &o).unwrap();
    let se = (fit.stderr.powi(2) + quad.stderr.powi(2)).sqrt();
    let agree = (fit.value - quad.value).abs() / se;
    let zero = StructureConstants::zeros(3);
    let zf = density::qh_estimate(&zero, h, 2_000, 903, QhMethod::Fit, &o).unwrap().value;
    let zq = density::qh_estimate(&zero, h, 2_000, 903, QhMethod::Quadrature, &o).unwrap().value;
    let fit2 = density::qh_estimate(&eps.scaled(2.0), h, 40_000, 904, QhMethod::Fit, &o).unwrap();
    let se2 = (fit2.stderr.powi(2) + 16.0 * fit.stderr.powi(2)).sqrt();
    let scale = (fit2.value - 4.0 * fit.value).abs() / se2;
    outcome(
        agree <= 3.0 && zf == 0.0 && zq == 0.0 && scale <= 3.0,
        format!(
            "fit={:.5}±{:.5} quad={:.5}±{:.5} ({agree:.2} se); omega=0 -> {zf}, {zq}; q(2w)={:.4} vs 4q(w)={:.4} ({scale:.2} se)",
            fit.value, fit.stderr, quad.value, quad.stderr, fit2.value, 4.0 * fit.value
        ),
    )
}

fn free_energy_problem(grid: TimeGrid) -> RateProblem {
    let y = [0.4, 0.1, -0.1];
    let f: Functional = Arc::new(move |z: &[f64]| 2.0 * z.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>());
    RateProblem::functional(Arc::new(So3Frame), vec![0.1, -0.2, 0.3], f, grid, h07())
}

fn tail_probes() -> Outcome {
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let prob = free_energy_problem(grid);
    let min = laplace::minimize_free_energy(&prob, 3, 1001).unwrap();
    let paths = fbm::sample_fbm_cholesky(grid, 3, 100_000, h07(), 1002).unwrap();
    let tp = laplace::tail_probe(&So3Frame, &prob.x0, &min.phi, &paths, 1.0, 0.65, None).unwrap();
    outcome(
        tp.g1.r_squared >= 0.9 && tp.g2.r_squared >= 0.85,
        format!("|g1| vs r^2 R^2={:.4} (>=0.9); |g2| vs r R^2={:.4} (>=0.85)", tp.g1.r_squared, tp.g2.r_squared),
    )
}

fn critical_point() -> Outcome {
    let prob = free_energy_problem(TimeGrid::new(1.0, 64).unwrap());
    let min = laplace::minimize_free_energy(&prob, 3, 1101).unwrap();
    let paths = fbm::sample_fbm_cholesky(TimeGrid::new(1.0, 256).unwrap(), 3, 1000, h07(), 1102).unwrap();
    let th = laplace::theta_prime_identity(&prob, &min, &paths).unwrap();
    outcome(
        min.converged && th.correlation > 0.999 && th.mean_abs_discrepancy < 1e-3,
        format!("converged={}; correlation={:.8}; mean|discrepancy|={:.1e}", min.converged, th.correlation, th.mean_abs_discrepancy),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("1 fbm fidelity", fbm_fidelity),
        ("2 young solver exactness", young_exactness),
        ("3 girsanov", girsanov),
        ("4 rate/distance", rate_distance),
        ("5 geodesics", geodesics),
        ("6 lambda machinery", lambda_machinery),
        ("7 on-diagonal", on_diagonal),
        ("8 off-diagonal exponent", off_diagonal),
        ("9 q_H consistency", qh_consistency),
        ("10 tail probes", tail_probes),
        ("11 critical-point identity", critical_point),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, run) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let t0 = Instant::now();
        let r = run();
        let tag = if r.pass { "PASS" } else { "FAIL" };
        println!("{tag} [{name}] {} ({:.1}s)", r.detail, t0.elapsed().as_secs_f64());
        failed += usize::from(!r.pass);
    }
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
