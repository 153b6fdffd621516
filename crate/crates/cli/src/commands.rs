use std::collections::BTreeMap;

use fbmheat::density::{self, DensityEstimate, Estimator, QhOptions};
use fbmheat::fbm::{self, ControlVector, FbmSampler};
use fbmheat::geometry;
use fbmheat::io::{self, Series, Table};
use fbmheat::laplace::{self, RateProblem};
use fbmheat::lie::{self, Word};
use fbmheat::rng::derive_seed;
use serde::Serialize;

use crate::config::{ConfigError, ExperimentConfig};
use crate::manifest::Outputs;

#[derive(Debug)]
pub enum CmdError {
    Config(String),
    Numerical(String),
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Config(e.0)
    }
}

impl From<fbmheat::Error> for CmdError {
    fn from(e: fbmheat::Error) -> Self {
        if e.is_input_error() {
            CmdError::Config(e.to_string())
        } else {
            CmdError::Numerical(e.to_string())
        }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Numerical(format!("writing output: {e}"))
    }
}

pub struct Ctx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub seed: u64,
    pub out: &'a mut Outputs,
    pub lineage: BTreeMap<String, u64>,
}

impl Ctx<'_> {
    fn stream(&mut self, name: &str, tag: u64) -> u64 {
        let s = derive_seed(self.seed, tag);
        self.lineage.insert(name.to_string(), s);
        s
    }
}

fn svg(ctx: &mut Ctx, name: &str, title: &str, xl: &str, yl: &str, series: &[Series]) -> Result<(), CmdError> {
    ctx.out.write(name, io::svg_line_chart(title, xl, yl, series).as_bytes())?;
    Ok(())
}

pub fn sample(ctx: &mut Ctx) -> Result<(), CmdError> {
    let cfg = ctx.cfg;
    let dim = match (cfg.fbm.dim, &cfg.fields) {
        (Some(d), _) => d,
        (None, Some(_)) => cfg.fields()?.dim(),
        _ => 1,
    };
    let seed = ctx.stream("paths", 1);
    let mut sampler = FbmSampler::new(cfg.grid(), dim, cfg.hurst(), cfg.fbm.sampler, seed)?;
    if let Some(c) = cfg.fbm.chunk_size {
        sampler = sampler.with_chunk_size(c);
    }
    let paths = sampler.sample(cfg.fbm.n_paths);
    let mut buf = Vec::new();
    io::write_paths_csv(&paths, &mut buf)?;
    ctx.out.write("paths.csv", &buf)?;
    if cfg.fbm.binary {
        let mut buf = Vec::new();
        io::write_fbm1(&paths, &mut buf)?;
        ctx.out.write("paths.fbm1", &buf)?;
    }
    let mut buf = Vec::new();
    io::write_matrix_csv(&fbm::increment_gram(&cfg.grid(), cfg.hurst()), cfg.fbm.n_steps, &mut buf)?;
    ctx.out.write("gram.csv", &buf)?;
    let check = fbm::covariance_check(&paths);
    let mut t = Table::new(["t", "s", "empirical", "exact", "stderr"]);
    for e in &check.entries {
        t.push(vec![e.t, e.s, e.empirical, e.exact, e.stderr]);
    }
    ctx.out.table("covariance.csv", &t)?;
    #[derive(Serialize)]
    struct Summary {
        n_paths: usize,
        dim: usize,
        n_steps: usize,
        max_abs_deviation: f64,
        max_abs_z: f64,
    }
    ctx.out.json(
        "covariance.json",
        &Summary { n_paths: paths.n_paths(), dim, n_steps: cfg.fbm.n_steps, max_abs_deviation: check.max_abs_deviation, max_abs_z: check.max_abs_z },
    )?;
    Ok(())
}

pub fn distance(ctx: &mut Ctx) -> Result<(), CmdError> {
    let cfg = ctx.cfg;
    let fields = cfg.fields()?;
    let d = fields.dim();
    let x = cfg.x(d);
    if let Ok(y) = cfg.y() {
        let r = geometry::distance(fields.as_ref(), &x, &y)?;
        ctx.out.json("distance.json", &r)?;
    }
    if let Some(bx) = cfg.working_box() {
        let mut cols: Vec<String> = (1..=d).map(|k| format!("y_{k}")).collect();
        cols.extend(["distance", "residual", "converged"].map(String::from));
        let mut t = Table::new(cols);
        for y in bx.lattice(cfg.working_box.as_ref().unwrap().lattice) {
            let r = geometry::distance(fields.as_ref(), &x, &y)?;
            let mut row = y.clone();
            row.extend([r.distance, r.residual, f64::from(u8::from(r.converged))]);
            t.push(row);
        }
        ctx.out.table("distances.csv", &t)?;
    }
    Ok(())
}

pub fn check_structure(ctx: &mut Ctx) -> Result<(), CmdError> {
    let cfg = ctx.cfg;
    let fields = cfg.fields()?;
    let pts = match cfg.working_box() {
        Some(bx) => bx.lattice(cfg.working_box.as_ref().unwrap().lattice),
        None => vec![cfg.x(fields.dim())],
    };
    let r = geometry::check_structure(fields.as_ref(), &pts, 1e-6)?;
    ctx.out.json("structure.json", &r)?;
    Ok(())
}

pub fn rate_min(ctx: &mut Ctx) -> Result<(), CmdError> {
    let cfg = ctx.cfg;
    let fields = cfg.fields()?;
    let d = fields.dim();
    let x = cfg.x(d);
    let y = cfg.y()?;
    let grid = cfg.grid();
    let prob = RateProblem::target(fields.clone(), x.clone(), y.clone(), grid, cfg.hurst());
    let r = laplace::minimize_rate_endpoint(&prob)?;
    let mut t = Table::new(["stage", "penalty", "value", "residual", "iterations"]);
    for s in &r.trace {
        t.push(vec![s.stage as f64, s.penalty, s.value, s.residual, s.iterations as f64]);
    }
    ctx.out.table("trace.csv", &t)?;
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=d).map(|k| format!("phi_{k}")));
    let mut c = Table::new(cols);
    for (j, row) in r.phi.as_slice().chunks(d).enumerate() {
        let mut v = vec![grid.point(j)];
        v.extend_from_slice(row);
        c.push(v);
    }
    ctx.out.table("control.csv", &c)?;
    #[derive(Serialize)]
    struct Out<'a> {
        result: &'a laplace::MinimizerResult,
        distance: Option<f64>,
        distance_value: Option<f64>,
    }
    let dist = if x == y { Some(0.0) } else { geometry::distance(fields.as_ref(), &x, &y).ok().filter(|g| g.converged).map(|g| g.distance) };
    let t2h = grid.horizon().powf(2.0 * cfg.fbm.hurst);
    ctx.out.json("rate_min.json", &Out { result: &r, distance: dist, distance_value: dist.map(|g| g * g / (2.0 * t2h)) })?;
    Ok(())
}

pub fn expand(ctx: &mut Ctx) -> Result<(), CmdError> {
    let cfg = ctx.cfg;
    let fields = cfg.fields()?;
    let d = fields.dim();
    let x = cfg.x(d);
    let e = &cfg.expand;
    let driver = move |s: f64| {
        let b = lie::probe_driver(s);
        (0..d).map(|k| 0.5 * b[k % 3] * (1.0 + (k / 3) as f64)).collect::<Vec<f64>>()
    };
    let mut probes = Vec::new();
    let mut ladder = Table::new(["order", "amplitude", "error"]);
    let mut series = Vec::new();
    for &n in &e.orders {
        let p = lie::exp_lie_order_probe(fields.as_ref(), &x, &driver, &e.amplitudes, e.n_steps, n)?;
        for (a, err) in p.amplitudes.iter().zip(&p.errors) {
            ladder.push(vec![n as f64, *a, *err]);
        }
        series.push(Series {
            label: format!("N={n} slope {:.2}", p.slope),
            points: p.amplitudes.iter().zip(&p.errors).map(|(a, r)| (a.log10(), r.log10())).collect(),
        });
        probes.push(p);
    }
    ctx.out.table("order_probe.csv", &ladder)?;
    ctx.out.json("order_probe.json", &probes)?;
    svg(ctx, "order_probe.svg", "exp-Lie order probe", "log10 amplitude", "log10 error", &series)?;
    if !e.words.is_empty() {
        let words: Vec<Word> = e.words.iter().map(|w| Word::parse(w)).collect::<fbmheat::Result<_>>()?;
        let seed = ctx.stream("paths", 2);
        let paths = FbmSampler::new(cfg.grid(), d, cfg.hurst(), cfg.fbm.sampler, seed)?.sample(cfg.fbm.n_paths);
        #[derive(Serialize)]
        struct WordStat {
            word: String,
            lambda_mean: f64,
            lambda_stderr: f64,
            signature_mean: f64,
            signature_stderr: f64,
            bracket: Vec<f64>,
        }
        let mut stats = Vec::new();
        let mut t = Table::new(["word_index", "length", "lambda_mean", "lambda_stderr", "signature_mean", "signature_stderr"]);
        for (i, w) in words.iter().enumerate() {
            w.check_dim(d)?;
            let l = lie::lambda_coefficient(&paths, w, cfg.fbm.horizon)?;
            let s = lie::iterated_integral(&paths, w, cfg.fbm.horizon)?;
            let (lm, ls) = lie::mean_and_se(&l);
            let (sm, ss) = lie::mean_and_se(&s);
            t.push(vec![i as f64, w.len() as f64, lm, ls, sm, ss]);
            stats.push(WordStat {
                word: w.to_string(),
                lambda_mean: lm,
                lambda_stderr: ls,
                signature_mean: sm,
                signature_stderr: ss,
                bracket: lie::lie_bracket_field(fields.as_ref(), w, &x)?,
            });
        }
        ctx.out.table("words.csv", &t)?;
        ctx.out.json("words.json", &stats)?;
    }
    Ok(())
}

fn eval_points(cfg: &ExperimentConfig, d: usize) -> Vec<Vec<f64>> {
    if let Some(e) = &cfg.points.eval {
        return e.clone();
    }
    match &cfg.points.y {
        Some(y) => vec![y.clone()],
        None => vec![cfg.x(d)],
    }
}

pub fn density(ctx: &mut Ctx) -> Result<(), CmdError> {
    let cfg = ctx.cfg;
    let fields = cfg.fields()?;
    let d = fields.dim();
    let x = cfg.x(d);
    let opts = cfg.density_options();
    let ts = &cfg.density.t;
    let seed = ctx.stream("endpoints", 3);
    let mut estimates: Vec<DensityEstimate> = Vec::new();
    let pts = eval_points(cfg, d);
    if opts.estimator == Estimator::Bridge {
        for &t in ts {
            estimates.push(density::tangent_density(fields.as_ref(), &x, t, 2, cfg.fbm.n_paths, seed, &opts)?);
        }
    } else {
        if pts.iter().any(|p| p.len() != d) {
            return Err(CmdError::Config("points.eval entries must match the field dimension".into()));
        }
        let sample = density::sample_endpoints(fields.as_ref(), &x, ts, cfg.fbm.n_paths, &opts, seed)?;
        for ti in 0..ts.len() {
            estimates.push(density::estimate_from_sample(&sample, ti, &pts, &opts, seed)?);
        }
        if let Some(bx) = cfg.working_box() {
            let mut t = Table::new(["t", "histogram_mass"]);
            for (ti, tv) in ts.iter().enumerate() {
                t.push(vec![*tv, density::histogram_mass(&sample, ti, &bx, cfg.density.histogram_bins)?]);
            }
            ctx.out.table("histogram_mass.csv", &t)?;
        }
    }
    let mut cols = vec!["t".to_string(), "point".to_string()];
    cols.extend((1..=d).map(|k| format!("y_{k}")));
    cols.extend(["p_hat", "stderr", "bias_bound"].map(String::from));
    let mut t = Table::new(cols);
    for e in &estimates {
        for (j, y) in e.eval_points.iter().enumerate() {
            let mut row = vec![e.t, j as f64];
            row.extend(y);
            row.extend([e.p_hat[j], e.stderr[j], e.bias_bound[j]]);
            t.push(row);
        }
    }
    ctx.out.table("density.csv", &t)?;
    ctx.out.json("density.json", &estimates)?;
    let n_pts = estimates.first().map_or(0, |e| e.p_hat.len());
    let series: Vec<Series> = (0..n_pts)
        .map(|j| Series { label: format!("point {j}"), points: estimates.iter().map(|e| (e.t, e.p_hat[j])).collect() })
        .collect();
    svg(ctx, "density.svg", "density estimate", "t", "p_hat", &series)?;
    if let (Some(y), false) = (&cfg.points.y, opts.estimator == Estimator::Bridge) {
        if ts.len() >= 2 && *y != x {
            let r = density::offdiag_exponent(fields.as_ref(), &x, y, ts, cfg.fbm.n_paths, seed, &opts, cfg.density.nuisance);
            match r {
                Ok(r) => {
                    let mut t = Table::new(["t", "regressor", "neg_log_density", "neg_log_stderr", "used"]);
                    for i in 0..r.t_values.len() {
                        t.push(vec![r.t_values[i], r.regressor[i], r.neg_log_density[i], r.neg_log_stderr[i], f64::from(u8::from(r.used[i]))]);
                    }
                    ctx.out.table("offdiag.csv", &t)?;
                    ctx.out.json("offdiag.json", &r)?;
                }
                Err(e) if e.is_input_error() => eprintln!("off-diagonal fit skipped: {e}"),
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(())
}

pub fn ondiag(ctx: &mut Ctx) -> Result<(), CmdError> {
    let cfg = ctx.cfg;
    let fields = cfg.fields()?;
    let x = cfg.x(fields.dim());
    let opts = cfg.density_options();
    let seed = ctx.stream("endpoints", 4);
    let fit = density::ondiag_fit(fields.as_ref(), &x, &cfg.density.t, cfg.fbm.n_paths, cfg.density.terms, seed, &opts)?;
    ctx.out.json("ondiag.json", &fit)?;
    let mut a0 = Table::new(["c0", "c0_stderr", "c0_ci_lo", "c0_ci_hi", "a0_closed_form", "relative_difference", "c0_without_largest_t"]);
    let c0 = fit.coefficients[0];
    let ci = fit.ci_half_width[0];
    let closed = fit.a0_closed_form.unwrap_or(f64::NAN);
    a0.push(vec![c0, fit.stderr[0], c0 - ci, c0 + ci, closed, c0 / closed - 1.0, fit.c0_without_largest_t.unwrap_or(f64::NAN)]);
    ctx.out.table("a0_comparison.csv", &a0)?;
    let mut ladder = Table::new(["t", "scaled_density", "stderr", "fitted"]);
    let fitted = |t: f64| fit.exponents.iter().zip(&fit.coefficients).map(|(e, c)| c * t.powf(*e)).sum::<f64>();
    for (i, &t) in fit.t_values.iter().enumerate() {
        ladder.push(vec![t, fit.scaled_density[i], fit.scaled_stderr[i], fitted(t)]);
    }
    ctx.out.table("ondiag_ladder.csv", &ladder)?;
    let mut ts = fit.t_values.clone();
    ts.sort_by(f64::total_cmp);
    let series = vec![
        Series { label: "t^(Hd) p_hat".into(), points: ts.iter().map(|&t| (t, fit.scaled_density[fit.t_values.iter().position(|&u| u == t).unwrap()])).collect() },
        Series { label: "fit".into(), points: (0..=40).map(|k| { let t = ts[ts.len() - 1] * k as f64 / 40.0; (t, fitted(t)) }).collect() },
        Series { label: "a0".into(), points: vec![(0.0, closed), (ts[ts.len() - 1], closed)] },
    ];
    svg(ctx, "ondiag.svg", "on-diagonal fit", "t", "t^(Hd) p(t; x, x)", &series)?;
    Ok(())
}

pub fn qh(ctx: &mut Ctx) -> Result<(), CmdError> {
    let cfg = ctx.cfg;
    let omega = cfg.omega()?;
    let mut o = QhOptions { n_steps: cfg.qh.n_steps, sampler: cfg.fbm.sampler, ..QhOptions::default() };
    if let Some(t) = &cfg.qh.t {
        o.t_values = t.clone();
    }
    let mut results = Vec::new();
    for (i, &m) in cfg.qh.methods.iter().enumerate() {
        let seed = ctx.stream(&format!("qh_{i}"), 5 + i as u64);
        results.push(density::qh_estimate(&omega, cfg.hurst(), cfg.fbm.n_paths, seed, m, &o)?);
    }
    #[derive(Serialize)]
    struct Out<'a> {
        estimates: &'a [density::QhEstimate],
        /// `|a - b| / combined stderr` for the first two estimates.
        discrepancy: Option<f64>,
    }
    let discrepancy = (results.len() >= 2).then(|| density::qh_discrepancy(&results[0], &results[1]));
    ctx.out.json("qh.json", &Out { estimates: &results, discrepancy })?;
    if let Some(f) = results.iter().find(|r| !r.t_values.is_empty()) {
        let mut t = Table::new(["t", "g_mean", "g_stderr"]);
        for i in 0..f.t_values.len() {
            t.push(vec![f.t_values[i], f.ladder[i], f.ladder_stderr[i]]);
        }
        ctx.out.table("qh_ladder.csv", &t)?;
    }
    Ok(())
}

pub fn girsanov_check(ctx: &mut Ctx) -> Result<(), CmdError> {
    let cfg = ctx.cfg;
    let dim = cfg.fbm.dim.unwrap_or_else(|| cfg.girsanov.phi.as_ref().map_or(1, Vec::len));
    let phi_v = cfg.girsanov.phi.clone().unwrap_or_else(|| vec![0.5; dim]);
    if phi_v.len() != dim {
        return Err(CmdError::Config("girsanov.phi must have fbm.dim entries".into()));
    }
    let grid = cfg.grid();
    let phi = ControlVector::constant(grid, &phi_v);
    let seed = ctx.stream("paths", 6);
    let paths = FbmSampler::new(grid, dim, cfg.hurst(), cfg.fbm.sampler, seed)?.sample(cfg.fbm.n_paths);
    let w = fbm::girsanov_weight(&paths, &phi)?;
    let (mw, sw) = lie::mean_and_se(&w);
    let shift = fbm::cm_shift_at(&phi, cfg.hurst(), grid.horizon());
    let mut bt = Vec::new();
    let mut z = Vec::new();
    for k in 0..dim {
        let v: Vec<f64> = (0..paths.n_paths()).map(|p| w[p] * paths.endpoint(p)[k]).collect();
        let (m, s) = lie::mean_and_se(&v);
        z.push((m - shift[k]) / s);
        bt.push((m, s));
    }
    #[derive(Serialize)]
    struct Out {
        n_paths: usize,
        mean_weight: f64,
        mean_weight_stderr: f64,
        weight_z: f64,
        weighted_endpoint_mean: Vec<f64>,
        weighted_endpoint_stderr: Vec<f64>,
        shift_at_horizon: Vec<f64>,
        endpoint_z: Vec<f64>,
        pass_4se: bool,
    }
    let weight_z = (mw - 1.0) / sw;
    let pass = weight_z.abs() <= 4.0 && z.iter().all(|v| v.abs() <= 4.0);
    ctx.out.json(
        "girsanov.json",
        &Out {
            n_paths: paths.n_paths(),
            mean_weight: mw,
            mean_weight_stderr: sw,
            weight_z,
            weighted_endpoint_mean: bt.iter().map(|b| b.0).collect(),
            weighted_endpoint_stderr: bt.iter().map(|b| b.1).collect(),
            shift_at_horizon: shift,
            endpoint_z: z,
            pass_4se: pass,
        },
    )?;
    Ok(())
}
