//! Gauss rules and double-exponential quadrature.

use std::f64::consts::PI;
use std::sync::OnceLock;

/// Nodes and weights of an `n`-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Cached 64-point Gauss–Legendre rule.
pub fn gauss_legendre_64() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(64))
}

/// Integrate `f` over [a, b] with the cached 64-point rule.
pub fn gl64<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    let (x, w) = gauss_legendre_64();
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    x.iter()
        .zip(w)
        .map(|(xi, wi)| wi * f(mid + half * xi))
        .sum::<f64>()
        * half
}

/// Nodes and weights of the `n`-point Gauss–Hermite rule for the weight `exp(-x^2)`.
///
/// Golub–Welsch: eigen-decomposition of the symmetric Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Tanh–sinh quadrature on [a, b]; robust to algebraic endpoint singularities.
///
/// `f` receives `(x, distance_to_a, distance_to_b)` so integrands can evaluate
/// singular factors without cancellation near the endpoints.
pub fn tanh_sinh<F: Fn(f64, f64, f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    let half = 0.5 * (b - a);
    let mut h = 1.0;
    let mut sum = f(0.5 * (a + b), half, half) * PI / 2.0;
    // t > 0: symmetric abscissae a + small and b - small
    let term = |t: f64| -> f64 {
        let s = 0.5 * PI * t.sinh();
        let cosh_s = s.cosh();
        let w = 0.5 * PI * t.cosh() / (cosh_s * cosh_s);
        let e = (-2.0 * s).exp();
        let small = half * 2.0 * e / (1.0 + e);
        if small <= 0.0 {
            return 0.0;
        }
        let big = 2.0 * half - small;
        w * (f(a + small, small, big) + f(b - small, big, small))
    };
    let t_max = 5.0;
    let mut k = 1;
    while k as f64 * h <= t_max {
        sum += term(k as f64 * h);
        k += 1;
    }
    let mut estimate = sum * h * half;
    let mut prev = estimate;
    for _level in 0..8 {
        h *= 0.5;
        let mut k = 1;
        while k as f64 * h <= t_max {
            sum += term(k as f64 * h);
            k += 2;
        }
        estimate = sum * h * half;
        if (estimate - prev).abs() <= tol * estimate.abs().max(1e-300) {
            break;
        }
        prev = estimate;
    }
    estimate
}
