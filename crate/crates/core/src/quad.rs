//! Gauss–Legendre quadrature.
//!
//! Used for the deterministic time integral in the exact KL functional and
//! for the double integral in the lattice free-energy formula. Nodes and
//! weights are computed by Newton iteration on the Legendre polynomial,
//! which is accurate to machine precision for the orders used here (≤ 1024).

/// Nodes and weights on the canonical interval [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature order must be at least 1");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Asymptotic initial guess for the i-th root, then Newton.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Nodes and weights mapped to [a, b].
pub fn gauss_legendre_on(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    let (nodes, weights) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    nodes
        .iter()
        .zip(weights.iter())
        .map(|(&x, &w)| (mid + half * x, half * w))
        .collect()
}

/// P_n(x) and P_n'(x) via the Bonnet recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}
