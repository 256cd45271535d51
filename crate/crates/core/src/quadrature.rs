//! Gauss–Legendre and Gauss–Hermite rules.

use ndarray::Array2;

use crate::linalg::{eigh, C64};

/// Nodes and weights on [−1, 1], computed by Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * p - pm) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// ∫_a^b f by an n-point Gauss–Legendre rule.
pub fn integrate(rule: &(Vec<f64>, Vec<f64>), a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let h = 0.5 * (b - a);
    let c = 0.5 * (a + b);
    rule.0.iter().zip(&rule.1).map(|(&x, &w)| w * f(c + h * x)).sum::<f64>() * h
}

/// Nodes and weights for ∫ f(x) e^{−x²} dx (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let j = Array2::from_shape_fn((n, n), |(a, b)| {
        if a + 1 == b || b + 1 == a {
            C64::new((a.max(b) as f64 / 2.0).sqrt(), 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let (e, v) = eigh(&j).expect("Jacobi matrix is symmetric");
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let w = (0..n).map(|k| sqrt_pi * v[[0, k]].norm_sqr()).collect();
    (e.to_vec(), w)
}
