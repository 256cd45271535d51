//! Real polynomials in monomial form and the C^k smoothstep family.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poly(pub Vec<f64>);

impl Poly {
    pub fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn derivative(&self) -> Poly {
        if self.0.len() <= 1 {
            return Poly(vec![0.0]);
        }
        Poly(self.0.iter().enumerate().skip(1).map(|(k, &c)| k as f64 * c).collect())
    }

    /// n-th derivative.
    pub fn derivative_n(&self, n: usize) -> Poly {
        (0..n).fold(self.clone(), |p, _| p.derivative())
    }

    /// Antiderivative vanishing at 0.
    pub fn integral(&self) -> Poly {
        let mut c = vec![0.0];
        c.extend(self.0.iter().enumerate().map(|(k, &a)| a / (k + 1) as f64));
        Poly(c)
    }

    pub fn scale(&self, a: f64) -> Poly {
        Poly(self.0.iter().map(|c| a * c).collect())
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut c = vec![0.0; self.0.len() + other.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in other.0.iter().enumerate() {
                c[i + j] += a * b;
            }
        }
        Poly(c)
    }

    pub fn degree(&self) -> usize {
        self.0.iter().rposition(|&c| c != 0.0).unwrap_or(0)
    }
}

fn binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Degree 2k+1 polynomial S with S(0)=0, S(1)=1 and the first k derivatives
/// vanishing at both ends.
pub fn smoothstep(k: u32) -> Poly {
    let k = k as u64;
    let mut c = vec![0.0; (2 * k + 2) as usize];
    for j in 0..=k {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        c[(k + 1 + j) as usize] = sign * binomial(k + j, j) * binomial(2 * k + 1, k - j);
    }
    Poly(c)
}

/// (4s(1−s))^{k+1}, a bump on [0,1] with unit height and k vanishing derivatives at the ends.
pub fn bump(k: u32) -> Poly {
    let base = Poly(vec![0.0, 4.0, -4.0]);
    (0..=k).fold(Poly(vec![1.0]), |acc, _| acc.mul(&base))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothstep_endpoints_and_flatness() {
        for k in 1..6 {
            let s = smoothstep(k);
            assert!(s.eval(0.0).abs() < 1e-15);
            assert!((s.eval(1.0) - 1.0).abs() < 1e-12);
            assert!((s.eval(0.5) - 0.5).abs() < 1e-12);
            for d in 1..=k as usize {
                let p = s.derivative_n(d);
                assert!(p.eval(0.0).abs() < 1e-12);
                assert!(p.eval(1.0).abs() < 1e-9 * 10f64.powi(d as i32));
            }
        }
        assert_eq!(smoothstep(1).0, vec![0.0, 0.0, 3.0, -2.0]);
    }

    #[test]
    fn integral_and_bump() {
        let b = bump(1);
        // ∫ 16 s²(1−s)² = 16/30
        assert!((b.integral().eval(1.0) - 16.0 / 30.0).abs() < 1e-14);
        assert!((b.eval(0.5) - 1.0).abs() < 1e-15);
    }
}
