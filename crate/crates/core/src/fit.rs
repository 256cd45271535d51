//! Least-squares fits on log-log axes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WindowPolicy {
    All,
    /// Drop the first n points (smallest abscissae for an ascending grid).
    DropFirst { n: usize },
    /// Points [start, end).
    Range { start: usize, end: usize },
}

impl Default for WindowPolicy {
    fn default() -> Self {
        WindowPolicy::DropFirst { n: 1 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (usize, usize),
}

pub fn loglog_fit(xs: &[f64], ys: &[f64], policy: WindowPolicy) -> Result<FitResult> {
    if xs.len() != ys.len() {
        return Err(Error::Fit(format!("length mismatch {} vs {}", xs.len(), ys.len())));
    }
    let (a, b) = match policy {
        WindowPolicy::All => (0, xs.len()),
        WindowPolicy::DropFirst { n } => (n.min(xs.len()), xs.len()),
        WindowPolicy::Range { start, end } => (start, end.min(xs.len())),
    };
    if b < a + 3 {
        return Err(Error::Fit(format!("window [{a}, {b}) has fewer than 3 points")));
    }
    if xs[a..b].iter().chain(&ys[a..b]).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Fit("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs[a..b].iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys[a..b].iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(FitResult { slope, intercept, r_squared, window: (a, b) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let xs = [32.0, 64.0, 128.0, 256.0, 512.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| x.powi(-2)).collect();
        let f = loglog_fit(&xs, &ys, WindowPolicy::default()).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(f.window, (1, 5));
    }

    #[test]
    fn constant_has_zero_slope() {
        let f = loglog_fit(&[1.0, 2.0, 4.0], &[3.0, 3.0, 3.0], WindowPolicy::All).unwrap();
        assert!(f.slope.abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(loglog_fit(&[1.0, 2.0, 4.0], &[1.0, 0.0, 1.0], WindowPolicy::All).is_err());
        assert!(loglog_fit(&[1.0, 2.0], &[1.0, 1.0], WindowPolicy::All).is_err());
    }
}
