//! Locality and propagation diagnostics: distance-resolved block norms of
//! operators, spreading of driven wave packets, and the energy bound for the
//! gauge-frame propagator.

use serde::{Deserialize, Serialize};

use crate::adiabatic::{evolve, gauge, DrivingProfile, EvolveConfig};
use crate::error::{Error, Result};
use crate::fit::{loglog_fit, WindowPolicy};
use crate::linalg::{dagger, op_norm, CMat, SiteOperator, C64};
use crate::model::{Direction, MagneticModel, SwitchFunction};
use crate::spectral::{spectral_function, EigenSystem, FermiProjector};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayProfile {
    pub axis: Direction,
    /// Signed distance from the reference interval: negative below, positive above, 0 inside.
    pub distances: Vec<f64>,
    pub norms: Vec<f64>,
    /// μ in norm ∝ exp(−μ|d|), fitted outside the reference interval on norms above 1e−14.
    pub fit_exponent: f64,
}

impl DecayProfile {
    /// norm at the distance closest to d.
    pub fn at(&self, d: f64) -> f64 {
        let i = self
            .distances
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - d).abs().partial_cmp(&(b.1 - d).abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.norms.get(i).copied().unwrap_or(0.0)
    }

    /// Norms nonincreasing in |d| on each side, up to a relative allowance.
    pub fn monotone_outside(&self, allowance: f64) -> bool {
        let side = |sign: f64| {
            let mut v: Vec<(f64, f64)> = self
                .distances
                .iter()
                .zip(&self.norms)
                .filter(|(d, _)| **d * sign > 0.0)
                .map(|(d, n)| (d.abs(), *n))
                .collect();
            v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            v.windows(2).all(|w| w[1].1 <= (1.0 + allowance) * w[0].1 + 1e-14)
        };
        side(1.0) && side(-1.0)
    }
}

fn coordinates(model: &MagneticModel, axis: Direction) -> Result<Vec<f64>> {
    match model.position(axis) {
        SiteOperator::Diagonal(d) => Ok(d.to_vec()),
        SiteOperator::Dense { .. } => {
            Err(Error::InvalidArgument("distance-resolved norms need a site basis (lattice backend)".into()))
        }
    }
}

fn exp_rate(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.0 > 0.0 && p.1 > 1e-14).map(|&(d, n)| (d, n.ln())).collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        -sxy / sxx
    }
}

fn rows(x: &CMat, idx: &[usize]) -> CMat {
    CMat::from_shape_fn((idx.len(), x.ncols()), |(r, c)| x[[idx[r], c]])
}

/// Operator norms of the row blocks of `op` grouped by signed distance of
/// the site coordinate along `axis` from the interval `reference`.
pub fn kernel_decay(op: &CMat, model: &MagneticModel, axis: Direction, reference: (f64, f64)) -> Result<DecayProfile> {
    if op.nrows() != model.dim() || op.ncols() != model.dim() {
        return Err(Error::InvalidArgument("operator and model dimensions differ".into()));
    }
    let xs = coordinates(model, axis)?;
    let (lo, hi) = reference;
    let signed = |x: f64| {
        if x > hi {
            x - hi
        } else if x < lo {
            x - lo
        } else {
            0.0
        }
    };
    let mut keys: Vec<i64> = xs.iter().map(|&x| (signed(x) * 1e6).round() as i64).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut distances = Vec::with_capacity(keys.len());
    let mut norms = Vec::with_capacity(keys.len());
    for key in keys {
        let d = key as f64 * 1e-6;
        let idx: Vec<usize> = (0..xs.len()).filter(|&i| ((signed(xs[i]) * 1e6).round() as i64) == key).collect();
        distances.push(d);
        norms.push(op_norm(&rows(op, &idx)));
    }
    let outside: Vec<(f64, f64)> = distances.iter().zip(&norms).filter(|(d, _)| **d != 0.0).map(|(d, n)| (d.abs(), *n)).collect();
    Ok(DecayProfile { axis, distances, norms, fit_exponent: exp_rate(&outside) })
}

/// Largest |op(x, x′)| per integer bin of the (minimal-image) distance |x − x′|.
pub fn off_diagonal_decay(op: &CMat, model: &MagneticModel) -> Result<DecayProfile> {
    let x1 = coordinates(model, Direction::X1)?;
    let x2 = coordinates(model, Direction::X2)?;
    let period = model.lattice().filter(|_| model.is_periodic()).map(|l| l.width as f64);
    let wrap = |d: f64| match period {
        Some(p) => d.abs().min(p - d.abs()),
        None => d.abs(),
    };
    let mut bins: Vec<f64> = Vec::new();
    for i in 0..op.nrows() {
        for j in 0..op.ncols() {
            let d = (wrap(x1[i] - x1[j]).powi(2) + wrap(x2[i] - x2[j]).powi(2)).sqrt();
            let b = d.round() as usize;
            if bins.len() <= b {
                bins.resize(b + 1, 0.0);
            }
            bins[b] = bins[b].max(op[[i, j]].norm());
        }
    }
    let distances: Vec<f64> = (0..bins.len()).map(|b| b as f64).collect();
    let pts: Vec<(f64, f64)> = distances.iter().cloned().zip(bins.iter().cloned()).collect();
    Ok(DecayProfile { axis: Direction::X1, distances, norms: bins, fit_exponent: exp_rate(&pts) })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LightconeReport {
    /// Physical times t = τs.
    pub times: Vec<f64>,
    /// √(⟨x2²⟩ − ⟨x2⟩²)
    pub spreads: Vec<f64>,
    /// Log-log slope of √(σ(t)² − σ(0)²) against t before reflection.
    pub growth_exponent: f64,
    /// The spread exceeded a third of the sample width.
    pub boundary_reflection: bool,
    pub fit_points: usize,
}

/// Normalized χ(H < cutoff)·e_site, the energy-filtered packet seeded at a site.
pub fn filtered_packet(eig: &EigenSystem, site: usize, cutoff: f64) -> Result<CMat> {
    let filter = spectral_function(eig, |e| if e < cutoff { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) });
    let v = filter.column(site).to_owned();
    let n = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if n < 1e-12 {
        return Err(Error::InvalidArgument(format!("site {site} has no weight below {cutoff}")));
    }
    Ok(v.mapv(|z| z / n).insert_axis(ndarray::Axis(1)))
}

fn moments(psi: &CMat, x: &[f64]) -> (f64, f64) {
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for (i, z) in psi.column(0).iter().enumerate() {
        let w = z.norm_sqr();
        m1 += w * x[i];
        m2 += w * x[i] * x[i];
    }
    (m1, m2)
}

/// Spread of a driven packet along x2 on the s-grid `samples`.
#[allow(clippy::too_many_arguments)]
pub fn lightcone_check(
    model: &MagneticModel,
    eig: &EigenSystem,
    profile: &DrivingProfile,
    lambda1: &SwitchFunction,
    tau: f64,
    initial: &CMat,
    samples: &[f64],
    cfg: &EvolveConfig,
) -> Result<LightconeReport> {
    if initial.ncols() != 1 || initial.nrows() != model.dim() {
        return Err(Error::InvalidArgument("initial state must be a single column vector".into()));
    }
    let norm: f64 = initial.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidArgument(format!("initial state norm {norm} is not 1")));
    }
    let x2 = coordinates(model, Direction::X2)?;
    let width = model.extent[1].1 - model.extent[1].0;
    let packet = FermiProjector::from_frame(f64::NAN, initial.clone(), (f64::NAN, f64::NAN));
    let tr = evolve(model, eig, &packet, profile, lambda1, tau, samples, cfg)?;
    let (a0, b0) = moments(initial, &x2);
    let var0 = b0 - a0 * a0;
    let mut times = Vec::new();
    let mut spreads = Vec::new();
    for st in &tr.states {
        // the gauge is diagonal in position, so lab and gauge frames give the same moments
        let (a, b) = moments(&st.frame, &x2);
        times.push(tau * st.s);
        spreads.push((b - a * a).max(0.0).sqrt());
    }
    let limit = width / 3.0;
    let boundary_reflection = spreads.iter().any(|&s| s > limit);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (t, s) in times.iter().zip(&spreads) {
        if *s > limit {
            break;
        }
        let excess = (s * s - var0).max(0.0).sqrt();
        if *t > 0.0 && excess > 1e-12 {
            xs.push(*t);
            ys.push(excess);
        }
    }
    let fit_points = xs.len();
    let growth_exponent = if fit_points >= 3 { loglog_fit(&xs, &ys, WindowPolicy::All)?.slope } else { 0.0 };
    Ok(LightconeReport { times, spreads, growth_exponent, boundary_reflection, fit_points })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyBound {
    pub m: i32,
    pub tau: f64,
    /// max over sampled pairs of ‖H(s)^{−m/2} U_τ(s,t) H(t)^{m/2}‖
    pub estimate: f64,
    pub worst_pair: (f64, f64),
    pub shift: f64,
}

/// Gauge-frame energy bound with H shifted so that its lowest eigenvalue is 1.
#[allow(clippy::too_many_arguments)]
pub fn energy_bound_check(
    model: &MagneticModel,
    eig: &EigenSystem,
    profile: &DrivingProfile,
    lambda1: &SwitchFunction,
    tau: f64,
    m: i32,
    samples: &[f64],
    cfg: &EvolveConfig,
) -> Result<EnergyBound> {
    let shift = 1.0 - eig.energies[0];
    let dim = model.dim();
    let all = FermiProjector::from_frame(f64::NAN, crate::linalg::eye(dim), (f64::NAN, f64::NAN));
    let cfg = EvolveConfig { track_propagator: false, ..cfg.clone() };
    let tr = evolve(model, eig, &all, profile, lambda1, tau, samples, &cfg)?;
    // M(s) = V†·G(s)†·U_τ(s,0)·V in the static eigenbasis
    let ms: Vec<CMat> = tr
        .states
        .iter()
        .map(|st| dagger(&eig.vectors).dot(&gauge(lambda1, profile.phi(st.s)).apply_adjoint(&st.frame)).dot(&eig.vectors))
        .collect();
    let pow = |e: f64, sign: f64| (e + shift).powf(sign * m as f64 / 2.0);
    let mut estimate: f64 = 0.0;
    let mut worst_pair = (0.0, 0.0);
    for (i, mi) in ms.iter().enumerate() {
        for (j, mj) in ms.iter().enumerate() {
            let u = mi.dot(&dagger(mj));
            let a = CMat::from_shape_fn((dim, dim), |(r, c)| u[[r, c]] * pow(eig.energies[r], -1.0) * pow(eig.energies[c], 1.0));
            let v = op_norm(&a);
            if v > estimate {
                estimate = v;
                worst_pair = (tr.states[i].s, tr.states[j].s);
            }
        }
    }
    Ok(EnergyBound { m, tau, estimate, worst_pair, shift })
}
