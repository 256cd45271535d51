//! Adiabatic driving: schedules g(s), the iso-spectral gauge family H(s),
//! propagation of the Fermi projection, and the induced Hall current.
//!
//! The lab-frame Hamiltonian is H + (g(t/τ)/τ)·Λ1. With G(s) = exp(iφ(s)Λ1)
//! the gauge-frame state Ψ = G·χ obeys i∂_sΨ = τ H(s) Ψ, H(s) = G H G†.

use std::collections::HashMap;

use ndarray::{s, Array1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{loglog_fit, FitResult, WindowPolicy};
use crate::kubo::BulkWindow;
use crate::linalg::{
    dagger, expm_action, isometry_defect, Csr, CMat, DenseSum, HermitianAction, SiteOperator,
    SparsePlusDiagonal, C64, I, ZERO,
};
use crate::model::{sparse_commutator, MagneticModel, SwitchFunction};
use crate::poly::{bump, smoothstep, Poly};
use crate::quadrature::{gauss_legendre, integrate};
use crate::spectral::{spectral_function, EigenSystem, FermiProjector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveKind {
    /// C^k smoothstep, g(1) = amplitude.
    Ramp,
    /// C^k bump, g(1) = 0.
    Pulse,
    /// g ≡ 0.
    Zero,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DrivingProfile {
    pub kind: DriveKind,
    pub k: u32,
    pub amplitude: f64,
    /// The profile varies on [onset, end] and is constant outside.
    pub onset: f64,
    pub end: f64,
    shape: Poly,
    #[serde(skip)]
    rule: (Vec<f64>, Vec<f64>),
}

impl DrivingProfile {
    pub fn new(kind: DriveKind, k: u32) -> Result<Self> {
        Self::with_support(kind, k, 1.0, 0.0, 1.0)
    }

    pub fn with_support(kind: DriveKind, k: u32, amplitude: f64, onset: f64, end: f64) -> Result<Self> {
        if k < 1 {
            return Err(Error::InvalidArgument("profile smoothness k must be at least 1".into()));
        }
        if !(0.0 <= onset && onset < end && end <= 1.0) {
            return Err(Error::InvalidArgument(format!("bad support [{onset}, {end}]")));
        }
        let shape = match kind {
            DriveKind::Ramp => smoothstep(k),
            DriveKind::Pulse => bump(k),
            DriveKind::Zero => Poly(vec![0.0]),
        };
        Ok(DrivingProfile { kind, k, amplitude, onset, end, shape, rule: gauss_legendre(24) })
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    fn local(&self, s: f64) -> f64 {
        (s - self.onset) / (self.end - self.onset)
    }

    pub fn g(&self, s: f64) -> f64 {
        if self.kind == DriveKind::Zero || s <= self.onset {
            return 0.0;
        }
        if s >= self.end {
            return match self.kind {
                DriveKind::Ramp => self.amplitude,
                _ => 0.0,
            };
        }
        self.amplitude * self.shape.eval(self.local(s))
    }

    /// n-th derivative of g in s.
    pub fn g_deriv(&self, s: f64, n: usize) -> f64 {
        if n == 0 {
            return self.g(s);
        }
        if self.kind == DriveKind::Zero || s <= self.onset || s >= self.end {
            return 0.0;
        }
        let w = self.end - self.onset;
        self.amplitude * self.shape.derivative_n(n).eval(self.local(s)) / w.powi(n as i32)
    }

    pub fn g_dot(&self, s: f64) -> f64 {
        self.g_deriv(s, 1)
    }

    /// φ(s) = ∫₀ˢ g by Gauss–Legendre quadrature.
    pub fn phi(&self, s: f64) -> f64 {
        if self.kind == DriveKind::Zero || s <= self.onset {
            return 0.0;
        }
        let rule = if self.rule.0.is_empty() { gauss_legendre(24) } else { self.rule.clone() };
        let top = s.min(self.end);
        let inner = integrate(&rule, self.onset, top, |u| self.g(u));
        inner + if s > self.end { self.g(self.end) * (s - self.end) } else { 0.0 }
    }

    /// ∫₀¹ g
    pub fn integral(&self) -> f64 {
        self.phi(1.0)
    }

    /// Exact φ from the polynomial antiderivative (test reference).
    pub fn phi_exact(&self, s: f64) -> f64 {
        if self.kind == DriveKind::Zero || s <= self.onset {
            return 0.0;
        }
        let w = self.end - self.onset;
        let anti = self.shape.integral();
        let top = s.min(self.end);
        let inner = self.amplitude * w * anti.eval(self.local(top));
        inner + if s > self.end { self.g(self.end) * (s - self.end) } else { 0.0 }
    }
}

pub fn driving_profile(kind: DriveKind, k: u32) -> Result<DrivingProfile> {
    DrivingProfile::new(kind, k)
}

/// G(φ) = exp(iφΛ1)
pub fn gauge(lambda1: &SwitchFunction, phi: f64) -> crate::linalg::Unitary {
    lambda1.op.phase(phi)
}

/// H(s) = e^{iφΛ1} H e^{−iφΛ1}
pub fn gauge_hamiltonian(model: &MagneticModel, lambda1: &SwitchFunction, phi: f64) -> CMat {
    if phi == 0.0 {
        return model.hamiltonian.clone();
    }
    gauge(lambda1, phi).conjugate(&model.hamiltonian)
}

/// Sparse H(s) for the lattice backend.
pub fn gauge_hamiltonian_sparse(h: &Csr, lambda1: &Array1<f64>, phi: f64) -> Csr {
    h.map_entries(|i, j, v| v * C64::from_polar(1.0, phi * (lambda1[i] - lambda1[j])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// exp(−iτh(H + g(s_mid)/τ·Λ1)) applied by Chebyshev expansion in the lab frame.
    LabMidpoint,
    /// Fourth-order commutator-free Magnus step in the lab frame: two
    /// exponentials of H + c·Λ1 with c mixing g at the Gauss–Legendre nodes.
    LabMagnus4,
    /// G(s_mid)·exp(−iτhH)·G(s_mid)† in the gauge frame.
    GaugeSplit,
}

/// n_steps over the unit s-interval = max(min_steps, ceil(per_unit·τ·‖H‖)).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRule {
    pub min_steps: usize,
    pub per_unit: f64,
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule { min_steps: 4096, per_unit: 8.0 }
    }
}

impl StepRule {
    pub fn steps(&self, tau: f64, norm: f64) -> usize {
        self.min_steps.max((self.per_unit * tau * norm).ceil() as usize).max(1)
    }

    pub fn halved(&self) -> StepRule {
        StepRule { min_steps: self.min_steps * 2, per_unit: self.per_unit * 2.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveConfig {
    pub steps: StepRule,
    pub integrator: Integrator,
    pub unitarity_tol: f64,
    pub chebyshev_tol: f64,
    /// Propagate the full unitary U(s,0) instead of only the occupied frame.
    pub track_propagator: bool,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        EvolveConfig {
            steps: StepRule::default(),
            integrator: Integrator::LabMagnus4,
            unitarity_tol: 1e-9,
            chebyshev_tol: 1e-15,
            track_propagator: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvolutionState {
    pub tau: f64,
    pub s: f64,
    /// Gauge-frame occupied frame Ψ with P_τ(s) = ΨΨ†.
    pub frame: CMat,
    /// Gauge-frame U_τ(s, 0) when tracked.
    pub propagator: Option<CMat>,
    pub n_steps_used: usize,
    pub unitarity_defect: f64,
}

impl EvolutionState {
    pub fn p_tau(&self) -> CMat {
        self.frame.dot(&dagger(&self.frame))
    }

    /// Lab-frame frame χ = G(s)†Ψ.
    pub fn lab_frame(&self, profile: &DrivingProfile, lambda1: &SwitchFunction) -> CMat {
        gauge(lambda1, profile.phi(self.s)).apply_adjoint(&self.frame)
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub tau: f64,
    pub states: Vec<EvolutionState>,
}

impl Trajectory {
    pub fn at(&self, s: f64) -> Option<&EvolutionState> {
        self.states.iter().find(|st| (st.s - s).abs() < 1e-12)
    }
}

enum Stepper<'a> {
    Lab { model: &'a MagneticModel, lambda1: &'a SwitchFunction, bounds: (f64, f64), order4: bool },
    Split { eig: &'a EigenSystem, lambda1: &'a SwitchFunction, cache: HashMap<u64, CMat> },
}

impl Stepper<'_> {
    /// Advances the gauge-frame state over [a, b] (Split) or the lab-frame state (Lab).
    fn step(&mut self, x: &CMat, a: f64, b: f64, tau: f64, profile: &DrivingProfile, tol: f64) -> CMat {
        let mid = 0.5 * (a + b);
        match self {
            Stepper::Lab { model, lambda1, bounds, order4 } => {
                let dt = tau * (b - a);
                let apply = |x: &CMat, coeff: f64, t: f64| match (&model.sparse, &lambda1.op) {
                    (Some(h), SiteOperator::Diagonal(d)) => {
                        let op = SparsePlusDiagonal { h, h_bounds: *bounds, diag: d, coeff };
                        expm_action(&op, t, x, tol)
                    }
                    _ => {
                        let op = DenseSum { h: &model.hamiltonian, h_bounds: *bounds, lambda: &lambda1.op, coeff };
                        expm_action(&op as &dyn HermitianAction, t, x, tol)
                    }
                };
                if !*order4 {
                    return apply(x, profile.g(mid) / tau, dt);
                }
                // exp(−iΔt(a1 H1 + a2 H2))·exp(−iΔt(a2 H1 + a1 H2)), a1 + a2 = 1/2
                let r3 = 3f64.sqrt();
                let (a1, a2) = ((3.0 - 2.0 * r3) / 12.0, (3.0 + 2.0 * r3) / 12.0);
                let g1 = profile.g(a + (0.5 - r3 / 6.0) * (b - a)) / tau;
                let g2 = profile.g(a + (0.5 + r3 / 6.0) * (b - a)) / tau;
                let first = apply(x, 2.0 * (a2 * g1 + a1 * g2), 0.5 * dt);
                apply(&first, 2.0 * (a1 * g1 + a2 * g2), 0.5 * dt)
            }
            Stepper::Split { eig, lambda1, cache } => {
                let h = b - a;
                let e = cache
                    .entry(h.to_bits())
                    .or_insert_with(|| spectral_function(eig, |en| C64::from_polar(1.0, -tau * h * en)));
                let g = gauge(lambda1, profile.phi(mid));
                g.apply(&e.dot(&g.apply_adjoint(x)))
            }
        }
    }
}

/// Propagates P0 to every s in `samples` (ascending, within [0, 1]).
#[allow(clippy::too_many_arguments)]
pub fn evolve(
    model: &MagneticModel,
    eig: &EigenSystem,
    p0: &FermiProjector,
    profile: &DrivingProfile,
    lambda1: &SwitchFunction,
    tau: f64,
    samples: &[f64],
    cfg: &EvolveConfig,
) -> Result<Trajectory> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if samples.windows(2).any(|w| w[1] < w[0]) || samples.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
        return Err(Error::InvalidArgument("samples must ascend within [0, 1]".into()));
    }
    let norm = eig.norm();
    let n_unit = cfg.steps.steps(tau, norm);
    let lab = cfg.integrator != Integrator::GaugeSplit;
    let bounds = match &model.sparse {
        Some(h) => h.gershgorin(),
        None => (eig.energies[0], eig.energies[eig.dim() - 1]),
    };
    let mut stepper = if lab {
        Stepper::Lab { model, lambda1, bounds, order4: cfg.integrator == Integrator::LabMagnus4 }
    } else {
        Stepper::Split { eig, lambda1, cache: HashMap::new() }
    };
    let start = if cfg.track_propagator { crate::linalg::eye(model.dim()) } else { p0.occupied.clone() };
    let mut x = start;
    let mut s_now = 0.0;
    let mut used = 0usize;
    let mut states = Vec::with_capacity(samples.len());
    for &target in samples {
        let span = target - s_now;
        if span > 0.0 {
            let n = ((span * n_unit as f64).ceil() as usize).max(1);
            for k in 0..n {
                let a = s_now + span * k as f64 / n as f64;
                let b = s_now + span * (k + 1) as f64 / n as f64;
                x = stepper.step(&x, a, b, tau, profile, cfg.chebyshev_tol);
            }
            used += n;
            s_now = target;
        }
        let gauge_x = if lab { gauge(lambda1, profile.phi(target)).apply(&x) } else { x.clone() };
        let (frame, propagator) = if cfg.track_propagator {
            (gauge_x.dot(&p0.occupied), Some(gauge_x))
        } else {
            (gauge_x, None)
        };
        let defect = match &propagator {
            Some(u) => isometry_defect(u),
            None => isometry_defect(&frame),
        };
        if defect > cfg.unitarity_tol {
            return Err(Error::StepBudget { defect, s: target });
        }
        states.push(EvolutionState { tau, s: target, frame, propagator, n_steps_used: used, unitarity_defect: defect });
    }
    Ok(Trajectory { tau, states })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CurrentSample {
    pub s: f64,
    pub j: C64,
    pub kubo_prediction: C64,
    pub residual: f64,
}

/// Tr(W·ΨΨ†·X) = tr(Ψ†·X·W·Ψ) for sparse or dense X.
fn frame_expectation(psi: &CMat, x: &CurrentOp, window: &BulkWindow) -> C64 {
    let wpsi = window.weights.left_mul(psi);
    let xw = match x {
        CurrentOp::Sparse(c) => c.dot(&wpsi),
        CurrentOp::Dense(c) => c.dot(&wpsi),
    };
    psi.iter().zip(xw.iter()).map(|(a, b)| a.conj() * b).sum()
}

enum CurrentOp {
    Sparse(Csr),
    Dense(CMat),
}

/// [H(φ), Λ2] in the gauge frame.
fn gauge_current(model: &MagneticModel, lambda1: &SwitchFunction, lambda2: &SwitchFunction, phi: f64) -> CurrentOp {
    match (&model.sparse, &lambda1.op, &lambda2.op) {
        (Some(h), SiteOperator::Diagonal(l1), SiteOperator::Diagonal(l2)) => {
            CurrentOp::Sparse(sparse_commutator(&gauge_hamiltonian_sparse(h, l1, phi), l2))
        }
        _ => {
            let hs = gauge_hamiltonian(model, lambda1, phi);
            CurrentOp::Dense(lambda2.op.right_mul(&hs) - lambda2.op.left_mul(&hs))
        }
    }
}

/// J = −i·Tr W(P_τ(s) − P(s))[H(s), Λ2] and the Kubo prediction −(i/τ)·g(s)·K_raw.
#[allow(clippy::too_many_arguments)]
pub fn instantaneous_current(
    state: &EvolutionState,
    model: &MagneticModel,
    p0: &FermiProjector,
    profile: &DrivingProfile,
    lambda1: &SwitchFunction,
    lambda2: &SwitchFunction,
    window: &BulkWindow,
    k_raw: C64,
) -> CurrentSample {
    let phi = profile.phi(state.s);
    let x = gauge_current(model, lambda1, lambda2, phi);
    let ps = gauge(lambda1, phi).apply(&p0.occupied);
    let j = -I * (frame_expectation(&state.frame, &x, window) - frame_expectation(&ps, &x, window));
    let kubo_prediction = -I * profile.g(state.s) * k_raw / state.tau;
    CurrentSample { s: state.s, j, kubo_prediction, residual: (j - kubo_prediction).norm() }
}

/// The same current evaluated in the lab frame, −i·Tr W(ρ − P_λ)[H_λ, Λ2].
pub fn lab_frame_current(
    state: &EvolutionState,
    model: &MagneticModel,
    p0: &FermiProjector,
    profile: &DrivingProfile,
    lambda1: &SwitchFunction,
    lambda2: &SwitchFunction,
    window: &BulkWindow,
) -> C64 {
    let chi = state.lab_frame(profile, lambda1);
    let x = gauge_current(model, lambda1, lambda2, 0.0);
    -I * (frame_expectation(&chi, &x, window) - frame_expectation(&p0.occupied, &x, window))
}

/// Current from an explicitly supplied gauge-frame density matrix.
pub fn current_from_density(
    rho: &CMat,
    model: &MagneticModel,
    p0: &FermiProjector,
    profile: &DrivingProfile,
    lambda1: &SwitchFunction,
    lambda2: &SwitchFunction,
    window: &BulkWindow,
    s: f64,
) -> C64 {
    let phi = profile.phi(s);
    let hs = gauge_hamiltonian(model, lambda1, phi);
    let x = lambda2.op.right_mul(&hs) - lambda2.op.left_mul(&hs);
    let ps = gauge(lambda1, phi).conjugate(p0.matrix());
    -I * window.trace(&(rho - &ps).dot(&x))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    pub residual: f64,
    pub residual_halved: f64,
    /// |r(N) − r(2N)| / r(2N)
    pub halving_change: f64,
    pub j: C64,
    pub prediction: C64,
    pub n_steps: usize,
    pub unitarity_defect: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TauSweepReport {
    pub s_probe: f64,
    pub rows: Vec<TauRow>,
    pub fit: FitResult,
    /// residual(τ) nonincreasing along the grid up to 20%
    pub monotone: bool,
}

/// Residual |Tr Ĵ + (i/τ)gK| against τ with step-halving certification.
#[allow(clippy::too_many_arguments)]
pub fn tau_sweep(
    model: &MagneticModel,
    eig: &EigenSystem,
    p0: &FermiProjector,
    profile: &DrivingProfile,
    lambda1: &SwitchFunction,
    lambda2: &SwitchFunction,
    window: &BulkWindow,
    k_raw: C64,
    taus: &[f64],
    s_probe: f64,
    cfg: &EvolveConfig,
    policy: WindowPolicy,
) -> Result<TauSweepReport> {
    if taus.len() < 4 {
        return Err(Error::InvalidArgument("tau sweep needs at least 4 points".into()));
    }
    let fine = EvolveConfig { steps: cfg.steps.halved(), ..cfg.clone() };
    let jobs: Vec<(f64, bool)> = taus.iter().flat_map(|&t| [(t, false), (t, true)]).collect();
    let results: Vec<Result<(CurrentSample, usize, f64)>> = jobs
        .par_iter()
        .map(|&(tau, halved)| {
            let c = if halved { &fine } else { cfg };
            let tr = evolve(model, eig, p0, profile, lambda1, tau, &[s_probe], c)?;
            let st = &tr.states[0];
            let cs = instantaneous_current(st, model, p0, profile, lambda1, lambda2, window, k_raw);
            Ok((cs, st.n_steps_used, st.unitarity_defect))
        })
        .collect();
    let mut rows = Vec::with_capacity(taus.len());
    for (i, &tau) in taus.iter().enumerate() {
        let (coarse, _, _) = *results[2 * i].as_ref().map_err(clone_err)?;
        let (finer, n, defect) = *results[2 * i + 1].as_ref().map_err(clone_err)?;
        let change = (coarse.residual - finer.residual).abs() / finer.residual;
        if change > 0.2 {
            return Err(Error::IntegratorDominated { tau, change: 100.0 * change });
        }
        rows.push(TauRow {
            tau,
            residual: finer.residual,
            residual_halved: coarse.residual,
            halving_change: change,
            j: finer.j,
            prediction: finer.kubo_prediction,
            n_steps: n,
            unitarity_defect: defect,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.tau).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.residual).collect();
    let fit = loglog_fit(&xs, &ys, policy)?;
    let monotone = ys.windows(2).all(|w| w[1] <= 1.2 * w[0]);
    Ok(TauSweepReport { s_probe, rows, fit, monotone })
}

fn clone_err(e: &Error) -> Error {
    match e {
        Error::StepBudget { defect, s } => Error::StepBudget { defect: *defect, s: *s },
        Error::NoGap { fermi, margin, required } => Error::NoGap { fermi: *fermi, margin: *margin, required: *required },
        other => Error::InvalidArgument(other.to_string()),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChargeResult {
    pub tau: f64,
    pub charge: C64,
    /// −i·(∫g)·K_raw
    pub prediction: C64,
    pub relative_error: f64,
    /// relative change between 17- and 33-point Simpson rules
    pub refinement_change: f64,
    pub samples: Vec<CurrentSample>,
}

fn simpson(ys: &[C64], h: f64) -> C64 {
    let n = ys.len() - 1;
    let mut acc = ys[0] + ys[n];
    for (i, y) in ys.iter().enumerate().take(n).skip(1) {
        acc += y * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// τ·∫₀¹ J(s) ds from the trajectory at 33 uniform points.
#[allow(clippy::too_many_arguments)]
pub fn accumulated_charge(
    model: &MagneticModel,
    eig: &EigenSystem,
    p0: &FermiProjector,
    profile: &DrivingProfile,
    lambda1: &SwitchFunction,
    lambda2: &SwitchFunction,
    window: &BulkWindow,
    k_raw: C64,
    tau: f64,
    cfg: &EvolveConfig,
    refinement_tol: f64,
) -> Result<ChargeResult> {
    let grid: Vec<f64> = (0..=32).map(|i| i as f64 / 32.0).collect();
    let tr = evolve(model, eig, p0, profile, lambda1, tau, &grid, cfg)?;
    let samples: Vec<CurrentSample> = tr
        .states
        .iter()
        .map(|st| instantaneous_current(st, model, p0, profile, lambda1, lambda2, window, k_raw))
        .collect();
    let js: Vec<C64> = samples.iter().map(|c| c.j).collect();
    let fine = simpson(&js, 1.0 / 32.0) * tau;
    let coarse_pts: Vec<C64> = js.iter().step_by(2).cloned().collect();
    let coarse = simpson(&coarse_pts, 1.0 / 16.0) * tau;
    let scale = fine.norm().max(1e-300);
    let refinement_change = if fine == ZERO && coarse == ZERO { 0.0 } else { (fine - coarse).norm() / scale };
    if refinement_change > refinement_tol {
        return Err(Error::QuadratureRefinement { change: refinement_change });
    }
    let prediction = -I * profile.integral() * k_raw;
    let relative_error = if prediction.norm() > 0.0 { (fine - prediction).norm() / prediction.norm() } else { fine.norm() };
    Ok(ChargeResult { tau, charge: fine, prediction, relative_error, refinement_change, samples })
}

/// Occupied frame of P(s) = G(s)P_λG(s)†.
pub fn instantaneous_frame(p0: &FermiProjector, profile: &DrivingProfile, lambda1: &SwitchFunction, s: f64) -> CMat {
    gauge(lambda1, profile.phi(s)).apply(&p0.occupied)
}

/// Column slice helper for callers holding full propagators.
pub fn occupied_columns(u: &CMat, n: usize) -> CMat {
    u.slice(s![.., ..n]).to_owned()
}
