//! The Nenciu expansion P_τ(s) ≈ Σ τ^{−j} B_j(s) of the driven Fermi
//! projection in the gauge frame, the hierarchy it satisfies, and the
//! remainder of its finite truncations against the exact evolution.
//!
//! B₀ = P(s). For j ≥ 1 the off-diagonal part of B_j solves
//! [H(s), B_j] = iḂ_{j−1} (the resolvent sandwich times κ), and the diagonal
//! blocks follow from B_j = Σ_{m=0}^{j} B_m B_{j−m}. Derivatives in s are
//! taken on the grid s + n·h and memoized, so each B_j(s + n·h) is built once.

use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adiabatic::{evolve, gauge, gauge_hamiltonian, gauge_hamiltonian_sparse, DrivingProfile, EvolveConfig};
use crate::error::{Error, Result};
use crate::fit::{loglog_fit, FitResult, WindowPolicy};
use crate::kubo::BulkWindow;
use crate::linalg::{dagger, frobenius, op_norm, CMat, SiteOperator, C64, I, ONE, ZERO};
use crate::model::{sparse_commutator, MagneticModel, SwitchFunction};
use crate::spectral::{riesz_sandwich_in, EigenSystem, FermiProjector};

pub const DEFAULT_FD_STEP: f64 = 1e-3;
pub const DEFAULT_ORDER: usize = 3;

/// Inputs shared by every expansion evaluation.
#[derive(Clone, Copy)]
pub struct ExpansionSetup<'a> {
    pub model: &'a MagneticModel,
    pub eig: &'a EigenSystem,
    pub fermi: &'a FermiProjector,
    pub profile: &'a DrivingProfile,
    pub lambda1: &'a SwitchFunction,
    pub kappa: C64,
}

#[derive(Clone, Debug)]
pub struct ExpansionTerms {
    pub s: f64,
    pub phi: f64,
    pub order: usize,
    /// B₀(s) … B_k(s)
    pub terms: Vec<CMat>,
    /// S_j = Σ_{m=1}^{j−1} B_m B_{j−m}; zero for j ≤ 1.
    pub s_terms: Vec<CMat>,
    /// ‖iḂ_j − [H(s), B_{j+1}]‖ for j < k, plain central differences.
    pub residual_ode: Vec<f64>,
    /// ‖B_j − Σ_{m=0}^{j} B_m B_{j−m}‖ for j ≤ k.
    pub residual_alg: Vec<f64>,
    pub fd_step: f64,
    pub kappa: C64,
    /// ‖Ṗ_closed − Ṗ_fd‖_F with Richardson differences.
    pub b0_dot_check: f64,
}

impl ExpansionTerms {
    /// Σ_{j≤k} τ^{−j} B_j
    pub fn truncated(&self, tau: f64, k: usize) -> CMat {
        let mut out = self.terms[0].clone();
        for (j, b) in self.terms.iter().enumerate().take(k + 1).skip(1) {
            out.scaled_add(C64::new(tau.powi(-(j as i32)), 0.0), b);
        }
        out
    }

    pub fn report(&self, calibration: Option<&KappaCalibration>) -> ExpansionReport {
        ExpansionReport {
            s: self.s,
            order: self.order,
            norms: self.terms.iter().map(op_norm).collect(),
            residual_ode: self.residual_ode.clone(),
            residual_alg: self.residual_alg.clone(),
            fd_step: self.fd_step,
            kappa: self.kappa,
            b0_dot_check: self.b0_dot_check,
            calibration: calibration.cloned(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub s: f64,
    pub order: usize,
    pub norms: Vec<f64>,
    pub residual_ode: Vec<f64>,
    pub residual_alg: Vec<f64>,
    pub fd_step: f64,
    pub kappa: C64,
    pub b0_dot_check: f64,
    pub calibration: Option<KappaCalibration>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KappaCalibration {
    pub s: f64,
    pub kappa: C64,
    pub label: String,
    /// ‖i·Ṗ − [H(s), κ·R]‖ for the winner, R the resolvent sandwich of [P, Ṗ].
    pub residual: f64,
    pub relative_residual: f64,
    pub candidates: Vec<(String, f64)>,
}

pub fn kappa_candidates() -> Vec<(&'static str, C64)> {
    let t = 1.0 / (2.0 * PI);
    vec![
        ("1", ONE),
        ("-1", -ONE),
        ("i", I),
        ("-i", -I),
        ("1/(2pi)", C64::new(t, 0.0)),
        ("-1/(2pi)", C64::new(-t, 0.0)),
        ("i/(2pi)", C64::new(0.0, t)),
        ("-i/(2pi)", C64::new(0.0, -t)),
        ("2pi", C64::new(2.0 * PI, 0.0)),
        ("-2pi", C64::new(-2.0 * PI, 0.0)),
        ("2pi*i", C64::new(0.0, 2.0 * PI)),
        ("-2pi*i", C64::new(0.0, -2.0 * PI)),
    ]
}

/// Gauge-frame data at one grid point.
struct Frame {
    phi: f64,
    g: f64,
    vectors: CMat,
    p: CMat,
}

struct Builder<'a> {
    setup: ExpansionSetup<'a>,
    s: f64,
    h: f64,
    frames: HashMap<i32, Frame>,
    memo: HashMap<(i32, usize), CMat>,
    s_memo: HashMap<(i32, usize), CMat>,
}

fn scaled_diff(a: &CMat, b: &CMat, scale: f64) -> CMat {
    (a - b).mapv(|z| z * scale)
}

impl<'a> Builder<'a> {
    fn new(setup: ExpansionSetup<'a>, s: f64, h: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
        }
        Ok(Builder { setup, s, h, frames: HashMap::new(), memo: HashMap::new(), s_memo: HashMap::new() })
    }

    fn at(&self, n: i32) -> f64 {
        self.s + n as f64 * self.h
    }

    fn frame(&mut self, n: i32) -> Result<&Frame> {
        if !self.frames.contains_key(&n) {
            let s = self.at(n);
            if !(-1e-12..=1.0 + 1e-12).contains(&s) {
                return Err(Error::InvalidArgument(format!(
                    "finite-difference stencil leaves [0, 1]: s = {s:.6} (h = {})",
                    self.h
                )));
            }
            let st = self.setup;
            let phi = st.profile.phi(s);
            let gu = gauge(st.lambda1, phi);
            let vectors = gu.apply(&st.eig.vectors);
            let occ = gu.apply(&st.fermi.occupied);
            let p = occ.dot(&dagger(&occ));
            self.frames.insert(n, Frame { phi, g: st.profile.g(s), vectors, p });
        }
        Ok(&self.frames[&n])
    }

    /// Ṗ = i·g·[Λ1, P]
    fn p_dot(&mut self, n: i32) -> Result<CMat> {
        let lambda = &self.setup.lambda1.op;
        let f = self.frame(n)?;
        Ok(lambda.commutator_with(&f.p).mapv(|z| I * f.g * z))
    }

    /// κ·(resolvent sandwich of [P, X]) in the frame at n.
    fn sandwich(&mut self, n: i32, x: &CMat) -> Result<CMat> {
        let kappa = self.setup.kappa;
        let (energies, occ) = (&self.setup.eig.energies, self.setup.fermi.occupied_count);
        let f = self.frame(n)?;
        let c = f.p.dot(x) - x.dot(&f.p);
        Ok(riesz_sandwich_in(&f.vectors, energies, occ, &c).mapv(|z| kappa * z))
    }

    fn b(&mut self, n: i32, j: usize) -> Result<CMat> {
        if let Some(b) = self.memo.get(&(n, j)) {
            return Ok(b.clone());
        }
        let out = match j {
            0 => self.frame(n)?.p.clone(),
            1 => {
                let pd = self.p_dot(n)?;
                self.sandwich(n, &pd)?
            }
            _ => {
                let bd = self.richardson(n, j - 1)?;
                let r = self.sandwich(n, &bd)?;
                let s = self.s_term(n, j)?;
                let p = &self.frame(n)?.p;
                let psp = p.dot(&s).dot(p);
                r + &s - &psp.mapv(|z| z * 2.0)
            }
        };
        self.memo.insert((n, j), out.clone());
        Ok(out)
    }

    fn s_term(&mut self, n: i32, j: usize) -> Result<CMat> {
        if let Some(s) = self.s_memo.get(&(n, j)) {
            return Ok(s.clone());
        }
        let dim = self.setup.model.dim();
        let mut acc = CMat::from_elem((dim, dim), ZERO);
        for m in 1..j {
            let a = self.b(n, m)?;
            let b = self.b(n, j - m)?;
            acc = acc + a.dot(&b);
        }
        self.s_memo.insert((n, j), acc.clone());
        Ok(acc)
    }

    /// (B_j(n+1) − B_j(n−1)) / 2h
    fn central(&mut self, n: i32, j: usize) -> Result<CMat> {
        let up = self.b(n + 1, j)?;
        let down = self.b(n - 1, j)?;
        Ok(scaled_diff(&up, &down, 0.5 / self.h))
    }

    /// Richardson-extrapolated derivative of B_j at n, checked against the
    /// plain central difference and the O(h²) error estimate whose third
    /// derivative is read off the wider stencil n ± 2, n ± 4.
    fn richardson(&mut self, n: i32, j: usize) -> Result<CMat> {
        let h = self.h;
        let f1 = self.b(n + 1, j)?;
        let m1 = self.b(n - 1, j)?;
        let f2 = self.b(n + 2, j)?;
        let m2 = self.b(n - 2, j)?;
        let d1 = scaled_diff(&f1, &m1, 0.5 / h);
        let d2 = scaled_diff(&f2, &m2, 0.25 / h);
        let rich = (d1.mapv(|z| z * 4.0) - &d2).mapv(|z| z / 3.0);
        let f4 = self.b(n + 4, j)?;
        let m4 = self.b(n - 4, j)?;
        let third = (&f4 - &m4 - (&f2 - &m2).mapv(|z| z * 2.0)).mapv(|z| z / (16.0 * h * h * h));
        let size = [&f1, &m1, &f2, &m2, &f4, &m4].iter().map(|x| frobenius(x)).fold(0.0, f64::max);
        let estimate = h * h * frobenius(&third) / 6.0 + 64.0 * f64::EPSILON * size / h;
        let discrepancy = frobenius(&(&rich - &d1));
        if discrepancy > 10.0 * estimate {
            return Err(Error::FdUnstable { order: j, discrepancy, estimate });
        }
        Ok(rich)
    }
}

/// [H(s), X] with H(s) = G H G†.
fn gauge_commutator(model: &MagneticModel, lambda1: &SwitchFunction, phi: f64, x: &CMat) -> CMat {
    match (&model.sparse, &lambda1.op) {
        (Some(h), SiteOperator::Diagonal(d)) => {
            let hs = gauge_hamiltonian_sparse(h, d, phi);
            // X·H = (H·X†)† for Hermitian H
            hs.dot(x) - dagger(&hs.dot(&dagger(x)))
        }
        _ => {
            let hs = gauge_hamiltonian(model, lambda1, phi);
            hs.dot(x) - x.dot(&hs)
        }
    }
}

fn algebraic_residuals(terms: &[CMat]) -> Vec<f64> {
    (0..terms.len())
        .map(|j| {
            let mut acc = terms[j].clone();
            for m in 0..=j {
                acc = acc - terms[m].dot(&terms[j - m]);
            }
            op_norm(&acc)
        })
        .collect()
}

fn ode_residuals(builder: &mut Builder, k: usize) -> Result<Vec<f64>> {
    let (model, lambda1) = (builder.setup.model, builder.setup.lambda1);
    let phi = builder.frame(0)?.phi;
    (0..k)
        .map(|j| {
            let bd = builder.central(0, j)?;
            let next = builder.b(0, j + 1)?;
            let hb = gauge_commutator(model, lambda1, phi, &next);
            Ok(op_norm(&(bd.mapv(|z| I * z) - hb)))
        })
        .collect()
}

/// B₀(s) … B_k(s) with both hierarchy residual vectors.
pub fn b_terms(setup: ExpansionSetup, s: f64, k: usize, h: f64) -> Result<ExpansionTerms> {
    let mut builder = Builder::new(setup, s, h)?;
    let terms: Vec<CMat> = (0..=k).map(|j| builder.b(0, j)).collect::<Result<_>>()?;
    let s_terms: Vec<CMat> = (0..=k).map(|j| builder.s_term(0, j)).collect::<Result<_>>()?;
    let closed = builder.p_dot(0)?;
    let fd = builder.richardson(0, 0)?;
    let b0_dot_check = frobenius(&(closed - fd));
    let residual_ode = ode_residuals(&mut builder, k)?;
    let residual_alg = algebraic_residuals(&terms);
    let phi = builder.frame(0)?.phi;
    Ok(ExpansionTerms {
        s,
        phi,
        order: k,
        terms,
        s_terms,
        residual_ode,
        residual_alg,
        fd_step: h,
        kappa: setup.kappa,
        b0_dot_check,
    })
}

/// Recomputes (residual_ode, residual_alg) for terms built at terms.s with step terms.fd_step.
pub fn hierarchy_residuals(setup: ExpansionSetup, terms: &ExpansionTerms) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut builder = Builder::new(ExpansionSetup { kappa: terms.kappa, ..setup }, terms.s, terms.fd_step)?;
    let ode = ode_residuals(&mut builder, terms.order)?;
    Ok((ode, algebraic_residuals(&terms.terms)))
}

/// Selects κ minimizing ‖i·Ṗ(s) − [H(s), κ·R]‖ with the closed-form Ṗ.
pub fn calibrate_kappa(setup: ExpansionSetup, s: f64) -> Result<KappaCalibration> {
    let mut builder = Builder::new(ExpansionSetup { kappa: ONE, ..setup }, s, DEFAULT_FD_STEP)?;
    let pd = builder.p_dot(0)?;
    if frobenius(&pd) == 0.0 {
        return Err(Error::ZeroOracle);
    }
    let r = builder.sandwich(0, &pd)?;
    let phi = builder.frame(0)?.phi;
    let hr = gauge_commutator(setup.model, setup.lambda1, phi, &r);
    let target = pd.mapv(|z| I * z);
    let candidates: Vec<(String, f64)> = kappa_candidates()
        .into_iter()
        .map(|(label, kappa)| (label.to_string(), op_norm(&(&target - &hr.mapv(|z| kappa * z)))))
        .collect();
    let (best, _) = candidates
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap())
        .unwrap();
    let (label, kappa) = kappa_candidates()[best];
    let residual = candidates[best].1;
    Ok(KappaCalibration {
        s,
        kappa,
        label: label.to_string(),
        residual,
        relative_residual: residual / setup.eig.norm().max(1.0),
        candidates,
    })
}

/// Tr W·B₁(s)[H(s), Λ2]
pub fn kubo_from_b1(terms: &ExpansionTerms, model: &MagneticModel, lambda1: &SwitchFunction, lambda2: &SwitchFunction, window: &BulkWindow) -> Result<C64> {
    if terms.order < 1 {
        return Err(Error::InvalidArgument("kubo_from_b1 needs B₁".into()));
    }
    let b1 = &terms.terms[1];
    if let (Some(h), SiteOperator::Diagonal(l1), SiteOperator::Diagonal(l2), SiteOperator::Diagonal(w)) =
        (&model.sparse, &lambda1.op, &lambda2.op, &window.weights)
    {
        // Tr W B X = Σ_{(i,k)} X_ik W_k B_ki
        let x = sparse_commutator(&gauge_hamiltonian_sparse(h, l1, terms.phi), l2);
        let mut acc = ZERO;
        for i in 0..x.n {
            for (k, v) in x.row(i) {
                acc += v * w[k] * b1[[k, i]];
            }
        }
        return Ok(acc);
    }
    let hs = gauge_hamiltonian(model, lambda1, terms.phi);
    let x = lambda2.op.right_mul(&hs) - lambda2.op.left_mul(&hs);
    Ok(window.trace(&b1.dot(&x)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RemainderRow {
    pub tau: f64,
    pub remainder: f64,
    pub remainder_halved: f64,
    pub halving_change: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RemainderReport {
    pub s: f64,
    pub order: usize,
    pub rows: Vec<RemainderRow>,
    pub fit: FitResult,
}

/// r(τ) = ‖P_τ(s) − Σ_{j≤k} τ^{−j}B_j(s)‖ over the τ grid, certified by step halving.
pub fn truncation_remainder(
    setup: ExpansionSetup,
    terms: &ExpansionTerms,
    taus: &[f64],
    k: usize,
    cfg: &EvolveConfig,
    policy: WindowPolicy,
) -> Result<RemainderReport> {
    if k > terms.order {
        return Err(Error::InvalidArgument(format!("order {k} exceeds the computed {}", terms.order)));
    }
    let fine = EvolveConfig { steps: cfg.steps.halved(), ..cfg.clone() };
    let jobs: Vec<(f64, bool)> = taus.iter().flat_map(|&t| [(t, false), (t, true)]).collect();
    let values: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(tau, halved)| {
            let c = if halved { &fine } else { cfg };
            let tr = evolve(setup.model, setup.eig, setup.fermi, setup.profile, setup.lambda1, tau, &[terms.s], c)?;
            Ok(op_norm(&(tr.states[0].p_tau() - terms.truncated(tau, k))))
        })
        .collect();
    let mut values = values.into_iter();
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let coarse = values.next().unwrap()?;
        let finer = values.next().unwrap()?;
        let change = (coarse - finer).abs() / finer;
        if change > 0.2 {
            return Err(Error::IntegratorDominated { tau, change: 100.0 * change });
        }
        rows.push(RemainderRow { tau, remainder: finer, remainder_halved: coarse, halving_change: change });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.tau).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.remainder).collect();
    let fit = loglog_fit(&xs, &ys, policy)?;
    Ok(RemainderReport { s: terms.s, order: k, rows, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adiabatic::DriveKind;
    use crate::model::{build_hofstadter, make_switch, Boundary, Direction, LatticeSpec, PotentialSpec};
    use crate::spectral::{diagonalize, fermi_projector, gap_center};

    fn small() -> (MagneticModel, EigenSystem, f64) {
        let spec = LatticeSpec::new(12, 1, 3, Boundary::Torus);
        let m = build_hofstadter(&spec, &PotentialSpec::zero(), 0.0, None).unwrap();
        let e = diagonalize(&m).unwrap();
        let ef = gap_center(&e, 1, 0.1).unwrap();
        (m, e, ef)
    }

    #[test]
    fn zero_drive_terms_vanish() {
        let (m, e, ef) = small();
        let fp = fermi_projector(&e, ef, None).unwrap();
        let l1 = make_switch(Direction::X1, 1.5, 2, &m).unwrap();
        let prof = DrivingProfile::new(DriveKind::Zero, 2).unwrap();
        let setup = ExpansionSetup { model: &m, eig: &e, fermi: &fp, profile: &prof, lambda1: &l1, kappa: -I };
        let t = b_terms(setup, 0.5, 3, 1e-3).unwrap();
        for b in &t.terms[1..] {
            assert!(frobenius(b) <= 1e-12);
        }
        assert!(t.residual_ode.iter().all(|&r| r <= 1e-12));
    }

    #[test]
    fn b1_is_block_off_diagonal() {
        let (m, e, ef) = small();
        let fp = fermi_projector(&e, ef, None).unwrap();
        let l1 = make_switch(Direction::X1, 1.5, 2, &m).unwrap();
        let prof = DrivingProfile::new(DriveKind::Ramp, 3).unwrap();
        let setup = ExpansionSetup { model: &m, eig: &e, fermi: &fp, profile: &prof, lambda1: &l1, kappa: -I };
        let t = b_terms(setup, 0.4, 1, 1e-3).unwrap();
        let p = &t.terms[0];
        let q = crate::linalg::eye(p.nrows()) - p;
        let b1 = &t.terms[1];
        assert!(frobenius(b1) > 1e-3);
        assert!(op_norm(&p.dot(b1).dot(p)) + op_norm(&q.dot(b1).dot(&q)) <= 1e-8);
    }
}
