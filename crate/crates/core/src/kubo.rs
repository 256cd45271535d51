//! Kubo-Štreda conductance trace, the Fukui-Hatsugai-Suzuki Chern number,
//! convention calibration and λ-stability sweeps.
//!
//! On a finite sample the plain trace of P[[P,Λ1],[P,Λ2]]P vanishes
//! identically (it equals Tr P[Λ2,Λ1] = 0), so traces are taken against a
//! bulk window W: Tr W·X. The window picks the contribution of the crossing
//! of the two switches at the origin and excludes the compensating
//! contributions from sample edges or torus seams.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dagger, eigh, CMat, SiteOperator, C64, ONE, ZERO};
use crate::model::{Direction, MagneticModel, SwitchFunction};
use crate::spectral::{diagonalize, fermi_projector, FermiProjector};

/// Indicator of the bulk region where the trace is taken.
#[derive(Clone, Debug)]
pub struct BulkWindow {
    pub half_width: f64,
    pub weights: SiteOperator,
}

impl BulkWindow {
    /// |x1| ≤ r and |x2| ≤ r on the lattice; the disk x1² + x2² ≤ r² for dense positions.
    pub fn square(model: &MagneticModel, r: f64) -> BulkWindow {
        let weights = match (&model.x1_op, &model.x2_op) {
            (SiteOperator::Diagonal(a), SiteOperator::Diagonal(b)) => SiteOperator::Diagonal(
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| if x.abs() <= r && y.abs() <= r { 1.0 } else { 0.0 })
                    .collect(),
            ),
            (p, q) => {
                let (a, b) = (p.to_dense(), q.to_dense());
                let r2 = a.dot(&a) + b.dot(&b);
                SiteOperator::dense(r2)
                    .expect("r² is Hermitian")
                    .map(|v| if v <= r * r { 1.0 } else { 0.0 })
            }
        };
        BulkWindow { half_width: r, weights }
    }

    /// W = 1 (plain trace).
    pub fn full(model: &MagneticModel) -> BulkWindow {
        BulkWindow { half_width: f64::INFINITY, weights: SiteOperator::Diagonal(Array1::ones(model.dim())) }
    }

    /// Tr(W·Ψ M Ψ†) = tr(M·Ψ†WΨ)
    pub fn frame_trace(&self, psi: &CMat, m: &CMat) -> C64 {
        let w = dagger(psi).dot(&self.weights.left_mul(psi));
        (m * &w.t()).sum()
    }

    /// Tr(W·X) for a dense operator.
    pub fn trace(&self, x: &CMat) -> C64 {
        match &self.weights {
            SiteOperator::Diagonal(d) => d.iter().zip(x.diag().iter()).map(|(w, z)| z * *w).sum(),
            SiteOperator::Dense { matrix, .. } => (matrix * &x.t()).sum(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConductanceResult {
    /// Tr W·P[[P,Λ1],[P,Λ2]]P
    pub raw_trace: C64,
    /// Tr W·[PΛ1P, PΛ2P]
    pub cyclic_trace: C64,
    pub imag_purity: f64,
    pub window_half_width: f64,
    pub normalized: Option<f64>,
    pub convention_constant: Option<C64>,
}

impl ConductanceResult {
    pub fn normalize(mut self, convention: &Convention) -> Self {
        let c = convention.constant();
        self.normalized = Some((self.raw_trace / c).re);
        self.convention_constant = Some(c);
        self
    }
}

/// Both trace routes from the occupied frame Ψ (P = ΨΨ†), without direction checks.
pub fn kubo_trace_pair(fp: &FermiProjector, a: &SiteOperator, b: &SiteOperator, window: &BulkWindow) -> (C64, C64) {
    let psi = &fp.occupied;
    if psi.ncols() == 0 {
        return (ZERO, ZERO);
    }
    let ap = a.left_mul(psi);
    let bp = b.left_mul(psi);
    let pd = dagger(psi);
    let paa = pd.dot(&ap);
    let pbb = pd.dot(&bp);
    let c12 = dagger(&ap).dot(&bp);
    let c21 = dagger(&c12);
    let ab = paa.dot(&pbb);
    let ba = pbb.dot(&paa);
    // P[[P,A],[P,B]]P = −PA(1−P)BP + PB(1−P)AP
    let m_nested = (&c21 - &ba) - (&c12 - &ab);
    let m_cyclic = &ab - &ba;
    (window.frame_trace(psi, &m_nested), window.frame_trace(psi, &m_cyclic))
}

/// Literal dense evaluation Tr W·P[[P,A],[P,B]]P.
pub fn kubo_trace_dense(p: &CMat, a: &CMat, b: &CMat, window: &BulkWindow) -> C64 {
    let pa = p.dot(a) - a.dot(p);
    let pb = p.dot(b) - b.dot(p);
    let inner = pa.dot(&pb) - pb.dot(&pa);
    window.trace(&p.dot(&inner).dot(p))
}

pub fn kubo_streda_trace(
    fp: &FermiProjector,
    lambda1: &SwitchFunction,
    lambda2: &SwitchFunction,
    window: &BulkWindow,
) -> Result<ConductanceResult> {
    if lambda1.direction != Direction::X1 || lambda2.direction != Direction::X2 {
        return Err(Error::InvalidArgument("expected an x1 switch and an x2 switch".into()));
    }
    let (raw, cyc) = kubo_trace_pair(fp, &lambda1.op, &lambda2.op, window);
    if lambda1.op.is_diagonal() && lambda2.op.is_diagonal() {
        let scale = 1.0 + fp.occupied_count as f64 * 1e-3;
        if (raw - cyc).norm() > 1e-9 * scale {
            return Err(Error::InvalidArgument(format!(
                "cyclic identity violated: |nested - cyclic| = {:.3e}",
                (raw - cyc).norm()
            )));
        }
    }
    let imag_purity = if raw.norm() > 0.0 { raw.re.abs() / raw.norm() } else { 0.0 };
    Ok(ConductanceResult {
        raw_trace: raw,
        cyclic_trace: cyc,
        imag_purity,
        window_half_width: window.half_width,
        normalized: None,
        convention_constant: None,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChernResult {
    pub chern: i64,
    /// |sum − round(sum)| before rounding
    pub residue: f64,
    pub raw: f64,
    pub grid: usize,
}

/// Harper matrix of flux p/q at quasimomenta (k1, κ); κ twists the bond
/// closing the q-site magnetic cell in the x2 direction.
pub fn harper_matrix(p: u32, q: u32, k1: f64, kappa: f64) -> CMat {
    let q = q as usize;
    let alpha = p as f64 / q as f64;
    let mut h = CMat::zeros((q, q));
    for b in 0..q {
        h[[b, b]] += C64::new(-2.0 * (k1 + 2.0 * PI * alpha * b as f64).cos(), 0.0);
        let next = (b + 1) % q;
        let t = if next == 0 { -C64::from_polar(1.0, kappa) } else { -ONE };
        h[[next, b]] += t;
        h[[b, next]] += t.conj();
    }
    h
}

fn det(mut a: CMat) -> C64 {
    let n = a.nrows();
    let mut d = ONE;
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[[i, c]].norm().partial_cmp(&a[[j, c]].norm()).unwrap()).unwrap();
        if a[[piv, c]].norm() == 0.0 {
            return ZERO;
        }
        if piv != c {
            for k in 0..n {
                let t = a[[c, k]];
                a[[c, k]] = a[[piv, k]];
                a[[piv, k]] = t;
            }
            d = -d;
        }
        let pv = a[[c, c]];
        d *= pv;
        for i in c + 1..n {
            let f = a[[i, c]] / pv;
            for k in c..n {
                let t = a[[c, k]];
                a[[i, k]] -= f * t;
            }
        }
    }
    d
}

fn fhs_sum(p: u32, q: u32, bands: std::ops::Range<usize>, n: usize) -> Result<f64> {
    let states: Vec<Vec<CMat>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let k1 = 2.0 * PI * i as f64 / n as f64;
                    let kappa = 2.0 * PI * j as f64 / n as f64;
                    let (_, v) = eigh(&harper_matrix(p, q, k1, kappa))?;
                    Ok(v.slice(ndarray::s![.., bands.clone()]).to_owned())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let link = |a: &CMat, b: &CMat| -> C64 {
        let d = det(dagger(a).dot(b));
        d / d.norm()
    };
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (i1, j1) = ((i + 1) % n, (j + 1) % n);
            let u1 = link(&states[i][j], &states[i1][j]);
            let u2 = link(&states[i1][j], &states[i1][j1]);
            let u3 = link(&states[i][j1], &states[i1][j1]);
            let u4 = link(&states[i][j], &states[i][j1]);
            total += (u1 * u2 / (u3 * u4)).arg();
        }
    }
    // Orientation (κ, k1) so that the lowest p/q = 1/3 band carries +1, the
    // sign of the Diophantine rule r = s·q + t·p.
    Ok(-total / (2.0 * PI))
}

/// Chern number of the bands `bands` (ascending order, 0-based) for flux p/q,
/// starting from a 24×24 grid and doubling up to 192×192 when the pre-rounding
/// residue exceeds 0.1.
pub fn chern_fhs(p: u32, q: u32, bands: std::ops::Range<usize>) -> Result<ChernResult> {
    if bands.end > q as usize || bands.is_empty() {
        return Err(Error::InvalidArgument(format!("band range {bands:?} outside 0..{q}")));
    }
    let mut grid = 24;
    loop {
        let raw = fhs_sum(p, q, bands.clone(), grid)?;
        let residue = (raw - raw.round()).abs();
        if residue <= 0.1 {
            return Ok(ChernResult { chern: raw.round() as i64, residue, raw, grid });
        }
        if grid >= 192 {
            return Err(Error::ChernResidue { residue, grid });
        }
        grid *= 2;
    }
}

/// (min, max) of each Harper band of flux p/q over an n×n quasimomentum grid.
pub fn harper_band_edges(p: u32, q: u32, n: usize) -> Result<Vec<(f64, f64)>> {
    let mut edges = vec![(f64::INFINITY, f64::NEG_INFINITY); q as usize];
    for i in 0..n {
        for j in 0..n {
            let k1 = 2.0 * PI * i as f64 / n as f64;
            let kappa = 2.0 * PI * j as f64 / n as f64;
            let (e, _) = eigh(&harper_matrix(p, q, k1, kappa))?;
            for (b, &x) in e.iter().enumerate() {
                edges[b] = (edges[b].0.min(x), edges[b].1.max(x));
            }
        }
    }
    Ok(edges)
}

/// Number of bulk bands entirely below `energy`, or None when `energy` lies
/// within `margin` of a band.
pub fn bulk_bands_below(p: u32, q: u32, energy: f64, margin: f64) -> Result<Option<usize>> {
    let edges = harper_band_edges(p, q, 48)?;
    if edges.iter().any(|&(lo, hi)| energy > lo - margin && energy < hi + margin) {
        return Ok(None);
    }
    Ok(Some(edges.iter().filter(|e| e.1 < energy).count()))
}

/// Center of the r-th bulk gap (between bands r−1 and r, 1-based r).
pub fn bulk_gap_center(p: u32, q: u32, r: usize) -> Result<Option<f64>> {
    let edges = harper_band_edges(p, q, 48)?;
    if r == 0 || r >= edges.len() || edges[r - 1].1 >= edges[r].0 {
        return Ok(None);
    }
    Ok(Some(0.5 * (edges[r - 1].1 + edges[r].0)))
}

/// Hall integer of the r-th gap from the Diophantine equation r = s·q + t·p with |t| ≤ q/2.
pub fn diophantine_chern(p: u32, q: u32, r: u32) -> Option<i64> {
    let (p, q, r) = (p as i64, q as i64, r as i64);
    (-q / 2..=q / 2).find(|t| (r - t * p).rem_euclid(q) == 0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Convention {
    /// raw / oracle
    pub measured: C64,
    pub canonical: C64,
    pub label: String,
    pub relative_deviation: f64,
}

impl Convention {
    /// The canonical candidate when the measurement is within 1% of it,
    /// otherwise the measured value.
    pub fn constant(&self) -> C64 {
        if self.relative_deviation <= 1e-2 {
            self.canonical
        } else {
            self.measured
        }
    }
}

pub fn convention_candidates() -> Vec<(&'static str, C64)> {
    let i = C64::new(0.0, 1.0);
    vec![
        ("i/2pi", i / (2.0 * PI)),
        ("-i/2pi", -i / (2.0 * PI)),
        ("2pi*i", i * 2.0 * PI),
        ("-2pi*i", -i * 2.0 * PI),
        ("i", i),
        ("-i", -i),
    ]
}

pub fn calibrate_convention(reference: &ConductanceResult, oracle: i64) -> Result<Convention> {
    if oracle == 0 {
        return Err(Error::ZeroOracle);
    }
    let measured = reference.raw_trace / oracle as f64;
    let (label, canonical) = convention_candidates()
        .into_iter()
        .min_by(|a, b| (measured - a.1).norm().partial_cmp(&(measured - b.1).norm()).unwrap())
        .unwrap();
    Ok(Convention {
        measured,
        canonical,
        label: label.to_string(),
        relative_deviation: (measured - canonical).norm() / canonical.norm(),
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FermiLevel {
    Fixed { energy: f64 },
    /// Center of the widest spacing inside [lo, hi].
    GapCenter { lo: f64, hi: f64 },
}

impl FermiLevel {
    pub fn resolve(&self, eig: &crate::spectral::EigenSystem) -> Option<f64> {
        match *self {
            FermiLevel::Fixed { energy } => Some(energy),
            FermiLevel::GapCenter { lo, hi } => crate::spectral::widest_gap_center(eig, lo, hi).map(|c| c.0),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityPoint {
    pub lambda: f64,
    pub fermi_energy: f64,
    pub gap_margin: f64,
    pub raw: C64,
    pub normalized: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityReport {
    pub points: Vec<StabilityPoint>,
    pub dropped: Vec<(f64, String)>,
    /// max − min of the normalized values
    pub max_deviation: f64,
}

impl StabilityReport {
    pub fn lambda_grid(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.lambda).collect()
    }
    pub fn k_values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.normalized).collect()
    }
    pub fn gap_margins(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.gap_margin).collect()
    }
}

/// Normalized K over a λ grid. `family(λ)` builds the model; switches and
/// window are shared across the family (same basis).
pub fn lambda_stability_sweep<F>(
    family: F,
    lambda_grid: &[f64],
    fermi: FermiLevel,
    lambda1: &SwitchFunction,
    lambda2: &SwitchFunction,
    window: &BulkWindow,
    convention: &Convention,
    delta_min: Option<f64>,
) -> Result<StabilityReport>
where
    F: Fn(f64) -> Result<MagneticModel> + Sync,
{
    let outcomes: Vec<(f64, Result<StabilityPoint>)> = lambda_grid
        .par_iter()
        .map(|&lambda| {
            let run = || -> Result<StabilityPoint> {
                let model = family(lambda)?;
                let eig = diagonalize(&model)?;
                let ef = fermi.resolve(&eig).ok_or(Error::NoGap { fermi: f64::NAN, margin: 0.0, required: 0.0 })?;
                let fp = fermi_projector(&eig, ef, delta_min)?;
                let k = kubo_streda_trace(&fp, lambda1, lambda2, window)?.normalize(convention);
                Ok(StabilityPoint {
                    lambda,
                    fermi_energy: ef,
                    gap_margin: fp.fermi_margin,
                    raw: k.raw_trace,
                    normalized: k.normalized.unwrap(),
                })
            };
            (lambda, run())
        })
        .collect();
    let mut points = Vec::new();
    let mut dropped = Vec::new();
    for (lambda, r) in outcomes {
        match r {
            Ok(p) => points.push(p),
            Err(e @ Error::NoGap { .. }) | Err(e @ Error::WeakCoupling { .. }) => dropped.push((lambda, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let hi = points.iter().map(|p| p.normalized).fold(f64::NEG_INFINITY, f64::max);
    let lo = points.iter().map(|p| p.normalized).fold(f64::INFINITY, f64::min);
    Ok(StabilityReport { points, dropped, max_deviation: hi - lo })
}

/// Integer-valued diagonal unitary test helper: exp(iθ(x)) conjugation of a
/// dense operator.
pub fn conjugate_by_phases(a: &CMat, theta: &Array1<f64>) -> CMat {
    Array2::from_shape_fn(a.raw_dim(), |(i, j)| a[[i, j]] * C64::from_polar(1.0, theta[i] - theta[j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harper_is_hermitian_and_periodic() {
        let h = harper_matrix(1, 3, 0.3, 1.1);
        assert!(crate::linalg::hermitian_defect(&h) < 1e-15);
        let h2 = harper_matrix(1, 3, 0.3 + 2.0 * PI, 1.1 + 2.0 * PI);
        assert!(crate::linalg::frobenius(&(h - h2)) < 1e-12);
    }

    #[test]
    fn determinant() {
        let a = Array2::from_shape_vec((2, 2), vec![ONE, C64::new(2.0, 0.0), C64::new(3.0, 0.0), C64::new(4.0, 0.0)]).unwrap();
        assert!((det(a) - C64::new(-2.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn bulk_gaps_of_one_third() {
        let c = bulk_gap_center(1, 3, 1).unwrap().unwrap();
        assert_eq!(bulk_bands_below(1, 3, c, 0.1).unwrap(), Some(1));
        assert_eq!(bulk_bands_below(1, 3, 0.0, 0.0).unwrap(), None);
        assert!(bulk_gap_center(1, 3, 3).unwrap().is_none());
    }

    #[test]
    fn diophantine() {
        assert_eq!(diophantine_chern(1, 3, 1), Some(1));
        assert_eq!(diophantine_chern(1, 3, 2), Some(-1));
        assert_eq!(diophantine_chern(2, 5, 1), Some(-2));
    }
}
