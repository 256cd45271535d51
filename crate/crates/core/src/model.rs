//! Finite magnetic Hamiltonians, switch functions and the current observable.
//!
//! Two backends are provided. The Hofstadter lattice uses the Landau gauge
//! (Peierls phases on x1-bonds depending on the x2 row) and is sparse. The
//! truncated Landau basis keeps `n_levels` Landau levels with guiding-center
//! index 0..=m_max in the symmetric gauge; positions there are dense.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    commutator, frobenius, hermitian_defect, Csr, CMat, SiteOperator, C64, ONE, ZERO,
};
use crate::poly::{smoothstep, Poly};
use crate::quadrature::gauss_hermite;

const HERMITICITY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Open,
    Torus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub width: usize,
    pub flux_numerator: u32,
    pub flux_denominator: u32,
    pub boundary: Boundary,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl LatticeSpec {
    pub fn new(width: usize, p: u32, q: u32, boundary: Boundary) -> Self {
        LatticeSpec { width, flux_numerator: p, flux_denominator: q, boundary }
    }

    /// Zero flux (p = 0) is accepted as the free lattice.
    pub fn validate(&self) -> Result<()> {
        let (p, q, l) = (self.flux_numerator, self.flux_denominator, self.width);
        if q == 0 {
            return Err(Error::InvalidSpec("flux denominator must be positive".into()));
        }
        if p != 0 {
            if p >= q {
                return Err(Error::InvalidSpec(format!("need 0 < p < q, got p={p}, q={q}")));
            }
            if gcd(p, q) != 1 {
                return Err(Error::InvalidSpec(format!("p={p} and q={q} are not coprime")));
            }
        }
        if l < 2 * q as usize || l < 2 {
            return Err(Error::InvalidSpec(format!("width {l} is below 2q = {}", 2 * q)));
        }
        if self.boundary == Boundary::Torus && p != 0 && l % q as usize != 0 {
            return Err(Error::InvalidSpec(format!(
                "torus width {l} is not a multiple of q = {q}; flux would not close"
            )));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.flux_numerator as f64 / self.flux_denominator as f64
    }

    pub fn dim(&self) -> usize {
        self.width * self.width
    }

    /// Site index of column a (x1) and row b (x2).
    pub fn index(&self, a: usize, b: usize) -> usize {
        b * self.width + a
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        i as f64 - 0.5 * (self.width as f64 - 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialKind {
    Zero,
    GaussianBumps,
    Cosine,
}

/// One term of a potential. For Gaussian bumps: amplitude·exp(−|x−center|²/(2 width²)).
/// For cosines: amplitude·cos(center·x + width), i.e. `center` is the wave vector and
/// `width` the phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialTerm {
    pub center: [f64; 2],
    pub width: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    pub kind: PotentialKind,
    #[serde(default)]
    pub parameters: Vec<PotentialTerm>,
    pub sup_norm: f64,
    #[serde(default = "default_smoothness")]
    pub smoothness_order: u32,
}

fn default_smoothness() -> u32 {
    6
}

impl PotentialSpec {
    pub fn zero() -> Self {
        PotentialSpec { kind: PotentialKind::Zero, parameters: vec![], sup_norm: 0.0, smoothness_order: 6 }
    }

    pub fn gaussian_bumps(parameters: Vec<PotentialTerm>) -> Self {
        PotentialSpec { kind: PotentialKind::GaussianBumps, parameters, sup_norm: f64::INFINITY, smoothness_order: 6 }
    }

    pub fn cosine(parameters: Vec<PotentialTerm>) -> Self {
        PotentialSpec { kind: PotentialKind::Cosine, parameters, sup_norm: f64::INFINITY, smoothness_order: 6 }
    }

    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        match self.kind {
            PotentialKind::Zero => 0.0,
            PotentialKind::GaussianBumps => self
                .parameters
                .iter()
                .map(|t| {
                    let d2 = (x1 - t.center[0]).powi(2) + (x2 - t.center[1]).powi(2);
                    t.amplitude * (-d2 / (2.0 * t.width * t.width)).exp()
                })
                .sum(),
            PotentialKind::Cosine => self
                .parameters
                .iter()
                .map(|t| t.amplitude * (t.center[0] * x1 + t.center[1] * x2 + t.width).cos())
                .sum(),
        }
    }

    /// Rescales amplitudes so that the maximum of |V| over `points` is 1 and
    /// records that value as the sup norm.
    pub fn normalized_on(mut self, points: &[(f64, f64)]) -> Self {
        let m = points.iter().fold(0.0f64, |m, &(a, b)| m.max(self.eval(a, b).abs()));
        if m > 0.0 {
            for t in &mut self.parameters {
                t.amplitude /= m;
            }
            self.sup_norm = 1.0;
        } else {
            self.sup_norm = 0.0;
        }
        self
    }

    /// Normalizes over the sites of a lattice.
    pub fn normalized_on_lattice(self, spec: &LatticeSpec) -> Self {
        let pts: Vec<(f64, f64)> = (0..spec.width)
            .flat_map(|b| (0..spec.width).map(move |a| (a, b)))
            .map(|(a, b)| (spec.coordinate(a), spec.coordinate(b)))
            .collect();
        self.normalized_on(&pts)
    }

    fn check_bound(&self, sampled: f64) -> Result<()> {
        if sampled > self.sup_norm * (1.0 + 1e-12) + 1e-300 {
            return Err(Error::PotentialBound { sampled, declared: self.sup_norm });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    Hofstadter { spec: LatticeSpec },
    LandauBasis { n_levels: usize, m_max: usize },
}

#[derive(Clone, Debug)]
pub struct MagneticModel {
    pub hamiltonian: CMat,
    /// Sparse copy of the Hamiltonian (lattice backend only).
    pub sparse: Option<Csr>,
    pub x1_op: SiteOperator,
    pub x2_op: SiteOperator,
    pub field_b: f64,
    pub lambda: f64,
    pub potential: PotentialSpec,
    pub backend: Backend,
    pub magnetic_length: f64,
    /// Coordinate range (min, max) along x1 and x2.
    pub extent: [(f64, f64); 2],
}

impl MagneticModel {
    pub fn dim(&self) -> usize {
        self.hamiltonian.nrows()
    }

    pub fn is_periodic(&self) -> bool {
        matches!(&self.backend, Backend::Hofstadter { spec } if spec.boundary == Boundary::Torus)
    }

    pub fn lattice(&self) -> Option<&LatticeSpec> {
        match &self.backend {
            Backend::Hofstadter { spec } => Some(spec),
            Backend::LandauBasis { .. } => None,
        }
    }

    pub fn position(&self, d: Direction) -> &SiteOperator {
        match d {
            Direction::X1 => &self.x1_op,
            Direction::X2 => &self.x2_op,
        }
    }

    /// Site coordinates (lattice backend).
    pub fn site_coordinates(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match (&self.x1_op, &self.x2_op) {
            (SiteOperator::Diagonal(a), SiteOperator::Diagonal(b)) => Some((a.to_vec(), b.to_vec())),
            _ => None,
        }
    }

    /// Upper bound on the spectral radius of H (Gershgorin or Frobenius).
    pub fn norm_bound(&self) -> f64 {
        match &self.sparse {
            Some(s) => {
                let (lo, hi) = s.gershgorin();
                lo.abs().max(hi.abs())
            }
            None => frobenius(&self.hamiltonian),
        }
    }

    /// Product of link variables around the counterclockwise plaquette with
    /// lower-left corner (a, b).
    pub fn plaquette_phase(&self, a: usize, b: usize) -> Option<C64> {
        let spec = self.lattice()?;
        let l = spec.width;
        let wrap = spec.boundary == Boundary::Torus;
        if !wrap && (a + 1 >= l || b + 1 >= l) {
            return None;
        }
        let (a1, b1) = ((a + 1) % l, (b + 1) % l);
        let link = |i: usize, j: usize| -> C64 { -self.hamiltonian[[j, i]] };
        let c0 = spec.index(a, b);
        let c1 = spec.index(a1, b);
        let c2 = spec.index(a1, b1);
        let c3 = spec.index(a, b1);
        Some(link(c0, c1) * link(c1, c2) * link(c2, c3) * link(c3, c0))
    }

    /// Largest deviation of any plaquette product from exp(2πi·p/q).
    pub fn flux_defect(&self) -> Option<f64> {
        let spec = self.lattice()?;
        let want = C64::from_polar(1.0, 2.0 * PI * spec.alpha());
        let mut worst = 0.0f64;
        for b in 0..spec.width {
            for a in 0..spec.width {
                if let Some(ph) = self.plaquette_phase(a, b) {
                    worst = worst.max((ph - want).norm());
                }
            }
        }
        Some(worst)
    }
}

fn check_hermitian(h: &CMat) -> Result<()> {
    let defect = hermitian_defect(h);
    if defect > HERMITICITY_TOL {
        return Err(Error::Hermiticity { defect });
    }
    Ok(())
}

fn check_coupling(lambda: f64, pot: &PotentialSpec, bound: f64) -> Result<()> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    if lambda == 0.0 || pot.kind == PotentialKind::Zero {
        return Ok(());
    }
    let a = lambda * pot.sup_norm;
    if !(a < bound) {
        return Err(Error::WeakCoupling { a, bound });
    }
    Ok(())
}

/// Nearest-neighbor lattice with flux p/q per plaquette and on-site λV.
/// `field_label` is stored as `field_b`; `None` uses 2π·p/q.
pub fn build_hofstadter(
    spec: &LatticeSpec,
    pot: &PotentialSpec,
    lambda: f64,
    field_label: Option<f64>,
) -> Result<MagneticModel> {
    spec.validate()?;
    let alpha = spec.alpha();
    let field_b = field_label.unwrap_or(2.0 * PI * alpha);
    check_coupling(lambda, pot, field_b)?;
    let l = spec.width;
    let n = spec.dim();
    let wrap = spec.boundary == Boundary::Torus;
    let mut trip: Vec<(usize, usize, C64)> = Vec::with_capacity(5 * n);
    let mut x1 = Array1::zeros(n);
    let mut x2 = Array1::zeros(n);
    let mut sampled = 0.0f64;
    for b in 0..l {
        for a in 0..l {
            let i = spec.index(a, b);
            x1[i] = spec.coordinate(a);
            x2[i] = spec.coordinate(b);
            if a + 1 < l || wrap {
                let j = spec.index((a + 1) % l, b);
                let u = C64::from_polar(1.0, -2.0 * PI * alpha * b as f64);
                trip.push((j, i, -u));
                trip.push((i, j, -u.conj()));
            }
            if b + 1 < l || wrap {
                let j = spec.index(a, (b + 1) % l);
                trip.push((j, i, -ONE));
                trip.push((i, j, -ONE));
            }
            if lambda != 0.0 && pot.kind != PotentialKind::Zero {
                let v = pot.eval(x1[i], x2[i]);
                sampled = sampled.max(v.abs());
                trip.push((i, i, C64::new(lambda * v, 0.0)));
            }
        }
    }
    pot.check_bound(sampled)?;
    let sparse = Csr::from_triplets(n, trip);
    let hamiltonian = sparse.to_dense();
    check_hermitian(&hamiltonian)?;
    let half = 0.5 * (l as f64 - 1.0);
    let magnetic_length = if alpha > 0.0 { (1.0 / (2.0 * PI * alpha)).sqrt() } else { f64::INFINITY };
    Ok(MagneticModel {
        hamiltonian,
        sparse: Some(sparse),
        x1_op: SiteOperator::Diagonal(x1),
        x2_op: SiteOperator::Diagonal(x2),
        field_b,
        lambda,
        potential: pot.clone(),
        backend: Backend::Hofstadter { spec: spec.clone() },
        magnetic_length,
        extent: [(-half, half), (-half, half)],
    })
}

fn laguerre(n: usize, alpha: f64, x: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let (mut l0, mut l1) = (1.0, 1.0 + alpha - x);
    for k in 1..n {
        let l2 = ((2 * k + 1) as f64 + alpha - x) * l1 - (k as f64 + alpha) * l0;
        l0 = l1;
        l1 = l2 / (k + 1) as f64;
    }
    l1
}

/// Polynomial part of the symmetric-gauge state |n, k⟩ at z (magnetic length 1);
/// the full wavefunction carries an extra factor exp(−|z|²/4).
fn landau_poly(n: usize, k: usize, z: C64) -> C64 {
    let r2 = z.norm_sqr() / 2.0;
    if k >= n {
        z.powu((k - n) as u32) * laguerre(n, (k - n) as f64, r2)
    } else {
        z.conj().powu((n - k) as u32) * laguerre(k, (n - k) as f64, r2)
    }
}

/// Ladder-operator position matrices (x1, x2) on levels 0..n_levels and
/// guiding-center indices 0..=m_max, with z = x1 + i x2 = √2 ℓ (a + b†).
pub fn landau_positions(n_levels: usize, m_max: usize, ell: f64) -> (CMat, CMat) {
    let nk = m_max + 1;
    let d = n_levels * nk;
    let mut z = CMat::zeros((d, d));
    let s = std::f64::consts::SQRT_2 * ell;
    for n in 0..n_levels {
        for k in 0..nk {
            let col = n * nk + k;
            if n >= 1 {
                z[[(n - 1) * nk + k, col]] += C64::new(s * (n as f64).sqrt(), 0.0);
            }
            if k + 1 < nk {
                z[[n * nk + k + 1, col]] += C64::new(s * ((k + 1) as f64).sqrt(), 0.0);
            }
        }
    }
    let zd = z.t().mapv(|v| v.conj());
    let x1 = (&z + &zd).mapv(|v| v * 0.5);
    let x2 = (&z - &zd).mapv(|v| v * C64::new(0.0, -0.5));
    (x1, x2)
}

/// Quadrature data for matrix elements in the truncated Landau basis.
struct LandauGrid {
    /// Sample points (dimensionless, magnetic length 1) and weights.
    points: Vec<(f64, f64)>,
    weights: Vec<f64>,
    /// Sign/phase-fixed normalized polynomial parts, one row per point.
    phi: CMat,
}

impl LandauGrid {
    fn new(n_levels: usize, m_max: usize, order: usize) -> LandauGrid {
        let nk = m_max + 1;
        let d = n_levels * nk;
        let (y, w) = gauss_hermite(order);
        let s2 = std::f64::consts::SQRT_2;
        let mut points = Vec::with_capacity(order * order);
        let mut weights = Vec::with_capacity(order * order);
        for (i, &yi) in y.iter().enumerate() {
            for (j, &yj) in y.iter().enumerate() {
                points.push((s2 * yi, s2 * yj));
                weights.push(2.0 * w[i] * w[j]);
            }
        }
        let mut phi = CMat::zeros((points.len(), d));
        for (p, &(u1, u2)) in points.iter().enumerate() {
            let z = C64::new(u1, u2);
            for n in 0..n_levels {
                for k in 0..nk {
                    phi[[p, n * nk + k]] = landau_poly(n, k, z);
                }
            }
        }
        let mut grid = LandauGrid { points, weights, phi };
        grid.normalize_and_fix_phases(n_levels, nk);
        grid
    }

    fn inner(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> C64) -> C64 {
        let mut acc = ZERO;
        for (p, &(u1, u2)) in self.points.iter().enumerate() {
            acc += self.phi[[p, a]].conj() * self.phi[[p, b]] * f(u1, u2) * self.weights[p];
        }
        acc
    }

    fn normalize_and_fix_phases(&mut self, n_levels: usize, nk: usize) {
        let d = n_levels * nk;
        for c in 0..d {
            let norm = self.inner(c, c, |_, _| ONE).re.sqrt();
            self.phi.column_mut(c).mapv_inplace(|v| v / norm);
        }
        // ⟨0,k|z|0,k−1⟩ and ⟨n−1,k|z|n,k⟩ must be positive.
        let z = |u1: f64, u2: f64| C64::new(u1, u2);
        for k in 1..nk {
            let m = self.inner(k, k - 1, z);
            let ph = m / m.norm();
            self.phi.column_mut(k).mapv_inplace(|v| v * ph);
        }
        for n in 1..n_levels {
            for k in 0..nk {
                let c = n * nk + k;
                let m = self.inner(c - nk, c, z);
                let ph = m / m.norm();
                self.phi.column_mut(c).mapv_inplace(|v| v * ph.conj());
            }
        }
    }

    /// ⟨a|f|b⟩ for all basis pairs.
    fn matrix(&self, f: impl Fn(f64, f64) -> f64) -> CMat {
        let mut weighted = self.phi.clone();
        for (p, mut row) in weighted.rows_mut().into_iter().enumerate() {
            let (u1, u2) = self.points[p];
            let w = self.weights[p] * f(u1, u2);
            row.mapv_inplace(|v| v * w);
        }
        self.phi.t().mapv(|v| v.conj()).dot(&weighted)
    }
}

/// Truncated symmetric-gauge Landau Hamiltonian diag((2n+1)B) + λ·ΠVΠ.
pub fn build_landau_truncated(
    field_b: f64,
    n_levels: usize,
    m_max: usize,
    pot: &PotentialSpec,
    lambda: f64,
) -> Result<MagneticModel> {
    if n_levels < 2 {
        return Err(Error::InvalidArgument("n_levels must be at least 2".into()));
    }
    if !(field_b > 0.0) {
        return Err(Error::InvalidArgument("field strength must be positive".into()));
    }
    check_coupling(lambda, pot, field_b)?;
    let ell = 1.0 / field_b.sqrt();
    let nk = m_max + 1;
    let d = n_levels * nk;
    let mut h = CMat::zeros((d, d));
    for n in 0..n_levels {
        for k in 0..nk {
            h[[n * nk + k, n * nk + k]] = C64::new((2 * n + 1) as f64 * field_b, 0.0);
        }
    }
    if lambda != 0.0 && pot.kind != PotentialKind::Zero {
        let v = landau_potential_matrix(n_levels, m_max, ell, pot)?;
        h.scaled_add(C64::new(lambda, 0.0), &v);
        let h2 = h.t().mapv(|z| z.conj());
        h = (&h + &h2).mapv(|z| z * 0.5);
    }
    check_hermitian(&h)?;
    let (x1, x2) = landau_positions(n_levels, m_max, ell);
    let radius = ell * (2.0 * nk as f64).sqrt();
    Ok(MagneticModel {
        hamiltonian: h,
        sparse: None,
        x1_op: SiteOperator::dense(x1)?,
        x2_op: SiteOperator::dense(x2)?,
        field_b,
        lambda,
        potential: pot.clone(),
        backend: Backend::LandauBasis { n_levels, m_max },
        magnetic_length: ell,
        extent: [(-radius, radius), (-radius, radius)],
    })
}

/// ΠVΠ by tensor Gauss–Hermite quadrature, doubling the order until the
/// relative Frobenius change drops below 1e−8.
pub fn landau_potential_matrix(n_levels: usize, m_max: usize, ell: f64, pot: &PotentialSpec) -> Result<CMat> {
    let mut order = 2 * (n_levels + m_max) + 16;
    let f = |u1: f64, u2: f64| pot.eval(ell * u1, ell * u2);
    let mut prev = LandauGrid::new(n_levels, m_max, order).matrix(f);
    let mut sampled = 0.0f64;
    loop {
        order *= 2;
        let grid = LandauGrid::new(n_levels, m_max, order);
        let next = grid.matrix(f);
        let scale = frobenius(&next).max(1e-300);
        let change = frobenius(&(&next - &prev)) / scale;
        if change < 1e-8 {
            for &(u1, u2) in &grid.points {
                if u1 * u1 + u2 * u2 <= 2.0 * (m_max + n_levels) as f64 + 8.0 {
                    sampled = sampled.max(f(u1, u2).abs());
                }
            }
            pot.check_bound(sampled)?;
            return Ok(next);
        }
        if order > 512 {
            return Err(Error::Quadrature { change, order });
        }
        prev = next;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    X1,
    X2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SwitchProfile {
    /// C^order polynomial smoothstep from −m to m.
    Smooth { m: f64, order: u32 },
    /// 0 for x ≤ at, 1 for x > at.
    Sharp { at: f64 },
    Constant { value: f64 },
}

impl SwitchProfile {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            SwitchProfile::Smooth { m, order } => {
                if x <= -m {
                    0.0
                } else if x >= m {
                    1.0
                } else {
                    smoothstep(order).eval((x + m) / (2.0 * m))
                }
            }
            SwitchProfile::Sharp { at } => {
                if x > at {
                    1.0
                } else {
                    0.0
                }
            }
            SwitchProfile::Constant { value } => value,
        }
    }

    /// Derivative profile polynomial on (−m, m), in units of x.
    pub fn derivative_poly(&self) -> Option<Poly> {
        match *self {
            SwitchProfile::Smooth { m, order } => Some(smoothstep(order).derivative().scale(0.5 / m)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SwitchFunction {
    pub direction: Direction,
    pub half_width_m: f64,
    pub profile: SwitchProfile,
    pub op: SiteOperator,
}

impl SwitchFunction {
    pub fn eval(&self, x: f64) -> f64 {
        self.profile.eval(x)
    }

    /// The switch as a matrix over the model basis.
    pub fn matrix(&self) -> CMat {
        self.op.to_dense()
    }

    pub fn constant(model: &MagneticModel, direction: Direction, value: f64) -> SwitchFunction {
        let op = match model.position(direction) {
            SiteOperator::Diagonal(d) => SiteOperator::Diagonal(Array1::from_elem(d.len(), value)),
            SiteOperator::Dense { .. } => SiteOperator::Dense {
                matrix: Array2::from_diag_elem(model.dim(), C64::new(value, 0.0)),
                spectrum: Array1::from_elem(model.dim(), value),
                vectors: Array2::from_diag_elem(model.dim(), ONE),
            },
        };
        SwitchFunction { direction, half_width_m: 0.0, profile: SwitchProfile::Constant { value }, op }
    }

    /// Integer-valued step, used for stress tests.
    pub fn sharp(model: &MagneticModel, direction: Direction, at: f64) -> SwitchFunction {
        let profile = SwitchProfile::Sharp { at };
        let op = evaluate_on(model, direction, &profile);
        SwitchFunction { direction, half_width_m: 0.0, profile, op }
    }
}

fn evaluate_on(model: &MagneticModel, direction: Direction, profile: &SwitchProfile) -> SiteOperator {
    match (&model.backend, model.position(direction)) {
        (Backend::LandauBasis { n_levels, m_max }, _) => {
            // Project f(x) computed in an enlarged basis onto the kept states.
            let (bn, bm) = (n_levels + 8, m_max + 24);
            let (b1, b2) = landau_positions(bn, bm, model.magnetic_length);
            let big = SiteOperator::dense(match direction {
                Direction::X1 => b1,
                Direction::X2 => b2,
            })
            .expect("position operator is Hermitian")
            .map(|x| profile.eval(x))
            .to_dense();
            let (nk, bk) = (m_max + 1, bm + 1);
            let keep: Vec<usize> = (0..*n_levels).flat_map(|n| (0..nk).map(move |k| n * bk + k)).collect();
            let small = Array2::from_shape_fn((keep.len(), keep.len()), |(i, j)| big[[keep[i], keep[j]]]);
            let small = (&small + &small.t().mapv(|z| z.conj())).mapv(|z| z * 0.5);
            SiteOperator::dense(small).expect("projected switch is Hermitian")
        }
        (_, pos) => pos.map(|x| profile.eval(x)),
    }
}

/// Smooth switch of half-width m in the given direction.
pub fn make_switch(direction: Direction, m: f64, order: u32, model: &MagneticModel) -> Result<SwitchFunction> {
    if !(m > 0.0) {
        return Err(Error::SwitchSupport(format!("half width must be positive, got {m}")));
    }
    let axis = match direction {
        Direction::X1 => 0,
        Direction::X2 => 1,
    };
    let (lo, hi) = model.extent[axis];
    let quarter = 0.25 * (hi - lo);
    if m >= quarter {
        return Err(Error::SwitchSupport(format!(
            "half width {m} is not below a quarter of the extent ({quarter})"
        )));
    }
    if !model.is_periodic() {
        let margin = 4.0 * model.magnetic_length.min(hi - lo);
        if m + margin > hi.min(-lo) {
            return Err(Error::SwitchSupport(format!(
                "support [-{m}, {m}] comes within {margin:.3} of the open boundary"
            )));
        }
    }
    let profile = SwitchProfile::Smooth { m, order };
    let op = evaluate_on(model, direction, &profile);
    Ok(SwitchFunction { direction, half_width_m: m, profile, op })
}

/// [H, Λ2], anti-Hermitian.
pub fn current_operator(model: &MagneticModel, lambda2: &SwitchFunction) -> Result<CMat> {
    if lambda2.direction != Direction::X2 {
        return Err(Error::InvalidArgument("current operator needs an x2 switch".into()));
    }
    if lambda2.op.dim() != model.dim() {
        return Err(Error::InvalidArgument("switch and model dimensions differ".into()));
    }
    Ok(match &lambda2.op {
        SiteOperator::Diagonal(d) => {
            let mut c = model.hamiltonian.clone();
            for ((i, j), z) in c.indexed_iter_mut() {
                *z *= d[j] - d[i];
            }
            c
        }
        SiteOperator::Dense { matrix, .. } => commutator(&model.hamiltonian, matrix),
    })
}

/// Sparse [H', Λ] for a sparse H' and diagonal Λ.
pub fn sparse_commutator(h: &Csr, lambda: &Array1<f64>) -> Csr {
    h.map_entries(|i, j, v| v * (lambda[j] - lambda[i]))
}
