//! Eigensystems, Fermi projections with gap certificates, and the residue
//! form of the resolvent sandwich used by the Nenciu recursion.

use std::sync::OnceLock;

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{conjugate_diag, dagger, eigh, isometry_defect, CMat, C64, ZERO};
use crate::model::MagneticModel;

#[derive(Clone, Debug)]
pub struct EigenSystem {
    pub energies: Array1<f64>,
    pub vectors: CMat,
    /// max_n ‖H v_n − E_n v_n‖
    pub residual: f64,
}

impl EigenSystem {
    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    pub fn norm(&self) -> f64 {
        let n = self.energies.len();
        if n == 0 {
            0.0
        } else {
            self.energies[0].abs().max(self.energies[n - 1].abs())
        }
    }
}

/// Fixes the basis inside each (near-)degenerate block: pivoted Gram–Schmidt
/// on the block projections of the standard basis vectors, in index order,
/// with each vector's pivot component real and positive.
fn canonicalize(energies: &Array1<f64>, vectors: &mut CMat) {
    let n = energies.len();
    if n == 0 {
        return;
    }
    // mixing a block of spread δ costs a residual of order δ
    let tol = 1e-11 * energies[0].abs().max(energies[n - 1].abs()).max(1.0);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && energies[end] - energies[end - 1] <= tol {
            end += 1;
        }
        let block = vectors.slice(s![.., start..end]).to_owned();
        let d = end - start;
        // coordinates of P_block e_i in the block basis: m_i = V_b† e_i
        let m = dagger(&block);
        let mut resid = m.clone();
        let mut q: Vec<Array1<C64>> = Vec::with_capacity(d);
        for _ in 0..d {
            let norms: Vec<f64> = (0..n).map(|i| resid.column(i).iter().map(|z| z.norm_sqr()).sum()).collect();
            let best = norms.iter().cloned().fold(0.0, f64::max);
            let pick = norms.iter().position(|&v| v >= 0.5 * best).unwrap();
            let v = resid.column(pick).mapv(|z| z / norms[pick].sqrt());
            for i in 0..n {
                let c: C64 = v.iter().zip(resid.column(i).iter()).map(|(a, b)| a.conj() * b).sum();
                let mut col = resid.column_mut(i);
                col.zip_mut_with(&v, |x, y| *x -= c * y);
            }
            q.push(v);
        }
        let qm = Array2::from_shape_fn((d, d), |(a, k)| q[k][a]);
        let newblock = block.dot(&qm);
        vectors.slice_mut(s![.., start..end]).assign(&newblock);
        start = end;
    }
}

pub fn diagonalize_matrix(h: &CMat) -> Result<EigenSystem> {
    let (energies, mut vectors) = eigh(h)?;
    canonicalize(&energies, &mut vectors);
    let hv = h.dot(&vectors);
    let mut residual = 0.0f64;
    for (k, e) in energies.iter().enumerate() {
        let r: f64 = hv
            .column(k)
            .iter()
            .zip(vectors.column(k).iter())
            .map(|(a, b)| (a - b * e).norm_sqr())
            .sum();
        residual = residual.max(r.sqrt());
    }
    let es = EigenSystem { energies, vectors, residual };
    let tol = 1e-10 * es.norm().max(1.0);
    if residual > tol {
        return Err(Error::Residual { residual, tol });
    }
    let defect = isometry_defect(&es.vectors);
    if defect > 1e-10 {
        return Err(Error::Residual { residual: defect, tol: 1e-10 });
    }
    Ok(es)
}

pub fn diagonalize(model: &MagneticModel) -> Result<EigenSystem> {
    diagonalize_matrix(&model.hamiltonian)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapInfo {
    /// Number of spectral clusters below the gap.
    pub band_index: usize,
    pub gap_interval: (f64, f64),
    pub fermi_margin: f64,
}

#[derive(Clone, Debug)]
pub struct FermiProjector {
    pub fermi_energy: f64,
    pub occupied_count: usize,
    pub gap_lower: f64,
    pub gap_upper: f64,
    pub gap_width: f64,
    pub fermi_margin: f64,
    /// Orthonormal eigenvectors spanning the range of P (D × occupied_count).
    pub occupied: CMat,
    matrix: OnceLock<CMat>,
}

impl FermiProjector {
    /// P = Σ_occ |n⟩⟨n|, formed on first use.
    pub fn matrix(&self) -> &CMat {
        self.matrix.get_or_init(|| self.occupied.dot(&dagger(&self.occupied)))
    }

    pub fn dim(&self) -> usize {
        self.occupied.nrows()
    }

    pub fn from_frame(fermi_energy: f64, occupied: CMat, gap: (f64, f64)) -> FermiProjector {
        let occupied = occupied.as_standard_layout().to_owned();
        let occupied_count = occupied.ncols();
        FermiProjector {
            fermi_energy,
            occupied_count,
            gap_lower: gap.0,
            gap_upper: gap.1,
            gap_width: gap.1 - gap.0,
            fermi_margin: (fermi_energy - gap.0).min(gap.1 - fermi_energy),
            occupied,
            matrix: OnceLock::new(),
        }
    }
}

/// Default gap threshold δ_min = 1e−3·‖H‖.
pub fn default_delta_min(eig: &EigenSystem) -> f64 {
    1e-3 * eig.norm()
}

pub fn fermi_projector(eig: &EigenSystem, fermi_energy: f64, delta_min: Option<f64>) -> Result<FermiProjector> {
    let delta = delta_min.unwrap_or_else(|| default_delta_min(eig));
    let e = &eig.energies;
    let count = e.iter().filter(|&&x| x < fermi_energy).count();
    let lower = if count > 0 { e[count - 1] } else { f64::NEG_INFINITY };
    let upper = if count < e.len() { e[count] } else { f64::INFINITY };
    let margin = (fermi_energy - lower).min(upper - fermi_energy);
    if margin < 1e-8 || margin < delta {
        return Err(Error::NoGap { fermi: fermi_energy, margin, required: delta.max(1e-8) });
    }
    let occupied = eig.vectors.slice(s![.., ..count]).to_owned();
    Ok(FermiProjector::from_frame(fermi_energy, occupied, (lower, upper)))
}

/// Spacings wider than `min_width` between consecutive eigenvalues, as (lower, upper).
pub fn spectral_gaps(eig: &EigenSystem, min_width: f64) -> Vec<(f64, f64)> {
    eig.energies
        .windows(2)
        .into_iter()
        .filter(|w| w[1] - w[0] > min_width)
        .map(|w| (w[0], w[1]))
        .collect()
}

/// Midpoint of the widest eigenvalue spacing inside [lo, hi].
pub fn widest_gap_center(eig: &EigenSystem, lo: f64, hi: f64) -> Option<(f64, (f64, f64))> {
    eig.energies
        .windows(2)
        .into_iter()
        .filter(|w| w[0] >= lo && w[1] <= hi)
        .map(|w| (w[0], w[1]))
        .max_by(|a, b| (a.1 - a.0).partial_cmp(&(b.1 - b.0)).unwrap())
        .map(|g| (0.5 * (g.0 + g.1), g))
}

/// Fermi energy centered in the j-th spectral gap (j ≥ 1) wider than `min_width`.
pub fn gap_center(eig: &EigenSystem, j: usize, min_width: f64) -> Option<f64> {
    let gaps = spectral_gaps(eig, min_width);
    gaps.get(j.checked_sub(1)?).map(|g| 0.5 * (g.0 + g.1))
}

pub fn gap_info(eig: &EigenSystem, fp: &FermiProjector, cluster_width: f64) -> GapInfo {
    let band_index = spectral_gaps(eig, cluster_width)
        .iter()
        .filter(|g| g.1 <= fp.fermi_energy)
        .count()
        + 1;
    GapInfo {
        band_index,
        gap_interval: (fp.gap_lower, fp.gap_upper),
        fermi_margin: fp.fermi_margin,
    }
}

/// Residue evaluation of the resolvent sandwich: in the eigenbasis, entries
/// C_mn/(E_n − E_m) for m occupied and n empty, C_mn/(E_m − E_n) for m empty
/// and n occupied, zero on the diagonal blocks. This equals
/// −(2πi)⁻¹∮ R_z C R_z dz over a counterclockwise contour around the
/// occupied spectrum.
pub fn riesz_sandwich(eig: &EigenSystem, fp: &FermiProjector, c: &CMat) -> CMat {
    riesz_sandwich_in(&eig.vectors, &eig.energies, fp.occupied_count, c)
}

/// Same formula for an explicit eigenbasis (used for gauge-transformed frames).
pub fn riesz_sandwich_in(v: &CMat, energies: &Array1<f64>, occ: usize, c: &CMat) -> CMat {
    let ct = dagger(v).dot(c).dot(v);
    let n = energies.len();
    let mut out = CMat::from_elem((n, n), ZERO);
    for m in 0..n {
        for k in 0..n {
            let (mo, ko) = (m < occ, k < occ);
            if mo != ko {
                let d = if mo { energies[k] - energies[m] } else { energies[m] - energies[k] };
                out[[m, k]] = ct[[m, k]] / d;
            }
        }
    }
    v.dot(&out).dot(&dagger(v))
}

/// V f(E) V†
pub fn spectral_function(eig: &EigenSystem, f: impl Fn(f64) -> C64) -> CMat {
    conjugate_diag(&eig.vectors, &eig.energies.mapv(f))
}
