//! Dense and sparse complex linear algebra used throughout the crate.
//!
//! Dense products go through ndarray's BLAS backend; the Hermitian
//! eigensolver calls LAPACK `zheev` directly.

use ndarray::{Array1, Array2, ArrayView2, ShapeBuilder};
use num_complex::Complex64;

use crate::error::LinalgError;

pub type C64 = Complex64;
pub type CMat = Array2<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

pub fn eye(n: usize) -> CMat {
    Array2::from_diag_elem(n, ONE)
}

pub fn dagger(a: &CMat) -> CMat {
    a.t().mapv(|z| z.conj())
}

pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    a.dot(b) - b.dot(a)
}

pub fn trace(a: &CMat) -> C64 {
    a.diag().sum()
}

pub fn frobenius(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// ‖A − A†‖_F / ‖A‖_F, zero for the zero matrix.
pub fn hermitian_defect(a: &CMat) -> f64 {
    let n = frobenius(a);
    if n == 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    for ((i, j), z) in a.indexed_iter() {
        s += (z - a[[j, i]].conj()).norm_sqr();
    }
    s.sqrt() / n
}

/// Column-major copy of a square matrix for LAPACK.
fn to_fortran(a: &CMat) -> Vec<C64> {
    a.t().iter().cloned().collect()
}

fn heev(a: &CMat, vectors: bool) -> Result<(Vec<f64>, Option<CMat>), LinalgError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::Shape(format!("{}x{} is not square", n, a.ncols())));
    }
    if n == 0 {
        return Ok((vec![], vectors.then(|| CMat::zeros((0, 0)))));
    }
    if a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let mut m = to_fortran(a);
    let mut w = vec![0.0f64; n];
    let nn = n as i32;
    let mut info = 0i32;
    let jobz = if vectors { b'V' } else { b'N' } as std::ffi::c_char;
    let uplo = b'L' as std::ffi::c_char;
    let mut rwork = vec![0.0f64; (3 * n).saturating_sub(2).max(1)];
    let mut query = [ZERO];
    unsafe {
        lapack_sys::zheev_(
            &jobz,
            &uplo,
            &nn,
            m.as_mut_ptr() as *mut _,
            &nn,
            w.as_mut_ptr(),
            query.as_mut_ptr() as *mut _,
            &-1,
            rwork.as_mut_ptr(),
            &mut info,
        );
    }
    if info != 0 {
        return Err(LinalgError::Lapack { routine: "zheev", info });
    }
    let lwork = (query[0].re as i32).max(2 * nn - 1).max(1);
    let mut work = vec![ZERO; lwork as usize];
    unsafe {
        lapack_sys::zheev_(
            &jobz,
            &uplo,
            &nn,
            m.as_mut_ptr() as *mut _,
            &nn,
            w.as_mut_ptr(),
            work.as_mut_ptr() as *mut _,
            &lwork,
            rwork.as_mut_ptr(),
            &mut info,
        );
    }
    if info != 0 {
        return Err(LinalgError::Lapack { routine: "zheev", info });
    }
    let vecs = if vectors {
        Some(Array2::from_shape_vec((n, n).f(), m).map_err(|e| LinalgError::Shape(e.to_string()))?)
    } else {
        None
    };
    Ok((w, vecs))
}

/// Eigen-decomposition of a Hermitian matrix (lower triangle is read).
/// Energies ascend; eigenvectors are the columns of the returned matrix.
pub fn eigh(a: &CMat) -> Result<(Array1<f64>, CMat), LinalgError> {
    let (w, v) = heev(a, true)?;
    Ok((Array1::from(w), v.expect("vectors requested")))
}

pub fn eigvalsh(a: &CMat) -> Result<Array1<f64>, LinalgError> {
    Ok(Array1::from(heev(a, false)?.0))
}

/// Largest singular value.
pub fn op_norm(a: &CMat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let scale = a.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    if scale == 0.0 {
        return 0.0;
    }
    let b = a.mapv(|z| z / scale);
    let gram = if b.nrows() <= b.ncols() {
        b.dot(&dagger(&b))
    } else {
        dagger(&b).dot(&b)
    };
    let w = eigvalsh(&gram).expect("Gram matrix is Hermitian and finite");
    scale * w[w.len() - 1].max(0.0).sqrt()
}

/// max_ij |(A†A − 1)_ij| for a matrix with orthonormal columns.
pub fn isometry_defect(a: &CMat) -> f64 {
    let g = dagger(a).dot(a);
    g.indexed_iter()
        .map(|((i, j), z)| if i == j { (z - ONE).norm() } else { z.norm() })
        .fold(0.0, f64::max)
}

/// Operator on the model basis that is either diagonal (lattice positions
/// and switches) or a dense Hermitian matrix (projected continuum operators).
#[derive(Clone, Debug)]
pub enum SiteOperator {
    Diagonal(Array1<f64>),
    Dense { matrix: CMat, spectrum: Array1<f64>, vectors: CMat },
}

impl SiteOperator {
    pub fn dense(matrix: CMat) -> Result<Self, LinalgError> {
        let (spectrum, vectors) = eigh(&matrix)?;
        Ok(SiteOperator::Dense { matrix, spectrum, vectors })
    }

    pub fn dim(&self) -> usize {
        match self {
            SiteOperator::Diagonal(d) => d.len(),
            SiteOperator::Dense { matrix, .. } => matrix.nrows(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, SiteOperator::Diagonal(_))
    }

    pub fn to_dense(&self) -> CMat {
        match self {
            SiteOperator::Diagonal(d) => Array2::from_diag(&d.mapv(|x| C64::new(x, 0.0))),
            SiteOperator::Dense { matrix, .. } => matrix.clone(),
        }
    }

    /// Λ·A
    pub fn left_mul(&self, a: &CMat) -> CMat {
        match self {
            SiteOperator::Diagonal(d) => {
                let mut out = a.clone();
                for (mut row, &x) in out.rows_mut().into_iter().zip(d.iter()) {
                    row.mapv_inplace(|z| z * x);
                }
                out
            }
            SiteOperator::Dense { matrix, .. } => matrix.dot(a),
        }
    }

    /// A·Λ
    pub fn right_mul(&self, a: &CMat) -> CMat {
        match self {
            SiteOperator::Diagonal(d) => {
                let mut out = a.clone();
                for (mut col, &x) in out.columns_mut().into_iter().zip(d.iter()) {
                    col.mapv_inplace(|z| z * x);
                }
                out
            }
            SiteOperator::Dense { matrix, .. } => a.dot(matrix),
        }
    }

    /// [Λ, A]
    pub fn commutator_with(&self, a: &CMat) -> CMat {
        self.left_mul(a) - self.right_mul(a)
    }

    /// f(Λ) by functional calculus.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SiteOperator {
        match self {
            SiteOperator::Diagonal(d) => SiteOperator::Diagonal(d.mapv(&f)),
            SiteOperator::Dense { spectrum, vectors, .. } => {
                let fs = spectrum.mapv(&f);
                let matrix = conjugate_diag(vectors, &fs.mapv(|x| C64::new(x, 0.0)));
                let (spectrum, vectors) = match eigh(&matrix) {
                    Ok(e) => e,
                    Err(_) => (fs, vectors.clone()),
                };
                SiteOperator::Dense { matrix, spectrum, vectors }
            }
        }
    }

    /// exp(iθΛ) as a unitary acting on the model basis.
    pub fn phase(&self, theta: f64) -> Unitary {
        match self {
            SiteOperator::Diagonal(d) => Unitary::Diagonal(d.mapv(|x| C64::from_polar(1.0, theta * x))),
            SiteOperator::Dense { spectrum, vectors, .. } => {
                let ph = spectrum.mapv(|x| C64::from_polar(1.0, theta * x));
                Unitary::Dense(conjugate_diag(vectors, &ph))
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        match self {
            SiteOperator::Diagonal(d) => d.iter().fold(0.0, |m, x| m.max(x.abs())),
            SiteOperator::Dense { spectrum, .. } => spectrum.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

/// V·diag(f)·V†
pub fn conjugate_diag(v: &CMat, f: &Array1<C64>) -> CMat {
    let mut vf = v.clone();
    for (mut col, &x) in vf.columns_mut().into_iter().zip(f.iter()) {
        col.mapv_inplace(|z| z * x);
    }
    vf.dot(&dagger(v))
}

#[derive(Clone, Debug)]
pub enum Unitary {
    Diagonal(Array1<C64>),
    Dense(CMat),
}

impl Unitary {
    pub fn apply(&self, a: &CMat) -> CMat {
        match self {
            Unitary::Diagonal(d) => {
                let mut out = a.clone();
                for (mut row, &x) in out.rows_mut().into_iter().zip(d.iter()) {
                    row.mapv_inplace(|z| z * x);
                }
                out
            }
            Unitary::Dense(u) => u.dot(a),
        }
    }

    pub fn apply_adjoint(&self, a: &CMat) -> CMat {
        match self {
            Unitary::Diagonal(d) => {
                let mut out = a.clone();
                for (mut row, &x) in out.rows_mut().into_iter().zip(d.iter()) {
                    row.mapv_inplace(|z| z * x.conj());
                }
                out
            }
            Unitary::Dense(u) => dagger(u).dot(a),
        }
    }

    /// U·A·U†
    pub fn conjugate(&self, a: &CMat) -> CMat {
        match self {
            Unitary::Diagonal(d) => {
                let mut out = a.clone();
                for ((i, j), z) in out.indexed_iter_mut() {
                    *z *= d[i] * d[j].conj();
                }
                out
            }
            Unitary::Dense(u) => u.dot(a).dot(&dagger(u)),
        }
    }

    pub fn to_dense(&self) -> CMat {
        match self {
            Unitary::Diagonal(d) => Array2::from_diag(d),
            Unitary::Dense(u) => u.clone(),
        }
    }
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug)]
pub struct Csr {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<C64>,
}

impl Csr {
    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut trip: Vec<(usize, usize, C64)>) -> Csr {
        trip.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; n + 1];
        let mut indices = Vec::with_capacity(trip.len());
        let mut values: Vec<C64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..n {
            indptr[r + 1] += indptr[r];
        }
        Csr { n, indptr, indices, values }
    }

    pub fn from_dense(a: &CMat, cutoff: f64) -> Csr {
        let trip = a
            .indexed_iter()
            .filter(|(_, z)| z.norm() > cutoff)
            .map(|((i, j), z)| (i, j, *z))
            .collect();
        Csr::from_triplets(a.nrows(), trip)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn to_dense(&self) -> CMat {
        let mut a = CMat::zeros((self.n, self.n));
        for r in 0..self.n {
            for k in self.indptr[r]..self.indptr[r + 1] {
                a[[r, self.indices[k]]] += self.values[k];
            }
        }
        a
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        (self.indptr[r]..self.indptr[r + 1]).map(move |k| (self.indices[k], self.values[k]))
    }

    /// Same sparsity with every stored element mapped by f(row, col, value).
    pub fn map_entries(&self, f: impl Fn(usize, usize, C64) -> C64) -> Csr {
        let mut out = self.clone();
        for r in 0..self.n {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out.values[k] = f(r, self.indices[k], self.values[k]);
            }
        }
        out
    }

    /// y = A·x for a block of column vectors.
    pub fn apply(&self, x: &ArrayView2<C64>, y: &mut CMat) {
        let m = x.ncols();
        y.fill(ZERO);
        if !y.is_standard_layout() {
            let mut tmp = CMat::zeros(y.raw_dim());
            self.apply(x, &mut tmp);
            y.assign(&tmp);
            return;
        }
        for r in 0..self.n {
            let mut yr = y.row_mut(r);
            let ys = yr.as_slice_mut().expect("row-major output");
            for k in self.indptr[r]..self.indptr[r + 1] {
                let a = self.values[k];
                let xr = x.row(self.indices[k]);
                match xr.as_slice() {
                    Some(xs) => {
                        for c in 0..m {
                            ys[c] += a * xs[c];
                        }
                    }
                    None => {
                        for c in 0..m {
                            ys[c] += a * xr[c];
                        }
                    }
                }
            }
        }
    }

    pub fn dot(&self, x: &CMat) -> CMat {
        let mut y = CMat::zeros(x.raw_dim());
        self.apply(&x.view(), &mut y);
        y
    }

    /// Gershgorin enclosure of the real spectrum of a Hermitian matrix.
    pub fn gershgorin(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in 0..self.n {
            let mut d = 0.0;
            let mut rad = 0.0;
            for (c, v) in self.row(r) {
                if c == r {
                    d += v.re;
                } else {
                    rad += v.norm();
                }
            }
            lo = lo.min(d - rad);
            hi = hi.max(d + rad);
        }
        if self.n == 0 {
            (0.0, 0.0)
        } else {
            (lo, hi)
        }
    }
}

/// Hermitian operator known through its action on blocks of vectors.
pub trait HermitianAction {
    fn dim(&self) -> usize;
    fn apply(&self, x: &ArrayView2<C64>, y: &mut CMat);
    /// Interval containing the spectrum.
    fn spectral_bounds(&self) -> (f64, f64);
}

/// H + c·Λ with H sparse and Λ diagonal.
pub struct SparsePlusDiagonal<'a> {
    pub h: &'a Csr,
    pub h_bounds: (f64, f64),
    pub diag: &'a Array1<f64>,
    pub coeff: f64,
}

impl HermitianAction for SparsePlusDiagonal<'_> {
    fn dim(&self) -> usize {
        self.h.n
    }
    fn apply(&self, x: &ArrayView2<C64>, y: &mut CMat) {
        self.h.apply(x, y);
        if self.coeff != 0.0 {
            for (r, &d) in self.diag.iter().enumerate() {
                let w = self.coeff * d;
                if w != 0.0 {
                    let mut yr = y.row_mut(r);
                    yr.zip_mut_with(&x.row(r), |a, b| *a += *b * w);
                }
            }
        }
    }
    fn spectral_bounds(&self) -> (f64, f64) {
        let (dmin, dmax) = self
            .diag
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let (a, b) = if self.coeff >= 0.0 {
            (self.coeff * dmin, self.coeff * dmax)
        } else {
            (self.coeff * dmax, self.coeff * dmin)
        };
        (self.h_bounds.0 + a.min(0.0), self.h_bounds.1 + b.max(0.0))
    }
}

/// Dense H + c·Λ.
pub struct DenseSum<'a> {
    pub h: &'a CMat,
    pub h_bounds: (f64, f64),
    pub lambda: &'a SiteOperator,
    pub coeff: f64,
}

impl HermitianAction for DenseSum<'_> {
    fn dim(&self) -> usize {
        self.h.nrows()
    }
    fn apply(&self, x: &ArrayView2<C64>, y: &mut CMat) {
        let xo = x.to_owned();
        *y = self.h.dot(&xo);
        if self.coeff != 0.0 {
            let lx = self.lambda.left_mul(&xo);
            y.scaled_add(C64::new(self.coeff, 0.0), &lx);
        }
    }
    fn spectral_bounds(&self) -> (f64, f64) {
        let l = self.coeff.abs() * self.lambda.max_abs();
        (self.h_bounds.0 - l, self.h_bounds.1 + l)
    }
}

/// Bessel functions J_0..J_nmax at x ≥ 0 by Miller's backward recurrence.
pub fn bessel_j_sequence(x: f64, nmax: usize) -> Vec<f64> {
    let mut out = vec![0.0; nmax + 1];
    if x == 0.0 {
        out[0] = 1.0;
        return out;
    }
    let top = nmax.max(x.ceil() as usize);
    let start = top + 20 + (40.0 * top as f64).sqrt() as usize;
    let start = start + start % 2;
    let mut f = vec![0.0f64; start + 2];
    f[start] = 1e-300;
    for k in (1..=start).rev() {
        f[k - 1] = 2.0 * k as f64 / x * f[k] - f[k + 1];
        if f[k - 1].abs() > 1e250 {
            for v in f.iter_mut().skip(k - 1) {
                *v *= 1e-250;
            }
        }
    }
    let mut norm = f[0];
    for k in (2..=start).step_by(2) {
        norm += 2.0 * f[k];
    }
    for (k, o) in out.iter_mut().enumerate() {
        *o = f[k] / norm;
    }
    out
}

/// exp(−i·t·A)·x by a Chebyshev expansion on the spectral interval of A.
pub fn expm_action(op: &dyn HermitianAction, t: f64, x: &CMat, tol: f64) -> CMat {
    let (lo, hi) = op.spectral_bounds();
    let pad = 1e-6 * (hi - lo).abs().max(1.0);
    let (lo, hi) = (lo - pad, hi + pad);
    let c = 0.5 * (lo + hi);
    let r = 0.5 * (hi - lo);
    let z = t.abs() * r;
    let nmax = (z + 10.0 * z.cbrt() + 20.0).ceil() as usize;
    let j = bessel_j_sequence(z, nmax);
    let sgn = if t >= 0.0 { 1.0 } else { -1.0 };
    // exp(−i s y) = Σ (2−δ_k0)(−i)^k J_k(s) T_k(y) for s ≥ 0; t < 0 conjugates the coefficients.
    let coef = |k: usize| -> C64 {
        let ik = match k % 4 {
            0 => ONE,
            1 => -I,
            2 => -ONE,
            _ => I,
        };
        let ik = if sgn < 0.0 { ik.conj() } else { ik };
        ik * (if k == 0 { 1.0 } else { 2.0 } * j[k])
    };
    let scaled = |v: &CMat, out: &mut CMat| {
        op.apply(&v.view(), out);
        out.zip_mut_with(v, |a, b| *a = (*a - *b * c) / r);
    };
    let x = &x.as_standard_layout().to_owned();
    let mut t_prev = x.clone();
    let mut t_cur = CMat::zeros(x.raw_dim());
    scaled(&t_prev, &mut t_cur);
    let mut acc = x.mapv(|v| v * coef(0));
    acc.scaled_add(coef(1), &t_cur);
    let mut t_next = CMat::zeros(x.raw_dim());
    for k in 2..=nmax {
        if k as f64 > z && j[k].abs() < tol * 1e-2 && j[k - 1].abs() < tol * 1e-2 {
            break;
        }
        scaled(&t_cur, &mut t_next);
        t_next.zip_mut_with(&t_prev, |a, b| *a = 2.0 * *a - *b);
        acc.scaled_add(coef(k), &t_next);
        std::mem::swap(&mut t_prev, &mut t_cur);
        std::mem::swap(&mut t_cur, &mut t_next);
    }
    let phase = C64::from_polar(1.0, -t * c);
    acc.mapv_inplace(|v| v * phase);
    acc
}
