use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("LAPACK {routine} failed with info = {info}")]
    Lapack { routine: &'static str, info: i32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite matrix entry")]
    NonFinite,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid lattice spec: {0}")]
    InvalidSpec(String),
    #[error("Hamiltonian not Hermitian: relative defect {defect:.3e}")]
    Hermiticity { defect: f64 },
    #[error("coupling too strong: lambda*|V| = {a:.4} must stay below {bound:.4}")]
    WeakCoupling { a: f64, bound: f64 },
    #[error("potential exceeds its declared sup norm: {sampled:.6} > {declared:.6}")]
    PotentialBound { sampled: f64, declared: f64 },
    #[error("quadrature did not converge: relative change {change:.3e} at order {order}")]
    Quadrature { change: f64, order: usize },
    #[error("switch placement rejected: {0}")]
    SwitchSupport(String),
    #[error("eigen-decomposition residual {residual:.3e} above tolerance {tol:.3e}")]
    Residual { residual: f64, tol: f64 },
    #[error("no spectral gap at E_F = {fermi:.6}: margin {margin:.3e} < {required:.3e}")]
    NoGap { fermi: f64, margin: f64, required: f64 },
    #[error("FHS residue {residue:.3e} exceeds 0.1 on a {grid}x{grid} grid")]
    ChernResidue { residue: f64, grid: usize },
    #[error("calibration against a zero oracle")]
    ZeroOracle,
    #[error("no grid point retained a certified gap")]
    EmptyGrid,
    #[error("unitarity defect {defect:.3e} exceeds 1e-9 at s = {s:.4}")]
    StepBudget { defect: f64, s: f64 },
    #[error("integrator dominates at tau = {tau}: step halving changed the residual by {change:.1}%")]
    IntegratorDominated { tau: f64, change: f64 },
    #[error("finite differences unstable at order {order}: discrepancy {discrepancy:.3e} vs estimate {estimate:.3e}")]
    FdUnstable { order: usize, discrepancy: f64, estimate: f64 },
    #[error("charge quadrature refinement changed the result by {change:.3e}")]
    QuadratureRefinement { change: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
