//! Run configuration: TOML sections, validation, and resolution into core objects.

use std::path::{Path, PathBuf};

use hallkit::adiabatic::{DriveKind, DrivingProfile, EvolveConfig, Integrator, StepRule};
use hallkit::fit::WindowPolicy;
use hallkit::model::{
    build_hofstadter, build_landau_truncated, Boundary, LatticeSpec, MagneticModel, PotentialKind, PotentialSpec,
    PotentialTerm,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

pub const DEFAULT_TAUS: [f64; 5] = [32.0, 64.0, 128.0, 256.0, 512.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for randomized potential placement.
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub potential: PotentialSection,
    #[serde(default)]
    pub switches: SwitchSection,
    #[serde(default)]
    pub fermi: FermiSection,
    #[serde(default)]
    pub kubo: KuboSection,
    #[serde(default)]
    pub drive: Option<DriveSection>,
    #[serde(default)]
    pub probes: ProbeSection,
    #[serde(default)]
    pub expansion: Option<ExpansionSection>,
    #[serde(default)]
    pub lambda_sweep: Option<LambdaSweepSection>,
    #[serde(default)]
    pub diagnostics: Option<DiagnosticsSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSection {
    Hofstadter {
        width: usize,
        #[serde(default = "one")]
        p: u32,
        q: u32,
        #[serde(default = "open")]
        boundary: Boundary,
        #[serde(default)]
        lambda: f64,
        /// Label stored as B; 2πp/q when absent.
        #[serde(default)]
        field_b: Option<f64>,
    },
    LandauBasis {
        field_b: f64,
        n_levels: usize,
        m_max: usize,
        #[serde(default)]
        lambda: f64,
    },
}

fn one() -> u32 {
    1
}

fn open() -> Boundary {
    Boundary::Open
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomBumps {
    pub count: usize,
    pub width: f64,
    /// Amplitudes are drawn uniformly from [−amplitude, amplitude].
    pub amplitude: f64,
    /// Centers are drawn uniformly from the square [−radius, radius]².
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSection {
    #[serde(default = "zero_kind")]
    pub kind: PotentialKind,
    #[serde(default)]
    pub terms: Vec<PotentialTerm>,
    #[serde(default)]
    pub random: Option<RandomBumps>,
    /// Rescale so that max |V| over the lattice sites is 1.
    #[serde(default = "yes")]
    pub normalize: bool,
    /// Declared sup norm when not normalizing.
    #[serde(default)]
    pub sup_norm: Option<f64>,
}

fn zero_kind() -> PotentialKind {
    PotentialKind::Zero
}

impl Default for PotentialSection {
    fn default() -> Self {
        PotentialSection { kind: PotentialKind::Zero, terms: vec![], random: None, normalize: true, sup_norm: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchSection {
    #[serde(default = "two")]
    pub m1: f64,
    #[serde(default = "two")]
    pub m2: f64,
    #[serde(default = "three")]
    pub order: u32,
}

fn two() -> f64 {
    2.0
}

fn three() -> u32 {
    3
}

impl Default for SwitchSection {
    fn default() -> Self {
        SwitchSection { m1: 2.0, m2: 2.0, order: 3 }
    }
}

/// At most one of `energy`, `gap`, `bulk_gap` or `search` selects E_F. The
/// default is the first bulk gap for lattices with flux and the first gap of
/// the model's own spectrum otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FermiSection {
    #[serde(default)]
    pub energy: Option<f64>,
    /// 1-based index of a spectral gap wider than `min_gap_width`.
    #[serde(default)]
    pub gap: Option<usize>,
    /// 1-based index of a gap of the clean infinite lattice (Harper bands).
    /// Useful on open samples, where edge states fill the gaps.
    #[serde(default)]
    pub bulk_gap: Option<usize>,
    /// Center of the widest spacing inside [lo, hi].
    #[serde(default)]
    pub search: Option<[f64; 2]>,
    #[serde(default = "min_gap_width")]
    pub min_gap_width: f64,
    /// Gap certificate threshold; 1e−3·‖H‖ when absent.
    #[serde(default)]
    pub delta_min: Option<f64>,
}

fn min_gap_width() -> f64 {
    0.1
}

impl Default for FermiSection {
    fn default() -> Self {
        FermiSection { energy: None, gap: None, bulk_gap: None, search: None, min_gap_width: 0.1, delta_min: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KuboSection {
    /// Half width R of the bulk window; a quarter of the sample extent when absent.
    #[serde(default)]
    pub window: Option<f64>,
    /// A candidate label such as "-i/2pi", or "calibrate" to snap against the
    /// Chern number of the bulk bands below E_F.
    #[serde(default = "default_convention")]
    pub convention: String,
    /// Integer used by "calibrate" and the quantization check instead of the
    /// FHS value.
    #[serde(default)]
    pub oracle: Option<i64>,
    /// When set, |K − oracle| must stay within this tolerance.
    #[serde(default)]
    pub quantization_tol: Option<f64>,
}

fn default_convention() -> String {
    "-i/2pi".into()
}

impl Default for KuboSection {
    fn default() -> Self {
        KuboSection { window: None, convention: default_convention(), oracle: None, quantization_tol: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveSection {
    #[serde(default = "ramp")]
    pub kind: DriveKind,
    #[serde(default = "four")]
    pub k: u32,
    #[serde(default = "unit")]
    pub amplitude: f64,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "magnus")]
    pub integrator: Integrator,
    #[serde(default = "min_steps")]
    pub min_steps: usize,
    #[serde(default = "per_unit")]
    pub per_unit: f64,
    #[serde(default)]
    pub fit_window: WindowPolicy,
}

fn ramp() -> DriveKind {
    DriveKind::Ramp
}

fn four() -> u32 {
    4
}

fn unit() -> f64 {
    1.0
}

fn default_taus() -> Vec<f64> {
    DEFAULT_TAUS.to_vec()
}

fn magnus() -> Integrator {
    Integrator::LabMagnus4
}

fn min_steps() -> usize {
    StepRule::default().min_steps
}

fn per_unit() -> f64 {
    StepRule::default().per_unit
}

impl Default for DriveSection {
    fn default() -> Self {
        DriveSection {
            kind: DriveKind::Ramp,
            k: 4,
            amplitude: 1.0,
            taus: default_taus(),
            integrator: Integrator::LabMagnus4,
            min_steps: min_steps(),
            per_unit: per_unit(),
            fit_window: WindowPolicy::default(),
        }
    }
}

impl DriveSection {
    pub fn profile(&self) -> Result<DrivingProfile, HarnessError> {
        Ok(DrivingProfile::new(self.kind, self.k)?.with_amplitude(self.amplitude))
    }

    pub fn evolve_config(&self) -> EvolveConfig {
        EvolveConfig {
            steps: StepRule { min_steps: self.min_steps, per_unit: self.per_unit },
            integrator: self.integrator,
            ..EvolveConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    #[serde(default = "default_probes")]
    pub s: Vec<f64>,
}

fn default_probes() -> Vec<f64> {
    vec![0.5]
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection { s: default_probes() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionSection {
    #[serde(default = "three_usize")]
    pub order: usize,
    #[serde(default = "fd_step")]
    pub fd_step: f64,
    /// A candidate label, or "calibrate".
    #[serde(default = "calibrate")]
    pub kappa: String,
    /// Truncation orders k for the remainder ‖P_τ − Σ_{j≤k} τ^{−j}B_j‖.
    #[serde(default)]
    pub remainder_orders: Vec<usize>,
    /// When set, the relative error of Tr W·B₁[H(s), Λ2] = g(s)·K_raw must
    /// stay within this tolerance.
    #[serde(default)]
    pub kubo_identity_tol: Option<f64>,
}

fn three_usize() -> usize {
    3
}

fn fd_step() -> f64 {
    hallkit::nenciu::DEFAULT_FD_STEP
}

fn calibrate() -> String {
    "calibrate".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSweepSection {
    pub lambdas: Vec<f64>,
    /// Multiply `lambdas` by (gap width at λ = 0)/‖V‖∞.
    #[serde(default = "yes")]
    pub relative: bool,
    #[serde(default = "stability_tol")]
    pub tolerance: f64,
}

fn stability_tol() -> f64 {
    1e-2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    #[serde(default = "yes")]
    pub decay: bool,
    #[serde(default)]
    pub lightcone: Option<LightconeSection>,
    #[serde(default)]
    pub energy_bound: Option<EnergyBoundSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightconeSection {
    pub taus: Vec<f64>,
    /// Lattice column and row of the seed site; the center when absent.
    #[serde(default)]
    pub site: Option<[usize; 2]>,
    #[serde(default = "forty")]
    pub samples: usize,
    #[serde(default = "lightcone_bound")]
    pub max_exponent: f64,
}

fn forty() -> usize {
    40
}

fn lightcone_bound() -> f64 {
    1.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyBoundSection {
    pub m: Vec<i32>,
    pub taus: Vec<f64>,
    #[serde(default = "eight")]
    pub samples: usize,
    /// Allowed relative variation of the estimate across τ.
    #[serde(default = "uniformity")]
    pub max_variation: f64,
}

fn eight() -> usize {
    8
}

fn uniformity() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub directory: Option<PathBuf>,
    #[serde(default = "yes")]
    pub csv: bool,
    #[serde(default = "yes")]
    pub json: bool,
    #[serde(default)]
    pub svg: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { directory: None, csv: true, json: true, svg: false }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let f = &self.fermi;
        let chosen = [f.energy.is_some(), f.gap.is_some(), f.bulk_gap.is_some(), f.search.is_some()].iter().filter(|b| **b).count();
        if chosen > 1 {
            return bad("fermi: set at most one of `energy`, `gap`, `bulk_gap`, `search`".into());
        }
        if f.gap == Some(0) || f.bulk_gap == Some(0) {
            return bad("fermi.gap: gap indices start at 1".into());
        }
        for &s in &self.probes.s {
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("probes.s: {s} is outside [0, 1]"));
            }
        }
        if let Some(d) = &self.drive {
            if d.taus.iter().any(|t| !(*t > 0.0)) {
                return bad("drive.taus: values must be positive".into());
            }
            if !(d.per_unit > 0.0) {
                return bad("drive.per_unit: must be positive".into());
            }
        }
        if let Some(e) = &self.expansion {
            if e.order < 1 {
                return bad("expansion.order: must be at least 1".into());
            }
            if e.remainder_orders.iter().any(|&k| k > e.order) {
                return bad("expansion.remainder_orders: entries may not exceed `order`".into());
            }
            if !(e.fd_step > 0.0) {
                return bad("expansion.fd_step: must be positive".into());
            }
        }
        if self.kubo.convention != "calibrate" && convention_constant(&self.kubo.convention).is_none() {
            return bad(format!("kubo.convention: unknown label {:?}", self.kubo.convention));
        }
        if let Some(e) = &self.expansion {
            if e.kappa != "calibrate" && kappa_constant(&e.kappa).is_none() {
                return bad(format!("expansion.kappa: unknown label {:?}", e.kappa));
            }
        }
        if let Some(p) = &self.potential.random {
            if p.count == 0 || !(p.width > 0.0) || !(p.radius >= 0.0) {
                return bad("potential.random: need count ≥ 1, width > 0, radius ≥ 0".into());
            }
            if self.potential.kind != PotentialKind::GaussianBumps {
                return bad("potential.random: only valid with kind = \"gaussian_bumps\"".into());
            }
        }
        if !self.potential.normalize && self.potential.kind != PotentialKind::Zero && self.potential.sup_norm.is_none() {
            return bad("potential: give `sup_norm` when `normalize = false`".into());
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        match self.model {
            ModelSection::Hofstadter { lambda, .. } | ModelSection::LandauBasis { lambda, .. } => lambda,
        }
    }

    pub fn lattice(&self) -> Option<LatticeSpec> {
        match self.model {
            ModelSection::Hofstadter { width, p, q, boundary, .. } => Some(LatticeSpec::new(width, p, q, boundary)),
            ModelSection::LandauBasis { .. } => None,
        }
    }

    /// Potential with random terms drawn from `seed` and the chosen normalization.
    pub fn potential_spec(&self) -> PotentialSpec {
        let sec = &self.potential;
        let mut terms = sec.terms.clone();
        if let Some(r) = &sec.random {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            for _ in 0..r.count {
                let c = [rng.gen_range(-r.radius..=r.radius), rng.gen_range(-r.radius..=r.radius)];
                let a = rng.gen_range(-r.amplitude..=r.amplitude);
                terms.push(PotentialTerm { center: c, width: r.width, amplitude: a });
            }
        }
        let mut spec = match sec.kind {
            PotentialKind::Zero => return PotentialSpec::zero(),
            PotentialKind::GaussianBumps => PotentialSpec::gaussian_bumps(terms),
            PotentialKind::Cosine => PotentialSpec::cosine(terms),
        };
        if sec.normalize {
            if let Some(l) = self.lattice() {
                return spec.normalized_on_lattice(&l);
            }
            // Landau basis: normalize on a grid covering the kept guiding centers
            let pts: Vec<(f64, f64)> = (-40..=40)
                .flat_map(|i| (-40..=40).map(move |j| (i as f64 * 0.25, j as f64 * 0.25)))
                .collect();
            return spec.normalized_on(&pts);
        }
        spec.sup_norm = sec.sup_norm.unwrap_or(f64::INFINITY);
        spec
    }

    /// The model at coupling `lambda` with everything else from the config.
    pub fn build_model_at(&self, lambda: f64) -> Result<MagneticModel, HarnessError> {
        let pot = self.potential_spec();
        Ok(match &self.model {
            ModelSection::Hofstadter { field_b, .. } => build_hofstadter(&self.lattice().unwrap(), &pot, lambda, *field_b)?,
            ModelSection::LandauBasis { field_b, n_levels, m_max, .. } => {
                build_landau_truncated(*field_b, *n_levels, *m_max, &pot, lambda)?
            }
        })
    }

    pub fn build_model(&self) -> Result<MagneticModel, HarnessError> {
        self.build_model_at(self.lambda())
    }
}

pub fn convention_constant(label: &str) -> Option<hallkit::linalg::C64> {
    hallkit::kubo::convention_candidates().into_iter().find(|c| c.0 == label).map(|c| c.1)
}

pub fn kappa_constant(label: &str) -> Option<hallkit::linalg::C64> {
    hallkit::nenciu::kappa_candidates().into_iter().find(|c| c.0 == label).map(|c| c.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
backend = "hofstadter"
width = 12
q = 3
boundary = "torus"
"#;

    #[test]
    fn minimal_config_defaults() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.lattice().unwrap(), LatticeSpec::new(12, 1, 3, Boundary::Torus));
        assert_eq!(c.switches, SwitchSection::default());
        assert!(c.drive.is_none());
        assert_eq!(c.kubo.convention, "-i/2pi");
    }

    #[test]
    fn unknown_keys_are_rejected_with_context() {
        let e = RunConfig::from_toml(&format!("{MINIMAL}\n[switches]\nm3 = 1.0\n")).unwrap_err().to_string();
        assert!(e.contains("m3"), "{e}");
        assert!(e.contains("line"), "{e}");
        let e = RunConfig::from_toml(&MINIMAL.replace("q = 3", "q = 3\nwidht = 4")).unwrap_err().to_string();
        assert!(e.contains("widht"), "{e}");
    }

    #[test]
    fn random_bumps_follow_the_seed() {
        let text = format!("{MINIMAL}\n[potential]\nkind = \"gaussian_bumps\"\nrandom = {{ count = 3, width = 1.0, amplitude = 1.0, radius = 3.0 }}\n");
        let mut c = RunConfig::from_toml(&text).unwrap();
        let a = c.potential_spec();
        assert_eq!(a, c.potential_spec());
        assert_eq!(a.sup_norm, 1.0);
        c.seed = 1;
        assert_ne!(a, c.potential_spec());
    }
}
