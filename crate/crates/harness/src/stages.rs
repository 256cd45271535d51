//! The pipeline stages behind each subcommand.

use hallkit::adiabatic::{evolve, instantaneous_current, tau_sweep, DriveKind, DrivingProfile};
use hallkit::diagnostics::{energy_bound_check, filtered_packet, kernel_decay, lightcone_check, off_diagonal_decay};
use hallkit::kubo::{
    bulk_bands_below, bulk_gap_center, calibrate_convention, chern_fhs, kubo_streda_trace, lambda_stability_sweep,
    BulkWindow, ConductanceResult, Convention, FermiLevel,
};
use hallkit::linalg::C64;
use hallkit::model::{current_operator, make_switch, Backend, Direction, MagneticModel, SwitchFunction};
use hallkit::nenciu::{b_terms, calibrate_kappa, kubo_from_b1, truncation_remainder, ExpansionSetup, KappaCalibration};
use hallkit::snapshot::{model_hash, EigenCache, ModelSnapshot};
use hallkit::spectral::{
    diagonalize, fermi_projector, gap_center, gap_info, spectral_gaps, widest_gap_center, EigenSystem, FermiProjector,
};
use hallkit::Error;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{convention_constant, kappa_constant, DriveSection, RunConfig};
use crate::plot::{Plot, Series};
use crate::{Check, Command, HarnessError, RunOutput, CACHE_ENV};

type Res<T> = Result<T, HarnessError>;

fn no_gap(required: f64) -> HarnessError {
    HarnessError::Core(Error::NoGap { fermi: f64::NAN, margin: 0.0, required })
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Res<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))
}

/// Model, eigensystem and the derived objects shared by every stage.
struct Context<'a> {
    cfg: &'a RunConfig,
    model: MagneticModel,
    eig: EigenSystem,
    hash: String,
    fermi: Option<FermiProjector>,
    l1: SwitchFunction,
    l2: SwitchFunction,
    window: BulkWindow,
    kubo: Option<(ConductanceResult, Convention)>,
}

fn eigensystem(model: &MagneticModel) -> Res<EigenSystem> {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => {
            let (eig, outcome) = EigenCache::new(dir)?.get_or_compute(model)?;
            eprintln!("eigensystem cache: {outcome:?}");
            Ok(eig)
        }
        _ => Ok(diagonalize(model)?),
    }
}

/// E_F selected by the `fermi` section.
fn resolve_fermi(cfg: &RunConfig, eig: &EigenSystem) -> Res<f64> {
    let f = &cfg.fermi;
    if let Some(e) = f.energy {
        return Ok(e);
    }
    if let Some([lo, hi]) = f.search {
        return widest_gap_center(eig, lo, hi).map(|c| c.0).ok_or_else(|| no_gap(f.min_gap_width));
    }
    if let Some(j) = f.gap {
        return gap_center(eig, j, f.min_gap_width).ok_or_else(|| no_gap(f.min_gap_width));
    }
    let flux = cfg.lattice().filter(|l| l.flux_numerator != 0);
    match (f.bulk_gap, flux) {
        (r, Some(l)) => {
            bulk_gap_center(l.flux_numerator, l.flux_denominator, r.unwrap_or(1))?.ok_or_else(|| no_gap(f.min_gap_width))
        }
        (Some(_), None) => Err(HarnessError::Config("fermi.bulk_gap needs a lattice model with nonzero flux".into())),
        (None, None) => gap_center(eig, 1, f.min_gap_width).ok_or_else(|| no_gap(f.min_gap_width)),
    }
}

/// Integer Hall conductance expected for E_F: the Chern number of the bulk
/// bands below it (lattice) or the number of Landau levels below it.
fn oracle(cfg: &RunConfig, model: &MagneticModel, ef: f64) -> Res<Option<i64>> {
    if let Some(o) = cfg.kubo.oracle {
        return Ok(Some(o));
    }
    match &model.backend {
        Backend::Hofstadter { spec } if spec.flux_numerator != 0 => {
            let (p, q) = (spec.flux_numerator, spec.flux_denominator);
            match bulk_bands_below(p, q, ef, 0.0)? {
                Some(0) => Ok(Some(0)),
                Some(r) if r < q as usize => Ok(Some(chern_fhs(p, q, 0..r)?.chern)),
                _ => Ok(None),
            }
        }
        Backend::LandauBasis { n_levels, .. } => {
            Ok(Some((0..*n_levels).filter(|n| ((2 * n + 1) as f64) * model.field_b < ef).count() as i64))
        }
        _ => Ok(None),
    }
}

fn fixed_convention(label: &str) -> Convention {
    let c = convention_constant(label).expect("validated label");
    Convention { measured: c, canonical: c, label: label.to_string(), relative_deviation: 0.0 }
}

impl<'a> Context<'a> {
    fn new(cfg: &'a RunConfig) -> Res<Context<'a>> {
        let model = cfg.build_model()?;
        let eig = eigensystem(&model)?;
        let hash = model_hash(&model);
        let sw = &cfg.switches;
        let l1 = make_switch(Direction::X1, sw.m1, sw.order, &model)?;
        let l2 = make_switch(Direction::X2, sw.m2, sw.order, &model)?;
        let r = cfg.kubo.window.unwrap_or(0.25 * (model.extent[0].1 - model.extent[0].0));
        let window = BulkWindow::square(&model, r);
        Ok(Context { cfg, model, eig, hash, fermi: None, l1, l2, window, kubo: None })
    }

    fn fermi(&mut self) -> Res<&FermiProjector> {
        if self.fermi.is_none() {
            let ef = resolve_fermi(self.cfg, &self.eig)?;
            self.fermi = Some(fermi_projector(&self.eig, ef, self.cfg.fermi.delta_min)?);
        }
        Ok(self.fermi.as_ref().unwrap())
    }

    fn drive(&self) -> DriveSection {
        self.cfg.drive.clone().unwrap_or_default()
    }
}

fn complex(z: C64) -> Value {
    json!([z.re, z.im])
}

fn svg(out: &mut RunOutput, cfg: &RunConfig, name: &str, plot: Plot) {
    if cfg.output.svg {
        out.files.insert(name.into(), plot.to_svg().into_bytes());
    }
}

pub fn execute(command: Command, cfg: &RunConfig) -> Res<RunOutput> {
    cfg.validate()?;
    let mut ctx = Context::new(cfg)?;
    let mut out = RunOutput { command: Some(command), model_hash: ctx.hash.clone(), ..RunOutput::default() };
    match command {
        Command::Build => build(&mut ctx, &mut out, true)?,
        Command::Kubo => {
            kubo(&mut ctx, &mut out)?;
        }
        Command::Evolve => evolve_stage(&mut ctx, &mut out)?,
        Command::SweepTau => sweep_tau(&mut ctx, &mut out)?,
        Command::SweepLambda => sweep_lambda(&mut ctx, &mut out)?,
        Command::Expansion => expansion(&mut ctx, &mut out)?,
        Command::Diagnostics => diagnostics(&mut ctx, &mut out)?,
        Command::Report => {
            build(&mut ctx, &mut out, false)?;
            kubo(&mut ctx, &mut out)?;
            if cfg.drive.is_some() {
                sweep_tau(&mut ctx, &mut out)?;
            }
            if cfg.lambda_sweep.is_some() {
                sweep_lambda(&mut ctx, &mut out)?;
            }
            if cfg.expansion.is_some() {
                expansion(&mut ctx, &mut out)?;
            }
            if cfg.diagnostics.is_some() {
                diagnostics(&mut ctx, &mut out)?;
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct SpectrumRow {
    index: usize,
    energy: f64,
}

fn build(ctx: &mut Context, out: &mut RunOutput, snapshot: bool) -> Res<()> {
    let rows: Vec<SpectrumRow> =
        ctx.eig.energies.iter().enumerate().map(|(index, &energy)| SpectrumRow { index, energy }).collect();
    if ctx.cfg.output.csv {
        out.files.insert("spectrum.csv".into(), csv_bytes(&rows)?);
    }
    if snapshot {
        out.files.insert("model.bin".into(), ModelSnapshot::of(&ctx.model).to_bytes());
    }
    let gaps = spectral_gaps(&ctx.eig, ctx.cfg.fermi.min_gap_width);
    out.results.insert(
        "build".into(),
        json!({
            "dim": ctx.model.dim(),
            "norm": ctx.eig.norm(),
            "residual": ctx.eig.residual,
            "flux_defect": ctx.model.flux_defect(),
            "magnetic_length": ctx.model.magnetic_length,
            "gaps": gaps,
        }),
    );
    svg(
        out,
        ctx.cfg,
        "spectrum.svg",
        Plot {
            title: "Spectrum".into(),
            x_label: "index".into(),
            y_label: "energy".into(),
            series: vec![Series { label: "E_n".into(), points: rows.iter().map(|r| (r.index as f64, r.energy)).collect() }],
            ..Plot::default()
        },
    );
    Ok(())
}

/// Kubo trace at the configured E_F, normalized by the configured convention.
fn kubo(ctx: &mut Context, out: &mut RunOutput) -> Res<(ConductanceResult, Convention)> {
    if let Some(k) = &ctx.kubo {
        return Ok(k.clone());
    }
    let cfg = ctx.cfg;
    ctx.fermi()?;
    let fp = ctx.fermi.as_ref().unwrap();
    let raw = kubo_streda_trace(fp, &ctx.l1, &ctx.l2, &ctx.window)?;
    let oracle = oracle(cfg, &ctx.model, fp.fermi_energy)?;
    let convention = if cfg.kubo.convention == "calibrate" {
        let o = oracle.ok_or_else(|| HarnessError::Config("kubo.convention = \"calibrate\" needs an oracle".into()))?;
        calibrate_convention(&raw, o)?
    } else {
        fixed_convention(&cfg.kubo.convention)
    };
    let k = raw.normalize(&convention);
    let normalized = k.normalized.unwrap();
    match (oracle, cfg.kubo.quantization_tol) {
        (Some(o), Some(tol)) => {
            let dev = (normalized - o as f64).abs();
            out.checks.push(Check::new("kubo.quantization", dev <= tol, dev, format!("|K - oracle| <= {tol}")));
        }
        (None, Some(_)) => out.checks.push(Check::new("kubo.quantization", false, f64::NAN, "an oracle integer is available")),
        _ => {}
    }
    out.results.insert(
        "kubo".into(),
        json!({
            "fermi_energy": fp.fermi_energy,
            "gap": gap_info(&ctx.eig, fp, cfg.fermi.min_gap_width),
            "occupied": fp.occupied_count,
            "window_half_width": ctx.window.half_width,
            "raw_trace": complex(k.raw_trace),
            "cyclic_trace": complex(k.cyclic_trace),
            "imag_purity": k.imag_purity,
            "convention": convention.label,
            "convention_constant": complex(convention.constant()),
            "normalized": normalized,
            "oracle": oracle,
        }),
    );
    ctx.kubo = Some((k.clone(), convention.clone()));
    Ok((k, convention))
}

#[derive(Serialize)]
struct CurrentRow {
    tau: f64,
    s: f64,
    j_re: f64,
    j_im: f64,
    prediction_re: f64,
    prediction_im: f64,
    residual: f64,
    n_steps: usize,
    unitarity_defect: f64,
}

fn evolve_stage(ctx: &mut Context, out: &mut RunOutput) -> Res<()> {
    let (k, _) = kubo(ctx, out)?;
    let drive = ctx.drive();
    let profile = drive.profile()?;
    let ecfg = drive.evolve_config();
    let mut probes = ctx.cfg.probes.s.clone();
    probes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    probes.dedup();
    let fp = ctx.fermi.as_ref().unwrap();
    let per_tau: Vec<Res<Vec<CurrentRow>>> = drive
        .taus
        .par_iter()
        .map(|&tau| {
            let tr = evolve(&ctx.model, &ctx.eig, fp, &profile, &ctx.l1, tau, &probes, &ecfg)?;
            Ok(tr
                .states
                .iter()
                .map(|st| {
                    let c = instantaneous_current(st, &ctx.model, fp, &profile, &ctx.l1, &ctx.l2, &ctx.window, k.raw_trace);
                    CurrentRow {
                        tau,
                        s: st.s,
                        j_re: c.j.re,
                        j_im: c.j.im,
                        prediction_re: c.kubo_prediction.re,
                        prediction_im: c.kubo_prediction.im,
                        residual: c.residual,
                        n_steps: st.n_steps_used,
                        unitarity_defect: st.unitarity_defect,
                    }
                })
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_tau {
        rows.extend(r?);
    }
    let worst = rows.iter().map(|r| r.unitarity_defect).fold(0.0, f64::max);
    out.results.insert("evolve".into(), json!({ "rows": rows.len(), "max_unitarity_defect": worst }));
    if ctx.cfg.output.csv {
        out.files.insert("current.csv".into(), csv_bytes(&rows)?);
    }
    Ok(())
}

#[derive(Serialize)]
struct TauCsvRow {
    s: f64,
    tau: f64,
    residual: f64,
    residual_halved: f64,
    halving_change: f64,
    j_re: f64,
    j_im: f64,
    prediction_re: f64,
    prediction_im: f64,
    n_steps: usize,
    unitarity_defect: f64,
}

fn slope_check(name: String, slope: f64, r2: f64, out: &mut RunOutput) {
    out.checks.push(Check::new(format!("{name}.slope"), (-2.4..=-1.6).contains(&slope), slope, "[-2.4, -1.6]"));
    out.checks.push(Check::new(format!("{name}.r_squared"), r2 >= 0.95, r2, ">= 0.95"));
}

fn sweep_tau(ctx: &mut Context, out: &mut RunOutput) -> Res<()> {
    let (k, _) = kubo(ctx, out)?;
    let drive = ctx.drive();
    let profile = drive.profile()?;
    let ecfg = drive.evolve_config();
    let fp = ctx.fermi.as_ref().unwrap();
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    let mut series = Vec::new();
    for &s in &ctx.cfg.probes.s {
        let name = format!("sweep_tau[s={s}]");
        let rep = match tau_sweep(
            &ctx.model, &ctx.eig, fp, &profile, &ctx.l1, &ctx.l2, &ctx.window, k.raw_trace, &drive.taus, s, &ecfg,
            drive.fit_window,
        ) {
            Ok(r) => r,
            Err(Error::IntegratorDominated { tau, change }) => {
                out.checks.push(Check::new(format!("{name}.integrator"), false, change / 100.0, format!("halving change < 0.2 at tau = {tau}")));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        slope_check(name.clone(), rep.fit.slope, rep.fit.r_squared, out);
        let worst = rep.rows.iter().map(|r| r.halving_change).fold(0.0, f64::max);
        out.checks.push(Check::new(format!("{name}.integrator"), worst < 0.2, worst, "halving change < 0.2"));
        for r in &rep.rows {
            rows.push(TauCsvRow {
                s,
                tau: r.tau,
                residual: r.residual,
                residual_halved: r.residual_halved,
                halving_change: r.halving_change,
                j_re: r.j.re,
                j_im: r.j.im,
                prediction_re: r.prediction.re,
                prediction_im: r.prediction.im,
                n_steps: r.n_steps,
                unitarity_defect: r.unitarity_defect,
            });
        }
        series.push(Series { label: format!("s = {s}"), points: rep.rows.iter().map(|r| (r.tau, r.residual)).collect() });
        fits.push(json!({ "s": s, "fit": rep.fit, "monotone": rep.monotone }));
    }
    out.results.insert("sweep_tau".into(), json!({ "taus": drive.taus, "fits": fits }));
    if ctx.cfg.output.csv {
        out.files.insert("tau_sweep.csv".into(), csv_bytes(&rows)?);
    }
    svg(
        out,
        ctx.cfg,
        "tau_sweep.svg",
        Plot {
            title: "Adiabatic current residual".into(),
            x_label: "tau".into(),
            y_label: "|J - J_Kubo|".into(),
            log_x: true,
            log_y: true,
            series,
        },
    );
    Ok(())
}

#[derive(Serialize)]
struct LambdaRow {
    lambda: f64,
    fermi_energy: f64,
    gap_margin: f64,
    raw_re: f64,
    raw_im: f64,
    normalized: f64,
}

fn sweep_lambda(ctx: &mut Context, out: &mut RunOutput) -> Res<()> {
    let cfg = ctx.cfg;
    let sec = cfg.lambda_sweep.clone().expect("sweep-lambda needs a [lambda_sweep] section");
    let base_cfg = RunConfig { model: with_lambda(&cfg.model, 0.0), ..cfg.clone() };
    let base = base_cfg.build_model()?;
    let base_eig = eigensystem(&base)?;
    let ef0 = resolve_fermi(cfg, &base_eig)?;
    let fp0 = fermi_projector(&base_eig, ef0, cfg.fermi.delta_min)?;
    let k0 = kubo_streda_trace(&fp0, &ctx.l1, &ctx.l2, &ctx.window)?;
    let convention = if cfg.kubo.convention == "calibrate" {
        let o = oracle(cfg, &base, ef0)?.ok_or_else(|| HarnessError::Config("kubo.convention = \"calibrate\" needs an oracle".into()))?;
        calibrate_convention(&k0, o)?
    } else {
        fixed_convention(&cfg.kubo.convention)
    };
    let sup = cfg.potential_spec().sup_norm;
    let scale = if sec.relative {
        if !(sup > 0.0 && sup.is_finite()) {
            return Err(HarnessError::Config("lambda_sweep.relative needs a nonzero potential with a finite sup norm".into()));
        }
        fp0.gap_width / sup
    } else {
        1.0
    };
    let grid: Vec<f64> = sec.lambdas.iter().map(|l| l * scale).collect();
    let w = fp0.gap_width;
    let level = if cfg.fermi.energy.is_some() || cfg.fermi.bulk_gap.is_some() {
        FermiLevel::Fixed { energy: ef0 }
    } else {
        FermiLevel::GapCenter { lo: fp0.gap_lower - 0.5 * w, hi: fp0.gap_upper + 0.5 * w }
    };
    let rep = lambda_stability_sweep(
        |l| cfg.build_model_at(l).map_err(|e| match e {
            HarnessError::Core(c) => c,
            other => Error::InvalidArgument(other.to_string()),
        }),
        &grid,
        level,
        &ctx.l1,
        &ctx.l2,
        &ctx.window,
        &convention,
        cfg.fermi.delta_min,
    )?;
    let rows: Vec<LambdaRow> = rep
        .points
        .iter()
        .map(|p| LambdaRow {
            lambda: p.lambda,
            fermi_energy: p.fermi_energy,
            gap_margin: p.gap_margin,
            raw_re: p.raw.re,
            raw_im: p.raw.im,
            normalized: p.normalized,
        })
        .collect();
    out.checks.push(Check::new(
        "sweep_lambda.stability",
        rep.max_deviation <= sec.tolerance,
        rep.max_deviation,
        format!("max - min <= {}", sec.tolerance),
    ));
    out.checks.push(Check::new("sweep_lambda.gaps_certified", rep.dropped.is_empty(), rep.dropped.len() as f64, "no dropped points"));
    out.results.insert(
        "sweep_lambda".into(),
        json!({
            "scale": scale,
            "gap_width": w,
            "convention": convention.label,
            "max_deviation": rep.max_deviation,
            "dropped": rep.dropped,
        }),
    );
    if cfg.output.csv {
        out.files.insert("lambda_sweep.csv".into(), csv_bytes(&rows)?);
    }
    svg(
        out,
        cfg,
        "lambda_sweep.svg",
        Plot {
            title: "Normalized Kubo trace".into(),
            x_label: "lambda".into(),
            y_label: "K".into(),
            series: vec![Series { label: "K(lambda)".into(), points: rows.iter().map(|r| (r.lambda, r.normalized)).collect() }],
            ..Plot::default()
        },
    );
    Ok(())
}

fn with_lambda(m: &crate::config::ModelSection, value: f64) -> crate::config::ModelSection {
    use crate::config::ModelSection;
    let mut m = m.clone();
    match &mut m {
        ModelSection::Hofstadter { lambda, .. } | ModelSection::LandauBasis { lambda, .. } => *lambda = value,
    }
    m
}

#[derive(Serialize)]
struct TermRow {
    s: f64,
    j: usize,
    norm: f64,
    residual_alg: f64,
    residual_ode: Option<f64>,
    residual_ode_half_step: Option<f64>,
    ratio: Option<f64>,
}

#[derive(Serialize)]
struct IdentityRow {
    s: f64,
    lhs_re: f64,
    lhs_im: f64,
    rhs_re: f64,
    rhs_im: f64,
    relative_error: f64,
}

#[derive(Serialize)]
struct RemainderCsvRow {
    k: usize,
    tau: f64,
    remainder: f64,
    remainder_halved: f64,
    halving_change: f64,
}

/// ODE residuals below this are at round-off and carry no convergence order.
const ODE_FLOOR: f64 = 1e-11;

fn expansion(ctx: &mut Context, out: &mut RunOutput) -> Res<()> {
    let (k, _) = kubo(ctx, out)?;
    let cfg = ctx.cfg;
    let sec = cfg.expansion.clone().expect("expansion needs an [expansion] section");
    let drive = ctx.drive();
    let profile: DrivingProfile = drive.profile()?;
    let fp = ctx.fermi.as_ref().unwrap();
    let mut setup = ExpansionSetup {
        model: &ctx.model,
        eig: &ctx.eig,
        fermi: fp,
        profile: &profile,
        lambda1: &ctx.l1,
        kappa: C64::new(0.0, 0.0),
    };
    let mut calibration: Option<KappaCalibration> = None;
    if sec.kappa == "calibrate" {
        for &s in &cfg.probes.s {
            match calibrate_kappa(setup, s) {
                Ok(c) => {
                    calibration = Some(c);
                    break;
                }
                Err(Error::ZeroOracle) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        let c = calibration.as_ref().ok_or_else(|| {
            HarnessError::Config("expansion.kappa = \"calibrate\" needs a probe s where the drive is moving".into())
        })?;
        setup.kappa = c.kappa;
    } else {
        setup.kappa = kappa_constant(&sec.kappa).expect("validated label");
    }
    let h = sec.fd_step;
    let mut term_rows = Vec::new();
    let mut identity_rows = Vec::new();
    let mut reports = Vec::new();
    let mut first = None;
    for &s in &cfg.probes.s {
        let terms = b_terms(setup, s, sec.order, h)?;
        let half = b_terms(setup, s, sec.order, h / 2.0)?;
        for j in 0..=sec.order {
            let ode = terms.residual_ode.get(j).copied();
            let ode_half = half.residual_ode.get(j).copied();
            let ratio = match (ode, ode_half) {
                (Some(a), Some(b)) if b > ODE_FLOOR => Some(a / b),
                _ => None,
            };
            if let Some(r) = ratio {
                out.checks.push(Check::new(format!("expansion[s={s}].ode_order[j={j}]"), (3.0..=5.0).contains(&r), r, "h-halving ratio in [3, 5]"));
            }
            let alg = terms.residual_alg[j];
            out.checks.push(Check::new(format!("expansion[s={s}].algebraic[j={j}]"), alg <= 1e-8, alg, "<= 1e-8"));
            term_rows.push(TermRow {
                s,
                j,
                norm: hallkit::linalg::op_norm(&terms.terms[j]),
                residual_alg: alg,
                residual_ode: ode,
                residual_ode_half_step: ode_half,
                ratio,
            });
        }
        let lhs = kubo_from_b1(&terms, &ctx.model, &ctx.l1, &ctx.l2, &ctx.window)?;
        let rhs = profile.g(s) * k.raw_trace;
        let rel = if rhs.norm() > 0.0 { (lhs - rhs).norm() / rhs.norm() } else { lhs.norm() };
        if let Some(tol) = sec.kubo_identity_tol {
            out.checks.push(Check::new(format!("expansion[s={s}].kubo_identity"), rel <= tol, rel, format!("<= {tol}")));
        }
        identity_rows.push(IdentityRow { s, lhs_re: lhs.re, lhs_im: lhs.im, rhs_re: rhs.re, rhs_im: rhs.im, relative_error: rel });
        reports.push(terms.report(calibration.as_ref()));
        if first.is_none() {
            first = Some(terms);
        }
    }
    let mut remainder_rows = Vec::new();
    let mut remainder_fits = Vec::new();
    let mut slopes = std::collections::BTreeMap::new();
    let mut series = Vec::new();
    if let Some(terms) = &first {
        let ecfg = drive.evolve_config();
        for &kk in &sec.remainder_orders {
            match truncation_remainder(setup, terms, &drive.taus, kk, &ecfg, drive.fit_window) {
                Ok(rep) => {
                    for r in &rep.rows {
                        remainder_rows.push(RemainderCsvRow {
                            k: kk,
                            tau: r.tau,
                            remainder: r.remainder,
                            remainder_halved: r.remainder_halved,
                            halving_change: r.halving_change,
                        });
                    }
                    series.push(Series { label: format!("k = {kk}"), points: rep.rows.iter().map(|r| (r.tau, r.remainder)).collect() });
                    slopes.insert(kk, rep.fit.slope);
                    remainder_fits.push(json!({ "k": kk, "s": rep.s, "fit": rep.fit }));
                }
                Err(Error::IntegratorDominated { tau, change }) => {
                    out.checks.push(Check::new(format!("remainder[k={kk}].integrator"), false, change / 100.0, format!("halving change < 0.2 at tau = {tau}")));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    if let Some(&s1) = slopes.get(&1) {
        out.checks.push(Check::new("remainder[k=1].slope", (-2.4..=-1.6).contains(&s1), s1, "[-2.4, -1.6]"));
        if let Some(&s2) = slopes.get(&2) {
            out.checks.push(Check::new("remainder[k=2].steepening", s1 - s2 >= 0.6, s1 - s2, ">= 0.6"));
        }
    }
    out.results.insert(
        "expansion".into(),
        json!({
            "kappa": complex(setup.kappa),
            "calibration": calibration,
            "reports": reports,
            "remainder": remainder_fits,
        }),
    );
    if cfg.output.csv {
        out.files.insert("expansion.csv".into(), csv_bytes(&term_rows)?);
        out.files.insert("kubo_identity.csv".into(), csv_bytes(&identity_rows)?);
        if !remainder_rows.is_empty() {
            out.files.insert("remainder.csv".into(), csv_bytes(&remainder_rows)?);
        }
    }
    if !series.is_empty() {
        svg(
            out,
            cfg,
            "remainder.svg",
            Plot {
                title: "Truncation remainder".into(),
                x_label: "tau".into(),
                y_label: "remainder".into(),
                log_x: true,
                log_y: true,
                series,
            },
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct DecayRow {
    operator: &'static str,
    distance: f64,
    norm: f64,
}

#[derive(Serialize)]
struct LightconeRow {
    tau: f64,
    time: f64,
    spread: f64,
}

#[derive(Serialize)]
struct EnergyRow {
    m: i32,
    tau: f64,
    estimate: f64,
    worst_s: f64,
    worst_t: f64,
}

fn diagnostics(ctx: &mut Context, out: &mut RunOutput) -> Res<()> {
    let cfg = ctx.cfg;
    let sec = cfg.diagnostics.clone().expect("diagnostics needs a [diagnostics] section");
    let drive = ctx.drive();
    let profile = drive.profile()?;
    let ecfg = drive.evolve_config();
    let mut results = serde_json::Map::new();
    let lattice = cfg.lattice();
    if sec.decay && lattice.is_some() {
        let fp = ctx.fermi()?.clone();
        let p = fp.matrix();
        let sw = &cfg.switches;
        let pl = ctx.l1.op.commutator_with(p);
        let hl = current_operator(&ctx.model, &ctx.l2)?;
        let profiles = [
            ("commutator_p_lambda1", kernel_decay(&pl, &ctx.model, Direction::X1, (-sw.m1, sw.m1))?),
            ("commutator_h_lambda2", kernel_decay(&hl, &ctx.model, Direction::X2, (-sw.m2, sw.m2))?),
            ("projector_off_diagonal", off_diagonal_decay(p, &ctx.model)?),
        ];
        let mut rows = Vec::new();
        let mut rates = serde_json::Map::new();
        for (name, d) in &profiles {
            for (x, n) in d.distances.iter().zip(&d.norms) {
                rows.push(DecayRow { operator: name, distance: *x, norm: *n });
            }
            rates.insert(name.to_string(), json!(d.fit_exponent));
        }
        results.insert("decay_rates".into(), Value::Object(rates));
        results.insert("magnetic_length".into(), json!(ctx.model.magnetic_length));
        if cfg.output.csv {
            out.files.insert("decay.csv".into(), csv_bytes(&rows)?);
        }
    }
    if let Some(lc) = &sec.lightcone {
        let l = lattice.as_ref().ok_or_else(|| HarnessError::Config("diagnostics.lightcone needs a lattice model".into()))?;
        let [a, b] = lc.site.unwrap_or([l.width / 2, l.width / 2]);
        if a >= l.width || b >= l.width {
            return Err(HarnessError::Config(format!("diagnostics.lightcone.site [{a}, {b}] is outside the lattice")));
        }
        let ef = ctx.fermi()?.fermi_energy;
        let packet = filtered_packet(&ctx.eig, l.index(a, b), ef)?;
        let grid: Vec<f64> = (0..=lc.samples).map(|i| i as f64 / lc.samples as f64).collect();
        let reports: Vec<Res<_>> = lc
            .taus
            .par_iter()
            .map(|&tau| Ok(lightcone_check(&ctx.model, &ctx.eig, &profile, &ctx.l1, tau, &packet, &grid, &ecfg)?))
            .collect();
        let mut rows = Vec::new();
        let mut fits = Vec::new();
        for (&tau, r) in lc.taus.iter().zip(reports) {
            let r = r?;
            for (t, s) in r.times.iter().zip(&r.spreads) {
                rows.push(LightconeRow { tau, time: *t, spread: *s });
            }
            if r.fit_points >= 3 {
                out.checks.push(Check::new(
                    format!("lightcone[tau={tau}].exponent"),
                    r.growth_exponent <= lc.max_exponent,
                    r.growth_exponent,
                    format!("<= {}", lc.max_exponent),
                ));
            }
            fits.push(json!({
                "tau": tau,
                "growth_exponent": r.growth_exponent,
                "fit_points": r.fit_points,
                "boundary_reflection": r.boundary_reflection,
            }));
        }
        results.insert("lightcone".into(), json!(fits));
        if cfg.output.csv {
            out.files.insert("lightcone.csv".into(), csv_bytes(&rows)?);
        }
    }
    if let Some(eb) = &sec.energy_bound {
        let grid: Vec<f64> = (0..=eb.samples).map(|i| i as f64 / eb.samples as f64).collect();
        let jobs: Vec<(i32, f64)> = eb.m.iter().flat_map(|&m| eb.taus.iter().map(move |&t| (m, t))).collect();
        let results_eb: Vec<Res<_>> = jobs
            .par_iter()
            .map(|&(m, tau)| Ok(energy_bound_check(&ctx.model, &ctx.eig, &profile, &ctx.l1, tau, m, &grid, &ecfg)?))
            .collect();
        let mut rows = Vec::new();
        for r in results_eb {
            let r = r?;
            rows.push(EnergyRow { m: r.m, tau: r.tau, estimate: r.estimate, worst_s: r.worst_pair.0, worst_t: r.worst_pair.1 });
        }
        let mut summary = Vec::new();
        for &m in &eb.m {
            let est: Vec<f64> = rows.iter().filter(|r| r.m == m).map(|r| r.estimate).collect();
            let hi = est.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = est.iter().cloned().fold(f64::INFINITY, f64::min);
            let variation = (hi - lo) / lo;
            out.checks.push(Check::new(
                format!("energy_bound[m={m}].uniformity"),
                variation <= eb.max_variation,
                variation,
                format!("(max - min)/min <= {}", eb.max_variation),
            ));
            if profile.kind == DriveKind::Zero {
                let dev = est.iter().map(|e| (e - 1.0).abs()).fold(0.0, f64::max);
                out.checks.push(Check::new(format!("energy_bound[m={m}].zero_drive"), dev <= 1e-10, dev, "|estimate - 1| <= 1e-10"));
            }
            summary.push(json!({ "m": m, "min": lo, "max": hi, "variation": variation }));
        }
        results.insert("energy_bound".into(), json!(summary));
        if cfg.output.csv {
            out.files.insert("energy_bound.csv".into(), csv_bytes(&rows)?);
        }
    }
    out.results.insert("diagnostics".into(), Value::Object(results));
    Ok(())
}
