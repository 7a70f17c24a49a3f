//! Subcommand bodies. Each writes its outputs plus `manifest.json` into the
//! output directory and returns the process status.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use snls_core::action::{quasipotential_runs, ActionOptions, QuasipotentialOptions};
use snls_core::dynamics::{det_flow, run_sde, NoiseKind, RecordOptions};
use snls_core::exit::{
    laplace_identity_check, least_squares, mc_exit_ensemble, DomainKind, EnsembleOptions, ExitRecord, ExitStats,
    LaplaceReport, Sectorization,
};
use snls_core::functionals::{
    b_rho, gn_constant, htilde_constant, analysis_constants, sobolev_embedding_constant, GnOptions,
};
use snls_core::rng::{derive_seed, trajectory_stream};
use snls_core::snapshot::write_snapshot;
use snls_core::verify::{run_check, CheckResult, Effort, CHECK_NAMES};

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] snls_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for anything the user can fix in the invocation or config.
    pub fn status(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: String,
    config: &'a RunConfig,
    outputs: &'a [String],
}

/// Collects output file names for the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn create(&mut self, name: &str) -> CliResult<BufWriter<File>> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    fn finish(self, command: &str, cfg: &RunConfig) -> CliResult<()> {
        let manifest = Manifest {
            tool: "snls",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: cfg.hash(),
            config: cfg,
            outputs: &self.files,
        };
        let mut w = BufWriter::new(File::create(self.dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

pub fn simulate(cfg: &RunConfig) -> CliResult<u8> {
    let grid = cfg.build_grid()?;
    let u0 = cfg.initial_field(&grid)?;
    let params = cfg.params();
    let opts = RecordOptions {
        snapshot_stride: cfg.output.snapshot_stride,
        scalar_stride: cfg.output.scalar_stride,
        constants: analysis_constants_for(cfg, &grid),
    };
    let t_end = cfg.experiment.t_end;
    let (traj, path) = if params.noise_kind == NoiseKind::None || params.epsilon == 0.0 {
        (det_flow(&u0, &params.with_noise(NoiseKind::None, 0.0), t_end, &opts)?, None)
    } else {
        let op = cfg.noise_operator(&grid)?;
        let mut rng = trajectory_stream(cfg.experiment.seed, 0);
        run_sde(&u0, &params, &op, t_end, &mut rng, &opts, cfg.output.record_noise)?
    };

    let mut out = Outputs::new(Path::new(&cfg.output.dir))?;
    let mut w = out.create("scalars.jsonl")?;
    traj.write_scalar_jsonl(&mut w)?;
    w.flush()?;
    let mut w = out.create("snapshots.bin")?;
    for s in &traj.snapshots {
        write_snapshot(s, &mut w)?;
    }
    w.flush()?;
    out.json("snapshot_times.json", &traj.times)?;
    if let Some(p) = path {
        let mut w = out.create("wiener_path.bin")?;
        p.write(&mut w)?;
        w.flush()?;
    }
    log::info!("simulated {} steps to t = {t_end}", params.steps_for(t_end)?);
    out.finish("simulate", cfg)?;
    Ok(0)
}

/// Constants for `H̃` in the scalar series; left out if the
/// Gagliardo–Nirenberg ascent does not settle.
fn analysis_constants_for(
    cfg: &RunConfig,
    grid: &std::sync::Arc<snls_core::Grid<f64>>,
) -> Option<snls_core::functionals::AnalysisConstants<f64>> {
    snls_core::functionals::AnalysisConstants::for_grid(cfg.sde.sigma, grid).ok()
}

#[derive(Serialize)]
struct EpsilonRecord<'a> {
    epsilon: f64,
    #[serde(flatten)]
    record: &'a ExitRecord,
}

#[derive(Serialize)]
struct EpsilonSummary {
    epsilon: f64,
    stats: ExitStats,
    laplace: Option<LaplaceReport>,
}

#[derive(Serialize)]
struct ExitSummary {
    rows: Vec<EpsilonSummary>,
    /// `(slope, intercept)` of `log E[τ]` against `1/ε`.
    fit: Option<(f64, f64)>,
    warnings: Vec<String>,
}

pub fn exit_mc(cfg: &RunConfig) -> CliResult<u8> {
    let grid = cfg.build_grid()?;
    let op = cfg.noise_operator(&grid)?;
    let domain = cfg.domain(&grid)?;
    let u0 = cfg.initial_field(&grid)?;
    let base = cfg.params();
    if base.noise_kind == NoiseKind::None {
        return Err(crate::config::ConfigError::Invalid {
            key: "sde.noise_kind",
            reason: "exit-mc needs noise".into(),
        }
        .into());
    }
    let epsilons = cfg.sde.epsilon_list.clone().unwrap_or_else(|| vec![cfg.sde.epsilon]);
    let sectors = if cfg.experiment.sectors.is_empty() {
        None
    } else {
        Some(Sectorization::new(cfg.experiment.sectors.clone())?)
    };
    let hs0 = op.hs_norm_l2();
    let mut out = Outputs::new(Path::new(&cfg.output.dir))?;
    let mut records = out.create("exits.jsonl")?;
    let mut csv = out.create("exit_scaling.csv")?;
    writeln!(csv, "epsilon,n,censored,mean_tau,ci95,laplace,predicted_laplace,z")?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (i, &eps) in epsilons.iter().enumerate() {
        let mut p = base;
        p.epsilon = eps;
        let opts = EnsembleOptions {
            n_paths: cfg.experiment.paths,
            t_max: cfg.experiment.t_max,
            master_seed: derive_seed(cfg.experiment.seed, i as u64),
            sectors: sectors.clone(),
        };
        let ens = mc_exit_ensemble(&u0, &p, &op, &domain, &opts)?;
        for w in &ens.stats.warnings {
            warnings.push(format!("epsilon={eps}: {w}"));
        }
        for r in &ens.records {
            serde_json::to_writer(&mut records, &EpsilonRecord { epsilon: eps, record: r })?;
            records.write_all(b"\n")?;
        }
        let laplace = match cfg.domain {
            DomainKind::L2Ball { radius } if p.noise_kind == NoiseKind::Additive && ens.stats.exits > 1 => {
                laplace_identity_check(&ens.stats, p.alpha, radius * radius, eps, hs0).ok()
            }
            _ => None,
        };
        let s = &ens.stats;
        let (pred, z) = match &laplace {
            Some(l) => (l.predicted.to_string(), l.z.to_string()),
            None => (String::new(), String::new()),
        };
        writeln!(
            csv,
            "{eps},{},{},{},{},{},{pred},{z}",
            s.n_paths, s.censored_count, s.mean_tau, s.tau_ci95, s.laplace_estimate
        )?;
        rows.push(EpsilonSummary { epsilon: eps, stats: ens.stats, laplace });
    }
    records.flush()?;
    csv.flush()?;
    let usable: Vec<&EpsilonSummary> = rows.iter().filter(|r| r.stats.exits > 0).collect();
    let fit = if usable.len() >= 2 {
        let x: Vec<f64> = usable.iter().map(|r| 1.0 / r.epsilon).collect();
        let y: Vec<f64> = usable.iter().map(|r| r.stats.mean_tau.ln()).collect();
        least_squares(&x, &y).ok()
    } else {
        None
    };
    out.json("summary.json", &ExitSummary { rows, fit, warnings })?;
    out.finish("exit-mc", cfg)?;
    Ok(0)
}

#[derive(Serialize)]
struct InstantonCell {
    t: f64,
    sector: Option<[i64; 2]>,
    action: f64,
    terminal_gap: f64,
    converged: bool,
    iterations: usize,
    controls_file: String,
}

#[derive(Serialize)]
struct InstantonTable {
    cells: Vec<InstantonCell>,
    e_bar: f64,
    e_sector: Vec<([i64; 2], f64)>,
    lemma_l0: Option<f64>,
    lemma_l02: Option<f64>,
    all_above_bounds: bool,
}

pub fn instanton(cfg: &RunConfig) -> CliResult<u8> {
    let grid = cfg.build_grid()?;
    let op = cfg.noise_operator(&grid)?;
    let domain = cfg.domain(&grid)?;
    let params = cfg.params();
    let kind = match cfg.sde.noise_kind {
        NoiseKind::Multiplicative => NoiseKind::Multiplicative,
        _ => NoiseKind::Additive,
    };
    let sectors = if cfg.experiment.sectors.is_empty() {
        None
    } else {
        Some(Sectorization::new(cfg.experiment.sectors.clone())?)
    };
    let opts = QuasipotentialOptions {
        t_list: cfg.experiment.t_list.clone(),
        sectors: sectors.clone(),
        action: ActionOptions { kind, ..ActionOptions::default() },
        l02_geometry: None,
    };
    let (report, results) = quasipotential_runs(&[], &params, &op, &domain, &opts)?;

    let mut out = Outputs::new(Path::new(&cfg.output.dir))?;
    let mut cells = Vec::with_capacity(report.cells.len());
    for (cell, res) in report.cells.iter().zip(&results) {
        let sector = cell.sector.map(|m| sectors.as_ref().expect("sector cells need sectors").modes[m]);
        let name = match sector {
            Some([a, b]) => format!("controls_T{}_sector_{a}_{b}.bin", cell.t),
            None => format!("controls_T{}.bin", cell.t),
        };
        let mut w = out.create(&name)?;
        for h in &res.control.controls {
            write_snapshot(h, &mut w)?;
        }
        w.flush()?;
        cells.push(InstantonCell {
            t: cell.t,
            sector,
            action: cell.action,
            terminal_gap: cell.terminal_gap,
            converged: cell.converged,
            iterations: res.iterations,
            controls_file: name,
        });
    }
    let table = InstantonTable {
        cells,
        e_bar: report.e_bar,
        e_sector: report.e_sector,
        lemma_l0: report.lemma_l0,
        lemma_l02: report.lemma_l02,
        all_above_bounds: report.all_above_bounds,
    };
    out.json("instanton.json", &table)?;
    out.finish("instanton", cfg)?;
    Ok(0)
}

#[derive(Serialize)]
struct ConstantsReport {
    sigma: f64,
    dim: usize,
    gn_constant: f64,
    gn_iterations: usize,
    /// `C` used in `H̃`: the larger of the GN constant and its Young form.
    htilde_constant: f64,
    beta: f64,
    c_sigma: f64,
    m_sigma_d: f64,
    mass_exponent: f64,
    sobolev_h1_to_linf: f64,
    noise_hs_l2: f64,
    noise_hs_h1: f64,
    noise_gradient_hs: f64,
    noise_operator_norm_l2: f64,
    noise_operator_norm_l2_h1: f64,
    /// `b(ρ)` when the domain is an `H̃` sublevel of level `ρ`.
    b_rho: Option<f64>,
}

pub fn constants(cfg: &RunConfig) -> CliResult<u8> {
    let grid = cfg.build_grid()?;
    let op = cfg.noise_operator(&grid)?;
    let sigma = cfg.sde.sigma;
    let gn = match gn_constant(sigma, &grid, &GnOptions::default()) {
        Ok(e) => e,
        Err(e) => {
            log::warn!("{e}; reporting the best value found");
            e.best
        }
    };
    let c_eff = htilde_constant(gn.constant, sigma, grid.dim());
    let consts = analysis_constants(sigma, grid.dim(), c_eff)?;
    let report = ConstantsReport {
        sigma,
        dim: grid.dim(),
        gn_constant: gn.constant,
        gn_iterations: gn.iterations,
        htilde_constant: c_eff,
        beta: consts.beta,
        c_sigma: consts.c_sigma,
        m_sigma_d: consts.m_sigma_d,
        mass_exponent: consts.mass_exponent,
        sobolev_h1_to_linf: sobolev_embedding_constant(&grid, 1.0),
        noise_hs_l2: op.hs_norm_l2(),
        noise_hs_h1: op.hs_norm_h1(),
        noise_gradient_hs: op.gradient_hs_norm(),
        noise_operator_norm_l2: op.operator_norm_l2(),
        noise_operator_norm_l2_h1: op.operator_norm_l2_h1(),
        b_rho: match cfg.domain {
            DomainKind::HtildeSublevel { level } => Some(b_rho(level, &consts)),
            _ => None,
        },
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    let mut out = Outputs::new(Path::new(&cfg.output.dir))?;
    out.json("constants.json", &report)?;
    out.finish("constants", cfg)?;
    Ok(0)
}

pub struct VerifyArgs {
    pub quick: bool,
    pub only: Option<Vec<u32>>,
    pub seed: u64,
    pub json: bool,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    effort: Effort,
    seed: u64,
    passed: bool,
    failed: Vec<u32>,
    checks: &'a [CheckResult],
}

pub fn verify(cfg: &RunConfig, args: &VerifyArgs) -> CliResult<u8> {
    let effort = if args.quick { Effort::Quick } else { Effort::Full };
    let ids: Vec<u32> = match &args.only {
        Some(list) => {
            if let Some(bad) = list.iter().find(|&&id| id == 0 || id as usize > CHECK_NAMES.len()) {
                return Err(ConfigError::Invalid {
                    key: "only",
                    reason: format!("no check {bad}; valid ids are 1..={}", CHECK_NAMES.len()),
                }
                .into());
            }
            list.clone()
        }
        None => (1..=CHECK_NAMES.len() as u32).collect(),
    };
    let mut results = Vec::with_capacity(ids.len());
    for id in ids {
        let r = run_check(id, effort, args.seed);
        if !args.json {
            println!("{r}");
        }
        results.push(r);
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    let report = VerifyReport { effort, seed: args.seed, passed: failed.is_empty(), failed, checks: &results };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else if report.passed {
        println!("all {} checks passed", results.len());
    } else {
        println!("failed checks: {:?}", report.failed);
    }
    if let Some(dir) = &args.out {
        let mut out = Outputs::new(dir)?;
        out.json("verify.json", &report)?;
        out.finish("verify", cfg)?;
    }
    Ok(if report.passed { 0 } else { 1 })
}
