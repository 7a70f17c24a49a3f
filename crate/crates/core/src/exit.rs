//! Exit problems from bounded domains containing the origin: first-exit
//! detection, Monte Carlo ensembles, the Laplace identity for exit times,
//! the martingale tail bound, `ε`-scaling fits and exit-point sectors.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Integrator, NoiseKind, SdeParams};
use crate::error::{invalid, Error, Result};
use crate::functionals::{mass, modified_hamiltonian, AnalysisConstants};
use crate::grid::{gradient_l2_sq, laplacian, Field};
use crate::noise::NoiseOperator;
use crate::rng::{derive_seed, trajectory_stream};
use crate::scalar::Real;

/// Number of leading Fourier modes kept in an [`ExitRecord`].
pub const TRACKED_MODES: usize = 8;

const Z95: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainKind {
    /// `{N(u) < radius²}`.
    L2Ball { radius: f64 },
    /// `{‖u‖²_{H¹} < radius²}`.
    H1Ball { radius: f64 },
    /// `{H̃(u) < level}`.
    HtildeSublevel { level: f64 },
}

/// A domain `D = {g < 0}` described by a smooth boundary functional `g`.
#[derive(Debug, Clone)]
pub struct Domain<R: Real> {
    kind: DomainKind,
    lambda: R,
    consts: Option<AnalysisConstants<R>>,
}

impl<R: Real> Domain<R> {
    pub fn l2_ball(radius: R) -> Result<Self> {
        Self::new(DomainKind::L2Ball { radius: radius.as_f64() }, None, R::zero())
    }

    pub fn h1_ball(radius: R) -> Result<Self> {
        Self::new(DomainKind::H1Ball { radius: radius.as_f64() }, None, R::zero())
    }

    pub fn htilde_sublevel(level: R, consts: AnalysisConstants<R>, lambda: R) -> Result<Self> {
        Self::new(DomainKind::HtildeSublevel { level: level.as_f64() }, Some(consts), lambda)
    }

    /// `consts` and `lambda` are only used by the `H̃` sublevel kind, which
    /// requires them.
    pub fn new(kind: DomainKind, consts: Option<AnalysisConstants<R>>, lambda: R) -> Result<Self> {
        match kind {
            DomainKind::L2Ball { radius } | DomainKind::H1Ball { radius } => {
                if !(radius > 0.0) || !radius.is_finite() {
                    return Err(invalid("radius", "must be positive"));
                }
            }
            DomainKind::HtildeSublevel { level } => {
                if !(level > 0.0) || !level.is_finite() {
                    return Err(invalid("level", "must be positive"));
                }
                if consts.is_none() {
                    return Err(invalid("domain", "H~ sublevel requires the constants"));
                }
            }
        }
        Ok(Self { kind, lambda, consts })
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn constants(&self) -> Option<&AnalysisConstants<R>> {
        self.consts.as_ref()
    }

    /// The boundary functional: negative inside, zero on `∂D`.
    pub fn boundary_value(&self, u: &Field<R>) -> R {
        match self.kind {
            DomainKind::L2Ball { radius } => mass(u) - R::lit(radius * radius),
            DomainKind::H1Ball { radius } => {
                mass(u) + gradient_l2_sq(u) - R::lit(radius * radius)
            }
            DomainKind::HtildeSublevel { level } => {
                let c = self.consts.as_ref().expect("checked in new");
                modified_hamiltonian(u, c, self.lambda) - R::lit(level)
            }
        }
    }

    pub fn contains(&self, u: &Field<R>) -> bool {
        self.boundary_value(u) < R::zero()
    }

    /// Gradient of the boundary functional for `⟨a,b⟩ = Re ∫ ā b`.
    pub fn boundary_gradient(&self, u: &Field<R>) -> Field<R> {
        match self.kind {
            DomainKind::L2Ball { .. } => u.scaled(R::lit(2.0)),
            DomainKind::H1Ball { .. } => u.sub(&laplacian(u)).scaled(R::lit(2.0)),
            DomainKind::HtildeSublevel { .. } => {
                let c = self.consts.as_ref().expect("checked in new");
                let sigma = c.sigma;
                let lam = self.lambda;
                let n = mass(u);
                let me = c.mass_exponent;
                let mass_coeff = if n > R::zero() {
                    c.beta * c.gn_constant_c * me * n.powf(me / R::lit(2.0) - R::one())
                } else {
                    R::zero()
                };
                let lap = laplacian(u);
                let vals = u
                    .values()
                    .iter()
                    .zip(lap.values())
                    .map(|(&z, &l)| {
                        let pot = if lam == R::zero() { R::zero() } else { lam * z.norm_sqr().powf(sigma) };
                        -l - z * pot + z * mass_coeff
                    })
                    .collect();
                Field::from_raw(u.grid(), vals)
            }
        }
    }

    /// `r²` for balls, used by the mass identities.
    pub fn mass_level(&self) -> Option<R> {
        match self.kind {
            DomainKind::L2Ball { radius } => Some(R::lit(radius * radius)),
            _ => None,
        }
    }
}

/// Complex coefficient on the orthonormal mode `e^{ikx}/√V`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeCoordinate {
    pub mode: [i64; 2],
    pub re: f64,
    pub im: f64,
}

impl ModeCoordinate {
    pub fn power(&self) -> f64 {
        self.re * self.re + self.im * self.im
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitRecord {
    /// Interpolated first exit time, or `t_max` when censored.
    pub tau: f64,
    pub exited: bool,
    pub mass_at_exit: f64,
    pub htilde_at_exit: Option<f64>,
    /// The [`TRACKED_MODES`] largest modal coefficients of the first state
    /// outside `D` (of the final state when censored), by decreasing power.
    pub boundary_coordinates: Vec<ModeCoordinate>,
    pub seed: u64,
    pub steps: usize,
    /// Boundary functional before and after the bracketing step.
    pub g_pre: f64,
    pub g_post: f64,
}

fn leading_modes<R: Real>(u: &Field<R>) -> Vec<ModeCoordinate> {
    let grid = u.grid();
    let spec = u.spectrum();
    let mut coords: Vec<ModeCoordinate> = (0..spec.len())
        .map(|idx| {
            let c = Field::modal_coefficient(&spec, grid, idx);
            ModeCoordinate {
                mode: grid.spec().mode_label(idx),
                re: c.re.as_f64(),
                im: c.im.as_f64(),
            }
        })
        .collect();
    coords.sort_by(|a, b| b.power().total_cmp(&a.power()).then(a.mode.cmp(&b.mode)));
    coords.truncate(TRACKED_MODES);
    coords
}

/// Steps the SDE from `u0 ∈ D` until the state leaves `D` or `t_max` is
/// reached. The exit time is interpolated linearly in the boundary
/// functional between the bracketing steps.
pub fn first_exit<R: Real, G: Rng + ?Sized>(
    u0: &Field<R>,
    params: &SdeParams<R>,
    op: &NoiseOperator<R>,
    domain: &Domain<R>,
    t_max: R,
    rng: &mut G,
) -> Result<ExitRecord> {
    let mut integ = Integrator::new(u0.grid(), *params)?;
    first_exit_with(&mut integ, u0, op, domain, t_max, rng, 0)
}

fn first_exit_with<R: Real, G: Rng + ?Sized>(
    integ: &mut Integrator<R>,
    u0: &Field<R>,
    op: &NoiseOperator<R>,
    domain: &Domain<R>,
    t_max: R,
    rng: &mut G,
    seed: u64,
) -> Result<ExitRecord> {
    if !(t_max > R::zero()) {
        return Err(invalid("t_max", "must be positive"));
    }
    let params = *integ.params();
    if params.noise_kind == NoiseKind::Multiplicative && !op.real_valued_output() {
        return Err(Error::Precondition(
            "multiplicative noise requires a real-valued noise operator".into(),
        ));
    }
    let mut g_prev = domain.boundary_value(u0);
    if !(g_prev < R::zero()) {
        return Err(Error::Precondition("initial datum must lie inside the domain".into()));
    }
    let dt = params.dt;
    let total = params.steps_for(t_max)?;
    let mut u = u0.clone();
    for step in 1..=total {
        integ.noisy_step(&mut u, op, rng);
        let g = domain.boundary_value(&u);
        let t = dt * R::lit(step as f64);
        if !g.is_finite() {
            return Err(Error::NonFinite { step, time: t.as_f64() });
        }
        if g >= R::zero() {
            let frac = -g_prev / (g - g_prev);
            let tau = t - dt + dt * frac;
            return Ok(record(&u, domain, tau.as_f64(), true, seed, step, g_prev, g));
        }
        g_prev = g;
    }
    let t_end = dt * R::lit(total as f64);
    Ok(record(&u, domain, t_end.as_f64(), false, seed, total, g_prev, g_prev))
}

#[allow(clippy::too_many_arguments)]
fn record<R: Real>(
    u: &Field<R>,
    domain: &Domain<R>,
    tau: f64,
    exited: bool,
    seed: u64,
    steps: usize,
    g_pre: R,
    g_post: R,
) -> ExitRecord {
    ExitRecord {
        tau,
        exited,
        mass_at_exit: mass(u).as_f64(),
        htilde_at_exit: domain
            .consts
            .as_ref()
            .map(|c| modified_hamiltonian(u, c, domain.lambda).as_f64()),
        boundary_coordinates: leading_modes(u),
        seed,
        steps,
        g_pre: g_pre.as_f64(),
        g_post: g_post.as_f64(),
    }
}

/// Sectors of the boundary labelled by Fourier modes: an exit point belongs
/// to the sector of the listed mode carrying the largest power, or to the
/// "other" sector when none of them is among the tracked leading modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sectorization {
    pub modes: Vec<[i64; 2]>,
}

impl Sectorization {
    pub fn new(modes: Vec<[i64; 2]>) -> Result<Self> {
        if modes.is_empty() {
            return Err(invalid("sectors", "need at least one mode"));
        }
        Ok(Self { modes })
    }

    /// Index into `modes`, or `None` for the "other" sector.
    pub fn sector_of(&self, rec: &ExitRecord) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, m) in self.modes.iter().enumerate() {
            let p = rec
                .boundary_coordinates
                .iter()
                .find(|c| c.mode == *m)
                .map_or(0.0, ModeCoordinate::power);
            if p > 0.0 && best.is_none_or(|(_, b)| p > b) {
                best = Some((i, p));
            }
        }
        best.map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectorHistogram {
    pub modes: Vec<[i64; 2]>,
    pub counts: Vec<usize>,
    pub other: usize,
    pub total: usize,
    pub modal_sector: usize,
    /// Fraction of exits in the most populated sector.
    pub concentration: f64,
}

impl SectorHistogram {
    pub fn fraction(&self, sector: usize) -> f64 {
        self.counts[sector] as f64 / self.total as f64
    }

    /// Largest `|c_i − c_j| / √(c_i + c_j)` over sector pairs: the z-score of
    /// the count difference under exchangeability.
    pub fn max_pairwise_z(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.counts.len() {
            for j in i + 1..self.counts.len() {
                let (a, b) = (self.counts[i] as f64, self.counts[j] as f64);
                if a + b > 0.0 {
                    worst = worst.max((a - b).abs() / (a + b).sqrt());
                }
            }
        }
        worst
    }
}

/// Bins the uncensored exits of `records` into sectors.
pub fn exit_point_histogram(records: &[ExitRecord], sectors: &Sectorization) -> Result<SectorHistogram> {
    let exits: Vec<&ExitRecord> = records.iter().filter(|r| r.exited).collect();
    if exits.len() < 30 {
        return Err(Error::Precondition(format!(
            "need at least 30 uncensored exits, got {}",
            exits.len()
        )));
    }
    let mut counts = vec![0usize; sectors.modes.len()];
    let mut other = 0;
    for r in &exits {
        match sectors.sector_of(r) {
            Some(i) => counts[i] += 1,
            None => other += 1,
        }
    }
    let (modal_sector, &top) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("nonempty");
    Ok(SectorHistogram {
        modes: sectors.modes.clone(),
        counts,
        other,
        total: exits.len(),
        modal_sector,
        concentration: top as f64 / exits.len() as f64,
    })
}

#[derive(Debug, Clone)]
pub struct EnsembleOptions {
    pub n_paths: usize,
    pub t_max: f64,
    pub master_seed: u64,
    pub sectors: Option<Sectorization>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitStats {
    pub n_paths: usize,
    pub exits: usize,
    pub censored_count: usize,
    pub censoring_fraction: f64,
    /// Mean, sample standard deviation and 95% half-width of `τ` over
    /// uncensored paths.
    pub mean_tau: f64,
    pub tau_sd: f64,
    pub tau_ci95: f64,
    pub alpha: f64,
    /// Mean of `e^{−2ατ}` over uncensored paths and its standard error.
    pub laplace_estimate: f64,
    pub laplace_se: f64,
    /// Mean of `e^{2ατ}` over uncensored paths and its standard error.
    pub growth_estimate: f64,
    pub growth_se: f64,
    pub exit_point_histogram: Option<SectorHistogram>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub records: Vec<ExitRecord>,
    pub stats: ExitStats,
}

/// Runs `n_paths` independent first-exit problems in parallel. Path `j`
/// uses stream `j` of the master seed, so results do not depend on
/// scheduling or the number of threads.
pub fn mc_exit_ensemble<R: Real>(
    u0: &Field<R>,
    params: &SdeParams<R>,
    op: &NoiseOperator<R>,
    domain: &Domain<R>,
    opts: &EnsembleOptions,
) -> Result<Ensemble> {
    if opts.n_paths == 0 {
        return Err(invalid("n_paths", "must be at least 1"));
    }
    let t_max = R::lit(opts.t_max);
    // validate once up front so that every path fails the same way
    Integrator::new(u0.grid(), *params)?;
    let records: Vec<Result<ExitRecord>> = (0..opts.n_paths as u64)
        .into_par_iter()
        .map_init(
            || Integrator::new(u0.grid(), *params).expect("validated"),
            |integ, id| {
                let mut rng = trajectory_stream(opts.master_seed, id);
                first_exit_with(integ, u0, op, domain, t_max, &mut rng, id)
            },
        )
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let mut stats = summarize(&records, params.alpha.as_f64());
    if params.noise_kind == NoiseKind::Multiplicative && matches!(domain.kind, DomainKind::L2Ball { .. }) {
        let msg = "exit impossible: mass nonincreasing".to_string();
        log::warn!("{msg}");
        stats.warnings.insert(0, msg);
    }
    if let Some(sectors) = &opts.sectors {
        stats.exit_point_histogram = exit_point_histogram(&records, sectors).ok();
    }
    Ok(Ensemble { records, stats })
}

/// Aggregates records in the given order.
pub fn summarize(records: &[ExitRecord], alpha: f64) -> ExitStats {
    let n = records.len();
    let taus: Vec<f64> = records.iter().filter(|r| r.exited).map(|r| r.tau).collect();
    let exits = taus.len();
    let censored = n - exits;
    let (mean_tau, tau_sd) = mean_sd(&taus);
    let lap: Vec<f64> = taus.iter().map(|t| (-2.0 * alpha * t).exp()).collect();
    let grow: Vec<f64> = taus.iter().map(|t| (2.0 * alpha * t).exp()).collect();
    let (laplace_estimate, lap_sd) = mean_sd(&lap);
    let (growth_estimate, grow_sd) = mean_sd(&grow);
    let se = |sd: f64| if exits > 0 { sd / (exits as f64).sqrt() } else { f64::NAN };
    let censoring_fraction = if n > 0 { censored as f64 / n as f64 } else { 0.0 };
    let mut warnings = Vec::new();
    if censoring_fraction > 0.05 {
        let msg = format!(
            "censoring fraction {censoring_fraction:.3} exceeds 5%: mean exit time is biased low"
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    ExitStats {
        n_paths: n,
        exits,
        censored_count: censored,
        censoring_fraction,
        mean_tau,
        tau_sd,
        tau_ci95: Z95 * se(tau_sd),
        alpha,
        laplace_estimate,
        laplace_se: se(lap_sd),
        growth_estimate,
        growth_se: se(grow_sd),
        exit_point_histogram: None,
        warnings,
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn z_score(estimate: f64, predicted: f64, se: f64) -> f64 {
    let d = estimate - predicted;
    if d == 0.0 {
        0.0
    } else {
        d / se
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaplaceReport {
    /// `1 − 2αr²/(ε‖Φ‖²_{HS})`.
    pub predicted: f64,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    /// `1/(1 − 2αr²/(ε‖Φ‖²_{HS}))`, the value of `E[e^{2ατ}]` obtained by
    /// optional stopping of `e^{2αt}N(u(t)) − ε‖Φ‖²_{HS}(e^{2αt}−1)/(2α)`.
    pub growth_predicted: f64,
    pub growth_estimate: f64,
    pub growth_se: f64,
    pub growth_z: f64,
    pub censoring_fraction: f64,
}

/// Compares the ensemble's exit-time Laplace transform with the mass
/// balance prediction for an `L²` ball of mass level `r2` entered from `0`.
pub fn laplace_identity_check(stats: &ExitStats, alpha: f64, r2: f64, epsilon: f64, hs0: f64) -> Result<LaplaceReport> {
    let drive = epsilon * hs0 * hs0;
    if !(drive > 2.0 * alpha * r2) {
        return Err(Error::Precondition(format!(
            "need eps*hs0^2 > 2*alpha*r^2 (got {drive} <= {})",
            2.0 * alpha * r2
        )));
    }
    let q = 2.0 * alpha * r2 / drive;
    let predicted = 1.0 - q;
    let growth_predicted = 1.0 / (1.0 - q);
    Ok(LaplaceReport {
        predicted,
        estimate: stats.laplace_estimate,
        se: stats.laplace_se,
        z: z_score(stats.laplace_estimate, predicted, stats.laplace_se),
        growth_predicted,
        growth_estimate: stats.growth_estimate,
        growth_se: stats.growth_se,
        growth_z: z_score(stats.growth_estimate, growth_predicted, stats.growth_se),
        censoring_fraction: stats.censoring_fraction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReport {
    /// `3 exp(−ρ²/(48 ε ‖Φ‖²_{HS} T))`.
    pub bound: f64,
    pub vacuous: bool,
    pub informative: bool,
    pub n_paths: usize,
    pub exceedances: usize,
    pub probability: f64,
    pub se: f64,
    pub holds: bool,
}

/// `3 exp(−ρ²/(48 ε ‖Φ‖²_{HS} T))`.
pub fn mass_tail_bound(rho: f64, epsilon: f64, hs0: f64, t: f64) -> f64 {
    3.0 * (-rho * rho / (48.0 * epsilon * hs0 * hs0 * t)).exp()
}

/// Estimates `P(sup_{t≤T} N(u(t)) − N(u0) ≥ 3ρ²)` for the additive equation
/// started on the mass sphere of level `ρ²`, and compares it with the
/// exponential martingale bound.
pub fn mass_tail_bound_check<R: Real>(
    u0: &Field<R>,
    params: &SdeParams<R>,
    op: &NoiseOperator<R>,
    rho: f64,
    t_end: f64,
    n_paths: usize,
    master_seed: u64,
) -> Result<TailReport> {
    if n_paths == 0 {
        return Err(invalid("n_paths", "must be at least 1"));
    }
    if !(rho > 0.0) || !(t_end > 0.0) {
        return Err(invalid("rho/T", "must be positive"));
    }
    let n0 = mass(u0).as_f64();
    if (n0 - rho * rho).abs() > 1e-8 * rho * rho {
        return Err(Error::Precondition(format!(
            "initial mass {n0} is not on the sphere of level rho^2 = {}",
            rho * rho
        )));
    }
    let steps = params.steps_for(R::lit(t_end))?;
    let threshold = n0 + 3.0 * rho * rho;
    Integrator::new(u0.grid(), *params)?;
    let hits: Vec<Result<bool>> = (0..n_paths as u64)
        .into_par_iter()
        .map_init(
            || Integrator::new(u0.grid(), *params).expect("validated"),
            |integ, id| {
                let mut rng = trajectory_stream(master_seed, id);
                let mut u = u0.clone();
                for step in 1..=steps {
                    integ.noisy_step(&mut u, op, &mut rng);
                    let m = mass(&u).as_f64();
                    if !m.is_finite() {
                        return Err(Error::NonFinite { step, time: step as f64 * params.dt.as_f64() });
                    }
                    if m >= threshold {
                        return Ok(true);
                    }
                }
                Ok(false)
            },
        )
        .collect();
    let exceedances = hits.into_iter().collect::<Result<Vec<_>>>()?.into_iter().filter(|&h| h).count();
    let p = exceedances as f64 / n_paths as f64;
    let se = (p * (1.0 - p) / n_paths as f64).sqrt();
    let bound = mass_tail_bound(rho, params.epsilon.as_f64(), op.hs_norm_l2().as_f64(), t_end);
    Ok(TailReport {
        bound,
        vacuous: bound >= 1.0,
        informative: bound < 0.1,
        n_paths,
        exceedances,
        probability: p,
        se,
        holds: p <= bound + 3.0 * se,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub epsilon: f64,
    pub stats: ExitStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingFit {
    /// Least-squares slope of `log E[τ]` against `1/ε`.
    pub slope: f64,
    pub intercept: f64,
    pub rows: Vec<ScalingRow>,
    /// Mean exit time strictly increases as `ε` decreases.
    pub monotone: bool,
    /// No later mean lies significantly (beyond both CIs) below an earlier one.
    pub monotone_within_ci: bool,
    pub warnings: Vec<String>,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn least_squares(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("fit", "need at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(invalid("fit", "abscissae are all equal"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Runs one ensemble per `ε` (strictly decreasing) and fits
/// `log E[τ] ≈ slope/ε + intercept`. Ensemble `i` uses the master seed
/// derived from `(master_seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn scaling_fit<R: Real>(
    u0: &Field<R>,
    params_base: &SdeParams<R>,
    op: &NoiseOperator<R>,
    domain: &Domain<R>,
    epsilons: &[f64],
    n_paths: usize,
    t_max: f64,
    master_seed: u64,
) -> Result<ScalingFit> {
    if epsilons.len() < 2 {
        return Err(invalid("epsilons", "need at least two values to fit"));
    }
    if epsilons.windows(2).any(|w| !(w[1] < w[0])) || epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(invalid("epsilons", "must be positive and strictly decreasing"));
    }
    let mut rows = Vec::with_capacity(epsilons.len());
    let mut warnings = Vec::new();
    for (i, &eps) in epsilons.iter().enumerate() {
        let mut p = *params_base;
        p.epsilon = R::lit(eps);
        let opts = EnsembleOptions {
            n_paths,
            t_max,
            master_seed: derive_seed(master_seed, i as u64),
            sectors: None,
        };
        let ens = mc_exit_ensemble(u0, &p, op, domain, &opts)?;
        for w in &ens.stats.warnings {
            warnings.push(format!("epsilon={eps}: {w}"));
        }
        rows.push(ScalingRow { epsilon: eps, stats: ens.stats });
    }
    if rows.iter().any(|r| r.stats.exits == 0) {
        return Err(Error::Precondition("an ensemble produced no exits".into()));
    }
    let x: Vec<f64> = rows.iter().map(|r| 1.0 / r.epsilon).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.stats.mean_tau.ln()).collect();
    let (slope, intercept) = least_squares(&x, &y)?;
    let monotone = rows.windows(2).all(|w| w[1].stats.mean_tau > w[0].stats.mean_tau);
    let monotone_within_ci = rows.windows(2).all(|w| {
        w[1].stats.mean_tau + w[1].stats.tau_ci95 >= w[0].stats.mean_tau - w[0].stats.tau_ci95
    });
    if !monotone_within_ci {
        let msg = "mean exit time is not monotone in epsilon (sampling noise or t_max bias)".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(ScalingFit {
        slope,
        intercept,
        rows,
        monotone,
        monotone_within_ci,
        warnings,
    })
}

/// `u0` scaled so that it sits at the given fraction of an `L²` ball's mass
/// level; convenience for building interior starts.
pub fn scale_to_mass<R: Real>(u: &Field<R>, target_mass: R) -> Field<R> {
    let m = mass(u);
    if m == R::zero() {
        return u.clone();
    }
    u.scaled((target_mass / m).sqrt())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use num_complex::Complex;

    use super::*;
    use crate::grid::Grid;
    use crate::noise::{ModeAmplitude, NoiseProfile};

    fn small() -> (Arc<Grid<f64>>, NoiseOperator<f64>) {
        let g = Grid::<f64>::build(1, 16, 6.0).unwrap();
        let op = NoiseOperator::new(&g, &NoiseProfile::SharpCutoff { k_max: 3.0, amplitude: 1.0 }, false).unwrap();
        (g, op)
    }

    #[test]
    fn domain_values() {
        let g = Grid::<f64>::build(1, 32, 10.0).unwrap();
        let u = Field::gaussian(&g, 1.0, 1.0);
        let d = Domain::l2_ball(2.0).unwrap();
        assert!((d.boundary_value(&u) - (mass(&u) - 4.0)).abs() < 1e-14);
        assert!(d.contains(&Field::zeros(&g)));
        assert!(Domain::<f64>::l2_ball(0.0).is_err());
        assert!(Domain::<f64>::new(DomainKind::HtildeSublevel { level: 1.0 }, None, 1.0).is_err());
    }

    #[test]
    fn boundary_gradients_match_finite_differences() {
        let g = Grid::<f64>::build(1, 32, 10.0).unwrap();
        let u = Field::from_fn(&g, |x| Complex::new((-x[0] * x[0] / 2.0).exp(), 0.3 * (-x[0] * x[0]).exp() * x[0]));
        let v = Field::from_fn(&g, |x| Complex::new(0.2 * (-(x[0] - 1.0).powi(2)).exp(), (-x[0] * x[0] / 3.0).exp()));
        let consts = crate::functionals::analysis_constants(1.0, 1, 0.15).unwrap();
        let domains = [
            Domain::l2_ball(2.0).unwrap(),
            Domain::h1_ball(2.0).unwrap(),
            Domain::htilde_sublevel(1.0, consts, 1.0).unwrap(),
        ];
        for d in &domains {
            let grad = d.boundary_gradient(&u);
            let analytic = grad.inner(&v);
            let h = 1e-5;
            let fd = (d.boundary_value(&u.axpy(Complex::new(h, 0.0), &v))
                - d.boundary_value(&u.axpy(Complex::new(-h, 0.0), &v)))
                / (2.0 * h);
            assert!((analytic - fd).abs() < 1e-7 * fd.abs().max(1.0), "{:?}: {analytic} vs {fd}", d.kind());
        }
    }

    #[test]
    fn rejects_start_outside() {
        let (g, op) = small();
        let u0 = Field::gaussian(&g, 3.0, 1.0);
        let p = SdeParams::deterministic(1.0, 1.0, 0.1, 1e-2).with_noise(NoiseKind::Additive, 0.1);
        let d = Domain::l2_ball(0.5).unwrap();
        let mut rng = trajectory_stream(1, 0);
        assert!(matches!(first_exit(&u0, &p, &op, &d, 1.0, &mut rng), Err(Error::Precondition(_))));
    }

    #[test]
    fn noiseless_paths_are_censored() {
        let (g, op) = small();
        let u0 = Field::gaussian(&g, 0.5, 1.0);
        let p = SdeParams::deterministic(1.0, 1.0, 0.1, 1e-2).with_noise(NoiseKind::Additive, 0.0);
        let d = Domain::l2_ball(1.0).unwrap();
        let mut rng = trajectory_stream(1, 0);
        let r = first_exit(&u0, &p, &op, &d, 2.0, &mut rng).unwrap();
        assert!(!r.exited);
        assert!((r.tau - 2.0).abs() < 1e-12);
    }

    #[test]
    fn exit_is_bracketed_and_overshoot_is_small() {
        let (g, op) = small();
        let p = SdeParams::deterministic(1.0, 1.0, 0.0, 1e-3).with_noise(NoiseKind::Additive, 0.2);
        let d = Domain::l2_ball(1.0).unwrap();
        let ens = mc_exit_ensemble(
            &Field::zeros(&g),
            &p,
            &op,
            &d,
            &EnsembleOptions { n_paths: 20, t_max: 100.0, master_seed: 9, sectors: None },
        )
        .unwrap();
        for r in &ens.records {
            assert!(r.exited);
            assert!(r.g_pre < 0.0 && r.g_post >= 0.0);
            assert!(r.mass_at_exit >= 1.0 && r.mass_at_exit < 1.1);
            assert!(r.tau <= r.steps as f64 * 1e-3 + 1e-12 && r.tau > (r.steps - 1) as f64 * 1e-3 - 1e-12);
        }
    }

    #[test]
    fn single_path_stats_equal_the_record() {
        let (g, op) = small();
        let p = SdeParams::deterministic(1.0, 1.0, 0.05, 1e-3).with_noise(NoiseKind::Additive, 0.2);
        let d = Domain::l2_ball(1.0).unwrap();
        let ens = mc_exit_ensemble(
            &Field::zeros(&g),
            &p,
            &op,
            &d,
            &EnsembleOptions { n_paths: 1, t_max: 100.0, master_seed: 4, sectors: None },
        )
        .unwrap();
        let r = &ens.records[0];
        assert_eq!(ens.stats.mean_tau, r.tau);
        assert_eq!(ens.stats.tau_ci95, 0.0);
        assert_eq!(ens.stats.laplace_estimate, (-0.1 * r.tau).exp());
    }

    #[test]
    fn laplace_check_preconditions() {
        let stats = summarize(&[], 0.0);
        assert!(laplace_identity_check(&stats, 0.1, 1.0, 0.2, 1.0).is_err());
        let s = ExitStats { laplace_estimate: 1.0, laplace_se: 0.0, growth_estimate: 1.0, growth_se: 0.0, ..stats };
        let rep = laplace_identity_check(&s, 0.0, 1.0, 0.1, 1.0).unwrap();
        assert_eq!(rep.predicted, 1.0);
        assert_eq!(rep.z, 0.0);
        let r = laplace_identity_check(&s, 0.01, 1.0, 0.1, 1.0).unwrap();
        assert!((r.predicted - 0.8).abs() < 1e-15);
        assert!((r.growth_predicted - 1.25).abs() < 1e-15);
    }

    #[test]
    fn tail_bound_values() {
        assert!((mass_tail_bound(1.0, 0.05, 1.0, 0.4) - 3.0 * (-1.0f64 / 0.96).exp()).abs() < 1e-15);
        assert!(mass_tail_bound(1.0, 0.05, 1.0, 0.4) > 1.0);
        let b = mass_tail_bound(1.0, 0.005, 1.0, 0.4);
        assert!((b - 9.07e-5).abs() < 1e-6, "{b}");
    }

    #[test]
    fn least_squares_recovers_a_line() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v - 1.0).collect();
        let (s, c) = least_squares(&x, &y).unwrap();
        assert!((s - 0.5).abs() < 1e-14 && (c + 1.0).abs() < 1e-14);
        assert!(least_squares(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn scaling_fit_rejects_single_epsilon() {
        let (g, op) = small();
        let p = SdeParams::deterministic(1.0, 1.0, 0.05, 1e-2).with_noise(NoiseKind::Additive, 0.2);
        let d = Domain::l2_ball(1.0).unwrap();
        assert!(scaling_fit(&Field::zeros(&g), &p, &op, &d, &[0.1], 4, 10.0, 0).is_err());
        assert!(scaling_fit(&Field::zeros(&g), &p, &op, &d, &[0.1, 0.2], 4, 10.0, 0).is_err());
    }

    #[test]
    fn sectors_pick_the_dominant_listed_mode() {
        let rec = ExitRecord {
            tau: 1.0,
            exited: true,
            mass_at_exit: 1.0,
            htilde_at_exit: None,
            boundary_coordinates: vec![
                ModeCoordinate { mode: [3, 0], re: 0.9, im: 0.0 },
                ModeCoordinate { mode: [1, 0], re: 0.1, im: 0.3 },
                ModeCoordinate { mode: [-1, 0], re: 0.2, im: 0.0 },
            ],
            seed: 0,
            steps: 1,
            g_pre: -1.0,
            g_post: 0.0,
        };
        let s = Sectorization::new(vec![[1, 0], [-1, 0]]).unwrap();
        assert_eq!(s.sector_of(&rec), Some(0));
        let s = Sectorization::new(vec![[2, 0]]).unwrap();
        assert_eq!(s.sector_of(&rec), None);
        let mut recs = vec![rec; 30];
        recs[0].exited = false;
        assert!(exit_point_histogram(&recs, &Sectorization::new(vec![[1, 0]]).unwrap()).is_err());
    }

    #[test]
    fn single_mode_noise_exits_through_its_sector() {
        let g = Grid::<f64>::build(1, 16, 6.0).unwrap();
        let op = NoiseOperator::new(
            &g,
            &NoiseProfile::Modes { modes: vec![ModeAmplitude { mode: [1, 0], amplitude: 1.0 }] },
            false,
        )
        .unwrap();
        let p = SdeParams::deterministic(1.0, 1.0, 0.0, 1e-2).with_noise(NoiseKind::Additive, 0.5);
        let d = Domain::l2_ball(1.0).unwrap();
        let ens = mc_exit_ensemble(
            &Field::zeros(&g),
            &p,
            &op,
            &d,
            &EnsembleOptions {
                n_paths: 40,
                t_max: 100.0,
                master_seed: 2,
                sectors: Some(Sectorization::new(vec![[1, 0], [-1, 0], [2, 0]]).unwrap()),
            },
        )
        .unwrap();
        let h = ens.stats.exit_point_histogram.unwrap();
        assert_eq!(h.counts[0], 40);
    }
}
