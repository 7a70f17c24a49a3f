//! Minimum action paths for the controlled skeleton.
//!
//! The control `h` is piecewise constant on the integrator's time grid, and
//! the objective is discretized before it is optimized: gradients are exact
//! derivatives of the discrete objective, obtained by a reverse sweep through
//! the Strang step. Controls live in `L²(0,T;L²)` with
//! `⟨h,k⟩ = Σ_n dt Re∫ h̄_n k_n`, and all gradients below are taken for
//! that inner product.

use std::sync::Arc;

use num_complex::Complex;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{
    apply_forcing, control_forcing, solve_skeleton, ControlPath, Forcing, Integrator, NoiseKind,
    RecordOptions, SdeParams, Trajectory,
};
use crate::error::{invalid, Error, Result};
use crate::exit::{Domain, DomainKind, Sectorization};
use crate::functionals::AnalysisConstants;
use crate::grid::{l2_norm_sq, Field, Grid};
use crate::noise::NoiseOperator;
use crate::rng::trajectory_stream;
use crate::scalar::Real;

/// `½ ∫₀ᵀ ‖h(t)‖² dt`, exact for a piecewise-constant control.
pub fn action<R: Real>(h: &ControlPath<R>) -> R {
    h.controls
        .iter()
        .fold(R::zero(), |acc, c| acc + l2_norm_sq(c))
        * h.dt
        / R::lit(2.0)
}

/// Time-discrete control inner product `Σ_n dt Re∫ h̄_n k_n`.
pub fn control_inner<R: Real>(a: &ControlPath<R>, b: &ControlPath<R>) -> R {
    a.controls
        .iter()
        .zip(&b.controls)
        .fold(R::zero(), |acc, (x, y)| acc + x.inner(y))
        * a.dt
}

fn combine<R: Real>(a: &ControlPath<R>, c: R, b: &ControlPath<R>) -> ControlPath<R> {
    let cc = Complex::new(c, R::zero());
    ControlPath {
        dt: a.dt,
        controls: a.controls.iter().zip(&b.controls).map(|(x, y)| x.axpy(cc, y)).collect(),
    }
}

/// Exit requirement restricted to one boundary sector: at the exit state
/// the target mode must carry at least as much power as every other mode
/// of the sectorization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectorConstraint {
    pub sectors: Sectorization,
    pub target: usize,
}

/// `0` when the skeleton leaves `D` at some step; otherwise the smallest
/// boundary deficit `min_t (−g(u(t)))`.
pub fn terminal_gap<R: Real>(
    u0: &Field<R>,
    h: &ControlPath<R>,
    params: &SdeParams<R>,
    op: &NoiseOperator<R>,
    kind: NoiseKind,
    domain: &Domain<R>,
) -> Result<R> {
    let traj = skeleton_states(u0, h, params, op, kind)?;
    Ok(gap_of(&traj, domain))
}

fn skeleton_states<R: Real>(
    u0: &Field<R>,
    h: &ControlPath<R>,
    params: &SdeParams<R>,
    op: &NoiseOperator<R>,
    kind: NoiseKind,
) -> Result<Trajectory<R>> {
    let opts = RecordOptions {
        snapshot_stride: 1,
        scalar_stride: 0,
        constants: None,
    };
    solve_skeleton(u0, h, params, op, kind, &opts)
}

fn gap_of<R: Real>(traj: &Trajectory<R>, domain: &Domain<R>) -> R {
    let mut gap = R::infinity();
    for u in &traj.snapshots {
        let g = domain.boundary_value(u);
        if g >= R::zero() {
            return R::zero();
        }
        gap = gap.min(-g);
    }
    gap
}

fn first_exit_state<'a, R: Real>(traj: &'a Trajectory<R>, domain: &Domain<R>) -> Option<&'a Field<R>> {
    traj.snapshots.iter().find(|u| domain.boundary_value(u) >= R::zero())
}

fn sector_powers<R: Real>(u: &Field<R>, sectors: &Sectorization) -> Vec<(usize, Complex<R>)> {
    let grid = u.grid();
    let spec = u.spectrum();
    sectors
        .modes
        .iter()
        .map(|m| {
            let mut label = *m;
            if grid.dim() == 1 {
                label[1] = 0;
            }
            let idx = grid.spec().mode_index(label);
            (idx, Field::modal_coefficient(&spec, grid, idx))
        })
        .collect()
}

fn in_sector<R: Real>(u: &Field<R>, c: &SectorConstraint) -> bool {
    let p = sector_powers(u, &c.sectors);
    let target = p[c.target].1.norm_sqr();
    p.iter().enumerate().all(|(j, (_, z))| j == c.target || z.norm_sqr() <= target)
}

#[derive(Debug, Clone)]
pub enum Init<R: Real> {
    Zero,
    /// `h(t) = (t/T) g` with `g = iΦG` (`ΦG` for real controls), `G` a
    /// centred Gaussian, rescaled so that the skeleton just reaches `∂D`.
    LinearAnsatz,
    WarmStart(ControlPath<R>),
}

#[derive(Debug, Clone)]
pub struct ActionOptions<R: Real> {
    pub kind: NoiseKind,
    pub init: Init<R>,
    pub max_iterations_per_stage: usize,
    pub stages: usize,
    pub mu_factor: f64,
    /// Penalty stages stop once the terminal deficit is below
    /// `gap_tolerance · |g(u0)|`.
    pub gap_tolerance: f64,
    /// Stage stops when `‖∇J‖ ≤ gradient_tolerance · max(1, ‖h‖)`.
    pub gradient_tolerance: f64,
    pub sector: Option<SectorConstraint>,
}

impl<R: Real> Default for ActionOptions<R> {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Additive,
            init: Init::LinearAnsatz,
            max_iterations_per_stage: 300,
            stages: 6,
            mu_factor: 10.0,
            gap_tolerance: 1e-4,
            gradient_tolerance: 1e-7,
            sector: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageDiagnostics {
    pub mu: f64,
    pub objective: f64,
    pub action: f64,
    /// Deficit of the penalized optimum (before feasibility rescaling).
    pub gap: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone)]
pub struct ActionResult<R: Real> {
    pub control: ControlPath<R>,
    pub action_value: R,
    pub trajectory: Trajectory<R>,
    pub terminal_gap: R,
    pub converged: bool,
    pub iterations: usize,
    pub stages: Vec<StageDiagnostics>,
}

/// The discrete optimal control problem for one `(u0, T, domain)`.
pub struct ActionProblem<'a, R: Real> {
    u0: &'a Field<R>,
    op: &'a NoiseOperator<R>,
    domain: &'a Domain<R>,
    kind: NoiseKind,
    params: SdeParams<R>,
    integ: Integrator<R>,
    steps: usize,
    sector: Option<SectorConstraint>,
}

impl<'a, R: Real> ActionProblem<'a, R> {
    pub fn new(
        u0: &'a Field<R>,
        params: &SdeParams<R>,
        op: &'a NoiseOperator<R>,
        domain: &'a Domain<R>,
        kind: NoiseKind,
        t_end: R,
    ) -> Result<Self> {
        if kind == NoiseKind::None {
            return Err(invalid("kind", "the skeleton needs additive or multiplicative forcing"));
        }
        if kind == NoiseKind::Multiplicative && !op.real_valued_output() {
            return Err(Error::Precondition(
                "multiplicative skeleton requires a real-valued noise operator".into(),
            ));
        }
        if !u0.same_grid(&Field::zeros(op.grid())) {
            return Err(Error::GridMismatch("initial datum and noise operator grids differ".into()));
        }
        let steps = params.steps_for(t_end)?;
        let integ = Integrator::new(u0.grid(), *params)?;
        Ok(Self {
            u0,
            op,
            domain,
            kind,
            params: *params,
            integ,
            steps,
            sector: None,
        })
    }

    pub fn with_sector(mut self, sector: Option<SectorConstraint>) -> Self {
        self.sector = sector;
        self
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> R {
        self.params.dt
    }

    fn grid(&self) -> &Arc<Grid<R>> {
        self.u0.grid()
    }

    fn real_controls(&self) -> bool {
        self.kind == NoiseKind::Multiplicative
    }

    pub fn zero_control(&self) -> ControlPath<R> {
        ControlPath::zeros(self.grid(), self.params.dt, self.steps)
    }

    fn forcing_fields(&self, h: &Field<R>) -> Vec<Complex<R>> {
        control_forcing(self.op, h, self.params.dt, self.real_controls())
    }

    fn forcing<'b>(&self, f: &'b [Complex<R>]) -> Forcing<'b, R> {
        match self.kind {
            NoiseKind::Additive => Forcing::Additive(f),
            _ => Forcing::Phase(f),
        }
    }

    /// States `u_0, …, u_N`.
    fn forward(&self, h: &ControlPath<R>) -> Vec<Vec<Complex<R>>> {
        let mut states = Vec::with_capacity(self.steps + 1);
        let mut u = self.u0.values().to_vec();
        states.push(u.clone());
        for hn in &h.controls {
            let f = self.forcing_fields(hn);
            self.integ.step(&mut u, self.forcing(&f));
            states.push(u.clone());
        }
        states
    }

    fn check_shape(&self, h: &ControlPath<R>) -> Result<()> {
        if h.controls.len() != self.steps || (h.dt - self.params.dt).abs() > self.params.dt * R::lit(1e-12) {
            return Err(invalid("control", "does not match the problem's time grid"));
        }
        Ok(())
    }

    /// Terminal penalty `μ[max(0,−g(u_N))² + Σ_{j≠m} max(0,|c_j|²−|c_m|²)²]`
    /// and its gradient with respect to `u_N`.
    fn penalty(&self, u: &Field<R>, mu: R) -> (R, Field<R>) {
        let g = self.domain.boundary_value(u);
        let deficit = (-g).max(R::zero());
        let mut value = deficit * deficit;
        let mut grad = if deficit > R::zero() {
            self.domain.boundary_gradient(u).scaled(-R::lit(2.0) * deficit)
        } else {
            Field::zeros(u.grid())
        };
        if let Some(sc) = &self.sector {
            let coeffs = sector_powers(u, &sc.sectors);
            let (mi, cm) = coeffs[sc.target];
            let pm = cm.norm_sqr();
            for (j, &(idx, cj)) in coeffs.iter().enumerate() {
                if j == sc.target {
                    continue;
                }
                let excess = cj.norm_sqr() - pm;
                if excess > R::zero() {
                    value = value + excess * excess;
                    // ∇|c_j|² = 2 c_j e_j
                    let two_e = R::lit(2.0) * excess;
                    let gj = mode_field(u.grid(), idx, cj * R::lit(2.0));
                    let gm = mode_field(u.grid(), mi, cm * R::lit(2.0));
                    grad = grad.axpy(Complex::new(two_e, R::zero()), &gj.sub(&gm));
                }
            }
        }
        (value * mu, grad.scaled(mu))
    }

    /// `J(h) = action(h) + penalty(u_N)`.
    pub fn objective(&self, h: &ControlPath<R>, mu: R) -> Result<R> {
        self.check_shape(h)?;
        let states = self.forward(h);
        let last = Field::from_raw(self.grid(), states.last().expect("nonempty").clone());
        Ok(action(h) + self.penalty(&last, mu).0)
    }

    /// `(J(h), ∇J(h))` by the discrete adjoint.
    pub fn objective_and_gradient(&self, h: &ControlPath<R>, mu: R) -> Result<(R, ControlPath<R>)> {
        self.check_shape(h)?;
        let grid = Arc::clone(self.grid());
        let states = self.forward(h);
        let last = Field::from_raw(&grid, states.last().expect("nonempty").clone());
        let (pen, pgrad) = self.penalty(&last, mu);
        if !pen.is_finite() {
            return Err(Error::NonFinite { step: self.steps, time: (self.params.dt * R::lit(self.steps as f64)).as_f64() });
        }
        let value = action(h) + pen;

        let rho = self.integ.half_damping();
        let p_ = &self.params;
        let nonlinear = p_.lambda != R::zero();
        let kappa0 = -R::lit(2.0) * p_.sigma * p_.lambda * p_.dt;
        let i = Complex::new(R::zero(), R::one());
        let mut p = pgrad.into_values();
        let mut grads = vec![Field::zeros(&grid); self.steps];
        let mut b = vec![Complex::new(R::zero(), R::zero()); grid.len()];
        for n in (0..self.steps).rev() {
            // recompute b (pre-phase) and d (post-forcing) for step n
            b.copy_from_slice(&states[n]);
            self.integ.half_free(&mut b);
            for z in b.iter_mut() {
                *z = *z * rho;
            }
            let mut d = b.clone();
            self.integ.nonlinear_phase(&mut d);
            let f = self.forcing_fields(&h.controls[n]);
            apply_forcing(&mut d, self.forcing(&f));

            // u_{n+1} = U(dt/2) ρ d
            self.integ.half_free_inverse(&mut p);
            for z in p.iter_mut() {
                *z = *z * rho;
            }
            // p now holds ∂J/∂d; control part and pull back through forcing
            let mut src: Vec<Complex<R>> = match self.kind {
                NoiseKind::Additive => p.iter().map(|&z| i * z).collect(),
                _ => p
                    .iter()
                    .zip(&d)
                    .map(|(&pz, &dz)| Complex::new((pz.conj() * dz).im, R::zero()))
                    .collect(),
            };
            grid.fft_forward(&mut src);
            self.op.apply_spectral(&mut src);
            grid.fft_inverse(&mut src);
            if self.real_controls() {
                for z in src.iter_mut() {
                    z.im = R::zero();
                }
            }
            let hn = h.controls[n].values();
            grads[n] = Field::from_raw(&grid, hn.iter().zip(&src).map(|(&a, &s)| a + s).collect());
            if self.kind == NoiseKind::Multiplicative {
                for (z, &g) in p.iter_mut().zip(&f) {
                    *z = *z * Complex::from_polar(R::one(), g.re);
                }
            }
            // p = ∂J/∂c; pull back through c = b e^{iθ(b)}
            if nonlinear {
                for (pz, &bz) in p.iter_mut().zip(&b) {
                    let m = bz.norm_sqr();
                    let theta = -p_.lambda * p_.dt * m.powf(p_.sigma);
                    let c = bz * Complex::from_polar(R::one(), theta);
                    let s = (pz.conj() * i * c).re;
                    let kappa = if m > R::zero() { kappa0 * m.powf(p_.sigma - R::one()) } else { R::zero() };
                    *pz = *pz * Complex::from_polar(R::one(), -theta) + bz * (s * kappa);
                }
            }
            for z in p.iter_mut() {
                *z = *z * rho;
            }
            self.integ.half_free_inverse(&mut p);
        }
        Ok((value, ControlPath { dt: h.dt, controls: grads }))
    }

    /// Smallest `s > 0` (searched by doubling and bisection) such that the
    /// skeleton driven by `s·h` is feasible; `None` if no scale up to `2^60`
    /// works.
    fn feasible_scale(&self, h: &ControlPath<R>) -> Result<Option<R>> {
        let feasible = |s: R| -> Result<bool> {
            let traj = skeleton_states(self.u0, &h.scaled(s), &self.params, self.op, self.kind)?;
            Ok(match first_exit_state(&traj, self.domain) {
                None => false,
                Some(u) => self.sector.as_ref().is_none_or(|c| in_sector(u, c)),
            })
        };
        let (mut lo, mut hi) = (R::zero(), R::one());
        let mut found = feasible(hi)?;
        let mut k = 0;
        while !found {
            lo = hi;
            hi = hi * R::lit(2.0);
            k += 1;
            if k > 60 {
                return Ok(None);
            }
            found = feasible(hi)?;
        }
        for _ in 0..60 {
            let mid = (lo + hi) / R::lit(2.0);
            if feasible(mid)? {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= hi * R::lit(1e-13) {
                break;
            }
        }
        Ok(Some(hi))
    }

    fn ansatz(&self) -> ControlPath<R> {
        let grid = self.grid();
        let l = grid.spec().box_length();
        let bump = Field::gaussian(grid, R::one(), l / R::lit(10.0));
        let mut g = self.op.apply(&bump);
        if !self.real_controls() {
            g = g.map(|z| z * Complex::new(R::zero(), R::one()));
        }
        let t_end = self.params.dt * R::lit(self.steps as f64);
        ControlPath {
            dt: self.params.dt,
            controls: (0..self.steps)
                .map(|n| g.scaled(self.params.dt * (R::lit(n as f64) + R::lit(0.5)) / t_end))
                .collect(),
        }
    }

    /// Runs one penalty stage of gradient descent with Barzilai–Borwein
    /// steps and Armijo backtracking.
    fn descend(&self, h: ControlPath<R>, mu: R, max_iter: usize, grad_tol: R) -> Result<(ControlPath<R>, R, usize, R)> {
        let (mut j, mut g) = self.objective_and_gradient(&h, mu)?;
        let mut h = h;
        let mut step = R::one();
        let mut it = 0;
        let mut gnorm = control_inner(&g, &g).sqrt();
        while it < max_iter {
            let hnorm = control_inner(&h, &h).sqrt();
            if gnorm <= grad_tol * hnorm.max(R::one()) {
                break;
            }
            let g2 = gnorm * gnorm;
            let mut accepted = None;
            for _ in 0..50 {
                let trial = combine(&h, -step, &g);
                let jt = self.objective(&trial, mu)?;
                if jt <= j - R::lit(1e-4) * step * g2 {
                    accepted = Some((trial, jt));
                    break;
                }
                step = step / R::lit(2.0);
            }
            let Some((trial, jt)) = accepted else { break };
            let (jt2, gt) = self.objective_and_gradient(&trial, mu)?;
            debug_assert!((jt2 - jt).abs() <= R::lit(1e-9) * jt.abs().max(R::one()));
            let s = combine(&trial, -R::one(), &h);
            let y = combine(&gt, -R::one(), &g);
            let sy = control_inner(&s, &y);
            step = if sy > R::zero() { control_inner(&s, &s) / sy } else { step * R::lit(2.0) };
            let rel = (j - jt) / j.abs().max(R::lit(1e-300));
            h = trial;
            j = jt;
            g = gt;
            gnorm = control_inner(&g, &g).sqrt();
            it += 1;
            if rel < R::lit(1e-15) {
                break;
            }
        }
        Ok((h, j, it, gnorm))
    }
}

/// Minimizes `action(h)` over controls whose skeleton from `u0` leaves the
/// domain within `T`, by a quadratic penalty on the terminal deficit with
/// `μ` increased between stages. After every stage the iterate is rescaled
/// to the smallest feasible multiple and the cheapest feasible control is
/// returned.
pub fn minimize_action<R: Real>(
    u0: &Field<R>,
    params: &SdeParams<R>,
    op: &NoiseOperator<R>,
    domain: &Domain<R>,
    t_end: R,
    opts: &ActionOptions<R>,
) -> Result<ActionResult<R>> {
    let problem = ActionProblem::new(u0, params, op, domain, opts.kind, t_end)?.with_sector(opts.sector.clone());
    let g0 = domain.boundary_value(u0);
    let zero = problem.zero_control();
    let finish = |control: ControlPath<R>, converged: bool, iterations: usize, stages: Vec<StageDiagnostics>| -> Result<ActionResult<R>> {
        let trajectory = solve_skeleton(u0, &control, params, op, opts.kind, &RecordOptions {
            snapshot_stride: 1,
            scalar_stride: 1,
            constants: domain.constants().copied(),
        })?;
        let gap = gap_of(&trajectory, domain);
        Ok(ActionResult {
            action_value: action(&control),
            control,
            trajectory,
            terminal_gap: gap,
            converged,
            iterations,
            stages,
        })
    };
    if g0 >= R::zero() {
        return finish(zero, true, 0, Vec::new());
    }
    let mut h = match &opts.init {
        Init::Zero => zero,
        Init::WarmStart(w) => {
            problem.check_shape(w)?;
            w.clone()
        }
        Init::LinearAnsatz => {
            let a = problem.ansatz();
            match problem.feasible_scale(&a)? {
                Some(s) => a.scaled(s),
                None => a,
            }
        }
    };
    let scale = -g0;
    let mut best: Option<(R, ControlPath<R>)> = None;
    let consider = |cand: &ControlPath<R>, best: &mut Option<(R, ControlPath<R>)>| -> Result<()> {
        if let Some(s) = problem.feasible_scale(cand)? {
            let c = cand.scaled(s);
            let a = action(&c);
            if best.as_ref().is_none_or(|(b, _)| a < *b) {
                *best = Some((a, c));
            }
        }
        Ok(())
    };
    consider(&h, &mut best)?;
    let reference = best.as_ref().map_or(R::one(), |(a, _)| a.max(R::lit(1e-12)));
    let mut mu = R::lit(10.0) * reference / (scale * scale);
    let mut stages = Vec::new();
    let mut iterations = 0;
    let mut reached = false;
    let grad_tol = R::lit(opts.gradient_tolerance);
    for _ in 0..opts.stages.max(1) {
        let (hn, j, it, gnorm) = problem.descend(h, mu, opts.max_iterations_per_stage, grad_tol)?;
        iterations += it;
        h = hn;
        let traj = skeleton_states(u0, &h, params, op, opts.kind)?;
        let last = traj.final_state();
        let deficit = (-domain.boundary_value(last)).max(R::zero());
        let gap = gap_of(&traj, domain).min(deficit);
        stages.push(StageDiagnostics {
            mu: mu.as_f64(),
            objective: j.as_f64(),
            action: action(&h).as_f64(),
            gap: gap.as_f64(),
            iterations: it,
            gradient_norm: gnorm.as_f64(),
        });
        consider(&h, &mut best)?;
        if gap <= R::lit(opts.gap_tolerance) * scale {
            reached = true;
            break;
        }
        mu = mu * R::lit(opts.mu_factor);
    }
    match best {
        Some((_, control)) => finish(control, reached, iterations, stages),
        None => {
            let mut res = finish(h, false, iterations, stages)?;
            res.converged = false;
            Ok(res)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    pub max_relative_error: f64,
    pub relative_errors: Vec<f64>,
    pub fd_step: f64,
}

/// Compares the adjoint gradient with central differences
/// `(J(h+ηv) − J(h−ηv))/(2η)` along `n_directions` random directions `v`
/// normalized to unit control norm.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check<R: Real>(
    problem: &ActionProblem<'_, R>,
    h: &ControlPath<R>,
    mu: R,
    n_directions: usize,
    fd_step: R,
    seed: u64,
) -> Result<GradientReport> {
    let (_, grad) = problem.objective_and_gradient(h, mu)?;
    let mut rng = trajectory_stream(seed, 0);
    let mut errors = Vec::with_capacity(n_directions);
    for _ in 0..n_directions {
        let v = random_direction(problem, &mut rng);
        let analytic = control_inner(&grad, &v);
        let jp = problem.objective(&combine(h, fd_step, &v), mu)?;
        let jm = problem.objective(&combine(h, -fd_step, &v), mu)?;
        let fd = (jp - jm) / (R::lit(2.0) * fd_step);
        let denom = analytic.abs().max(fd.abs()).max(R::lit(1e-300));
        errors.push(((analytic - fd).abs() / denom).as_f64());
    }
    Ok(GradientReport {
        max_relative_error: errors.iter().copied().fold(0.0, f64::max),
        relative_errors: errors,
        fd_step: fd_step.as_f64(),
    })
}

fn random_direction<R: Real, G: Rng + ?Sized>(problem: &ActionProblem<'_, R>, rng: &mut G) -> ControlPath<R> {
    let grid = problem.grid();
    let real = problem.real_controls();
    let controls: Vec<Field<R>> = (0..problem.steps)
        .map(|_| {
            let vals = (0..grid.len())
                .map(|_| {
                    let re = R::standard_normal(rng);
                    let im = if real { R::zero() } else { R::standard_normal(rng) };
                    Complex::new(re, im)
                })
                .collect();
            Field::from_raw(grid, vals)
        })
        .collect();
    let v = ControlPath { dt: problem.dt(), controls };
    let norm = control_inner(&v, &v).sqrt();
    v.scaled(R::one() / norm)
}

/// `αd²/(8R²‖Φ‖²_c)` with `d` the distance from 0 to `∂D` and `D ⊂ B_R`.
pub fn lemma_l0_bound(alpha: f64, d: f64, big_r: f64, op_norm: f64) -> f64 {
    alpha * d * d / (8.0 * big_r * big_r * op_norm * op_norm)
}

/// `αc(σ)d²/(2K²)` with
/// `K = R‖Φ‖_{L²→H¹}(1 + C R^{2σ}) + 2Cβ m(σ,d) R ‖Φ‖_{L²→L²}`, the lower
/// bound produced by the `H̃` energy balance of the additive skeleton.
pub fn lemma_l02_bound<R: Real>(
    alpha: f64,
    consts: &AnalysisConstants<R>,
    d: f64,
    big_r: f64,
    op_norm_h1: f64,
    op_norm_l2: f64,
) -> f64 {
    let c = consts.gn_constant_c.as_f64();
    let sigma = consts.sigma.as_f64();
    let k = big_r * op_norm_h1 * (1.0 + c * big_r.powf(2.0 * sigma))
        + 2.0 * c * consts.beta.as_f64() * consts.m_sigma_d.as_f64() * big_r * op_norm_l2;
    alpha * consts.c_sigma.as_f64() * d * d / (2.0 * k * k)
}

#[derive(Debug, Clone)]
pub struct QuasipotentialOptions<R: Real> {
    pub t_list: Vec<f64>,
    pub sectors: Option<Sectorization>,
    pub action: ActionOptions<R>,
    /// `(d, R)` for the `H̃` lower bound, when the caller knows them.
    pub l02_geometry: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuasipotentialCell {
    pub start: usize,
    pub start_norm: f64,
    pub t: f64,
    pub sector: Option<usize>,
    pub action: f64,
    pub terminal_gap: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuasipotentialReport {
    pub cells: Vec<QuasipotentialCell>,
    /// `min` over the `T` list (and sector cells) of the actions from `u0 = 0`.
    pub e_bar: f64,
    /// `(ρ, e_ρ)`: running minimum over starts of norm at most `ρ`.
    pub e_rho: Vec<(f64, f64)>,
    /// `(mode, e_N)` per boundary sector.
    pub e_sector: Vec<([i64; 2], f64)>,
    pub lemma_l0: Option<f64>,
    pub lemma_l02: Option<f64>,
    pub all_above_bounds: bool,
}

/// Table of minimum actions from `u0 = 0` over `T_list` (`ē` proxy), from
/// each start in `starts` (`e_ρ` proxy), and restricted to each sector
/// (`e_N` proxy), with the analytic lower bounds. Cells run in parallel.
pub fn quasipotential_report<R: Real>(
    starts: &[Field<R>],
    params: &SdeParams<R>,
    op: &NoiseOperator<R>,
    domain: &Domain<R>,
    opts: &QuasipotentialOptions<R>,
) -> Result<QuasipotentialReport> {
    quasipotential_runs(starts, params, op, domain, opts).map(|(report, _)| report)
}

/// [`quasipotential_report`] together with the optimizer result behind each
/// cell, in cell order.
pub fn quasipotential_runs<R: Real>(
    starts: &[Field<R>],
    params: &SdeParams<R>,
    op: &NoiseOperator<R>,
    domain: &Domain<R>,
    opts: &QuasipotentialOptions<R>,
) -> Result<(QuasipotentialReport, Vec<ActionResult<R>>)> {
    if opts.t_list.is_empty() || opts.t_list.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("T_list", "must be nonempty and increasing"));
    }
    let grid = op.grid();
    let zero = Field::zeros(grid);
    let norm_of = |u: &Field<R>| l2_norm_sq(u).sqrt().as_f64();
    let mut all_starts = vec![zero];
    all_starts.extend(starts.iter().cloned());

    struct Task {
        start: usize,
        t: f64,
        sector: Option<usize>,
    }
    let mut tasks = Vec::new();
    for (s, _) in all_starts.iter().enumerate() {
        for &t in &opts.t_list {
            tasks.push(Task { start: s, t, sector: None });
        }
    }
    if let Some(sec) = &opts.sectors {
        for m in 0..sec.modes.len() {
            for &t in &opts.t_list {
                tasks.push(Task { start: 0, t, sector: Some(m) });
            }
        }
    }
    let runs: Vec<Result<(QuasipotentialCell, ActionResult<R>)>> = tasks
        .par_iter()
        .map(|task| {
            let mut o = opts.action.clone();
            o.sector = task.sector.map(|m| SectorConstraint {
                sectors: opts.sectors.clone().expect("sector tasks only with sectors"),
                target: m,
            });
            let u0 = &all_starts[task.start];
            let r = minimize_action(u0, params, op, domain, R::lit(task.t), &o)?;
            let cell = QuasipotentialCell {
                start: task.start,
                start_norm: norm_of(u0),
                t: task.t,
                sector: task.sector,
                action: r.action_value.as_f64(),
                terminal_gap: r.terminal_gap.as_f64(),
                converged: r.converged || r.terminal_gap == R::zero(),
            };
            Ok((cell, r))
        })
        .collect();
    let (cells, results): (Vec<_>, Vec<_>) = runs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();

    let feasible = |c: &&QuasipotentialCell| c.terminal_gap == 0.0;
    let min_of = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::INFINITY, f64::min);
    let e_bar = min_of(&mut cells.iter().filter(feasible).filter(|c| c.start == 0).map(|c| c.action));
    let mut per_start: Vec<(f64, f64)> = (0..all_starts.len())
        .map(|s| {
            let v = min_of(
                &mut cells
                    .iter()
                    .filter(feasible)
                    .filter(|c| c.start == s && c.sector.is_none())
                    .map(|c| c.action),
            );
            (norm_of(&all_starts[s]), v)
        })
        .collect();
    per_start.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut running = f64::INFINITY;
    let e_rho = per_start
        .into_iter()
        .map(|(rho, v)| {
            running = running.min(v);
            (rho, running)
        })
        .collect();
    let e_sector = match &opts.sectors {
        Some(sec) => sec
            .modes
            .iter()
            .enumerate()
            .map(|(m, mode)| {
                let v = min_of(&mut cells.iter().filter(feasible).filter(|c| c.sector == Some(m)).map(|c| c.action));
                (*mode, v)
            })
            .collect(),
        None => Vec::new(),
    };
    let alpha = params.alpha.as_f64();
    let lemma_l0 = match domain.kind() {
        DomainKind::L2Ball { radius } => Some(lemma_l0_bound(alpha, radius, radius, op.operator_norm_l2().as_f64())),
        _ => None,
    };
    let lemma_l02 = match (domain.constants(), opts.l02_geometry) {
        (Some(c), Some((d, big_r))) => Some(lemma_l02_bound(
            alpha,
            c,
            d,
            big_r,
            op.operator_norm_l2_h1().as_f64(),
            op.operator_norm_l2().as_f64(),
        )),
        _ => None,
    };
    let floor = lemma_l0.unwrap_or(0.0).max(lemma_l02.unwrap_or(0.0));
    let all_above_bounds = cells.iter().filter(feasible).all(|c| c.action >= floor - 1e-10);
    let report = QuasipotentialReport {
        cells,
        e_bar,
        e_rho,
        e_sector,
        lemma_l0,
        lemma_l02,
        all_above_bounds,
    };
    Ok((report, results))
}

fn mode_field<R: Real>(grid: &Arc<Grid<R>>, idx: usize, coeff: Complex<R>) -> Field<R> {
    let k = grid.wavevector(idx);
    let amp = R::one() / grid.volume().sqrt();
    Field::from_fn(grid, |x| coeff * Complex::from_polar(amp, k[0] * x[0] + k[1] * x[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseProfile;

    fn setup() -> (Arc<Grid<f64>>, NoiseOperator<f64>) {
        let g = Grid::<f64>::build(1, 16, 8.0).unwrap();
        let op = NoiseOperator::new(&g, &NoiseProfile::GaussianCutoff { k0: 2.0, amplitude: 1.0 }, false).unwrap();
        (g, op)
    }

    #[test]
    fn action_closed_forms() {
        let (g, _) = setup();
        let c = Field::from_fn(&g, |_| Complex::new(0.5, 0.0));
        let h = ControlPath { dt: 0.1, controls: vec![c; 20] };
        let norm2 = l2_norm_sq(&h.controls[0]);
        assert!((action(&h) - norm2 * 2.0 / 2.0).abs() < 1e-14);
        assert!((action(&h.scaled(2.0)) - 4.0 * action(&h)).abs() < 1e-14);
        assert_eq!(action(&ControlPath::zeros(&g, 0.1, 5)), 0.0);
    }

    #[test]
    fn gradient_of_action_at_zero_is_zero() {
        let (g, op) = setup();
        let d = Domain::l2_ball(1.0).unwrap();
        let u0 = Field::zeros(&g);
        let p = SdeParams::deterministic(0.0, 1.0, 0.0, 0.05);
        let prob = ActionProblem::new(&u0, &p, &op, &d, NoiseKind::Additive, 1.0).unwrap();
        let (_, grad) = prob.objective_and_gradient(&prob.zero_control(), 0.0).unwrap();
        assert_eq!(control_inner(&grad, &grad), 0.0);
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let (g, op) = setup();
        let d = Domain::l2_ball(1.5).unwrap();
        let u0 = Field::gaussian(&g, 0.6, 1.0);
        let real_op = NoiseOperator::new(&g, &NoiseProfile::GaussianCutoff { k0: 2.0, amplitude: 1.0 }, true).unwrap();
        let h1 = Domain::h1_ball(3.0).unwrap();
        for (kind, op, dom) in [
            (NoiseKind::Additive, &op, &d),
            (NoiseKind::Additive, &op, &h1),
            (NoiseKind::Multiplicative, &real_op, &h1),
        ] {
            let p = SdeParams::deterministic(1.0, 1.0, 0.1, 0.05);
            let prob = ActionProblem::new(&u0, &p, op, dom, kind, 1.0).unwrap();
            let mut rng = trajectory_stream(4, 0);
            let h = random_direction(&prob, &mut rng).scaled(0.3);
            let rep = gradient_check(&prob, &h, 0.7, 4, 1e-5, 1).unwrap();
            assert!(rep.max_relative_error < 1e-6, "{kind:?}: {rep:?}");
        }
    }

    #[test]
    fn outside_start_is_free() {
        let (g, op) = setup();
        let d = Domain::l2_ball(0.1).unwrap();
        let u0 = Field::gaussian(&g, 1.0, 1.0);
        let p = SdeParams::deterministic(1.0, 1.0, 0.1, 0.05);
        let r = minimize_action(&u0, &p, &op, &d, 1.0, &ActionOptions::default()).unwrap();
        assert_eq!(r.action_value, 0.0);
        assert!(r.converged);
    }

    #[test]
    fn lemma_bounds_by_hand() {
        assert!((lemma_l0_bound(0.1, 1.0, 1.0, 1.0) - 0.0125).abs() < 1e-15);
        assert!((lemma_l0_bound(0.1, 2.0, 2.0, 0.5) - 0.05).abs() < 1e-15);
    }
}
