//! Time integration of
//!
//! ```text
//! i du = (Δu + λ|u|^{2σ}u − iαu) dt + √ε dW          (additive)
//! i du = (Δu + λ|u|^{2σ}u − iαu) dt + √ε u ∘ dW      (multiplicative, Stratonovich)
//! ```
//!
//! and of the controlled skeleton where `√ε dW` is replaced by `Φh dt`.
//!
//! Every integrator shares one Strang step:
//!
//! ```text
//! U(dt/2) → e^{−α dt/2} → u·e^{−iλ|u|^{2σ}dt} → forcing → e^{−α dt/2} → U(dt/2)
//! ```
//!
//! All substeps are exact. The forcing substep is `u ← u − i f` for additive
//! forcing and the unitary `u ← u·e^{−i g}` (with `g` real) for multiplicative
//! forcing; the latter realizes the Stratonovich product and carries the Itô
//! correction `−(ε/2) F_Φ u` on its own.

use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::functionals::{hamiltonian, mass, modified_hamiltonian, AnalysisConstants};
use crate::grid::{Field, Grid};
use crate::noise::NoiseOperator;
use crate::scalar::Real;
use crate::snapshot::{read_snapshot, write_snapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Additive,
    Multiplicative,
    None,
}

/// Parameters of one equation instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeParams<R> {
    /// `+1` focusing, `−1` defocusing, `0` disables the nonlinearity.
    pub lambda: R,
    pub sigma: R,
    pub alpha: R,
    pub epsilon: R,
    pub dt: R,
    pub noise_kind: NoiseKind,
}

impl<R: Real> SdeParams<R> {
    pub fn deterministic(lambda: R, sigma: R, alpha: R, dt: R) -> Self {
        Self {
            lambda,
            sigma,
            alpha,
            epsilon: R::zero(),
            dt,
            noise_kind: NoiseKind::None,
        }
    }

    pub fn with_noise(mut self, kind: NoiseKind, epsilon: R) -> Self {
        self.noise_kind = kind;
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let l = self.lambda;
        if !(l == R::one() || l == -R::one() || l == R::zero()) {
            return Err(invalid("lambda", format!("{l} must be +1, -1 or 0")));
        }
        if !(self.sigma > R::zero()) {
            return Err(invalid("sigma", "must be positive"));
        }
        if !(self.sigma * R::lit(dim as f64) < R::lit(2.0)) {
            return Err(invalid("sigma", "sigma*dim must be < 2"));
        }
        if !(self.alpha >= R::zero()) {
            return Err(invalid("alpha", "must be nonnegative"));
        }
        if !(self.epsilon >= R::zero()) {
            return Err(invalid("epsilon", "must be nonnegative"));
        }
        if !(self.dt > R::zero()) || !self.dt.is_finite() {
            return Err(invalid("dt", "must be positive"));
        }
        Ok(())
    }

    /// Number of uniform steps covering `[0, t_end]`.
    pub fn steps_for(&self, t_end: R) -> Result<usize> {
        if !(t_end > R::zero()) {
            return Err(invalid("T", "must be positive"));
        }
        let n = (t_end / self.dt).round();
        let n = n.to_usize().unwrap_or(0).max(1);
        Ok(n)
    }
}

/// The forcing applied in the middle of a step.
#[derive(Clone, Copy)]
pub enum Forcing<'a, R: Real> {
    None,
    /// `u ← u − i f`.
    Additive(&'a [Complex<R>]),
    /// `u ← u·e^{−i Re g}`.
    Phase(&'a [Complex<R>]),
}

/// Reusable stepping engine for one `(grid, params)` pair.
#[derive(Debug, Clone)]
pub struct Integrator<R: Real> {
    grid: Arc<Grid<R>>,
    params: SdeParams<R>,
    half_group: Vec<Complex<R>>,
    half_damping: R,
    scratch: Vec<Complex<R>>,
}

impl<R: Real> Integrator<R> {
    pub fn new(grid: &Arc<Grid<R>>, params: SdeParams<R>) -> Result<Self> {
        params.validate(grid.dim())?;
        let half = params.dt / R::lit(2.0);
        let half_group = grid
            .k_squared()
            .iter()
            .map(|&k2| Complex::from_polar(R::one(), k2 * half))
            .collect();
        Ok(Self {
            grid: Arc::clone(grid),
            params,
            half_group,
            half_damping: (-params.alpha * half).exp(),
            scratch: vec![Complex::new(R::zero(), R::zero()); grid.len()],
        })
    }

    pub fn params(&self) -> &SdeParams<R> {
        &self.params
    }

    pub fn grid(&self) -> &Arc<Grid<R>> {
        &self.grid
    }

    pub(crate) fn half_free(&self, u: &mut [Complex<R>]) {
        self.grid.fft_forward(u);
        for (z, &m) in u.iter_mut().zip(&self.half_group) {
            *z = *z * m;
        }
        self.grid.fft_inverse(u);
    }

    pub(crate) fn half_free_inverse(&self, u: &mut [Complex<R>]) {
        self.grid.fft_forward(u);
        for (z, &m) in u.iter_mut().zip(&self.half_group) {
            *z = *z * m.conj();
        }
        self.grid.fft_inverse(u);
    }

    pub(crate) fn damp_half(&self, u: &mut [Complex<R>]) {
        let f = self.half_damping;
        if f != R::one() {
            for z in u.iter_mut() {
                *z = *z * f;
            }
        }
    }

    pub(crate) fn half_damping(&self) -> R {
        self.half_damping
    }

    pub(crate) fn nonlinear_phase(&self, u: &mut [Complex<R>]) {
        let p = &self.params;
        if p.lambda == R::zero() {
            return;
        }
        let coeff = -p.lambda * p.dt;
        for z in u.iter_mut() {
            let theta = coeff * z.norm_sqr().powf(p.sigma);
            *z = *z * Complex::from_polar(R::one(), theta);
        }
    }

    /// Applies one full Strang step in place.
    pub fn step(&self, u: &mut [Complex<R>], forcing: Forcing<'_, R>) {
        self.half_free(u);
        self.damp_half(u);
        self.nonlinear_phase(u);
        apply_forcing(u, forcing);
        self.damp_half(u);
        self.half_free(u);
    }

    /// Deterministic step.
    pub fn det_step(&self, u: &mut Field<R>) {
        self.step(u.values_mut(), Forcing::None);
    }

    /// One step of the additive equation. Returns nothing; the drawn increment
    /// is left in the internal scratch buffer (see [`Integrator::last_increment`]).
    pub fn additive_step<G: Rng + ?Sized>(&mut self, u: &mut Field<R>, op: &NoiseOperator<R>, rng: &mut G) {
        let mut noise = std::mem::take(&mut self.scratch);
        op.sample_into(self.params.dt, rng, &mut noise);
        let amp = self.params.epsilon.sqrt();
        let scaled: Vec<Complex<R>>;
        let forcing = if amp == R::one() {
            Forcing::Additive(&noise)
        } else {
            scaled = noise.iter().map(|&z| z * amp).collect();
            Forcing::Additive(&scaled)
        };
        self.step(u.values_mut(), forcing);
        self.scratch = noise;
    }

    /// One step of the Stratonovich multiplicative equation.
    pub fn multiplicative_step<G: Rng + ?Sized>(
        &mut self,
        u: &mut Field<R>,
        op: &NoiseOperator<R>,
        rng: &mut G,
    ) {
        debug_assert!(op.real_valued_output());
        let mut noise = std::mem::take(&mut self.scratch);
        op.sample_into(self.params.dt, rng, &mut noise);
        let amp = self.params.epsilon.sqrt();
        for z in noise.iter_mut() {
            *z = Complex::new(z.re * amp, R::zero());
        }
        self.step(u.values_mut(), Forcing::Phase(&noise));
        // keep the unscaled increment available
        let inv = if amp > R::zero() { R::one() / amp } else { R::zero() };
        for z in noise.iter_mut() {
            *z = *z * inv;
        }
        self.scratch = noise;
    }

    /// `Φ ΔW` drawn by the most recent stochastic step (not scaled by `√ε`).
    pub fn last_increment(&self) -> &[Complex<R>] {
        &self.scratch
    }

    /// Steps with the kind of noise configured in `params`.
    pub fn noisy_step<G: Rng + ?Sized>(&mut self, u: &mut Field<R>, op: &NoiseOperator<R>, rng: &mut G) {
        match self.params.noise_kind {
            NoiseKind::Additive => self.additive_step(u, op, rng),
            NoiseKind::Multiplicative => self.multiplicative_step(u, op, rng),
            NoiseKind::None => self.det_step(u),
        }
    }
}

pub(crate) fn apply_forcing<R: Real>(u: &mut [Complex<R>], forcing: Forcing<'_, R>) {
    match forcing {
        Forcing::None => {}
        Forcing::Additive(f) => {
            for (z, &w) in u.iter_mut().zip(f) {
                // u − i w
                *z = Complex::new(z.re + w.im, z.im - w.re);
            }
        }
        Forcing::Phase(g) => {
            for (z, &w) in u.iter_mut().zip(g) {
                *z = *z * Complex::from_polar(R::one(), -w.re);
            }
        }
    }
}

/// One scalar record of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalarRecord {
    pub t: f64,
    pub mass: f64,
    pub hamiltonian: f64,
    pub modified_hamiltonian: Option<f64>,
}

/// What to keep while integrating.
#[derive(Debug, Clone)]
pub struct RecordOptions<R: Real> {
    /// Keep every `snapshot_stride`-th state (0 keeps only the endpoints).
    pub snapshot_stride: usize,
    /// Record scalars every `scalar_stride` steps (0 disables scalars).
    pub scalar_stride: usize,
    /// Needed for `H̃` in the scalar series.
    pub constants: Option<AnalysisConstants<R>>,
}

impl<R: Real> Default for RecordOptions<R> {
    fn default() -> Self {
        Self {
            snapshot_stride: 0,
            scalar_stride: 1,
            constants: None,
        }
    }
}

impl<R: Real> RecordOptions<R> {
    pub fn every_step() -> Self {
        Self {
            snapshot_stride: 1,
            scalar_stride: 1,
            constants: None,
        }
    }

    pub fn with_constants(mut self, constants: AnalysisConstants<R>) -> Self {
        self.constants = Some(constants);
        self
    }
}

/// A sampled solution path.
#[derive(Debug, Clone)]
pub struct Trajectory<R: Real> {
    pub times: Vec<R>,
    pub snapshots: Vec<Field<R>>,
    pub scalars: Vec<ScalarRecord>,
}

impl<R: Real> Trajectory<R> {
    fn start(u0: &Field<R>, lambda: R, sigma: R, opts: &RecordOptions<R>) -> Self {
        let mut traj = Self {
            times: vec![R::zero()],
            snapshots: vec![u0.clone()],
            scalars: Vec::new(),
        };
        if opts.scalar_stride > 0 {
            traj.scalars.push(scalar_record(u0, R::zero(), lambda, sigma, opts));
        }
        traj
    }

    #[allow(clippy::too_many_arguments)]
    fn observe(&mut self, u: &Field<R>, step: usize, total: usize, t: R, lambda: R, sigma: R, opts: &RecordOptions<R>) {
        let last = step == total;
        if last || (opts.snapshot_stride > 0 && step.is_multiple_of(opts.snapshot_stride)) {
            self.times.push(t);
            self.snapshots.push(u.clone());
        }
        if opts.scalar_stride > 0 && (last || step.is_multiple_of(opts.scalar_stride)) {
            self.scalars.push(scalar_record(u, t, lambda, sigma, opts));
        }
    }

    pub fn final_state(&self) -> &Field<R> {
        self.snapshots.last().expect("trajectory always holds the initial state")
    }

    pub fn final_time(&self) -> R {
        *self.times.last().expect("nonempty")
    }

    /// Writes the scalar series as JSON lines `{"t":…,"mass":…,"H":…,"Htilde":…}`.
    pub fn write_scalar_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.scalars {
            let ht = match r.modified_hamiltonian {
                Some(v) => format_json_number(v),
                None => "null".to_string(),
            };
            writeln!(
                out,
                "{{\"t\":{},\"mass\":{},\"H\":{},\"Htilde\":{}}}",
                format_json_number(r.t),
                format_json_number(r.mass),
                format_json_number(r.hamiltonian),
                ht
            )?;
        }
        Ok(())
    }
}

fn format_json_number(x: f64) -> String {
    if x.is_finite() {
        format!("{x:?}")
    } else {
        "null".to_string()
    }
}

fn scalar_record<R: Real>(u: &Field<R>, t: R, lambda: R, sigma: R, opts: &RecordOptions<R>) -> ScalarRecord {
    ScalarRecord {
        t: t.as_f64(),
        mass: mass(u).as_f64(),
        hamiltonian: hamiltonian(u, lambda, sigma).as_f64(),
        modified_hamiltonian: opts
            .constants
            .as_ref()
            .map(|c| modified_hamiltonian(u, c, lambda).as_f64()),
    }
}

fn check_finite<R: Real>(u: &Field<R>, step: usize, t: R) -> Result<()> {
    if mass(u).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, time: t.as_f64() })
    }
}

/// The deterministic damped flow `S(u0, 0)` on `[0, T]`.
pub fn det_flow<R: Real>(u0: &Field<R>, params: &SdeParams<R>, t_end: R, opts: &RecordOptions<R>) -> Result<Trajectory<R>> {
    if params.noise_kind != NoiseKind::None && params.epsilon != R::zero() {
        return Err(Error::Precondition(
            "det_flow requires noise_kind = none or epsilon = 0".into(),
        ));
    }
    let integ = Integrator::new(u0.grid(), *params)?;
    let total = params.steps_for(t_end)?;
    let mut u = u0.clone();
    let mut traj = Trajectory::start(u0, params.lambda, params.sigma, opts);
    for step in 1..=total {
        integ.det_step(&mut u);
        let t = params.dt * R::lit(step as f64);
        check_finite(&u, step, t)?;
        traj.observe(&u, step, total, t, params.lambda, params.sigma, opts);
    }
    Ok(traj)
}

/// Sequence of recorded `Φ ΔW_j` increments (not scaled by `√ε`).
#[derive(Debug, Clone)]
pub struct WienerPath<R: Real> {
    pub dt: R,
    pub increments: Vec<Field<R>>,
}

const PATH_MAGIC: [u8; 4] = *b"SNWP";

impl<R: Real> WienerPath<R> {
    pub fn sample<G: Rng + ?Sized>(op: &NoiseOperator<R>, dt: R, steps: usize, rng: &mut G) -> Self {
        Self {
            dt,
            increments: (0..steps).map(|_| op.sample_increment(dt, rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    /// Sums consecutive blocks of `factor` increments: the same Brownian path
    /// seen on a coarser time grid.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.increments.len().is_multiple_of(factor) {
            return Err(invalid("factor", "must divide the number of increments"));
        }
        let increments = self
            .increments
            .chunks(factor)
            .map(|chunk| {
                let mut acc = chunk[0].clone();
                for f in &chunk[1..] {
                    acc = acc.axpy(Complex::new(R::one(), R::zero()), f);
                }
                acc
            })
            .collect();
        Ok(Self {
            dt: self.dt * R::lit(factor as f64),
            increments,
        })
    }

    /// `"SNWP"`, `u32` count, `f64` dt, then one field snapshot per increment.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&PATH_MAGIC)?;
        out.write_all(&(self.increments.len() as u32).to_le_bytes())?;
        out.write_all(&self.dt.as_f64().to_le_bytes())?;
        for f in &self.increments {
            write_snapshot(f, &mut out)?;
        }
        Ok(())
    }

    pub fn read<Rd: Read>(mut input: Rd, grid: &Arc<Grid<R>>) -> Result<Self> {
        let mut head = [0u8; 16];
        input.read_exact(&mut head)?;
        if head[..4] != PATH_MAGIC {
            return Err(Error::Snapshot("bad Wiener path magic".into()));
        }
        let count = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
        let dt = f64::from_le_bytes(head[8..16].try_into().expect("8 bytes"));
        let mut increments = Vec::with_capacity(count);
        for _ in 0..count {
            let f = read_snapshot(&mut input, Some(grid))?;
            if !f.same_grid(&Field::zeros(grid)) {
                return Err(Error::GridMismatch("Wiener path grid differs".into()));
            }
            increments.push(f);
        }
        Ok(Self { dt: R::lit(dt), increments })
    }
}

/// Integrates the noisy equation configured in `params` for `T`, optionally
/// recording the Wiener path it consumed.
pub fn run_sde<R: Real, G: Rng + ?Sized>(
    u0: &Field<R>,
    params: &SdeParams<R>,
    op: &NoiseOperator<R>,
    t_end: R,
    rng: &mut G,
    opts: &RecordOptions<R>,
    record_path: bool,
) -> Result<(Trajectory<R>, Option<WienerPath<R>>)> {
    if params.noise_kind == NoiseKind::Multiplicative && !op.real_valued_output() {
        return Err(Error::Precondition(
            "multiplicative noise requires a real-valued noise operator".into(),
        ));
    }
    let mut integ = Integrator::new(u0.grid(), *params)?;
    let total = params.steps_for(t_end)?;
    let mut u = u0.clone();
    let mut traj = Trajectory::start(u0, params.lambda, params.sigma, opts);
    let mut path = record_path.then(|| WienerPath {
        dt: params.dt,
        increments: Vec::with_capacity(total),
    });
    for step in 1..=total {
        integ.noisy_step(&mut u, op, rng);
        if let Some(p) = path.as_mut() {
            p.increments.push(Field::from_raw(u0.grid(), integ.last_increment().to_vec()));
        }
        let t = params.dt * R::lit(step as f64);
        check_finite(&u, step, t)?;
        traj.observe(&u, step, total, t, params.lambda, params.sigma, opts);
    }
    Ok((traj, path))
}

/// Replays the additive chain on a recorded Wiener path.
pub fn replay_additive<R: Real>(
    u0: &Field<R>,
    params: &SdeParams<R>,
    path: &WienerPath<R>,
    opts: &RecordOptions<R>,
) -> Result<Trajectory<R>> {
    check_path(u0, params, path)?;
    let integ = Integrator::new(u0.grid(), *params)?;
    let amp = params.epsilon.sqrt();
    let total = path.len();
    let mut u = u0.clone();
    let mut traj = Trajectory::start(u0, params.lambda, params.sigma, opts);
    let mut f = vec![Complex::new(R::zero(), R::zero()); u0.grid().len()];
    for (j, inc) in path.increments.iter().enumerate() {
        for (dst, &src) in f.iter_mut().zip(inc.values()) {
            *dst = src * amp;
        }
        integ.step(u.values_mut(), Forcing::Additive(&f));
        let t = params.dt * R::lit((j + 1) as f64);
        check_finite(&u, j + 1, t)?;
        traj.observe(&u, j + 1, total, t, params.lambda, params.sigma, opts);
    }
    Ok(traj)
}

fn check_path<R: Real>(u0: &Field<R>, params: &SdeParams<R>, path: &WienerPath<R>) -> Result<()> {
    if path.is_empty() {
        return Err(invalid("wiener_path", "is empty"));
    }
    if (path.dt - params.dt).abs() > params.dt * R::lit(1e-9) {
        return Err(invalid("wiener_path", "time step differs from params.dt"));
    }
    if path.increments.iter().any(|f| !f.same_grid(u0)) {
        return Err(Error::GridMismatch(
            "Wiener path and initial datum live on different grids".into(),
        ));
    }
    Ok(())
}

/// Piecewise-constant control `h` on a uniform time grid.
#[derive(Debug, Clone)]
pub struct ControlPath<R: Real> {
    pub dt: R,
    pub controls: Vec<Field<R>>,
}

impl<R: Real> ControlPath<R> {
    pub fn zeros(grid: &Arc<Grid<R>>, dt: R, steps: usize) -> Self {
        Self {
            dt,
            controls: vec![Field::zeros(grid); steps],
        }
    }

    pub fn horizon(&self) -> R {
        self.dt * R::lit(self.controls.len() as f64)
    }

    /// Left endpoints of the control intervals.
    pub fn times(&self) -> Vec<R> {
        (0..self.controls.len()).map(|i| self.dt * R::lit(i as f64)).collect()
    }

    pub fn scaled(&self, c: R) -> Self {
        Self {
            dt: self.dt,
            controls: self.controls.iter().map(|h| h.scaled(c)).collect(),
        }
    }

    /// Control whose forcing reproduces a recorded noise path at intensity
    /// `ε`: `h_i = √ε Φ⁺ ΔW_i / dt`.
    pub fn from_wiener_path(path: &WienerPath<R>, op: &NoiseOperator<R>, epsilon: R) -> Self {
        let c = epsilon.sqrt() / path.dt;
        Self {
            dt: path.dt,
            controls: path
                .increments
                .iter()
                .map(|w| {
                    let h = op.apply_pinv(w).scaled(c);
                    if op.real_valued_output() {
                        h.map(|z| Complex::new(z.re, R::zero()))
                    } else {
                        h
                    }
                })
                .collect(),
        }
    }
}

/// Forcing fields `Φ h_i dt` for a control path.
pub(crate) fn control_forcing<R: Real>(op: &NoiseOperator<R>, h: &Field<R>, dt: R, real: bool) -> Vec<Complex<R>> {
    let mut buf = h.spectrum();
    op.apply_spectral(&mut buf);
    op.grid().fft_inverse(&mut buf);
    for z in buf.iter_mut() {
        *z = *z * dt;
        if real {
            z.im = R::zero();
        }
    }
    buf
}

/// The controlled skeleton `S(u0, h)`.
pub fn solve_skeleton<R: Real>(
    u0: &Field<R>,
    control: &ControlPath<R>,
    params: &SdeParams<R>,
    op: &NoiseOperator<R>,
    kind: NoiseKind,
    opts: &RecordOptions<R>,
) -> Result<Trajectory<R>> {
    if kind == NoiseKind::Multiplicative && !op.real_valued_output() {
        return Err(Error::Precondition(
            "multiplicative skeleton requires a real-valued noise operator".into(),
        ));
    }
    let mut p = *params;
    p.dt = control.dt;
    let integ = Integrator::new(u0.grid(), p)?;
    let total = control.controls.len();
    let mut u = u0.clone();
    let mut traj = Trajectory::start(u0, p.lambda, p.sigma, opts);
    for (i, h) in control.controls.iter().enumerate() {
        let f = control_forcing(op, h, p.dt, kind == NoiseKind::Multiplicative);
        let forcing = match kind {
            NoiseKind::Additive => Forcing::Additive(&f),
            NoiseKind::Multiplicative => Forcing::Phase(&f),
            NoiseKind::None => Forcing::None,
        };
        integ.step(u.values_mut(), forcing);
        let t = p.dt * R::lit((i + 1) as f64);
        check_finite(&u, i + 1, t)?;
        traj.observe(&u, i + 1, total, t, p.lambda, p.sigma, opts);
    }
    Ok(traj)
}

/// The noisy equation with an additional control drift: the forcing of
/// each step is `Φ h_n dt + √ε ΦΔW_n` (real parts only for multiplicative
/// noise). With `ε = 0` this is [`solve_skeleton`].
pub fn run_controlled_sde<R: Real, G: Rng + ?Sized>(
    u0: &Field<R>,
    control: &ControlPath<R>,
    params: &SdeParams<R>,
    op: &NoiseOperator<R>,
    rng: &mut G,
    opts: &RecordOptions<R>,
) -> Result<Trajectory<R>> {
    let kind = params.noise_kind;
    if kind == NoiseKind::None {
        return Err(invalid("noise_kind", "must be additive or multiplicative"));
    }
    if kind == NoiseKind::Multiplicative && !op.real_valued_output() {
        return Err(Error::Precondition(
            "multiplicative noise requires a real-valued noise operator".into(),
        ));
    }
    let mut p = *params;
    p.dt = control.dt;
    let integ = Integrator::new(u0.grid(), p)?;
    let amp = p.epsilon.sqrt();
    let real = kind == NoiseKind::Multiplicative;
    let total = control.controls.len();
    let mut noise = vec![Complex::new(R::zero(), R::zero()); u0.grid().len()];
    let mut u = u0.clone();
    let mut traj = Trajectory::start(u0, p.lambda, p.sigma, opts);
    for (i, h) in control.controls.iter().enumerate() {
        let mut f = control_forcing(op, h, p.dt, real);
        op.sample_into(p.dt, rng, &mut noise);
        for (a, &w) in f.iter_mut().zip(&noise) {
            *a = *a + w * amp;
            if real {
                a.im = R::zero();
            }
        }
        let forcing = if real { Forcing::Phase(&f) } else { Forcing::Additive(&f) };
        integ.step(u.values_mut(), forcing);
        let t = p.dt * R::lit((i + 1) as f64);
        check_finite(&u, i + 1, t)?;
        traj.observe(&u, i + 1, total, t, p.lambda, p.sigma, opts);
    }
    Ok(traj)
}

/// Integrates the additive equation through the transform `u = v − iZ`,
/// where `−iZ` solves the damped linear equation driven by the same noise
/// (the damped stochastic convolution) and `v` solves the random PDE
///
/// ```text
/// ∂_t v = −iΔv − αv − iλ|v − iZ|^{2σ}(v − iZ).
/// ```
///
/// `Z` is accumulated recursively,
/// `Z_{j+1} = e^{−α dt}U(dt) Z_j + √ε e^{−α dt/2}U(dt/2) ΦΔW_j`,
/// i.e. each increment enters at the middle of its interval. The random PDE
/// is stepped by Strang splitting with the nonlinearity evaluated at
/// `v − iZ̄`, where `Z̄` averages `Z` propagated to the midpoint from both
/// ends of the step. The linear part is exact, so with `λ = 0` the result
/// coincides with the splitting chain up to roundoff, and with `ε = 0` it
/// reduces to [`det_flow`].
pub fn solve_via_convolution<R: Real>(
    u0: &Field<R>,
    path: &WienerPath<R>,
    params: &SdeParams<R>,
    opts: &RecordOptions<R>,
) -> Result<Trajectory<R>> {
    if params.noise_kind == NoiseKind::Multiplicative {
        return Err(Error::Precondition(
            "the convolution transform applies to additive noise".into(),
        ));
    }
    check_path(u0, params, path)?;
    let grid = u0.grid();
    let integ = Integrator::new(grid, *params)?;
    let amp = params.epsilon.sqrt();
    let total = path.len();
    let n = grid.len();
    let zero = Complex::new(R::zero(), R::zero());
    let minus_i = Complex::new(R::zero(), -R::one());

    let mut v = u0.values().to_vec();
    let mut z = vec![zero; n];
    let mut traj = Trajectory::start(u0, params.lambda, params.sigma, opts);
    let mut z_left = vec![zero; n];
    let mut z_right = vec![zero; n];
    let mut w = vec![zero; n];

    for (j, inc) in path.increments.iter().enumerate() {
        // Z at the midpoint seen from the left: E(dt/2) Z_j
        z_left.copy_from_slice(&z);
        integ.half_free(&mut z_left);
        integ.damp_half(&mut z_left);
        // Z_{j+1} = E(dt/2) [E(dt/2) Z_j + √ε ΦΔW_j]
        for ((zr, &zl), &dw) in z_right.iter_mut().zip(&z_left).zip(inc.values()) {
            *zr = zl + dw * amp;
        }
        // midpoint value seen from the right is E(dt/2) Z_j + √ε ΦΔW_j
        let mut z_next = z_right.clone();
        integ.damp_half(&mut z_next);
        integ.half_free(&mut z_next);

        integ.half_free(&mut v);
        integ.damp_half(&mut v);
        let half = R::lit(0.5);
        for (((wv, &vv), &zl), &zr) in w.iter_mut().zip(&v).zip(&z_left).zip(&z_right) {
            let zbar = (zl + zr) * half;
            *wv = vv + minus_i * zbar;
        }
        let before = w.clone();
        integ.nonlinear_phase(&mut w);
        for ((vv, &after), &b) in v.iter_mut().zip(&w).zip(&before) {
            *vv = *vv + (after - b);
        }
        integ.damp_half(&mut v);
        integ.half_free(&mut v);
        z = z_next;

        let u: Vec<Complex<R>> = v.iter().zip(&z).map(|(&a, &b)| a + minus_i * b).collect();
        let u = Field::from_raw(grid, u);
        let t = params.dt * R::lit((j + 1) as f64);
        check_finite(&u, j + 1, t)?;
        traj.observe(&u, j + 1, total, t, params.lambda, params.sigma, opts);
    }
    Ok(traj)
}

/// Largest `L²` distance between two trajectories over their common snapshots.
pub fn sup_l2_distance<R: Real>(a: &Trajectory<R>, b: &Trajectory<R>) -> R {
    a.snapshots
        .iter()
        .zip(&b.snapshots)
        .map(|(x, y)| crate::grid::l2_norm(&x.sub(y)))
        .fold(R::zero(), |m, d| m.max(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::l2_norm;
    use crate::noise::NoiseProfile;
    use crate::rng::trajectory_stream;

    fn setup() -> (Arc<Grid<f64>>, NoiseOperator<f64>) {
        let g = Grid::<f64>::build(1, 64, 20.0).unwrap();
        let op = NoiseOperator::new(&g, &NoiseProfile::GaussianCutoff { k0: 2.0, amplitude: 1.0 }, true).unwrap();
        (g, op)
    }

    #[test]
    fn zero_is_an_equilibrium() {
        let (g, _) = setup();
        let p = SdeParams::deterministic(1.0, 1.0, 0.3, 1e-2);
        let tr = det_flow(&Field::zeros(&g), &p, 1.0, &RecordOptions::every_step()).unwrap();
        assert!(tr.snapshots.iter().all(|f| l2_norm(f) == 0.0));
        assert_eq!(tr.times.len(), 101);
    }

    #[test]
    fn plane_wave_keeps_modulus() {
        let (g, _) = setup();
        let k = 2.0 * std::f64::consts::PI * 2.0 / 20.0;
        let u0 = Field::from_fn(&g, |x| Complex::from_polar(0.7, k * x[0]));
        for lambda in [1.0, -1.0] {
            let p = SdeParams::deterministic(lambda, 1.0, 0.0, 1e-2);
            let tr = det_flow(&u0, &p, 2.0, &RecordOptions::default()).unwrap();
            for z in tr.final_state().values() {
                assert!((z.norm() - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mass_decays_exactly() {
        let (g, _) = setup();
        let u0 = Field::gaussian(&g, 1.2, 1.0);
        let p = SdeParams::deterministic(1.0, 1.0, 0.5, 1e-3);
        let tr = det_flow(&u0, &p, 2.0, &RecordOptions::default()).unwrap();
        let ratio = tr.scalars.last().unwrap().mass / tr.scalars[0].mass;
        assert!((ratio - (-2.0f64).exp()).abs() < 1e-8);
        assert!((ratio - 0.1353352832366127).abs() < 1e-8);
    }

    #[test]
    fn noiseless_steps_match_deterministic() {
        let (g, op) = setup();
        let u0 = Field::gaussian(&g, 1.0, 1.5);
        let det = SdeParams::deterministic(1.0, 1.0, 0.2, 1e-2);
        let mut a = u0.clone();
        let mut b = u0.clone();
        let mut c = u0.clone();
        let d = Integrator::new(&g, det).unwrap();
        let mut add = Integrator::new(&g, det.with_noise(NoiseKind::Additive, 0.0)).unwrap();
        let mut mul = Integrator::new(&g, det.with_noise(NoiseKind::Multiplicative, 0.0)).unwrap();
        let mut rng = trajectory_stream(3, 0);
        d.det_step(&mut a);
        add.additive_step(&mut b, &op, &mut rng);
        mul.multiplicative_step(&mut c, &op, &mut rng);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn multiplicative_step_preserves_modulus_without_damping() {
        let (g, op) = setup();
        let u0 = Field::gaussian(&g, 1.0, 1.5);
        let p = SdeParams::deterministic(0.0, 1.0, 0.0, 1e-2).with_noise(NoiseKind::Multiplicative, 0.5);
        let mut integ = Integrator::new(&g, p).unwrap();
        let mut rng = trajectory_stream(1, 1);
        let mut u = u0.clone();
        // with λ = 0 the free half steps still move |u|; compare the
        // phase substep alone
        let mut v = u0.values().to_vec();
        op.sample_into(p.dt, &mut rng, &mut integ.scratch);
        apply_forcing(&mut v, Forcing::Phase(&integ.scratch));
        for (a, b) in v.iter().zip(u0.values()) {
            assert!((a.norm() - b.norm()).abs() < 1e-15);
        }
        integ.multiplicative_step(&mut u, &op, &mut rng);
        assert!((mass(&u) - mass(&u0)).abs() < 1e-12 * mass(&u0));
    }

    #[test]
    fn skeleton_with_zero_control_is_det_flow() {
        let (g, op) = setup();
        let u0 = Field::gaussian(&g, 1.0, 1.5);
        let p = SdeParams::deterministic(1.0, 1.0, 0.2, 1e-2);
        let det = det_flow(&u0, &p, 0.5, &RecordOptions::default()).unwrap();
        let h = ControlPath::zeros(&g, 1e-2, 50);
        for kind in [NoiseKind::Additive, NoiseKind::Multiplicative] {
            let sk = solve_skeleton(&u0, &h, &p, &op, kind, &RecordOptions::default()).unwrap();
            let d = l2_norm(&sk.final_state().sub(det.final_state()));
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn linear_skeleton_response_to_constant_control() {
        // α = 0, λ = 0, u0 = 0, h ≡ h0: u(T) = −i T Φ h0 when Φh0 is a
        // zero mode (free group acts trivially)
        let (g, op) = setup();
        let h0 = Field::from_fn(&g, |_| Complex::new(0.3, 0.0));
        let p = SdeParams::deterministic(0.0, 1.0, 0.0, 1e-2);
        let control = ControlPath { dt: 1e-2, controls: vec![h0.clone(); 100] };
        let tr = solve_skeleton(&Field::zeros(&g), &control, &p, &op, NoiseKind::Additive, &RecordOptions::default()).unwrap();
        let expect = op.apply(&h0).map(|z| z * Complex::new(0.0, -1.0));
        let d = l2_norm(&tr.final_state().sub(&expect));
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn wiener_path_file_roundtrip_and_coarsening() {
        let (g, op) = setup();
        let mut rng = trajectory_stream(5, 0);
        let path = WienerPath::sample(&op, 1e-2, 8, &mut rng);
        let mut bytes = Vec::new();
        path.write(&mut bytes).unwrap();
        let back = WienerPath::read(bytes.as_slice(), &g).unwrap();
        assert_eq!(back.increments, path.increments);
        let coarse = path.coarsen(4).unwrap();
        assert_eq!(coarse.len(), 2);
        assert!((coarse.dt - 4e-2).abs() < 1e-15);
        assert!(path.coarsen(3).is_err());
    }

    #[test]
    fn convolution_solver_rejects_mismatched_grids() {
        let (g, op) = setup();
        let other = Grid::<f64>::build(1, 32, 20.0).unwrap();
        let mut rng = trajectory_stream(5, 0);
        let path = WienerPath::sample(&op, 1e-2, 4, &mut rng);
        let p = SdeParams::deterministic(1.0, 1.0, 0.1, 1e-2).with_noise(NoiseKind::Additive, 0.1);
        assert!(solve_via_convolution(&Field::zeros(&other), &path, &p, &RecordOptions::default()).is_err());
        assert!(solve_via_convolution(&Field::zeros(&g), &path, &p, &RecordOptions::default()).is_ok());
    }

    #[test]
    fn params_validation() {
        let p = SdeParams::deterministic(1.0, 2.0, 0.1, 1e-2);
        assert!(p.validate(1).is_err());
        assert!(SdeParams::deterministic(0.5, 1.0, 0.1, 1e-2).validate(1).is_err());
        assert!(SdeParams::deterministic(1.0, 1.0, -0.1, 1e-2).validate(1).is_err());
        assert!(SdeParams::deterministic(1.0, 0.9, 0.1, 1e-2).validate(2).is_ok());
    }
}
