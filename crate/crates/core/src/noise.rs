//! The colored Wiener process `W = Φ W_c`, with `Φ` a Fourier multiplier.
//!
//! `L²` is a real Hilbert space with inner product `Re ∫ u v̄`. For complex
//! valued noise its orthonormal basis is `{e_k, i e_k}` with
//! `e_k = e^{ikx}/√V`, so a cylindrical increment over `dt` has independent
//! complex coefficients with `E|ξ_k|² = 2dt` and `‖Φ‖²_{HS} = 2 Σ_k φ(k)²`.
//! For real-valued noise (`Φ` acting on real functions) the basis is the real
//! trigonometric one, `E|ξ_k|² = dt` with `ξ_{-k} = conj(ξ_k)`, and
//! `‖Φ‖²_{HS} = Σ_k φ(k)²`. Either way `E‖Φ ΔW_c‖² = dt ‖Φ‖²_{HS}`.

use std::sync::Arc;

use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::scalar::Real;

/// Shape of the multiplier `φ(k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseProfile {
    /// `φ(k) = amplitude · exp(-|k|²/(2 k0²))`.
    GaussianCutoff {
        k0: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// `φ(k) = amplitude` for `|k| ≤ k_max`, zero above.
    SharpCutoff {
        k_max: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// Explicit amplitudes on a list of integer mode labels, zero elsewhere.
    Modes { modes: Vec<ModeAmplitude> },
    /// One value per mode in FFT storage order.
    Custom { table: Vec<f64> },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeAmplitude {
    /// Signed integer wavenumber labels `[jx, jy]` (`jy` ignored in 1D).
    pub mode: [i64; 2],
    pub amplitude: f64,
}

#[derive(Debug, Clone)]
pub struct NoiseOperator<R: Real> {
    grid: Arc<Grid<R>>,
    multiplier: Vec<R>,
    real_valued_output: bool,
    hs_norm_l2: R,
    hs_norm_h1: R,
}

impl<R: Real> NoiseOperator<R> {
    /// Builds the operator. With `real_valued_output` the multiplier is
    /// symmetrized as `φ(k) ← ((φ(k)² + φ(-k)²)/2)^{1/2}`, which keeps the
    /// Hilbert–Schmidt norm and makes sampled increments real.
    pub fn new(grid: &Arc<Grid<R>>, profile: &NoiseProfile, real_valued_output: bool) -> Result<Self> {
        let mut multiplier = evaluate_profile(grid, profile)?;
        if let Some(bad) = multiplier.iter().find(|p| !p.is_finite() || **p < R::zero()) {
            return Err(Error::InvalidNoise(format!(
                "multiplier values must be finite and nonnegative (found {bad})"
            )));
        }
        if real_valued_output {
            let spec = *grid.spec();
            let sym: Vec<R> = (0..multiplier.len())
                .map(|idx| {
                    let a = multiplier[idx];
                    let b = multiplier[spec.conjugate_index(idx)];
                    ((a * a + b * b) / R::lit(2.0)).sqrt()
                })
                .collect();
            multiplier = sym;
        }
        Ok(Self::from_multiplier(grid, multiplier, real_valued_output))
    }

    fn from_multiplier(grid: &Arc<Grid<R>>, multiplier: Vec<R>, real_valued_output: bool) -> Self {
        let dof = dof_factor(real_valued_output);
        let hs_norm_l2 = weighted_hs(grid, &multiplier, R::zero(), dof);
        let hs_norm_h1 = weighted_hs(grid, &multiplier, R::one(), dof);
        Self {
            grid: Arc::clone(grid),
            multiplier,
            real_valued_output,
            hs_norm_l2,
            hs_norm_h1,
        }
    }

    /// Rejects the operator when `Σ (1+|k|²)^s φ(k)²` exceeds `bound²`, i.e.
    /// when `Φ` is too rough to be Hilbert–Schmidt into `H^s` at the
    /// requested tolerance.
    pub fn check_smoothness(self, s: R, bound: R) -> Result<Self> {
        let value = self.hs_norm(s);
        if !value.is_finite() || value > bound {
            return Err(Error::InvalidNoise(format!(
                "H^{s} Hilbert–Schmidt norm {value} exceeds the bound {bound}"
            )));
        }
        Ok(self)
    }

    pub fn grid(&self) -> &Arc<Grid<R>> {
        &self.grid
    }

    pub fn multiplier(&self) -> &[R] {
        &self.multiplier
    }

    pub fn real_valued_output(&self) -> bool {
        self.real_valued_output
    }

    /// Cached `‖Φ‖_{L₂^{0,0}}`.
    pub fn hs_norm_l2(&self) -> R {
        self.hs_norm_l2
    }

    /// Cached `‖Φ‖_{L₂^{0,1}}`.
    pub fn hs_norm_h1(&self) -> R {
        self.hs_norm_h1
    }

    /// `(m Σ_k (1+|k|²)^s φ(k)²)^{1/2}` with `m = 2` for complex-valued and
    /// `m = 1` for real-valued noise.
    pub fn hs_norm(&self, s: R) -> R {
        if s == R::zero() {
            self.hs_norm_l2
        } else if s == R::one() {
            self.hs_norm_h1
        } else {
            weighted_hs(&self.grid, &self.multiplier, s, dof_factor(self.real_valued_output))
        }
    }

    /// `‖∇Φ‖_{L₂^{0,0}}`, i.e. `(m Σ |k|² φ(k)²)^{1/2}`.
    pub fn gradient_hs_norm(&self) -> R {
        let sum = self
            .multiplier
            .iter()
            .zip(self.grid.k_squared())
            .fold(R::zero(), |acc, (&p, &k2)| acc + k2 * p * p);
        (sum * dof_factor(self.real_valued_output)).sqrt()
    }

    /// Norm of `Φ` as a bounded operator on `L²`: `max_k φ(k)`.
    pub fn operator_norm_l2(&self) -> R {
        self.multiplier.iter().fold(R::zero(), |m, &p| m.max(p))
    }

    /// Norm of `Φ` as an operator `L² → H¹`: `max_k φ(k)(1+|k|²)^{1/2}`.
    pub fn operator_norm_l2_h1(&self) -> R {
        self.multiplier
            .iter()
            .zip(self.grid.k_squared())
            .fold(R::zero(), |m, (&p, &k2)| m.max(p * (R::one() + k2).sqrt()))
    }

    /// The Itô correction profile `F_Φ(x) = Σ_j |Φ e_j(x)|²`. For a Fourier
    /// multiplier this is the constant `‖Φ‖²_{HS} / V`.
    pub fn f_phi(&self) -> Field<R> {
        let value = self.hs_norm_l2 * self.hs_norm_l2 / self.grid.volume();
        Field::from_raw(&self.grid, vec![Complex::new(value, R::zero()); self.grid.len()])
    }

    /// `Φ u`.
    pub fn apply(&self, u: &Field<R>) -> Field<R> {
        let mut buf = u.spectrum();
        self.apply_spectral(&mut buf);
        self.grid.fft_inverse(&mut buf);
        if self.real_valued_output && u.values().iter().all(|z| z.im == R::zero()) {
            for z in buf.iter_mut() {
                z.im = R::zero();
            }
        }
        Field::from_raw(&self.grid, buf)
    }

    pub(crate) fn apply_spectral(&self, spectrum: &mut [Complex<R>]) {
        for (z, &p) in spectrum.iter_mut().zip(&self.multiplier) {
            *z = *z * p;
        }
    }

    /// Moore–Penrose pseudo-inverse `Φ⁺ u` (zero on modes where `φ = 0`).
    pub fn apply_pinv(&self, u: &Field<R>) -> Field<R> {
        let mut buf = u.spectrum();
        for (z, &p) in buf.iter_mut().zip(&self.multiplier) {
            *z = if p > R::zero() { *z / p } else { Complex::new(R::zero(), R::zero()) };
        }
        self.grid.fft_inverse(&mut buf);
        Field::from_raw(&self.grid, buf)
    }

    /// One increment `Φ ΔW_c` over `dt`.
    pub fn sample_increment<G: Rng + ?Sized>(&self, dt: R, rng: &mut G) -> Field<R> {
        let mut buf = vec![Complex::new(R::zero(), R::zero()); self.grid.len()];
        self.sample_into(dt, rng, &mut buf);
        Field::from_raw(&self.grid, buf)
    }

    /// Writes `Φ ΔW_c` (physical space) into `out`. Modes with `φ = 0` consume
    /// no random numbers.
    pub(crate) fn sample_into<G: Rng + ?Sized>(&self, dt: R, rng: &mut G, out: &mut [Complex<R>]) {
        let zero = Complex::new(R::zero(), R::zero());
        out.iter_mut().for_each(|z| *z = zero);
        if dt <= R::zero() {
            return;
        }
        let n = R::lit(self.grid.len() as f64);
        let scale = n / self.grid.volume().sqrt();
        // E|ξ_k|² = dt for paired real modes, 2dt for complex modes
        let half = (dt / R::lit(2.0)).sqrt();
        let full = dt.sqrt();
        if self.real_valued_output {
            let spec = *self.grid.spec();
            for idx in 0..out.len() {
                let p = self.multiplier[idx];
                if p == R::zero() {
                    continue;
                }
                let conj = spec.conjugate_index(idx);
                if conj == idx {
                    let a = R::standard_normal(rng);
                    out[idx] = Complex::new(scale * p * full * a, R::zero());
                } else if idx < conj {
                    let a = R::standard_normal(rng);
                    let b = R::standard_normal(rng);
                    let xi = Complex::new(a, b) * (scale * p * half);
                    out[idx] = xi;
                    out[conj] = xi.conj();
                }
            }
            self.grid.fft_inverse(out);
            for z in out.iter_mut() {
                z.im = R::zero();
            }
        } else {
            for (z, &p) in out.iter_mut().zip(&self.multiplier) {
                if p == R::zero() {
                    continue;
                }
                let a = R::standard_normal(rng);
                let b = R::standard_normal(rng);
                *z = Complex::new(a, b) * (scale * p * full);
            }
            self.grid.fft_inverse(out);
        }
    }
}

/// Builds a [`NoiseOperator`]; see [`NoiseOperator::new`].
pub fn make_noise_operator<R: Real>(
    grid: &Arc<Grid<R>>,
    profile: &NoiseProfile,
    real_valued_output: bool,
) -> Result<NoiseOperator<R>> {
    NoiseOperator::new(grid, profile, real_valued_output)
}

fn dof_factor<R: Real>(real_valued_output: bool) -> R {
    if real_valued_output {
        R::one()
    } else {
        R::lit(2.0)
    }
}

fn weighted_hs<R: Real>(grid: &Grid<R>, multiplier: &[R], s: R, dof: R) -> R {
    let sum = multiplier
        .iter()
        .zip(grid.k_squared())
        .fold(R::zero(), |acc, (&p, &k2)| acc + (R::one() + k2).powf(s) * p * p);
    (sum * dof).sqrt()
}

fn evaluate_profile<R: Real>(grid: &Arc<Grid<R>>, profile: &NoiseProfile) -> Result<Vec<R>> {
    let k2 = grid.k_squared();
    Ok(match profile {
        NoiseProfile::GaussianCutoff { k0, amplitude } => {
            if !(*k0 > 0.0) {
                return Err(Error::InvalidNoise(format!("k0 = {k0} must be positive")));
            }
            let denom = R::lit(2.0 * k0 * k0);
            k2.iter()
                .map(|&q| R::lit(*amplitude) * (-q / denom).exp())
                .collect()
        }
        NoiseProfile::SharpCutoff { k_max, amplitude } => {
            let cut = R::lit(k_max * k_max) * (R::one() + R::lit(1e-12));
            k2.iter()
                .map(|&q| if q <= cut { R::lit(*amplitude) } else { R::zero() })
                .collect()
        }
        NoiseProfile::Modes { modes } => {
            let mut table = vec![R::zero(); grid.len()];
            for m in modes {
                let mut label = m.mode;
                if grid.dim() == 1 {
                    label[1] = 0;
                }
                table[grid.spec().mode_index(label)] = R::lit(m.amplitude);
            }
            table
        }
        NoiseProfile::Custom { table } => {
            if table.len() != grid.len() {
                return Err(Error::InvalidNoise(format!(
                    "custom table has {} entries, grid has {} modes",
                    table.len(),
                    grid.len()
                )));
            }
            table.iter().map(|&v| R::lit(v)).collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::l2_norm;
    use crate::rng::trajectory_stream;

    fn grid() -> Arc<Grid<f64>> {
        Grid::<f64>::build(1, 256, 20.0 * std::f64::consts::PI).unwrap()
    }

    #[test]
    fn gaussian_hs_norm_matches_direct_sum() {
        let g = grid();
        let op = NoiseOperator::new(&g, &NoiseProfile::GaussianCutoff { k0: 2.0, amplitude: 1.0 }, false).unwrap();
        // independent evaluation from the integer mode labels
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        for j in -128i64..128 {
            let k = j as f64 / 10.0;
            let phi = (-k * k / 8.0f64).exp();
            s0 += 2.0 * phi * phi;
            s1 += 2.0 * (1.0 + k * k) * phi * phi;
        }
        assert!((op.hs_norm_l2() - s0.sqrt()).abs() < 1e-10 * s0.sqrt());
        assert!((op.hs_norm_h1() - s1.sqrt()).abs() < 1e-10 * s1.sqrt());
        assert!(op.hs_norm_h1() >= op.hs_norm_l2());
        assert_eq!(op.operator_norm_l2(), 1.0);
        assert!(op.operator_norm_l2() <= op.hs_norm_l2());
    }

    #[test]
    fn zero_operator() {
        let g = grid();
        let op = NoiseOperator::new(&g, &NoiseProfile::SharpCutoff { k_max: 1.0, amplitude: 0.0 }, false).unwrap();
        assert_eq!(op.hs_norm_l2(), 0.0);
        assert_eq!(op.hs_norm_h1(), 0.0);
        assert!(op.f_phi().values().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn identity_multiplier_counts_modes() {
        let g = Grid::<f64>::build(1, 64, 10.0).unwrap();
        let kmax = 2.0 * std::f64::consts::PI * 32.0 / 10.0;
        let op = NoiseOperator::new(&g, &NoiseProfile::SharpCutoff { k_max: kmax, amplitude: 1.0 }, false).unwrap();
        assert!((op.hs_norm_l2().powi(2) - 128.0).abs() < 1e-10);
        let c = NoiseOperator::new(&g, &NoiseProfile::SharpCutoff { k_max: kmax, amplitude: 0.5 }, true).unwrap();
        assert!((c.hs_norm(0.0) - 0.5 * 8.0).abs() < 1e-12);
        assert_eq!(c.operator_norm_l2(), 0.5);
    }

    #[test]
    fn real_output_is_real_and_symmetric() {
        let g = Grid::<f64>::build(1, 32, 10.0).unwrap();
        let table: Vec<f64> = (0..32).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let op = NoiseOperator::new(&g, &NoiseProfile::Custom { table }, true).unwrap();
        for idx in 0..32 {
            assert_eq!(op.multiplier()[idx], op.multiplier()[g.spec().conjugate_index(idx)]);
        }
        let mut rng = trajectory_stream(1, 0);
        let w = op.sample_increment(0.01, &mut rng);
        assert!(w.values().iter().all(|z| z.im.abs() <= 1e-14));
    }

    #[test]
    fn zero_dt_gives_zero_increment() {
        let g = grid();
        let op = NoiseOperator::new(&g, &NoiseProfile::GaussianCutoff { k0: 2.0, amplitude: 1.0 }, false).unwrap();
        let mut rng = trajectory_stream(1, 0);
        assert_eq!(l2_norm(&op.sample_increment(0.0, &mut rng)), 0.0);
    }

    #[test]
    fn f_phi_matches_basis_sum() {
        let g = Grid::<f64>::build(1, 64, 20.0).unwrap();
        let op = NoiseOperator::new(&g, &NoiseProfile::GaussianCutoff { k0: 2.0, amplitude: 1.0 }, true).unwrap();
        let f = op.f_phi();
        // brute force over the real orthonormal basis of point masses
        let h = g.spec().spacing();
        let mut direct = vec![0.0; 64];
        for j in 0..64 {
            let mut e = vec![Complex::new(0.0, 0.0); 64];
            e[j] = Complex::new(1.0 / h.sqrt(), 0.0);
            let pe = op.apply(&Field::from_values(&g, e).unwrap());
            for (acc, z) in direct.iter_mut().zip(pe.values()) {
                *acc += z.re * z.re;
            }
        }
        for site in [0usize, 7, 19, 33, 60] {
            let rel = (direct[site] - f.values()[site].re).abs() / direct[site];
            assert!(rel < 1e-10, "site {site}: {rel}");
        }
        let max = f.values().iter().map(|z| z.re).fold(f64::MIN, f64::max);
        let min = f.values().iter().map(|z| z.re).fold(f64::MAX, f64::min);
        assert!(max - min <= 1e-10 * max);
    }

    #[test]
    fn modes_profile_and_rejections() {
        let g = Grid::<f64>::build(1, 32, 10.0).unwrap();
        let op = NoiseOperator::new(
            &g,
            &NoiseProfile::Modes { modes: vec![ModeAmplitude { mode: [-2, 0], amplitude: 0.7 }] },
            false,
        )
        .unwrap();
        assert_eq!(op.multiplier()[30], 0.7);
        assert!((op.hs_norm_l2() - 0.7 * 2f64.sqrt()).abs() < 1e-15);
        assert!(NoiseOperator::new(&g, &NoiseProfile::Custom { table: vec![1.0; 3] }, false).is_err());
        assert!(NoiseOperator::new(&g, &NoiseProfile::Custom { table: vec![-1.0; 32] }, false).is_err());
        let rough = NoiseOperator::new(&g, &NoiseProfile::SharpCutoff { k_max: 100.0, amplitude: 1.0 }, false).unwrap();
        assert!(rough.check_smoothness(2.0, 10.0).is_err());
    }

    #[test]
    fn increment_second_moment_matches_hs_norm() {
        let g = Grid::<f64>::build(1, 32, 10.0).unwrap();
        for real in [false, true] {
            let op = NoiseOperator::new(&g, &NoiseProfile::GaussianCutoff { k0: 3.0, amplitude: 0.8 }, real).unwrap();
            let mut rng = trajectory_stream(11, real as u64);
            let dt = 0.01;
            let n = 4000;
            let mut acc = 0.0;
            for _ in 0..n {
                acc += l2_norm(&op.sample_increment(dt, &mut rng)).powi(2);
            }
            let expect = dt * op.hs_norm_l2().powi(2);
            let rel = (acc / n as f64 - expect).abs() / expect;
            assert!(rel < 0.05, "real={real}: {rel}");
        }
    }
}
