//! Scalar observables (mass, Hamiltonian, `Ψ`, modified Hamiltonian) and the
//! explicit constants that control the `H¹` exit analysis.

use std::sync::Arc;

use num_complex::Complex;
use serde::Serialize;
use thiserror::Error;

use crate::error::{invalid, Result};
use crate::grid::{gradient_l2_sq, l2_norm_sq, Field, Grid};
use crate::scalar::Real;

/// `N(u) = ∫|u|²`.
pub fn mass<R: Real>(u: &Field<R>) -> R {
    l2_norm_sq(u)
}

/// `∫|u|^{2σ+2}`.
pub fn potential_integral<R: Real>(u: &Field<R>, sigma: R) -> R {
    let e = sigma + R::one();
    u.values()
        .iter()
        .fold(R::zero(), |acc, z| acc + z.norm_sqr().powf(e))
        * u.grid().cell_volume()
}

/// `H(u) = ½‖∇u‖² − λ/(2σ+2) ∫|u|^{2σ+2}`.
pub fn hamiltonian<R: Real>(u: &Field<R>, lambda: R, sigma: R) -> R {
    let two = R::lit(2.0);
    gradient_l2_sq(u) / two - lambda / (two * sigma + two) * potential_integral(u, sigma)
}

/// `Ψ(u) = ½‖∇u‖² − (λ/2) ∫|u|^{2σ+2}`, the dissipation rate partner of `H`.
pub fn psi<R: Real>(u: &Field<R>, lambda: R, sigma: R) -> R {
    let two = R::lit(2.0);
    gradient_l2_sq(u) / two - lambda / two * potential_integral(u, sigma)
}

/// Explicit constants of the `H¹` analysis for a given `(σ, d, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalysisConstants<R> {
    pub sigma: R,
    pub dim: usize,
    pub gn_constant_c: R,
    /// `β(σ,d)`, clamped below by 2.
    pub beta: R,
    /// `c(σ) = 3(σ+1)/(4σ+3)`.
    pub c_sigma: R,
    /// `m(σ,d) = 1 + 2σ/(2−σd)`.
    pub m_sigma_d: R,
    /// `2 + 4σ/(2−σd)`.
    pub mass_exponent: R,
}

fn check_regime<R: Real>(sigma: R, dim: usize) -> Result<()> {
    if !(sigma > R::zero()) {
        return Err(invalid("sigma", format!("{sigma} must be positive")));
    }
    if !(sigma * R::lit(dim as f64) < R::lit(2.0)) {
        return Err(invalid("sigma", "sigma*dim must be < 2"));
    }
    Ok(())
}

pub fn analysis_constants<R: Real>(sigma: R, dim: usize, gn_constant_c: R) -> Result<AnalysisConstants<R>> {
    check_regime(sigma, dim)?;
    if !(gn_constant_c > R::zero()) {
        return Err(invalid("gn_constant_c", "must be positive"));
    }
    let two = R::lit(2.0);
    let d = R::lit(dim as f64);
    let gap = two - sigma * d;
    let raw_beta = two * sigma * gap
        / ((sigma + two) * gap + two * sigma * (R::lit(4.0) * sigma + R::lit(3.0)));
    Ok(AnalysisConstants {
        sigma,
        dim,
        gn_constant_c,
        beta: raw_beta.max(two),
        c_sigma: R::lit(3.0) * (sigma + R::one()) / (R::lit(4.0) * sigma + R::lit(3.0)),
        m_sigma_d: R::one() + two * sigma / gap,
        mass_exponent: two + R::lit(4.0) * sigma / gap,
    })
}

impl<R: Real> AnalysisConstants<R> {
    /// Constants with `C` taken from [`gn_constant`] on `grid` and raised, if
    /// needed, so that the Young form `∫|u|^{2σ+2}/(2σ+2) ≤ ‖∇u‖²/4 + C‖u‖^{m.e.}`
    /// also holds.
    pub fn for_grid(sigma: R, grid: &Arc<Grid<R>>) -> Result<Self> {
        let gn = gn_constant(sigma, grid, &GnOptions::default()).map_err(|e| {
            crate::error::Error::NotConverged {
                iterations: e.best.iterations,
                best_value: e.best.constant.as_f64(),
            }
        })?;
        analysis_constants(sigma, grid.dim(), htilde_constant(gn.constant, sigma, grid.dim()))
    }
}

/// `C_eff = max(C, K(C))` where `K` is the constant produced by Young's
/// inequality from the Gagliardo–Nirenberg form.
pub fn htilde_constant<R: Real>(gn_c: R, sigma: R, dim: usize) -> R {
    gn_c.max(young_constant(gn_c, sigma, dim))
}

/// `K` with `C a^{2σ+2−σd} b^{σd} ≤ b²/4 + K a^{2+4σ/(2−σd)}` for all `a, b ≥ 0`.
pub fn young_constant<R: Real>(gn_c: R, sigma: R, dim: usize) -> R {
    let sd = sigma * R::lit(dim as f64);
    let p = R::lit(2.0) / sd;
    let q = R::lit(2.0) / (R::lit(2.0) - sd);
    let eta = (p / R::lit(4.0)).powf(R::one() / p);
    gn_c.powf(q) / (q * eta.powf(q))
}

/// `H̃(u) = H(u) + β C ‖u‖^{2+4σ/(2−σd)}`.
pub fn modified_hamiltonian<R: Real>(u: &Field<R>, consts: &AnalysisConstants<R>, lambda: R) -> R {
    hamiltonian(u, lambda, consts.sigma)
        + consts.beta * consts.gn_constant_c * mass_power(u, consts)
}

/// `‖u‖^{2+4σ/(2−σd)}`.
pub fn mass_power<R: Real>(u: &Field<R>, consts: &AnalysisConstants<R>) -> R {
    mass(u).powf(consts.mass_exponent / R::lit(2.0))
}

/// `b(ρ,σ,d) = 8ρ + (2ρ/(Cσ))^{1/(1+2σ/(2−σd))}`, the `H¹` bound on
/// processes stopped before `H̃` reaches `2ρ`.
pub fn b_rho<R: Real>(rho: R, consts: &AnalysisConstants<R>) -> R {
    let two = R::lit(2.0);
    R::lit(8.0) * rho
        + (two * rho / (consts.gn_constant_c * consts.sigma)).powf(R::one() / consts.m_sigma_d)
}

/// `T(L,ρ) = ρ²/(50 ‖Φ‖²_{L₂^{0,0}} L)`.
pub fn t_l_rho_l2<R: Real>(rho: R, l: R, hs0: R) -> Result<R> {
    if !(rho > R::zero()) || !(l > R::zero()) || !(hs0 > R::zero()) {
        return Err(invalid("rho/L/hs0", "must all be positive"));
    }
    Ok(rho * rho / (R::lit(50.0) * hs0 * hs0 * l))
}

/// `T(L,ρ) = (1/(4αc(σ))) log(αc(σ)ρ² / (10 b² c(s,∞)² ‖Φ‖²_{L₂^{0,s}} L))`.
/// Fails when the logarithm's argument is at most 1 (empty time window).
pub fn t_l_rho_mult<R: Real>(
    rho: R,
    l: R,
    alpha: R,
    consts: &AnalysisConstants<R>,
    hs_s: R,
    c_s_inf: R,
) -> Result<R> {
    if !(rho > R::zero()) || !(l > R::zero()) || !(alpha > R::zero()) {
        return Err(invalid("rho/L/alpha", "must all be positive"));
    }
    let ac = alpha * consts.c_sigma;
    let b = b_rho(rho, consts);
    let arg = ac * rho * rho / (R::lit(10.0) * b * b * c_s_inf * c_s_inf * hs_s * hs_s * l);
    if !(arg > R::one()) {
        return Err(crate::error::Error::Precondition(format!(
            "log argument {arg} <= 1: no admissible time window"
        )));
    }
    Ok(arg.ln() / (R::lit(4.0) * ac))
}

/// A valid constant for `‖u‖_{W^{1,∞}} ≤ c ‖u‖_{H^s}` on the grid, from
/// Cauchy–Schwarz over the Fourier modes.
pub fn sobolev_embedding_constant<R: Real>(grid: &Grid<R>, s: R) -> R {
    let sum = grid.k_squared().iter().fold(R::zero(), |acc, &k2| {
        let w = R::one() + k2.sqrt();
        acc + w * w / (R::one() + k2).powf(s)
    });
    (sum / grid.volume()).sqrt()
}

/// Gagliardo–Nirenberg ratio
/// `‖u‖_{2σ+2}^{2σ+2} / ((2σ+2) ‖u‖₂^{2σ+2−σd} ‖∇u‖₂^{σd})`.
pub fn gn_ratio<R: Real>(u: &Field<R>, sigma: R) -> R {
    let two = R::lit(2.0);
    let sd = sigma * R::lit(u.grid().dim() as f64);
    let m2 = mass(u);
    let g = gradient_l2_sq(u);
    let p = potential_integral(u, sigma);
    p / ((two * sigma + two) * m2.powf((two * sigma + two - sd) / two) * g.powf(sd / two))
}

#[derive(Debug, Clone)]
pub struct GnOptions {
    pub max_iterations: usize,
    /// Stop once `⟨∇ log J, (1−Δ)^{-1} ∇ log J⟩` falls below this.
    pub gradient_tolerance: f64,
    /// Width of the Gaussian seed as a fraction of the box length.
    pub seed_width_fraction: f64,
}

impl Default for GnOptions {
    fn default() -> Self {
        Self {
            max_iterations: 20_000,
            gradient_tolerance: 1e-20,
            seed_width_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GnEstimate<R: Real> {
    pub constant: R,
    pub maximizer: Field<R>,
    pub iterations: usize,
}

#[derive(Debug, Error)]
#[error("Gagliardo–Nirenberg ascent did not converge after {} iterations", .best.iterations)]
pub struct GnNotConverged<R: Real> {
    pub best: GnEstimate<R>,
}

/// Maximizes [`gn_ratio`] over real grid fields by Sobolev-preconditioned
/// gradient ascent from a centered Gaussian, renormalizing the mass after
/// each step (the ratio is homogeneous of degree 0).
pub fn gn_constant<R: Real>(
    sigma: R,
    grid: &Arc<Grid<R>>,
    opts: &GnOptions,
) -> std::result::Result<GnEstimate<R>, GnNotConverged<R>> {
    let two = R::lit(2.0);
    let dim = grid.dim();
    let sd = sigma * R::lit(dim as f64);
    let a = two * sigma + two - sd;
    let width = grid.spec().box_length() * R::lit(opts.seed_width_fraction);
    let mut u = Field::gaussian(grid, R::one(), width);
    u = u.scaled(R::one() / mass(&u).sqrt());
    let log_j = |u: &Field<R>| gn_ratio(u, sigma).ln();
    let mut current = log_j(&u);
    let mut step = R::lit(0.1);
    let tol = R::lit(opts.gradient_tolerance);

    let mut stalled = 0;
    for it in 0..opts.max_iterations {
        if stalled >= 20 {
            // the ratio no longer moves at working precision
            return Ok(GnEstimate {
                constant: current.exp(),
                maximizer: u,
                iterations: it,
            });
        }
        let m2 = mass(&u);
        let spec = u.spectrum();
        let g = crate::grid::spectral_gradient_sq(grid, &spec);
        let p = potential_integral(&u, sigma);
        let lap = crate::grid::laplacian(&u);
        let grad: Vec<Complex<R>> = u
            .values()
            .iter()
            .zip(lap.values())
            .map(|(&z, &l)| {
                z * ((two * sigma + two) * z.norm_sqr().powf(sigma) / p - a / m2) + l * (sd / g)
            })
            .collect();
        // Sobolev gradient (1−Δ)^{-1} grad
        let mut dir = grad.clone();
        grid.fft_forward(&mut dir);
        for (z, &k2) in dir.iter_mut().zip(grid.k_squared()) {
            *z = *z / (R::one() + k2);
        }
        grid.fft_inverse(&mut dir);
        for z in dir.iter_mut() {
            z.im = R::zero();
        }
        let slope = crate::grid::inner_raw(&grad, &dir) * grid.cell_volume();
        if slope < tol {
            return Ok(GnEstimate {
                constant: current.exp(),
                maximizer: u,
                iterations: it,
            });
        }
        let dir = Field::from_raw(grid, dir);
        let mut accepted = false;
        for _ in 0..40 {
            let trial = u.axpy(Complex::new(step, R::zero()), &dir);
            let trial = trial.scaled(R::one() / mass(&trial).sqrt());
            let value = log_j(&trial);
            if value.is_finite() && value >= current + R::lit(1e-4) * step * slope {
                stalled = if value - current <= R::lit(1e-12) * current.abs().max(R::one()) {
                    stalled + 1
                } else {
                    0
                };
                u = trial;
                current = value;
                accepted = true;
                step = step * two;
                break;
            }
            step = step / two;
        }
        if !accepted {
            // no ascent direction left at working precision
            return Ok(GnEstimate {
                constant: current.exp(),
                maximizer: u,
                iterations: it,
            });
        }
    }
    Err(GnNotConverged {
        best: GnEstimate {
            constant: current.exp(),
            maximizer: u,
            iterations: opts.max_iterations,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{gradient_l2, l2_norm};

    #[test]
    fn constants_for_cubic_1d() {
        let c = analysis_constants::<f64>(1.0, 1, 0.5).unwrap();
        assert_eq!(c.beta, 2.0);
        assert!((c.c_sigma - 6.0 / 7.0).abs() < 1e-15);
        assert!((c.m_sigma_d - 3.0).abs() < 1e-15);
        assert!((c.mass_exponent - 6.0).abs() < 1e-15);
        let half = analysis_constants::<f64>(0.5, 1, 0.5).unwrap();
        assert!((half.c_sigma - 0.9).abs() < 1e-15);
        let tiny = analysis_constants::<f64>(1e-9, 1, 0.5).unwrap();
        assert!((tiny.m_sigma_d - 1.0).abs() < 1e-8);
        assert!((tiny.mass_exponent - 2.0).abs() < 1e-8);
        assert!(analysis_constants::<f64>(2.0, 1, 0.5).is_err());
        assert!(analysis_constants::<f64>(1.0, 2, 0.5).is_err());
    }

    #[test]
    fn invariant_ranges_hold_across_regime() {
        for (sigma, dim) in [(0.1, 1), (0.5, 1), (1.0, 1), (1.9, 1), (0.3, 2), (0.9, 2)] {
            let c = analysis_constants::<f64>(sigma, dim, 0.2).unwrap();
            assert!(c.beta >= 2.0);
            assert!(c.c_sigma > 0.0 && c.c_sigma < 1.0);
            assert!(c.m_sigma_d > 1.0);
            assert!(c.mass_exponent > 2.0);
        }
    }

    #[test]
    fn time_windows() {
        assert!((t_l_rho_l2::<f64>(0.5, 1.0, 1.0).unwrap() - 0.005).abs() < 1e-15);
        let t1 = t_l_rho_l2::<f64>(0.5, 2.0, 1.0).unwrap();
        let t2 = t_l_rho_l2::<f64>(1.0, 2.0, 1.0).unwrap();
        assert!((t2 / t1 - 4.0).abs() < 1e-12);
        let c = analysis_constants::<f64>(1.0, 1, 0.2).unwrap();
        // argument ≤ 1 when the noise is strong
        assert!(t_l_rho_mult::<f64>(1.0, 1.0, 0.1, &c, 10.0, 1.0).is_err());
        let t = t_l_rho_mult::<f64>(1.0, 1e-6, 1.0, &c, 0.1, 1.0).unwrap();
        assert!(t > 0.0);
    }

    #[test]
    fn b_rho_cubic_exponent() {
        let c = analysis_constants::<f64>(1.0, 1, 0.25).unwrap();
        let rho = 0.3;
        let expect = 8.0 * rho + (2.0 * rho / 0.25f64).powf(1.0 / 3.0);
        assert!((b_rho::<f64>(rho, &c) - expect).abs() < 1e-14);
    }

    #[test]
    fn young_constant_for_sigma_d_one_is_square() {
        assert!((young_constant::<f64>(0.3, 1.0, 1) - 0.09).abs() < 1e-15);
        assert!((young_constant::<f64>(0.3, 0.5, 2) - 0.09).abs() < 1e-15);
        // the defining inequality on a sweep of (a, b)
        for &(sigma, dim) in &[(0.5, 1usize), (1.0, 1), (1.5, 1), (0.6, 2)] {
            let c = 0.17;
            let k = young_constant::<f64>(c, sigma, dim);
            let sd = sigma * dim as f64;
            for i in 1..40 {
                for j in 1..40 {
                    let (a, b) = (0.1 * i as f64, 0.15 * j as f64);
                    let lhs = c * a.powf(2.0 * sigma + 2.0 - sd) * b.powf(sd);
                    let rhs = b * b / 4.0 + k * a.powf(2.0 + 4.0 * sigma / (2.0 - sd));
                    assert!(lhs <= rhs * (1.0 + 1e-12), "{sigma} {dim} {a} {b}");
                }
            }
        }
    }

    #[test]
    fn mass_and_hamiltonian_basics() {
        let g = Grid::<f64>::build(1, 128, 40.0).unwrap();
        let u = Field::gaussian(&g, 1.0, 2.0);
        let u = u.scaled(1.0 / l2_norm(&u));
        assert!((mass(&u) - 1.0).abs() < 1e-12);
        assert!((mass(&u.scaled(2.0)) - 4.0 * mass(&u)).abs() < 1e-14);
        let zero = Field::zeros(&g);
        assert_eq!(hamiltonian(&zero, 1.0, 1.0), 0.0);
        assert_eq!(psi(&zero, 1.0, 1.0), 0.0);
        assert!(hamiltonian(&u.scaled(3.0), -1.0, 1.0) >= 0.0);
        assert!(psi(&u.scaled(3.0), -1.0, 1.0) >= 0.0);
        let p = potential_integral(&u, 1.0);
        let gsq = gradient_l2(&u).powi(2);
        assert!((psi(&u, 1.0, 1.0) - (gsq / 2.0 - p / 2.0)).abs() < 1e-14);
    }

    #[test]
    fn plane_wave_hamiltonian() {
        let l = 10.0;
        let g = Grid::<f64>::build(1, 64, l).unwrap();
        let k = 2.0 * std::f64::consts::PI * 3.0 / l;
        let amp = 0.8;
        let u = Field::from_fn(&g, |x| Complex::from_polar(amp, k * x[0]));
        for lambda in [1.0, -1.0] {
            let sigma = 1.0;
            let expect = 0.5 * k * k * amp * amp * l
                - lambda / (2.0 * sigma + 2.0) * amp.powf(2.0 * sigma + 2.0) * l;
            assert!((hamiltonian(&u, lambda, sigma) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gn_ratio_is_scale_invariant_at_optimum() {
        let g = Grid::<f64>::build(1, 256, 20.0 * std::f64::consts::PI).unwrap();
        let est = gn_constant(1.0, &g, &GnOptions::default()).unwrap();
        let r = gn_ratio(&est.maximizer, 1.0);
        for c in [0.5, 2.0] {
            let rc = gn_ratio(&est.maximizer.scaled(c), 1.0);
            assert!((rc - r).abs() < 1e-10 * r);
        }
        assert!((r - est.constant).abs() < 1e-12 * r);
    }
}
