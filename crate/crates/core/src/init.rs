//! Initial data.

use std::sync::Arc;

use num_complex::Complex;
use rand::Rng;

use crate::grid::{Field, Grid};
use crate::scalar::Real;

/// `amplitude · sech(|x|/width)` centred in the box.
pub fn sech<R: Real>(grid: &Arc<Grid<R>>, amplitude: R, width: R) -> Field<R> {
    Field::from_fn(grid, |x| {
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt() / width;
        Complex::new(amplitude / r.cosh(), R::zero())
    })
}

/// A sum of `bumps` randomly placed, randomly phased Gaussians of width
/// between 5% and 15% of the box.
pub fn random_bumps<R: Real, G: Rng + ?Sized>(grid: &Arc<Grid<R>>, bumps: usize, rng: &mut G) -> Field<R> {
    let l = grid.spec().box_length();
    let dim = grid.dim();
    let mut params = Vec::with_capacity(bumps);
    for _ in 0..bumps {
        let c = [unit(rng) - 0.5, if dim == 2 { unit(rng) - 0.5 } else { 0.0 }];
        let w = 0.05 + 0.1 * unit(rng);
        let a = 0.2 + unit(rng);
        let ph = std::f64::consts::TAU * unit(rng);
        let k = (unit(rng) * 5.0).floor() - 2.0;
        params.push((c, w, a, ph, k));
    }
    Field::from_fn(grid, |x| {
        let mut acc = Complex::new(R::zero(), R::zero());
        for &(c, w, a, ph, k) in &params {
            let mut env = R::lit(a);
            let mut phase = R::lit(ph);
            for d in 0..dim {
                let s = x[d] / l - R::lit(c[d]);
                // sum of periodic images keeps the field smooth across the boundary
                let mut axis = R::zero();
                for j in -2..=2 {
                    let dx = s - s.round() + R::lit(j as f64);
                    axis = axis + (-dx * dx / R::lit(2.0 * w * w)).exp();
                }
                env = env * axis;
                phase = phase + R::lit(std::f64::consts::TAU * k) * x[d] / l;
            }
            acc = acc + Complex::from_polar(env, phase);
        }
        acc
    })
}

fn unit<G: Rng + ?Sized>(rng: &mut G) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::trajectory_stream;

    #[test]
    fn sech_peak() {
        let g = Grid::<f64>::build(1, 64, 20.0).unwrap();
        let u = sech(&g, 2.0, 1.0);
        let peak = u.values().iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!((peak - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bumps_are_reproducible_and_finite() {
        let g = Grid::<f64>::build(2, 16, 10.0).unwrap();
        let a = random_bumps(&g, 3, &mut trajectory_stream(1, 2));
        let b = random_bumps(&g, 3, &mut trajectory_stream(1, 2));
        assert_eq!(a, b);
        assert!(a.is_finite());
    }
}
