//! Periodic lattices, complex fields on them, and the spectral operators
//! (free Schrödinger group, gradients, norms) every other module builds on.
//!
//! Sign convention: the linear part is `i ∂_t u = Δu`, so the Fourier mode
//! `e^{ikx}` evolves as `e^{ikx + i|k|² t}`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Validated description of a periodic box `[-L/2, L/2)^d` sampled on `n^d` sites.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec<R> {
    dim: usize,
    points_per_axis: usize,
    box_length: R,
    spacing: R,
}

impl<R: Real> GridSpec<R> {
    pub fn new(dim: usize, points_per_axis: usize, box_length: R) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidGrid(format!(
                "dimension {dim} unsupported (expected 1 or 2)"
            )));
        }
        if points_per_axis < 8 || !points_per_axis.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "points_per_axis = {points_per_axis} must be a power of two and at least 8"
            )));
        }
        if points_per_axis > u16::MAX as usize {
            return Err(Error::InvalidGrid(format!(
                "points_per_axis = {points_per_axis} exceeds {}",
                u16::MAX
            )));
        }
        if !(box_length > R::zero()) || !box_length.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "box_length = {box_length} must be positive and finite"
            )));
        }
        let spacing = box_length / R::lit(points_per_axis as f64);
        Ok(Self {
            dim,
            points_per_axis,
            box_length,
            spacing,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_axis(&self) -> usize {
        self.points_per_axis
    }

    pub fn box_length(&self) -> R {
        self.box_length
    }

    pub fn spacing(&self) -> R {
        self.spacing
    }

    /// Number of lattice sites (equivalently Fourier modes).
    pub fn mode_count(&self) -> usize {
        self.points_per_axis.pow(self.dim as u32)
    }

    /// Quadrature weight `spacing^d`.
    pub fn cell_volume(&self) -> R {
        self.spacing.powi(self.dim as i32)
    }

    /// Box volume `L^d`.
    pub fn volume(&self) -> R {
        self.box_length.powi(self.dim as i32)
    }

    /// Wavenumbers `2πj/L` along one axis in standard FFT ordering.
    pub fn axis_wavenumbers(&self) -> Vec<R> {
        let n = self.points_per_axis;
        let base = R::lit(2.0) * R::PI() / self.box_length;
        (0..n)
            .map(|j| {
                let signed = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
                base * R::lit(signed)
            })
            .collect()
    }

    /// Index of the mode `-k` for the mode stored at `idx`.
    pub fn conjugate_index(&self, idx: usize) -> usize {
        let n = self.points_per_axis;
        let neg = |j: usize| (n - j) % n;
        match self.dim {
            1 => neg(idx),
            _ => {
                let (iy, ix) = (idx / n, idx % n);
                neg(iy) * n + neg(ix)
            }
        }
    }

    /// Integer mode labels (signed) for the mode stored at `idx`.
    pub fn mode_label(&self, idx: usize) -> [i64; 2] {
        let n = self.points_per_axis;
        let signed = |j: usize| {
            if j <= n / 2 {
                j as i64
            } else {
                j as i64 - n as i64
            }
        };
        match self.dim {
            1 => [signed(idx), 0],
            _ => [signed(idx % n), signed(idx / n)],
        }
    }

    /// Storage index of the mode with signed integer labels `(jx, jy)`.
    pub fn mode_index(&self, label: [i64; 2]) -> usize {
        let n = self.points_per_axis as i64;
        let wrap = |j: i64| j.rem_euclid(n) as usize;
        match self.dim {
            1 => wrap(label[0]),
            _ => wrap(label[1]) * self.points_per_axis + wrap(label[0]),
        }
    }
}

/// Validates and returns a grid description.
pub fn make_grid<R: Real>(dim: usize, points_per_axis: usize, box_length: R) -> Result<GridSpec<R>> {
    GridSpec::new(dim, points_per_axis, box_length)
}

/// A grid with its precomputed spectral tables and FFT plans, shared by reference.
pub struct Grid<R: Real> {
    spec: GridSpec<R>,
    k_axis: Vec<R>,
    k_squared: Vec<R>,
    forward: Arc<dyn Fft<R>>,
    inverse: Arc<dyn Fft<R>>,
}

impl<R: Real> fmt::Debug for Grid<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid").field("spec", &self.spec).finish()
    }
}

impl<R: Real> PartialEq for Grid<R> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

impl<R: Real> Grid<R> {
    pub fn new(spec: GridSpec<R>) -> Arc<Self> {
        let n = spec.points_per_axis;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let k_axis = spec.axis_wavenumbers();
        let k_squared = match spec.dim {
            1 => k_axis.iter().map(|&k| k * k).collect(),
            _ => (0..n * n)
                .map(|idx| {
                    let (ky, kx) = (k_axis[idx / n], k_axis[idx % n]);
                    kx * kx + ky * ky
                })
                .collect(),
        };
        Arc::new(Self {
            spec,
            k_axis,
            k_squared,
            forward,
            inverse,
        })
    }

    /// Builds and shares a grid in one call.
    pub fn build(dim: usize, points_per_axis: usize, box_length: R) -> Result<Arc<Self>> {
        Ok(Self::new(GridSpec::new(dim, points_per_axis, box_length)?))
    }

    pub fn spec(&self) -> &GridSpec<R> {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn n(&self) -> usize {
        self.spec.points_per_axis
    }

    pub fn len(&self) -> usize {
        self.k_squared.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k_squared.is_empty()
    }

    pub fn cell_volume(&self) -> R {
        self.spec.cell_volume()
    }

    pub fn volume(&self) -> R {
        self.spec.volume()
    }

    /// `|k|²` per mode in storage order.
    pub fn k_squared(&self) -> &[R] {
        &self.k_squared
    }

    /// Components of the wave vector of mode `idx` (`[kx, ky]`, `ky = 0` in 1D).
    pub fn wavevector(&self, idx: usize) -> [R; 2] {
        let n = self.n();
        match self.dim() {
            1 => [self.k_axis[idx], R::zero()],
            _ => [self.k_axis[idx % n], self.k_axis[idx / n]],
        }
    }

    /// Physical coordinates of site `idx` in `[-L/2, L/2)^d`.
    pub fn position(&self, idx: usize) -> [R; 2] {
        let n = self.n();
        let h = self.spec.spacing;
        let origin = -self.spec.box_length / R::lit(2.0);
        let coord = |j: usize| origin + h * R::lit(j as f64);
        match self.dim() {
            1 => [coord(idx), R::zero()],
            _ => [coord(idx % n), coord(idx / n)],
        }
    }

    /// Unnormalized forward DFT in place (`û_k = Σ_x u_x e^{-ikx}`).
    pub fn fft_forward(&self, buf: &mut [Complex<R>]) {
        self.transform(buf, &self.forward);
    }

    /// Inverse DFT in place, normalized so that it inverts [`Grid::fft_forward`].
    pub fn fft_inverse(&self, buf: &mut [Complex<R>]) {
        self.transform(buf, &self.inverse);
        let scale = R::one() / R::lit(self.len() as f64);
        for z in buf.iter_mut() {
            *z = *z * scale;
        }
    }

    fn transform(&self, buf: &mut [Complex<R>], plan: &Arc<dyn Fft<R>>) {
        debug_assert_eq!(buf.len(), self.len());
        plan.process(buf);
        if self.dim() == 2 {
            let n = self.n();
            transpose_square(buf, n);
            plan.process(buf);
            transpose_square(buf, n);
        }
    }
}

fn transpose_square<T>(buf: &mut [T], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            buf.swap(i * n + j, j * n + i);
        }
    }
}

/// Complex field sampled on a shared grid.
#[derive(Clone)]
pub struct Field<R: Real> {
    grid: Arc<Grid<R>>,
    values: Vec<Complex<R>>,
}

impl<R: Real> fmt::Debug for Field<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Field")
            .field("grid", self.grid.spec())
            .field("len", &self.values.len())
            .finish()
    }
}

impl<R: Real> PartialEq for Field<R> {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.values == other.values
    }
}

impl<R: Real> Field<R> {
    pub fn zeros(grid: &Arc<Grid<R>>) -> Self {
        Self {
            grid: Arc::clone(grid),
            values: vec![Complex::new(R::zero(), R::zero()); grid.len()],
        }
    }

    /// Wraps site values; rejects wrong lengths and non-finite entries.
    pub fn from_values(grid: &Arc<Grid<R>>, values: Vec<Complex<R>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "field has {} values but grid has {} sites",
                values.len(),
                grid.len()
            )));
        }
        if let Some(pos) = values.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite {
                step: pos,
                time: f64::NAN,
            });
        }
        Ok(Self {
            grid: Arc::clone(grid),
            values,
        })
    }

    /// Samples `f(x, y)` at every site.
    pub fn from_fn(grid: &Arc<Grid<R>>, f: impl Fn([R; 2]) -> Complex<R>) -> Self {
        let values = (0..grid.len()).map(|idx| f(grid.position(idx))).collect();
        Self {
            grid: Arc::clone(grid),
            values,
        }
    }

    /// Builds a field from Fourier coefficients in the [`Grid::fft_forward`] convention.
    pub fn from_spectrum(grid: &Arc<Grid<R>>, mut spectrum: Vec<Complex<R>>) -> Result<Self> {
        if spectrum.len() != grid.len() {
            return Err(Error::GridMismatch("spectrum length".into()));
        }
        grid.fft_inverse(&mut spectrum);
        Self::from_values(grid, spectrum)
    }

    /// Centered Gaussian `amplitude · exp(-|x|²/(2 width²))`.
    pub fn gaussian(grid: &Arc<Grid<R>>, amplitude: R, width: R) -> Self {
        let two = R::lit(2.0);
        Self::from_fn(grid, |x| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            Complex::new(amplitude * (-r2 / (two * width * width)).exp(), R::zero())
        })
    }

    pub(crate) fn from_raw(grid: &Arc<Grid<R>>, values: Vec<Complex<R>>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self {
            grid: Arc::clone(grid),
            values,
        }
    }

    pub fn grid(&self) -> &Arc<Grid<R>> {
        &self.grid
    }

    pub fn values(&self) -> &[Complex<R>] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Complex<R>] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex<R>> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || self.grid == other.grid
    }

    /// Fourier coefficients (unnormalized forward DFT).
    pub fn spectrum(&self) -> Vec<Complex<R>> {
        let mut buf = self.values.clone();
        self.grid.fft_forward(&mut buf);
        buf
    }

    pub fn scaled(&self, c: R) -> Self {
        self.map(|z| z * c)
    }

    pub fn map(&self, f: impl Fn(Complex<R>) -> Complex<R>) -> Self {
        Self {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|&z| f(z)).collect(),
        }
    }

    /// `self + c · other`.
    pub fn axpy(&self, c: Complex<R>, other: &Self) -> Self {
        assert!(self.same_grid(other), "fields live on different grids");
        Self {
            grid: Arc::clone(&self.grid),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a + c * b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.axpy(Complex::new(-R::one(), R::zero()), other)
    }

    /// Real `L²` inner product `Re ∫ u v̄ dx`.
    pub fn inner(&self, other: &Self) -> R {
        assert!(self.same_grid(other), "fields live on different grids");
        inner_raw(&self.values, &other.values) * self.grid.cell_volume()
    }

    /// Normalized `L²` coordinate of mode `idx`: `(√V/N) û_idx`, so that the
    /// squared moduli over all modes sum to the squared `L²` norm.
    pub fn modal_coefficient(spectrum: &[Complex<R>], grid: &Grid<R>, idx: usize) -> Complex<R> {
        spectrum[idx] * (grid.volume().sqrt() / R::lit(grid.len() as f64))
    }
}

pub(crate) fn inner_raw<R: Real>(a: &[Complex<R>], b: &[Complex<R>]) -> R {
    a.iter()
        .zip(b)
        .fold(R::zero(), |acc, (x, y)| acc + x.re * y.re + x.im * y.im)
}

/// `U(t)u`: the free Schrödinger group, exact in Fourier space.
pub fn apply_free_group<R: Real>(u: &Field<R>, t: R) -> Field<R> {
    let grid = u.grid();
    let mut buf = u.spectrum();
    for (z, &k2) in buf.iter_mut().zip(grid.k_squared()) {
        *z = *z * Complex::from_polar(R::one(), k2 * t);
    }
    grid.fft_inverse(&mut buf);
    Field::from_raw(grid, buf)
}

/// Discrete `L²` norm, `(Σ |u|² h^d)^{1/2}`.
pub fn l2_norm<R: Real>(u: &Field<R>) -> R {
    l2_norm_sq(u).sqrt()
}

pub(crate) fn l2_norm_sq<R: Real>(u: &Field<R>) -> R {
    u.values().iter().fold(R::zero(), |acc, z| acc + z.norm_sqr()) * u.grid().cell_volume()
}

/// `L²` norm evaluated on the Fourier side (Parseval).
pub fn spectral_l2_norm<R: Real>(u: &Field<R>) -> R {
    let grid = u.grid();
    let sum = u.spectrum().iter().fold(R::zero(), |acc, z| acc + z.norm_sqr());
    (sum * grid.cell_volume() / R::lit(grid.len() as f64)).sqrt()
}

/// `‖∇u‖_{L²}` via the spectral multiplier `|k|`.
pub fn gradient_l2<R: Real>(u: &Field<R>) -> R {
    gradient_l2_sq(u).sqrt()
}

pub fn gradient_l2_sq<R: Real>(u: &Field<R>) -> R {
    spectral_gradient_sq(u.grid(), &u.spectrum())
}

pub(crate) fn spectral_gradient_sq<R: Real>(grid: &Grid<R>, spectrum: &[Complex<R>]) -> R {
    let sum = spectrum
        .iter()
        .zip(grid.k_squared())
        .fold(R::zero(), |acc, (z, &k2)| acc + k2 * z.norm_sqr());
    sum * grid.cell_volume() / R::lit(grid.len() as f64)
}

/// `‖u‖_{H¹} = (‖u‖² + ‖∇u‖²)^{1/2}`.
pub fn h1_norm<R: Real>(u: &Field<R>) -> R {
    (l2_norm_sq(u) + gradient_l2_sq(u)).sqrt()
}

/// Discrete `L^p` norm for `p ≥ 1`.
pub fn lp_norm<R: Real>(u: &Field<R>, p: R) -> Result<R> {
    if !(p >= R::one()) {
        return Err(crate::error::invalid("p", format!("{p} < 1")));
    }
    let sum = u
        .values()
        .iter()
        .fold(R::zero(), |acc, z| acc + z.norm().powf(p));
    Ok((sum * u.grid().cell_volume()).powf(R::one() / p))
}

/// `Δu` computed spectrally.
pub fn laplacian<R: Real>(u: &Field<R>) -> Field<R> {
    let grid = u.grid();
    let mut buf = u.spectrum();
    for (z, &k2) in buf.iter_mut().zip(grid.k_squared()) {
        *z = *z * (-k2);
    }
    grid.fft_inverse(&mut buf);
    Field::from_raw(grid, buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1(n: usize, l: f64) -> Arc<Grid<f64>> {
        Grid::<f64>::build(1, n, l).unwrap()
    }

    fn plane_wave(grid: &Arc<Grid<f64>>, mode: i64, amp: f64) -> (Field<f64>, f64) {
        let k = 2.0 * std::f64::consts::PI * mode as f64 / grid.spec().box_length();
        (
            Field::from_fn(grid, |x| Complex::from_polar(amp, k * x[0])),
            k,
        )
    }

    #[test]
    fn grid_spacing_and_mode_count() {
        let g = make_grid(1, 256, 2.0 * std::f64::consts::PI * 10.0).unwrap();
        assert!((g.spacing() - 0.2454369260617026).abs() < 1e-12);
        assert_eq!(g.spacing(), g.box_length() / 256.0);
        let g2 = make_grid(2, 64, 20.0).unwrap();
        assert_eq!(g2.mode_count(), 4096);
    }

    #[test]
    fn grid_rejects_bad_sizes() {
        assert!(make_grid(1, 7, 1.0).is_err());
        assert!(make_grid(1, 4, 1.0).is_err());
        assert!(make_grid(3, 16, 1.0).is_err());
        assert!(make_grid(1, 16, -1.0).is_err());
        assert!(make_grid(0, 16, 1.0).is_err());
    }

    #[test]
    fn wavenumbers_follow_fft_order() {
        let g = make_grid(1, 8, 2.0 * std::f64::consts::PI).unwrap();
        let k = g.axis_wavenumbers();
        let expect = [0.0, 1.0, 2.0, 3.0, 4.0, -3.0, -2.0, -1.0];
        for (a, b) in k.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(g.conjugate_index(1), 7);
        assert_eq!(g.conjugate_index(4), 4);
        assert_eq!(g.mode_index([-1, 0]), 7);
    }

    #[test]
    fn free_group_on_eigenmode() {
        let g = grid1(64, 20.0);
        let (u, k) = plane_wave(&g, 3, 1.0);
        let v = apply_free_group(&u, 0.7);
        for (a, b) in v.values().iter().zip(u.values()) {
            let expect = *b * Complex::from_polar(1.0, 0.7 * k * k);
            assert!((a - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn free_group_identity_at_zero() {
        let g = grid1(32, 10.0);
        let u = Field::gaussian(&g, 1.0, 1.0);
        let v = apply_free_group(&u, 0.0);
        for (a, b) in v.values().iter().zip(u.values()) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn constant_field_norm() {
        let g = grid1(32, 10.0);
        let u = Field::from_fn(&g, |_| Complex::new(3.0, 4.0));
        assert!((l2_norm(&u) - 5.0 * 10f64.sqrt()).abs() < 1e-12);
        assert!(gradient_l2(&u) < 1e-12);
    }

    #[test]
    fn plane_wave_gradient() {
        let g = grid1(64, 20.0);
        let (u, k) = plane_wave(&g, 5, 0.3);
        assert!((gradient_l2(&u) - k.abs() * l2_norm(&u)).abs() < 1e-12);
        let h1 = h1_norm(&u);
        assert!((h1 * h1 - l2_norm(&u).powi(2) - gradient_l2(&u).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn normalized_gaussian_has_unit_norm() {
        let g = grid1(256, 20.0 * std::f64::consts::PI);
        let u = Field::gaussian(&g, 1.0, 2.0);
        let u = u.scaled(1.0 / l2_norm(&u));
        assert!((l2_norm(&u) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lp_norm_of_constant() {
        let g = grid1(16, 2.0);
        let u = Field::from_fn(&g, |_| Complex::new(2.0, 0.0));
        let p4 = lp_norm(&u, 4.0).unwrap();
        assert!((p4 - 2.0 * 2f64.powf(0.25)).abs() < 1e-12);
        assert!(lp_norm(&u, 0.5).is_err());
    }

    #[test]
    fn two_dimensional_fft_roundtrip_and_laplacian() {
        let g = Grid::<f64>::build(2, 16, 2.0 * std::f64::consts::PI).unwrap();
        let u = Field::from_fn(&g, |x| Complex::from_polar(1.0, 2.0 * x[0] - 3.0 * x[1]));
        let lap = laplacian(&u);
        for (a, b) in lap.values().iter().zip(u.values()) {
            assert!((a + b * 13.0).norm() < 1e-10);
        }
        let back = Field::from_spectrum(&g, u.spectrum()).unwrap();
        for (a, b) in back.values().iter().zip(u.values()) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn from_values_rejects_nan_and_length() {
        let g = grid1(8, 1.0);
        assert!(Field::from_values(&g, vec![Complex::new(0.0, 0.0); 7]).is_err());
        let mut v = vec![Complex::new(0.0, 0.0); 8];
        v[3].re = f64::NAN;
        assert!(Field::from_values(&g, v).is_err());
    }
}
