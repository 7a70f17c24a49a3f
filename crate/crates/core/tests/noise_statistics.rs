use snls_core::grid::{Field, Grid};
use snls_core::noise::{NoiseOperator, NoiseProfile};
use snls_core::rng::trajectory_stream;

const SAMPLES: usize = 20_000;

fn coefficient(f: &Field<f64>, idx: usize) -> f64 {
    f.spectrum()[idx].re
}

fn moments(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    (m, m2, m4)
}

fn setup(real: bool) -> NoiseOperator<f64> {
    let g = Grid::build(1, 16, 10.0).unwrap();
    NoiseOperator::new(&g, &NoiseProfile::GaussianCutoff { k0: 2.0, amplitude: 1.0 }, real).unwrap()
}

#[test]
fn increments_are_gaussian_per_mode() {
    for real in [false, true] {
        let op = setup(real);
        let g = op.grid().clone();
        let modes = [g.spec().mode_index([0, 0]), g.spec().mode_index([1, 0]), g.spec().mode_index([-2, 0])];
        let mut rng = trajectory_stream(11, real as u64);
        let draws: Vec<Field<f64>> = (0..SAMPLES).map(|_| op.sample_increment(0.01, &mut rng)).collect();
        for &idx in &modes {
            let xs: Vec<f64> = draws.iter().map(|f| coefficient(f, idx)).collect();
            let (_, m2, m4) = moments(&xs);
            let kurt = m4 / (m2 * m2);
            // SE of the sample kurtosis of a Gaussian is √(24/n)
            let se = (24.0 / SAMPLES as f64).sqrt();
            assert!((kurt - 3.0).abs() < 3.0 * se, "mode {idx}: kurtosis {kurt}");
        }
    }
}

#[test]
fn successive_increments_are_uncorrelated() {
    let op = setup(false);
    let idx = op.grid().spec().mode_index([1, 0]);
    let mut rng = trajectory_stream(12, 0);
    let xs: Vec<f64> = (0..SAMPLES + 1).map(|_| coefficient(&op.sample_increment(0.01, &mut rng), idx)).collect();
    let (m, m2, _) = moments(&xs);
    let cov = xs.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / SAMPLES as f64;
    let corr = cov / m2;
    assert!(corr.abs() < 3.0 / (SAMPLES as f64).sqrt(), "lag-one correlation {corr}");
}

#[test]
fn variance_scales_linearly_in_dt() {
    let op = setup(true);
    let idx = op.grid().spec().mode_index([1, 0]);
    let var_at = |dt: f64, seed: u64| {
        let mut rng = trajectory_stream(seed, 0);
        let xs: Vec<f64> = (0..SAMPLES).map(|_| coefficient(&op.sample_increment(dt, &mut rng), idx)).collect();
        moments(&xs).1
    };
    let v1 = var_at(0.01, 13);
    let v4 = var_at(0.04, 14);
    // the sample variance has relative SE √(2/n); the ratio roughly √2 times that
    let se = 4.0 * (4.0 / SAMPLES as f64).sqrt();
    assert!((v4 / v1 - 4.0).abs() < 3.0 * se, "ratio {}", v4 / v1);
}
