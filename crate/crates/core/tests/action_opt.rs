use std::sync::Arc;

use num_complex::Complex;
use snls_core::action::{
    action, lemma_l0_bound, minimize_action, quasipotential_report, terminal_gap, ActionOptions,
    QuasipotentialOptions,
};
use snls_core::dynamics::{run_controlled_sde, solve_skeleton, ControlPath, NoiseKind, RecordOptions, SdeParams};
use snls_core::exit::{Domain, Sectorization};
use snls_core::grid::{l2_norm, Field, Grid};
use snls_core::noise::{ModeAmplitude, NoiseOperator, NoiseProfile};
use snls_core::rng::trajectory_stream;

fn grid() -> Arc<Grid<f64>> {
    Grid::build(1, 16, 8.0).unwrap()
}

fn all_modes(g: &Arc<Grid<f64>>) -> NoiseOperator<f64> {
    NoiseOperator::new(g, &NoiseProfile::SharpCutoff { k_max: 100.0, amplitude: 1.0 }, false).unwrap()
}

#[test]
fn linear_minimum_action_matches_closed_form() {
    // α = 0, λ = 0, u0 = 0: min ½‖h‖² subject to ‖u(T)‖² = r² is r²/(2T max φ²)
    let g = grid();
    let op = all_modes(&g);
    let d = Domain::l2_ball(1.0).unwrap();
    let p = SdeParams::deterministic(0.0, 1.0, 0.0, 0.02);
    let r = minimize_action(&Field::zeros(&g), &p, &op, &d, 1.0, &ActionOptions::default()).unwrap();
    let exact = 1.0 / 2.0;
    assert!(r.terminal_gap == 0.0);
    assert!(r.converged, "{:?}", r.stages);
    let rel = (r.action_value - exact) / exact;
    assert!((-1e-9..0.05).contains(&rel), "action {} vs {exact}", r.action_value);
}

#[test]
fn nonlinear_minimum_action_respects_the_mass_bound() {
    let g = grid();
    let op = NoiseOperator::new(&g, &NoiseProfile::GaussianCutoff { k0: 2.0, amplitude: 1.0 }, false).unwrap();
    let d = Domain::l2_ball(1.0).unwrap();
    let alpha = 0.2;
    let p = SdeParams::deterministic(1.0, 1.0, alpha, 0.02);
    let r = minimize_action(&Field::zeros(&g), &p, &op, &d, 2.0, &ActionOptions::default()).unwrap();
    assert!(r.converged);
    let phi = op.operator_norm_l2();
    assert!(r.action_value >= lemma_l0_bound(alpha, 1.0, 1.0, phi));
    // mass balance: N(T) ≤ 2‖Φ‖_c (∫e^{-4α(T-s)}ds)^{1/2} ‖u‖_∞ ‖h‖ gives the sharper
    // α r²/(‖Φ‖²_c (1 − e^{-4αT})) · … ; check the infinite-horizon value
    assert!(r.action_value >= alpha / (phi * phi) * (1.0 - 1e-9));
    let gaps: Vec<f64> = r.stages.iter().map(|s| s.gap).collect();
    assert!(gaps.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)), "{gaps:?}");
}

#[test]
fn gap_shrinks_with_control_scale_in_the_linear_case() {
    let g = grid();
    let op = all_modes(&g);
    let d = Domain::l2_ball(1.0).unwrap();
    let p = SdeParams::deterministic(0.0, 1.0, 0.1, 0.05);
    let h0 = Field::from_fn(&g, |x| Complex::new((-x[0] * x[0]).exp(), 0.2));
    let h = ControlPath { dt: 0.05, controls: vec![h0; 20] };
    let u0 = Field::zeros(&g);
    let mut last = f64::INFINITY;
    for s in [0.0, 0.2, 0.4, 0.8, 1.6, 3.2] {
        let gap = terminal_gap(&u0, &h.scaled(s), &p, &op, NoiseKind::Additive, &d).unwrap();
        assert!(gap <= last);
        last = gap;
    }
    assert_eq!(last, 0.0);
    let gap0 = terminal_gap(&u0, &h.scaled(0.0), &p, &op, NoiseKind::Additive, &d).unwrap();
    assert_eq!(gap0, 1.0);
}

#[test]
fn action_is_additive_over_time_intervals() {
    let g = grid();
    let mut rng = trajectory_stream(3, 3);
    let controls: Vec<Field<f64>> = (0..30)
        .map(|_| snls_core::init::random_bumps(&g, 2, &mut rng))
        .collect();
    let h = ControlPath { dt: 0.01, controls: controls.clone() };
    let a = ControlPath { dt: 0.01, controls: controls[..12].to_vec() };
    let b = ControlPath { dt: 0.01, controls: controls[12..].to_vec() };
    assert!((action(&h) - action(&a) - action(&b)).abs() < 1e-12 * action(&h).max(1.0));
}

#[test]
fn small_noise_reproduces_the_skeleton() {
    let g = grid();
    let op = NoiseOperator::new(&g, &NoiseProfile::GaussianCutoff { k0: 2.0, amplitude: 1.0 }, false).unwrap();
    let d = Domain::l2_ball(1.0).unwrap();
    let base = SdeParams::deterministic(1.0, 1.0, 0.1, 0.02);
    let r = minimize_action(&Field::zeros(&g), &base, &op, &d, 1.0, &ActionOptions::default()).unwrap();
    let skeleton = r.trajectory.final_state().clone();
    let mut prev = f64::INFINITY;
    for eps in [1e-2, 1e-4, 1e-6] {
        let p = base.with_noise(NoiseKind::Additive, eps);
        let mut mean = 0.0;
        for id in 0..20 {
            let mut rng = trajectory_stream(77, id);
            let tr = run_controlled_sde(&Field::zeros(&g), &r.control, &p, &op, &mut rng, &RecordOptions::default()).unwrap();
            mean += l2_norm(&tr.final_state().sub(&skeleton)) / 20.0;
        }
        assert!(mean < prev);
        prev = mean;
    }
    assert!(prev < 1e-2);
    let zero_noise = solve_skeleton(&Field::zeros(&g), &r.control, &base, &op, NoiseKind::Additive, &RecordOptions::default()).unwrap();
    assert!(l2_norm(&zero_noise.final_state().sub(&skeleton)) < 1e-12);
}

#[test]
fn quasipotential_table_orderings() {
    let g = grid();
    let op = NoiseOperator::new(
        &g,
        &NoiseProfile::Modes {
            modes: vec![
                ModeAmplitude { mode: [1, 0], amplitude: 1.0 },
                ModeAmplitude { mode: [-1, 0], amplitude: 0.8 },
                ModeAmplitude { mode: [0, 0], amplitude: 0.5 },
            ],
        },
        false,
    )
    .unwrap();
    let d = Domain::l2_ball(1.0).unwrap();
    let p = SdeParams::deterministic(1.0, 1.0, 0.2, 0.04);
    let starts = vec![
        Field::gaussian(&g, 0.3, 1.0),
        Field::gaussian(&g, 0.5, 1.0),
    ];
    let opts = QuasipotentialOptions {
        t_list: vec![1.0, 2.0],
        sectors: Some(Sectorization::new(vec![[1, 0], [-1, 0]]).unwrap()),
        action: ActionOptions::default(),
        l02_geometry: None,
    };
    let rep = quasipotential_report(&starts, &p, &op, &d, &opts).unwrap();
    assert!(rep.e_rho.windows(2).all(|w| w[1].1 <= w[0].1));
    for (_, e) in &rep.e_sector {
        assert!(*e >= rep.e_bar);
    }
    assert!(rep.all_above_bounds);
    // the weaker mode's sector costs more than the stronger one's
    assert!(rep.e_sector[1].1 > rep.e_sector[0].1);
}
