//! GRAPE gradients against central finite differences of the fidelity.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spinsight::grape::{
    controls_from_phases, ensemble_fidelity, grape_gradient, phase_chain_rule, phases_of, ControlProblem,
    Ensemble, Parametrization,
};
use spinsight::{Axis, Channel, ControlSet, Coupling, CouplingModel, ProductBasis, Spin, SpinSystem, StateVector, C64};

const STEP: f64 = 1e-6;

fn random_state(basis: &Arc<ProductBasis>, rng: &mut ChaCha8Rng) -> StateVector {
    let c = (0..basis.dim())
        .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    StateVector::new(basis.clone(), c).unwrap().normalized().unwrap()
}

fn random_problem(seed: u64) -> ControlProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_spins = rng.gen_range(1..=2);
    let hetero = rng.gen_bool(0.5);
    let spins: Vec<Spin> = (0..n_spins)
        .map(|k| {
            let iso = if k == 1 && hetero { "13C" } else { "1H" };
            Spin::new(iso, 2, rng.gen_range(-3000.0..3000.0))
        })
        .collect();
    let couplings = if n_spins == 2 {
        let model = if rng.gen_bool(0.5) { CouplingModel::Weak } else { CouplingModel::Strong };
        vec![Coupling::new(0, 1, rng.gen_range(-200.0..200.0)).with_model(model)]
    } else {
        vec![]
    };
    let system = SpinSystem::new(spins, couplings, vec![]).unwrap();
    let basis = Arc::new(ProductBasis::new(&system));

    let mut channels = vec![Channel::new("1H", Axis::X), Channel::new("1H", Axis::Y)];
    if n_spins == 2 && hetero {
        channels.push(Channel::new("13C", Axis::X));
        channels.push(Channel::new("13C", Axis::Y));
    }
    let n_steps = rng.gen_range(1..=8);
    let dt = rng.gen_range(1e-5..1e-4);
    let power = rng.gen_range(1000.0..5000.0);
    let amps = (0..channels.len())
        .map(|_| (0..n_steps).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let controls = ControlSet::new(dt, power, channels, amps).unwrap();

    let rho0 = random_state(&basis, &mut rng);
    let target = random_state(&basis, &mut rng);
    let mut p = ControlProblem::new(system, rho0, target, controls);
    if rng.gen_bool(0.5) {
        p.ensemble = Ensemble {
            isotope: Some("1H".into()),
            offsets_hz: vec![-500.0, 700.0],
            power_scales: vec![0.9, 1.2],
        };
    }
    p
}

/// Normwise relative error `max|g - fd| / max|fd|`.
fn relative_error(g: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    g.iter().zip(fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

fn amplitude_fd(p: &ControlProblem) -> Vec<f64> {
    let c = &p.controls;
    let mut fd = Vec::new();
    for k in 0..c.n_channels() {
        for n in 0..c.n_steps() {
            let eval = |delta: f64| {
                let mut a = c.amplitudes().to_vec();
                a[k][n] += delta;
                ensemble_fidelity(p, &c.with_amplitudes(a).unwrap()).unwrap().mean
            };
            fd.push((eval(STEP) - eval(-STEP)) / (2.0 * STEP));
        }
    }
    fd
}

#[test]
fn amplitude_gradients_match_central_differences() {
    for seed in 0..20 {
        let p = random_problem(seed);
        let g: Vec<f64> = grape_gradient(&p, &p.controls).unwrap().concat();
        let fd = amplitude_fd(&p);
        let err = relative_error(&g, &fd);
        assert!(err < 1e-6, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn phase_gradients_match_central_differences() {
    for seed in 100..110 {
        let mut p = random_problem(seed);
        let phases = phases_of(&p.controls).unwrap();
        p.controls = controls_from_phases(&p.controls, &phases).unwrap();
        p.parametrization = Parametrization::Phases;
        let g: Vec<f64> = phase_chain_rule(&grape_gradient(&p, &p.controls).unwrap(), &p.controls)
            .unwrap()
            .concat();
        let mut fd = Vec::new();
        for r in 0..phases.len() {
            for n in 0..phases[r].len() {
                let eval = |delta: f64| {
                    let mut ph = phases.clone();
                    ph[r][n] += delta;
                    let c = controls_from_phases(&p.controls, &ph).unwrap();
                    ensemble_fidelity(&p, &c).unwrap().mean
                };
                fd.push((eval(STEP) - eval(-STEP)) / (2.0 * STEP));
            }
        }
        let err = relative_error(&g, &fd);
        assert!(err < 1e-6, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn gradient_is_deterministic() {
    let p = random_problem(7);
    let a = grape_gradient(&p, &p.controls).unwrap();
    let b = grape_gradient(&p, &p.controls).unwrap();
    assert_eq!(a, b);
}
