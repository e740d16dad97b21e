use std::sync::Arc;

use proptest::prelude::*;

use spinsight::analysis::{
    bsg_transform, coh_order_projectors, corr_order_projectors, build_projector, involving_projectors,
    local_spin_projectors, population, population_series, rdn, rsp, sg_transform, Grouping, ProjectorSpec,
};
use spinsight::basis::{embedded_spin_operator, single_spin_operator};
use spinsight::linalg::{expm, kron};
use spinsight::liouville::propagate;
use spinsight::{
    Axis, BasisLabel, CMat, Channel, ControlSet, Coupling, ProductBasis, Spin, SpinOp, SpinSystem, StateVector,
    Trajectory, C64,
};

fn mults() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(2usize..=3, 1..=3)
}

fn coeffs(dim: usize) -> impl Strategy<Value = Vec<C64>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), dim)
        .prop_map(|v| v.into_iter().map(|(a, b)| C64::new(a, b)).collect())
}

fn state_in(mults: Vec<usize>) -> impl Strategy<Value = StateVector> {
    let basis = Arc::new(ProductBasis::from_multiplicities(&mults).unwrap());
    coeffs(basis.dim()).prop_map(move |c| StateVector::new(basis.clone(), c).unwrap())
}

fn any_state() -> impl Strategy<Value = StateVector> {
    mults().prop_flat_map(state_in)
}

fn trajectory_of(states: Vec<StateVector>) -> Trajectory {
    let basis = states[0].basis().clone();
    let times = (0..states.len()).map(|i| i as f64 * 1e-4).collect();
    Trajectory::new(basis, times, states.into_iter().map(|s| s.into_coefficients()).collect()).unwrap()
}

fn short_trajectory() -> impl Strategy<Value = Trajectory> {
    mults().prop_flat_map(|m| prop::collection::vec(state_in(m), 1..4)).prop_map(trajectory_of)
}

fn random_hermitian(n: usize, vals: &[(f64, f64)]) -> CMat {
    let raw = CMat::from_fn(n, n, |i, j| {
        let (a, b) = vals[(i * n + j) % vals.len()];
        C64::new(a, b)
    });
    &raw + &raw.adjoint()
}

fn conjugate(state: &StateVector, u: &CMat) -> StateVector {
    let m = u.matmul(&state.to_matrix()).matmul(&u.adjoint());
    StateVector::from_matrix(state.basis().clone(), &m).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn correlation_orders_partition_the_norm(s in any_state()) {
        let b = s.basis().clone();
        let total: f64 = corr_order_projectors(&b).iter().map(|p| population(p, &s).unwrap().powi(2)).sum();
        prop_assert!((total - s.norm().powi(2)).abs() < 1e-12 * s.norm().powi(2).max(1.0));
    }

    #[test]
    fn coherence_orders_partition_the_norm(s in any_state()) {
        let b = s.basis().clone();
        let total: f64 = coh_order_projectors(&b).iter().map(|p| population(p, &s).unwrap().powi(2)).sum();
        prop_assert!((total - s.norm().powi(2)).abs() < 1e-12 * s.norm().powi(2).max(1.0));
    }

    #[test]
    fn projector_masks_partition_indices(m in mults()) {
        let b = ProductBasis::from_multiplicities(&m).unwrap();
        for family in [corr_order_projectors(&b), coh_order_projectors(&b)] {
            for i in 0..b.dim() {
                prop_assert_eq!(family.iter().filter(|p| p.mask[i]).count(), 1);
            }
        }
        let local = local_spin_projectors(&b);
        for i in 0..b.dim() {
            prop_assert!(local.iter().filter(|p| p.mask[i]).count() <= 1);
        }
    }

    #[test]
    fn local_population_bounded_by_involvement(s in any_state()) {
        let b = s.basis().clone();
        for (l, inv) in local_spin_projectors(&b).iter().zip(involving_projectors(&b)) {
            prop_assert!(population(l, &s).unwrap() <= population(&inv, &s).unwrap() + 1e-15);
        }
    }

    #[test]
    fn population_bounded_by_norm(s in any_state(), k in 0usize..3) {
        let b = s.basis().clone();
        if let Ok(p) = build_projector(&b, ProjectorSpec::CorrOrder(k)) {
            let v = population(&p, &s).unwrap();
            prop_assert!(v >= 0.0 && v <= s.norm() + 1e-15);
        }
    }

    #[test]
    fn sg_preserves_norm(t in short_trajectory()) {
        let g = sg_transform(&t);
        for (row, state) in g.values.iter().zip(t.states()) {
            let grouped: f64 = row.iter().map(|v| v * v).sum();
            let raw: f64 = state.iter().map(|c| c.norm_sqr()).sum();
            prop_assert!((grouped - raw).abs() < 1e-12 * raw.max(1.0));
        }
    }

    #[test]
    fn sg_invariant_under_global_z_rotation(t in short_trajectory(), phi in -10.0f64..10.0) {
        let basis = t.basis().clone();
        let m = basis.multiplicities().to_vec();
        let mut lz = CMat::zeros(basis.hilbert_dim(), basis.hilbert_dim());
        for k in 0..m.len() {
            lz += &embedded_spin_operator(&m, k, SpinOp::Z).unwrap();
        }
        let u = expm(&lz.scale(C64::new(0.0, -phi)));
        let rotated = t.map_states(|s| {
            conjugate(&StateVector::new(basis.clone(), s.to_vec()).unwrap(), &u).into_coefficients()
        }).unwrap();
        let (a, b) = (sg_transform(&t), sg_transform(&rotated));
        for (x, y) in a.values.iter().flatten().zip(b.values.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bsg_invariant_under_local_rotations(
        t in short_trajectory(),
        vals in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 9),
    ) {
        let basis = t.basis().clone();
        let mut u = CMat::identity(1);
        for (k, &n) in basis.multiplicities().iter().enumerate() {
            let h = random_hermitian(n, &vals[k..]);
            u = kron(&u, &expm(&h.scale(C64::new(0.0, -1.0))));
        }
        let rotated = t.map_states(|s| {
            conjugate(&StateVector::new(basis.clone(), s.to_vec()).unwrap(), &u).into_coefficients()
        }).unwrap();
        let (a, b) = (bsg_transform(&t), bsg_transform(&rotated));
        for (x, y) in a.values.iter().flatten().zip(b.values.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn self_similarity_is_one(t in short_trajectory()) {
        let t = t.map_states(|s| {
            let n = s.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt().max(1e-300);
            s.iter().map(|c| c / n).collect()
        }).unwrap();
        prop_assume!(t.states().iter().all(|s| s.iter().any(|c| c.norm() > 0.0)));
        for g in [Grouping::None, Grouping::Sg, Grouping::Bsg] {
            let r = rsp(&t, &t, g).unwrap();
            let d = rdn(&t, &t, g).unwrap();
            prop_assert!(d.scores.iter().all(|&v| v == 1.0));
            if g == Grouping::Bsg {
                // BSG keeps only single-spin content
                prop_assert!(r.scores.iter().all(|&v| v <= 1.0 + 1e-12));
            } else {
                prop_assert!(r.scores.iter().all(|&v| (v - 1.0).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn score_bounds((a, b) in mults().prop_flat_map(|m| (state_in(m.clone()), state_in(m)))) {
        prop_assume!(a.norm() > 1e-6 && b.norm() > 1e-6);
        let (a, b) = (a.normalized().unwrap(), b.normalized().unwrap());
        let (ta, tb) = (trajectory_of(vec![a]), trajectory_of(vec![b]));
        for g in [Grouping::None, Grouping::Sg, Grouping::Bsg] {
            let r = rsp(&ta, &tb, g).unwrap();
            prop_assert!(r.scores[0].abs() <= 1.0 + 1e-12);
            if let Some(m) = &r.magnitudes {
                prop_assert!(m[0] <= 1.0 + 1e-12);
            }
            let d = rdn(&ta, &tb, g).unwrap();
            prop_assert!((-1e-12..=1.0).contains(&d.scores[0]));
        }
    }

    #[test]
    fn propagation_conserves_norm(
        offsets in prop::collection::vec(-5000.0f64..5000.0, 2),
        j in -300.0f64..300.0,
        amps in prop::collection::vec(-1.0f64..1.0, 12),
        s in state_in(vec![2, 2]),
    ) {
        let sys = SpinSystem::new(
            vec![Spin::new("1H", 2, offsets[0]), Spin::new("13C", 2, offsets[1])],
            vec![Coupling::new(0, 1, j)],
            vec![],
        ).unwrap();
        let ch = vec![Channel::new("1H", Axis::X), Channel::new("1H", Axis::Y), Channel::new("13C", Axis::X)];
        let c = ControlSet::new(5e-5, 4000.0, ch, amps.chunks(4).map(|r| r.to_vec()).collect()).unwrap();
        let t = propagate(&sys, &c, &s).unwrap();
        for st in t.states() {
            let n = st.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            prop_assert!((n - s.norm()).abs() < 1e-9 * s.norm().max(1.0));
        }
    }

    #[test]
    fn z_commuting_drift_conserves_coherence_orders(
        offsets in prop::collection::vec(-5000.0f64..5000.0, 3),
        js in prop::collection::vec(-200.0f64..200.0, 2),
        s in state_in(vec![2, 2, 3]),
    ) {
        let sys = SpinSystem::new(
            vec![Spin::new("1H", 2, offsets[0]), Spin::new("1H", 2, offsets[1]), Spin::new("14N", 3, offsets[2])],
            vec![Coupling::new(0, 1, js[0]), Coupling::new(1, 2, js[1])],
            vec![],
        ).unwrap();
        let c = ControlSet::zeros(1e-4, 1000.0, vec![Channel::new("1H", Axis::X)], 6).unwrap();
        let t = propagate(&sys, &c, &s).unwrap();
        for p in coh_order_projectors(t.basis()) {
            let series = population_series(&p, &t).unwrap();
            for v in &series {
                prop_assert!((v - series[0]).abs() < 1e-9);
            }
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

#[test]
fn spin_half_correlation_order_counts() {
    for n in 1..=6 {
        let b = ProductBasis::from_multiplicities(&vec![2; n]).unwrap();
        for (k, p) in corr_order_projectors(&b).iter().enumerate() {
            assert_eq!(p.count(), binomial(n, k) * 3usize.pow(k as u32), "N={n} k={k}");
        }
    }
}

#[test]
fn single_spin_tensors_group_with_their_flips() {
    let b = ProductBasis::from_multiplicities(&[4]).unwrap();
    let t = trajectory_of(vec![StateVector::basis_state(
        Arc::new(b.clone()),
        b.index_of(&BasisLabel::new(vec![(3, -2)])).unwrap(),
    )]);
    let g = sg_transform(&t);
    let idx = g
        .groups
        .iter()
        .position(|gr| gr.members.contains(&b.index_of(&BasisLabel::new(vec![(3, 2)])).unwrap()))
        .unwrap();
    assert_eq!(g.groups[idx].members.len(), 2);
    assert_eq!(g.values[0][idx], 1.0);
}

#[test]
fn spin_operators_match_single_spin_definitions() {
    let m = [2, 3];
    let sz = embedded_spin_operator(&m, 1, SpinOp::Z).unwrap();
    let expected = kron(&CMat::identity(2), &single_spin_operator(3, SpinOp::Z));
    assert!((&sz - &expected).max_abs() == 0.0);
}
