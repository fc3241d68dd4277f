use std::sync::Arc;

use mlopf::coupling::{
    build_engine, coupling_bilevel, coupling_flat, coupling_trilevel, MultilevelEngine,
};
use mlopf::feedergen::{balanced_feeder, generate, FeederSpec};
use mlopf::partition::auto_partition;
use mlopf::{CouplingEngine, DualState, EngineKind, SensitivityMatrices};
use nalgebra::DVector;
use proptest::prelude::*;

fn duals(n: usize, seed: u64) -> DualState {
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = move || {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        (x % 10_000) as f64 / 1000.0
    };
    DualState {
        over: DVector::from_fn(n, |_, _| next()),
        under: DVector::from_fn(n, |_, _| next()),
    }
}

/// Dense reference built straight from the sensitivity matrices.
fn reference(sens: &SensitivityMatrices, d: &DualState) -> (DVector<f64>, DVector<f64>) {
    let diff = &d.over - &d.under;
    (sens.r.transpose() * &diff, sens.x.transpose() * &diff)
}

#[test]
fn flat_engine_is_the_transposed_product() {
    let f = generate(&FeederSpec {
        buses: 50,
        seed: 3,
        ..FeederSpec::default()
    })
    .unwrap();
    let sens = SensitivityMatrices::build(&f.network);
    let d = duals(f.network.n_flat(), 1);
    let (gp, gq) = reference(&sens, &d);
    let out = coupling_flat(&sens, &d.over, &d.under).unwrap();
    assert!((out.g_p - gp).amax() < 1e-12);
    assert!((out.g_q - gq).amax() < 1e-12);
    assert_eq!(out.op_count, 2 * (f.network.n_flat() as u64).pow(2));
}

#[test]
fn threaded_engines_match_sequential_bitwise() {
    let f = balanced_feeder(512, 23, 4, 5).unwrap();
    let d = duals(512, 9);
    for kind in [EngineKind::Bilevel, EngineKind::Trilevel] {
        let one = build_engine(kind, &f.network, None, &f.partition, 1)
            .unwrap()
            .compute(&d, None)
            .unwrap();
        let four = build_engine(kind, &f.network, None, &f.partition, 4)
            .unwrap()
            .compute(&d, None)
            .unwrap();
        assert_eq!(one.g_p, four.g_p);
        assert_eq!(one.g_q, four.g_q);
        assert_eq!(one.op_count, four.op_count);
    }
}

#[test]
fn scope_costs_cover_coordinator_and_areas() {
    let f = balanced_feeder(256, 16, 4, 2).unwrap();
    let d = duals(256, 4);
    let engine = MultilevelEngine::trilevel(&f.network, &f.partition).unwrap();
    let out = engine.compute(&d, None).unwrap();
    assert_eq!(out.scope_costs.len(), 1 + f.partition.area_count());
    assert_eq!(
        out.scope_costs.iter().map(|c| c.ops).sum::<u64>(),
        out.op_count
    );
}

#[test]
fn undivided_area_costs_the_same_in_both_engines() {
    let f = balanced_feeder(256, 16, 4, 2).unwrap();
    let mut part = f.partition.clone();
    part.areas[3].subareas.clear();
    part.areas[3].remainder = part.areas[3].members.clone();
    let d = duals(256, 8);
    let bi = MultilevelEngine::bilevel(&f.network, &part)
        .unwrap()
        .compute(&d, None)
        .unwrap();
    let tri = MultilevelEngine::trilevel(&f.network, &part)
        .unwrap()
        .compute(&d, None)
        .unwrap();
    let area = |r: &mlopf::CouplingResult| r.scope_costs[4].ops;
    assert_eq!(area(&bi), area(&tri));
    assert!(tri.scope_costs[1].ops < bi.scope_costs[1].ops);
}

#[test]
fn negative_or_misshaped_duals_are_rejected() {
    let f = generate(&FeederSpec {
        buses: 20,
        seed: 1,
        ..FeederSpec::default()
    })
    .unwrap();
    let n = f.network.n_flat();
    let sens = Arc::new(SensitivityMatrices::build(&f.network));
    for kind in EngineKind::ALL {
        let engine = build_engine(kind, &f.network, Some(sens.clone()), &f.partition, 1).unwrap();
        let mut d = duals(n, 2);
        d.under[0] = -1.0;
        assert!(engine.compute(&d, None).is_err());
        assert!(engine.compute(&DualState::zeros(n + 1), None).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn engines_agree_with_dense_reference(
        seed in any::<u64>(),
        buses in 2usize..90,
        drop in 0.0f64..0.5,
        area in 1usize..30,
        sub in 1usize..10,
    ) {
        let spec = FeederSpec { buses, seed, phase_drop_prob: drop, trunk_depth: 3.min(buses - 1), ..FeederSpec::default() };
        let f = generate(&spec).unwrap();
        let part = auto_partition(&f.network, area, sub);
        let sens = SensitivityMatrices::build(&f.network);
        let d = duals(f.network.n_flat(), seed);
        let (gp, gq) = reference(&sens, &d);
        let scale = 1.0 + gp.amax().max(gq.amax());
        for out in [
            coupling_bilevel(&f.network, &part, &d.over, &d.under).unwrap(),
            coupling_trilevel(&f.network, &part, &d.over, &d.under).unwrap(),
        ] {
            prop_assert!((&out.g_p - &gp).amax() <= 1e-9 * scale);
            prop_assert!((&out.g_q - &gq).amax() <= 1e-9 * scale);
        }
    }

    #[test]
    fn coupling_is_linear_in_the_dual_difference(seed in any::<u64>(), shift in 0.0f64..5.0) {
        let f = generate(&FeederSpec { buses: 40, seed, ..FeederSpec::default() }).unwrap();
        let d = duals(f.network.n_flat(), seed);
        let shifted = DualState { over: d.over.add_scalar(shift), under: d.under.add_scalar(shift) };
        let engine = MultilevelEngine::trilevel(&f.network, &f.partition).unwrap();
        let a = engine.compute(&d, None).unwrap();
        let b = engine.compute(&shifted, None).unwrap();
        let scale = 1.0 + a.g_p.amax().max(a.g_q.amax());
        prop_assert!((&a.g_p - &b.g_p).amax() <= 1e-9 * scale);
        prop_assert!((&a.g_q - &b.g_q).amax() <= 1e-9 * scale);
    }
}
