use mlopf::feedergen::{generate, FeederSpec};
use mlopf::network::SUBSTATION;
use mlopf::{Network, Phase};
use proptest::prelude::*;

fn random_feeder(seed: u64, buses: usize, drop: f64) -> Network {
    let spec = FeederSpec {
        buses,
        seed,
        phase_drop_prob: drop,
        trunk_depth: 4.min(buses - 1),
        ..FeederSpec::default()
    };
    generate(&spec).unwrap().network
}

#[test]
fn documented_example_parses() {
    let text = r#"{
        "base_v_squared": 1.0,
        "buses": [
            {"id": 0, "phases": ["a", "b", "c"], "parent": null},
            {"id": 1, "phases": ["a", "c"], "parent": 0},
            {"id": 2, "phases": ["c"], "parent": 1}
        ],
        "lines": [
            {"from": 0, "to": 1, "z": {"aa": [0.01, 0.02], "ac": [0.002, 0.004], "ca": [0.002, 0.004], "cc": [0.01, 0.02]}},
            {"from": 1, "to": 2, "z": {"cc": [0.02, 0.03]}}
        ]
    }"#;
    let net = Network::from_json(text).unwrap();
    assert_eq!(net.n_flat(), 3);
    assert_eq!(net.flat_index(1, Phase::C), Some(1));
    assert_eq!(net.flat_index(2, Phase::C), Some(2));
    assert_eq!(net.flat_index(1, Phase::B), None);
    let z = net.common_path_impedance(2, 1, Phase::C, Phase::A).unwrap();
    assert_eq!((z.re, z.im), (0.002, 0.004));
}

#[test]
fn malformed_documents_fail() {
    let cases = [
        r#"{"buses": [{"id": 0, "phases": ["a"], "parent": null}, {"id": 1, "phases": ["b"], "parent": 0}], "lines": [{"from": 0, "to": 1}]}"#,
        r#"{"buses": [{"id": 0, "phases": ["a"], "parent": null}, {"id": 1, "phases": ["a"], "parent": 7}], "lines": []}"#,
        r#"{"buses": [{"id": 0, "phases": ["a"], "parent": null}, {"id": 1, "phases": ["a"], "parent": 0}], "lines": [{"from": 0, "to": 1, "z": {"ax": [0.1, 0.1]}}]}"#,
        r#"{"buses": [{"id": 0, "phases": ["a", "a"], "parent": null}], "lines": []}"#,
        r#"{"buses": [], "lines": []"#,
    ];
    for text in cases {
        assert!(Network::from_json(text).is_err(), "{text}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn json_round_trip_is_lossless(seed in any::<u64>(), buses in 2usize..60, drop in 0.0f64..0.5) {
        let net = random_feeder(seed, buses, drop);
        let text = serde_json::to_string(&net.to_document()).unwrap();
        let back = Network::from_json(&text).unwrap();
        prop_assert_eq!(back.n_flat(), net.n_flat());
        prop_assert_eq!(back.flat_entries(), net.flat_entries());
        for bus in 1..buses {
            prop_assert_eq!(back.feeder_impedance(bus).unwrap(), net.feeder_impedance(bus).unwrap());
        }
    }

    #[test]
    fn common_path_is_symmetric_and_follows_the_lca(seed in any::<u64>(), buses in 2usize..60, i in 1usize..60, j in 1usize..60) {
        let net = random_feeder(seed, buses, 0.0);
        let (i, j) = (i % buses, j % buses);
        prop_assume!(i != SUBSTATION && j != SUBSTATION);
        let lca = net.lca(i, j).unwrap();
        prop_assert!(net.is_ancestor(lca, i).unwrap() && net.is_ancestor(lca, j).unwrap());
        for phi in Phase::ALL {
            for psi in Phase::ALL {
                let a = net.common_path_impedance(i, j, phi, psi).unwrap();
                let b = net.common_path_impedance(j, i, phi, psi).unwrap();
                prop_assert_eq!(a, b);
                // Summing the feeding lines of the lca's path gives the same impedance.
                let mut sum = num_complex::Complex64::new(0.0, 0.0);
                let mut v = lca;
                while v != SUBSTATION {
                    sum += net.feeder_impedance(v).unwrap()[phi.code()][psi.code()];
                    v = net.parent(v).unwrap().unwrap();
                }
                prop_assert!((a - sum).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn flat_index_is_bus_major_and_phase_minor(seed in any::<u64>(), buses in 2usize..60, drop in 0.0f64..0.8) {
        let net = random_feeder(seed, buses, drop);
        let entries = net.flat_entries();
        prop_assert!(entries.windows(2).all(|w| (w[0].0, w[0].1.code()) < (w[1].0, w[1].1.code())));
        for (a, &(bus, phase)) in entries.iter().enumerate() {
            prop_assert_eq!(net.flat_index(bus, phase), Some(a));
            prop_assert!(net.phases(bus).unwrap().is_subset_of(net.phases(net.parent(bus).unwrap().unwrap()).unwrap()));
        }
    }
}
