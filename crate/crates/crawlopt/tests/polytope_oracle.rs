//! Cross-checks the projection and body-velocity solvers against
//! brute-force enumeration oracles on randomly generated instances.

mod common;

use nalgebra::DVector;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projection_matches_exhaustive_search(seed in any::<u64>(), dim in 1usize..=4) {
        let mut r = common::rng(seed);
        let set = common::random_polyhedron(&mut r, dim);
        let x = common::random_point(&mut r, dim, 3.0);
        let (z, dec) = set.project(&x);
        let z_ref = common::projection_oracle(&set, &x);
        prop_assert!((&z - &z_ref).norm() <= 1e-7, "projection off by {:.3e}", (&z - &z_ref).norm());

        // The reaction x - z must be an exact conic combination of active normals.
        prop_assert!(dec.residual <= 1e-9);
        prop_assert!(dec.coefficients.iter().all(|&c| c >= -1e-12));
        let rebuilt = dec.combination(&set);
        let gap = (&x - &z - rebuilt).norm();
        prop_assert!(gap <= 1e-8, "combination misses the reaction by {gap:.3e}");
        for (&j, &c) in dec.indices.iter().zip(&dec.coefficients) {
            if c > 1e-9 {
                let slack = set.face_gaps(&z)[j];
                prop_assert!(slack.abs() <= 1e-7, "mass on face {j} with gap {slack:.3e}");
            }
        }
    }

    #[test]
    fn projection_satisfies_the_variational_inequality(seed in any::<u64>(), dim in 1usize..=4) {
        let mut r = common::rng(seed);
        let set = common::random_polyhedron(&mut r, dim);
        let x = common::random_point(&mut r, dim, 3.0);
        let (z, _) = set.project(&x);
        let scale = 1.0 + x.norm();
        for _ in 0..20 {
            let y = set.project(&common::random_point(&mut r, dim, 3.0)).0;
            let inner = (&x - &z).dot(&(&y - &z));
            prop_assert!(inner <= 1e-9 * scale, "inequality violated by {inner:.3e}");
        }
        // Projecting a point of the set changes nothing.
        let (zz, _) = set.project(&z);
        prop_assert!((&zz - &z).norm() <= 1e-9);
    }

    #[test]
    fn body_velocity_matches_support_enumeration(seed in any::<u64>(), blocks in 2usize..=4) {
        let mut r = common::rng(seed);
        let model = common::random_model(&mut r, blocks);
        let w = common::random_point(&mut r, blocks - 1, 2.0);
        let (v, dec) = model.body_velocity(&w);
        let v_ref = common::vm_oracle(&model, &w);
        prop_assert!((v - v_ref).abs() <= 1e-9 * (1.0 + v_ref.abs()),
            "mean velocity {v:.12} vs oracle {v_ref:.12}");

        // The minimizing lift reproduces the shape velocity exactly.
        let rebuilt = model.shape_map() * &dec.anchor;
        prop_assert!((&rebuilt - &w).amax() <= 1e-9);
        let mean = dec.anchor.iter().sum::<f64>() / blocks as f64;
        prop_assert!((mean - v).abs() <= 1e-12);
    }
}

#[test]
fn oracle_agrees_with_itself_on_a_known_instance() {
    // Two blocks, cheap forward friction and heavy backward friction:
    // stretching at unit rate anchors the rear block, so the body moves
    // forward at one half.
    let cfg = crawlopt::crawler::ModelConfig {
        blocks: 2,
        k: 1.0,
        mu_plus: vec![1.0, 2.0],
        mu_minus: vec![4.0, 3.0],
        horizon: 1.0,
        control_box: vec![1.0],
    };
    let model = crawlopt::crawler::CrawlerModel::build(cfg).unwrap();
    let w = DVector::from_column_slice(&[1.0]);
    let v = common::vm_oracle(&model, &w);
    let (lib, _) = model.body_velocity(&w);
    assert!((v - 0.5).abs() <= 1e-12, "oracle value {v}");
    assert!((lib - 0.5).abs() <= 1e-12, "library value {lib}");
}
