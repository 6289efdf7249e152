//! Flow-based full matching against the exhaustive oracle on small
//! instances.

mod common;

use common::{brute_force_optimum, matrix_of};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use treematch_core::matching::{optimal_full_match, quantize, Structure};

fn random_instance(rng: &mut StdRng, structure: Structure) -> Option<Vec<Vec<f64>>> {
    let k_c = structure.max_controls_per_exposed;
    let k_e = structure.max_exposed_per_control;
    for _ in 0..100 {
        let ne = rng.random_range(1..=6);
        let nc = rng.random_range(1..=6);
        if ne + nc > 8 || ne > k_e * nc || nc > k_c * ne {
            continue;
        }
        let values = (0..ne)
            .map(|_| (0..nc).map(|_| rng.random::<f64>() * 10.0).collect())
            .collect();
        return Some(values);
    }
    None
}

#[test]
fn flow_matches_brute_force_on_random_small_instances() {
    let mut rng = StdRng::seed_from_u64(2024);
    let structures = [
        Structure::new(1, 1),
        Structure::new(2, 1),
        Structure::new(1, 2),
    ];
    let mut checked = 0;
    while checked < 200 {
        let structure = structures[checked % structures.len()];
        let Some(values) = random_instance(&mut rng, structure) else {
            continue;
        };
        let matrix = matrix_of(&values);
        let quantized = quantize(&matrix);
        let costs: Vec<Vec<i64>> = (0..matrix.n_exposed())
            .map(|e| (0..matrix.n_controls()).map(|c| quantized.cost(e, c)).collect())
            .collect();
        let oracle = brute_force_optimum(&costs, structure)
            .expect("instance was generated feasible");
        let design = optimal_full_match(&matrix, structure).expect("solver agrees on feasibility");
        assert_eq!(
            design.total_cost_scaled, oracle,
            "instance {checked}: flow {} vs oracle {oracle} ({} exposed, {} controls, {:?})",
            design.total_cost_scaled,
            matrix.n_exposed(),
            matrix.n_controls(),
            structure
        );
        checked += 1;
    }
}

#[test]
fn flow_and_oracle_agree_on_infeasibility() {
    let mut rng = StdRng::seed_from_u64(77);
    for _ in 0..50 {
        let ne = rng.random_range(1..=5);
        let nc = rng.random_range(1..=5);
        let values: Vec<Vec<f64>> = (0..ne)
            .map(|_| (0..nc).map(|_| rng.random::<f64>()).collect())
            .collect();
        let matrix = matrix_of(&values);
        let structure = Structure::new(1, 1);
        let quantized = quantize(&matrix);
        let costs: Vec<Vec<i64>> = (0..ne)
            .map(|e| (0..nc).map(|c| quantized.cost(e, c)).collect())
            .collect();
        let oracle = brute_force_optimum(&costs, structure);
        let solved = optimal_full_match(&matrix, structure);
        assert_eq!(oracle.is_some(), solved.is_ok(), "{ne}x{nc} pairs-only");
    }
}

#[test]
fn larger_structures_match_oracle_too() {
    let mut rng = StdRng::seed_from_u64(4242);
    let mut checked = 0;
    while checked < 60 {
        let k_c = rng.random_range(1..=3);
        let k_e = rng.random_range(1..=3);
        let structure = Structure::new(k_c, k_e);
        let Some(values) = random_instance(&mut rng, structure) else {
            continue;
        };
        let matrix = matrix_of(&values);
        let quantized = quantize(&matrix);
        let costs: Vec<Vec<i64>> = (0..matrix.n_exposed())
            .map(|e| (0..matrix.n_controls()).map(|c| quantized.cost(e, c)).collect())
            .collect();
        let oracle = brute_force_optimum(&costs, structure).unwrap();
        let design = optimal_full_match(&matrix, structure).unwrap();
        assert_eq!(design.total_cost_scaled, oracle);
        checked += 1;
    }
}

#[test]
fn forbidden_pairs_carry_penalties_in_both_solvers() {
    // A 2x2 instance where the cheap diagonal is forbidden by a tight
    // caliper: both the solver and the oracle must pay the penalty
    // consistently.
    use treematch_core::distance::apply_caliper;
    let matrix = matrix_of(&[vec![0.1, 5.0], vec![5.0, 0.1]]);
    let outcome = apply_caliper(&matrix, &[0.9, 0.1], &[0.9, 0.1], 0.5).unwrap();
    let quantized = quantize(&outcome.matrix);
    let costs: Vec<Vec<i64>> = (0..2)
        .map(|e| (0..2).map(|c| quantized.cost(e, c)).collect())
        .collect();
    let structure = Structure::new(1, 1);
    let oracle = brute_force_optimum(&costs, structure).unwrap();
    let design = optimal_full_match(&outcome.matrix, structure).unwrap();
    assert_eq!(design.total_cost_scaled, oracle);
}
