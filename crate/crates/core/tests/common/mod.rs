//! Shared test helpers: a brute-force full-matching oracle and random
//! instance generation.

use treematch_core::distance::DistanceMatrix;
use treematch_core::matching::Structure;

/// Exhaustive minimum total cost over all full matchings of the given
/// structure: every exposed and every control subject in exactly one star
/// (one exposed with 1..=k_c controls, or one control with 1..=k_e exposed).
/// Returns `None` when no feasible matching exists.
pub fn brute_force_optimum(costs: &[Vec<i64>], structure: Structure) -> Option<i64> {
    let ne = costs.len();
    let nc = if ne > 0 { costs[0].len() } else { 0 };
    assert!(ne <= 16 && nc <= 16, "oracle is exponential");
    let full_e = (1u32 << ne) - 1;
    let full_c = (1u32 << nc) - 1;
    recurse(costs, structure, full_e, full_c)
}

fn recurse(costs: &[Vec<i64>], structure: Structure, e_mask: u32, c_mask: u32) -> Option<i64> {
    if e_mask == 0 {
        return if c_mask == 0 { Some(0) } else { None };
    }
    if c_mask == 0 {
        return None;
    }
    let e = e_mask.trailing_zeros() as usize;
    let e_rest = e_mask & !(1 << e);
    let mut best: Option<i64> = None;
    let mut consider = |candidate: Option<i64>| {
        if let Some(value) = candidate {
            best = Some(match best {
                None => value,
                Some(b) => b.min(value),
            });
        }
    };

    // Star centered on exposed e: a nonempty control subset of size <= k_c.
    let control_subsets = subsets_of(c_mask);
    for subset in &control_subsets {
        let size = subset.count_ones() as usize;
        if size == 0 || size > structure.max_controls_per_exposed {
            continue;
        }
        let mut cost = 0i64;
        let mut bits = *subset;
        while bits != 0 {
            let c = bits.trailing_zeros() as usize;
            cost += costs[e][c];
            bits &= bits - 1;
        }
        consider(recurse(costs, structure, e_rest, c_mask & !subset).map(|sub| sub + cost));
    }

    // Star centered on a control c containing e plus up to k_e - 1 other
    // exposed subjects.
    let mut c_bits = c_mask;
    while c_bits != 0 {
        let c = c_bits.trailing_zeros() as usize;
        c_bits &= c_bits - 1;
        for subset in subsets_of(e_rest) {
            let size = subset.count_ones() as usize;
            if size + 1 > structure.max_exposed_per_control {
                continue;
            }
            let mut cost = costs[e][c];
            let mut bits = subset;
            while bits != 0 {
                let other = bits.trailing_zeros() as usize;
                cost += costs[other][c];
                bits &= bits - 1;
            }
            consider(
                recurse(
                    costs,
                    structure,
                    e_rest & !subset,
                    c_mask & !(1 << c),
                )
                .map(|sub| sub + cost),
            );
        }
    }
    best
}

fn subsets_of(mask: u32) -> Vec<u32> {
    let mut subsets = vec![0u32];
    let mut bits = mask;
    while bits != 0 {
        let low = bits & bits.wrapping_neg();
        bits &= bits - 1;
        let current = subsets.clone();
        for s in current {
            subsets.push(s | low);
        }
    }
    subsets
}

/// A distance matrix with the given entries.
pub fn matrix_of(values: &[Vec<f64>]) -> DistanceMatrix {
    let ne = values.len();
    let nc = values[0].len();
    let exposed: Vec<String> = (0..ne).map(|i| format!("e{i:02}")).collect();
    let controls: Vec<String> = (0..nc).map(|j| format!("c{j:02}")).collect();
    DistanceMatrix::build(exposed, controls, |e, c| values[e][c]).unwrap()
}
