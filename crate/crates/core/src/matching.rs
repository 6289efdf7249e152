//! Optimal full matching: partition exposed and control subjects into
//! matched sets (one exposed with up to `k_c` controls, or one control with
//! up to `k_e` exposed) minimizing the total within-set exposed-control
//! distance, solved as integer min-cost flow.

use serde::Serialize;

use crate::balance::{BalanceReport, BalanceVerdict};
use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};
use crate::flow::MinCostFlow;

/// Set-size limits: at most `max_controls_per_exposed` controls in an
/// exposed-centered set, at most `max_exposed_per_control` exposed in a
/// control-centered set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Structure {
    pub max_controls_per_exposed: usize,
    pub max_exposed_per_control: usize,
}

impl Structure {
    pub fn new(max_controls_per_exposed: usize, max_exposed_per_control: usize) -> Self {
        Structure {
            max_controls_per_exposed,
            max_exposed_per_control,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "1:{}/{}:1",
            self.max_controls_per_exposed, self.max_exposed_per_control
        )
    }
}

/// One matched set: exactly one exposed with 1.. controls, or exactly one
/// control with 1.. exposed. Pairs are stored as exposed-centered.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedSet {
    pub id: usize,
    pub exposed: Vec<String>,
    pub controls: Vec<String>,
}

impl MatchedSet {
    pub fn size(&self) -> usize {
        self.exposed.len() + self.controls.len()
    }
}

/// A complete matched design for one exposure comparison.
#[derive(Debug, Clone, Serialize)]
pub struct MatchedDesign {
    pub sets: Vec<MatchedSet>,
    /// Subjects excluded before the solve because the caliper forbade every
    /// potential partner.
    pub excluded: Vec<String>,
    pub structure: Structure,
    /// Total within-set exposed-control distance (original scale).
    pub total_distance: f64,
    /// Total distance in the quantized integer scale the solver minimized.
    pub total_cost_scaled: i64,
    /// Matched pairs that crossed a caliper-forbidden arc.
    pub caliper_violations: Vec<(String, String)>,
}

impl MatchedDesign {
    pub fn n_matched_exposed(&self) -> usize {
        self.sets.iter().map(|s| s.exposed.len()).sum()
    }

    pub fn n_matched_controls(&self) -> usize {
        self.sets.iter().map(|s| s.controls.len()).sum()
    }

    /// Set weights proportional to the number of exposed subjects per set,
    /// normalized to sum to one.
    pub fn exposed_count_weights(&self) -> Vec<f64> {
        let total: usize = self.n_matched_exposed();
        self.sets
            .iter()
            .map(|s| s.exposed.len() as f64 / total as f64)
            .collect()
    }
}

/// Relative resolution at which distances are quantized to integers.
pub const COST_RESOLUTION: f64 = 1e-6;

/// Quantized integer costs for a distance matrix: `unit` is the value of one
/// integer step, forbidden pairs carry `penalty`.
pub struct QuantizedCosts {
    pub unit: f64,
    pub penalty: i64,
    costs: Vec<i64>,
    n_controls: usize,
}

impl QuantizedCosts {
    pub fn cost(&self, exposed: usize, control: usize) -> i64 {
        self.costs[exposed * self.n_controls + control]
    }
}

/// Quantize distances at `COST_RESOLUTION` relative resolution; forbidden
/// pairs become a large finite penalty so infeasibility degrades gracefully.
pub fn quantize(matrix: &DistanceMatrix) -> QuantizedCosts {
    let max_finite = matrix.max_finite();
    let unit = if max_finite > 0.0 {
        max_finite * COST_RESOLUTION
    } else {
        1.0
    };
    let penalty: i64 = 1_000_000_000_000;
    let ne = matrix.n_exposed();
    let nc = matrix.n_controls();
    let mut costs = Vec::with_capacity(ne * nc);
    for e in 0..ne {
        for c in 0..nc {
            if matrix.is_forbidden(e, c) {
                costs.push(penalty);
            } else {
                costs.push((matrix.value(e, c) / unit).round() as i64);
            }
        }
    }
    QuantizedCosts {
        unit,
        penalty,
        costs,
        n_controls: nc,
    }
}

/// Optimal full matching under the given structure.
///
/// Every matchable exposed and control subject lands in exactly one set;
/// subjects whose every arc is forbidden are excluded up front and reported.
/// The solve is a min-cost circulation: exposed degree in [1, k_c], control
/// degree in [1, k_e], forbidden arcs at penalty cost, optimality certified
/// by a reduced-cost check on the final potentials.
pub fn optimal_full_match(matrix: &DistanceMatrix, structure: Structure) -> Result<MatchedDesign> {
    let k_c = structure.max_controls_per_exposed;
    let k_e = structure.max_exposed_per_control;
    if k_c < 1 || k_e < 1 {
        return Err(Error::InvalidConfig(
            "structure limits must be at least 1".into(),
        ));
    }

    // Exclude subjects with no permitted partner at all.
    let dropped_exposed = matrix.unmatchable_exposed();
    let dropped_controls = matrix.unmatchable_controls();
    let exposed: Vec<usize> = (0..matrix.n_exposed())
        .filter(|e| !dropped_exposed.contains(e))
        .collect();
    let controls: Vec<usize> = (0..matrix.n_controls())
        .filter(|c| !dropped_controls.contains(c))
        .collect();
    let mut excluded: Vec<String> = dropped_exposed
        .iter()
        .map(|&e| matrix.exposed_ids[e].clone())
        .chain(dropped_controls.iter().map(|&c| matrix.control_ids[c].clone()))
        .collect();
    excluded.sort();

    let ne = exposed.len();
    let nc = controls.len();
    if ne == 0 {
        return Err(Error::Infeasible("no matchable exposed subjects".into()));
    }
    if nc == 0 {
        return Err(Error::Infeasible("no matchable control subjects".into()));
    }
    if ne > k_e * nc {
        return Err(Error::Infeasible(format!(
            "exposed count {ne} > max_exposed_per_control {k_e} x control count {nc}"
        )));
    }
    if nc > k_c * ne {
        return Err(Error::Infeasible(format!(
            "control count {nc} > max_controls_per_exposed {k_c} x exposed count {ne}"
        )));
    }

    let quantized = quantize(matrix);

    // Circulation with lower bounds, reduced to plain min-cost flow:
    //   source -> exposed   [1, k_c]
    //   exposed -> control  [0, 1]   cost d
    //   control -> sink     [1, k_e]
    //   sink -> source      [0, inf]
    // Unit lower bounds become excesses served by a super source/sink.
    let source = 0;
    let sink = 1;
    let super_source = 2;
    let super_sink = 3;
    let exposed_node = |i: usize| 4 + i;
    let control_node = |j: usize| 4 + ne + j;
    let mut net = MinCostFlow::new(4 + ne + nc);

    for i in 0..ne {
        net.add_arc(source, exposed_node(i), (k_c - 1) as i64, 0);
        net.add_arc(super_source, exposed_node(i), 1, 0);
    }
    for j in 0..nc {
        net.add_arc(control_node(j), sink, (k_e - 1) as i64, 0);
        net.add_arc(control_node(j), super_sink, 1, 0);
    }
    net.add_arc(super_source, sink, nc as i64, 0);
    net.add_arc(source, super_sink, ne as i64, 0);
    net.add_arc(sink, source, (ne * k_c) as i64, 0);

    let mut pair_arcs = vec![0usize; ne * nc];
    for (i, &e) in exposed.iter().enumerate() {
        for (j, &c) in controls.iter().enumerate() {
            pair_arcs[i * nc + j] =
                net.add_arc(exposed_node(i), control_node(j), 1, quantized.cost(e, c));
        }
    }

    let target = (ne + nc) as i64;
    let result = net.solve(super_source, super_sink, target);
    if result.flow < target {
        return Err(Error::Internal(
            "feasible counts but the flow solve did not saturate".into(),
        ));
    }
    if !net.optimality_certified() {
        return Err(Error::Internal("flow optimality certificate failed".into()));
    }

    // Decode matched edges.
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for i in 0..ne {
        for j in 0..nc {
            if net.flow_on(pair_arcs[i * nc + j]) == 1 {
                edges.push((i, j));
            }
        }
    }

    // Prune redundant zero-cost edges until every component is a star.
    let mut exposed_degree = vec![0usize; ne];
    let mut control_degree = vec![0usize; nc];
    for &(i, j) in &edges {
        exposed_degree[i] += 1;
        control_degree[j] += 1;
    }
    loop {
        let mut candidate: Option<usize> = None;
        for (idx, &(i, j)) in edges.iter().enumerate() {
            if exposed_degree[i] >= 2 && control_degree[j] >= 2 {
                let better = match candidate {
                    None => true,
                    Some(prev) => {
                        let (pi, pj) = edges[prev];
                        (
                            &matrix.exposed_ids[exposed[i]],
                            &matrix.control_ids[controls[j]],
                        ) < (
                            &matrix.exposed_ids[exposed[pi]],
                            &matrix.control_ids[controls[pj]],
                        )
                    }
                };
                if better {
                    candidate = Some(idx);
                }
            }
        }
        match candidate {
            Some(idx) => {
                let (i, j) = edges[idx];
                if quantized.cost(exposed[i], controls[j]) != 0 {
                    return Err(Error::Internal(
                        "positive-cost edge in a non-star component".into(),
                    ));
                }
                exposed_degree[i] -= 1;
                control_degree[j] -= 1;
                edges.remove(idx);
            }
            None => break,
        }
    }

    // Group edges into sets keyed by the star center.
    let mut by_exposed: Vec<Vec<usize>> = vec![Vec::new(); ne];
    for &(i, j) in &edges {
        by_exposed[i].push(j);
    }
    let mut set_members: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let mut control_sets: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..ne {
        match by_exposed[i].len() {
            0 => {
                return Err(Error::Internal(format!(
                    "exposed subject {} left unmatched by the solve",
                    matrix.exposed_ids[exposed[i]]
                )))
            }
            1 => {
                let j = by_exposed[i][0];
                if control_degree[j] >= 2 {
                    control_sets.entry(j).or_default().push(i);
                } else {
                    set_members.push((vec![i], vec![j]));
                }
            }
            _ => set_members.push((vec![i], by_exposed[i].clone())),
        }
    }
    for (j, members) in control_sets {
        set_members.push((members, vec![j]));
    }

    let mut total_distance = 0.0;
    let mut total_cost_scaled = 0i64;
    let mut caliper_violations = Vec::new();
    for &(i, j) in &edges {
        let (e, c) = (exposed[i], controls[j]);
        total_distance += matrix.value(e, c);
        total_cost_scaled += quantized.cost(e, c);
        if matrix.is_forbidden(e, c) {
            caliper_violations.push((
                matrix.exposed_ids[e].clone(),
                matrix.control_ids[c].clone(),
            ));
        }
    }
    caliper_violations.sort();

    let mut sets: Vec<MatchedSet> = set_members
        .into_iter()
        .map(|(es, cs)| {
            let mut exposed_ids: Vec<String> = es
                .iter()
                .map(|&i| matrix.exposed_ids[exposed[i]].clone())
                .collect();
            let mut control_ids: Vec<String> = cs
                .iter()
                .map(|&j| matrix.control_ids[controls[j]].clone())
                .collect();
            exposed_ids.sort();
            control_ids.sort();
            MatchedSet {
                id: 0,
                exposed: exposed_ids,
                controls: control_ids,
            }
        })
        .collect();
    sets.sort_by(|a, b| {
        let ka = a.exposed.first().min(a.controls.first());
        let kb = b.exposed.first().min(b.controls.first());
        ka.cmp(&kb)
    });
    for (idx, set) in sets.iter_mut().enumerate() {
        set.id = idx + 1;
    }

    Ok(MatchedDesign {
        sets,
        excluded,
        structure,
        total_distance,
        total_cost_scaled,
        caliper_violations,
    })
}

/// The default escalation schedule: pairs first, then alternating sides with
/// growing k.
pub fn default_schedule(max_k: usize) -> Vec<Structure> {
    let mut schedule = vec![Structure::new(1, 1)];
    for k in 2..=max_k.max(1) {
        schedule.push(Structure::new(k, 1));
        schedule.push(Structure::new(1, k));
    }
    schedule
}

/// One attempted structure in an escalation run.
#[derive(Debug, Clone, Serialize)]
pub struct EscalationAttempt {
    pub structure: Structure,
    pub feasible: bool,
    pub max_abs_smd_after: Option<f64>,
}

/// Result of escalating through a schedule of structures.
#[derive(Debug)]
pub struct EscalationOutcome {
    pub design: MatchedDesign,
    pub report: BalanceReport,
    /// All post-match standardized differences landed inside the acceptable
    /// band; when false the least-imbalanced design is returned instead.
    pub balanced: bool,
    pub attempts: Vec<EscalationAttempt>,
}

/// Walk the schedule, returning the first design whose balance verdict is
/// acceptable or better; otherwise the design minimizing the worst
/// post-match standardized difference, flagged unbalanced.
pub fn escalate<F>(
    matrix: &DistanceMatrix,
    schedule: &[Structure],
    mut balance_of: F,
) -> Result<EscalationOutcome>
where
    F: FnMut(&MatchedDesign) -> Result<BalanceReport>,
{
    if schedule.is_empty() {
        return Err(Error::InvalidConfig("empty escalation schedule".into()));
    }
    let mut attempts = Vec::new();
    let mut best: Option<(f64, MatchedDesign, BalanceReport)> = None;

    for &structure in schedule {
        let design = match optimal_full_match(matrix, structure) {
            Ok(design) => design,
            Err(Error::Infeasible(_)) => {
                attempts.push(EscalationAttempt {
                    structure,
                    feasible: false,
                    max_abs_smd_after: None,
                });
                continue;
            }
            Err(other) => return Err(other),
        };
        let report = balance_of(&design)?;
        let worst = report.max_abs_after();
        attempts.push(EscalationAttempt {
            structure,
            feasible: true,
            max_abs_smd_after: Some(worst),
        });
        if report.verdict != BalanceVerdict::Failed {
            return Ok(EscalationOutcome {
                design,
                report,
                balanced: true,
                attempts,
            });
        }
        let improves = match &best {
            None => true,
            Some((best_worst, _, _)) => worst < *best_worst,
        };
        if improves {
            best = Some((worst, design, report));
        }
    }

    match best {
        Some((_, design, report)) => Ok(EscalationOutcome {
            design,
            report,
            balanced: false,
            attempts,
        }),
        None => Err(Error::Infeasible(
            "every structure in the schedule is infeasible".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balance::{BalanceThresholds, ColumnBalance};

    fn matrix_from(values: &[&[f64]]) -> DistanceMatrix {
        let ne = values.len();
        let nc = values[0].len();
        let exposed: Vec<String> = (0..ne).map(|i| format!("e{i:02}")).collect();
        let controls: Vec<String> = (0..nc).map(|j| format!("c{j:02}")).collect();
        DistanceMatrix::build(exposed, controls, |e, c| values[e][c]).unwrap()
    }

    #[test]
    fn two_by_two_pairs_take_the_diagonal() {
        let matrix = matrix_from(&[&[1.0, 5.0], &[5.0, 1.0]]);
        let design = optimal_full_match(&matrix, Structure::new(1, 1)).unwrap();
        assert_eq!(design.sets.len(), 2);
        assert_eq!(design.sets[0].exposed, vec!["e00"]);
        assert_eq!(design.sets[0].controls, vec!["c00"]);
        assert_eq!(design.sets[1].exposed, vec!["e01"]);
        assert_eq!(design.sets[1].controls, vec!["c01"]);
        assert!((design.total_distance - 2.0).abs() < 1e-9);
    }

    #[test]
    fn equal_costs_are_deterministic() {
        let matrix = matrix_from(&[&[3.0, 3.0], &[3.0, 3.0]]);
        let a = optimal_full_match(&matrix, Structure::new(1, 1)).unwrap();
        let b = optimal_full_match(&matrix, Structure::new(1, 1)).unwrap();
        assert_eq!(a.sets, b.sets);
        assert!((a.total_distance - 6.0).abs() < 1e-9);
    }

    #[test]
    fn surplus_controls_fold_into_exposed_sets() {
        // 1 exposed, 3 controls: all controls must be matched to the single
        // exposed subject, so k_c >= 3 is required.
        let matrix = matrix_from(&[&[1.0, 2.0, 3.0]]);
        let err = optimal_full_match(&matrix, Structure::new(2, 1)).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
        let design = optimal_full_match(&matrix, Structure::new(3, 1)).unwrap();
        assert_eq!(design.sets.len(), 1);
        assert_eq!(design.sets[0].controls.len(), 3);
        assert!((design.total_distance - 6.0).abs() < 1e-9);
    }

    #[test]
    fn surplus_exposed_fold_into_control_sets() {
        let matrix = matrix_from(&[&[1.0], &[2.0], &[3.0]]);
        let err = optimal_full_match(&matrix, Structure::new(1, 2)).unwrap_err();
        match err {
            Error::Infeasible(message) => assert!(message.contains("exposed count 3")),
            other => panic!("unexpected: {other}"),
        }
        let design = optimal_full_match(&matrix, Structure::new(1, 3)).unwrap();
        assert_eq!(design.sets.len(), 1);
        assert_eq!(design.sets[0].exposed.len(), 3);
        assert_eq!(design.sets[0].controls.len(), 1);
    }

    #[test]
    fn enlarging_limits_never_costs_more() {
        let matrix = matrix_from(&[
            &[4.0, 9.0, 2.0, 7.0],
            &[8.0, 1.0, 6.0, 3.0],
        ]);
        let tight = optimal_full_match(&matrix, Structure::new(2, 1)).unwrap();
        let loose = optimal_full_match(&matrix, Structure::new(4, 2)).unwrap();
        assert!(loose.total_cost_scaled <= tight.total_cost_scaled);
    }

    #[test]
    fn empty_schedule_is_rejected() {
        let matrix = matrix_from(&[&[1.0]]);
        let err = escalate(&matrix, &[], |_| unreachable!()).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn infeasible_single_structure_schedule_errors() {
        let matrix = matrix_from(&[&[1.0], &[2.0], &[3.0]]);
        let schedule = [Structure::new(1, 2)];
        let err = escalate(&matrix, &schedule, |_| {
            panic!("balance must not be evaluated for infeasible structures")
        })
        .unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn escalation_short_circuits_on_first_balanced_design() {
        let matrix = matrix_from(&[&[1.0, 5.0], &[5.0, 1.0]]);
        let mut calls = 0;
        let outcome = escalate(&matrix, &default_schedule(3), |_| {
            calls += 1;
            Ok(BalanceReport::from_columns(
                vec![ColumnBalance {
                    label: "x".into(),
                    smd_before: 0.5,
                    smd_after: 0.01,
                }],
                BalanceThresholds::default(),
            ))
        })
        .unwrap();
        assert!(outcome.balanced);
        assert_eq!(outcome.design.structure, Structure::new(1, 1));
        assert_eq!(calls, 1);
    }

    #[test]
    fn unbalanced_schedule_returns_least_imbalanced() {
        let matrix = matrix_from(&[&[1.0, 5.0], &[5.0, 1.0]]);
        let mut smds = vec![0.9, 0.4, 0.6].into_iter();
        let outcome = escalate(&matrix, &default_schedule(2), |_| {
            let smd = smds.next().unwrap();
            Ok(BalanceReport::from_columns(
                vec![ColumnBalance {
                    label: "x".into(),
                    smd_before: 1.0,
                    smd_after: smd,
                }],
                BalanceThresholds::default(),
            ))
        })
        .unwrap();
        assert!(!outcome.balanced);
        assert!((outcome.report.max_abs_after() - 0.4).abs() < 1e-12);
    }
}
