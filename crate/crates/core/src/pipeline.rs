//! End-to-end study assembly for one exposure node: design matrix,
//! propensity fit, caliper distances, optimal full matching with escalation,
//! and randomization tests with confidence intervals. Node studies are built
//! lazily during gatekeeping so unreached nodes cost nothing.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::balance::{balance_report, BalanceReport, BalanceThresholds};
use crate::cohort::{Classification, Cohort, ContactPrecedence, ExposureNode};
use crate::distance::{apply_caliper, DistanceMatrix, RankMahalanobis};
use crate::error::{Error, Result};
use crate::gatekeeper::{run_gatekeeping, ExposureTree, GatekeepingTrace};
use crate::inference::{
    m_test, m_test_ci, proportions_ci, proportions_test, MatchedOutcomes,
};
use crate::matching::{
    default_schedule, escalate, EscalationAttempt, MatchedDesign, Structure,
};
use crate::propensity::{design_matrix, fit_balance_labeled, FitMethod};

/// Options steering every node study.
#[derive(Debug, Clone)]
pub struct StudyOptions {
    /// Caliper width in pooled logit SD units; infinite disables it.
    pub caliper_width: f64,
    /// Largest k tried by the default escalation schedule.
    pub max_k: usize,
    /// Explicit schedule override.
    pub schedule: Option<Vec<Structure>>,
    pub thresholds: BalanceThresholds,
    pub precedence: ContactPrecedence,
    /// Restrict matching to subjects with both co-primary outcomes.
    pub filter_availability: bool,
    /// Confidence level for inverted intervals.
    pub ci_level: f64,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            caliper_width: 0.2,
            max_k: 6,
            schedule: None,
            thresholds: BalanceThresholds::default(),
            precedence: ContactPrecedence::Maximal,
            filter_availability: true,
            ci_level: 0.95,
        }
    }
}

impl StudyOptions {
    pub fn schedule(&self) -> Vec<Structure> {
        self.schedule
            .clone()
            .unwrap_or_else(|| default_schedule(self.max_k))
    }
}

/// Everything produced while matching one exposure node against the shared
/// control group.
#[derive(Debug, Clone)]
pub struct NodeStudy {
    pub node: ExposureNode,
    /// Available (post-filter) counts before matching.
    pub n_exposed_available: usize,
    pub n_control_available: usize,
    pub design: MatchedDesign,
    pub balance: BalanceReport,
    pub balanced: bool,
    pub attempts: Vec<EscalationAttempt>,
    pub propensity_method: FitMethod,
    pub propensity_fallback: bool,
    pub propensity_residual_norm: f64,
    pub propensity_iterations: usize,
    pub coefficient_labels: Vec<String>,
    pub coefficients: Vec<f64>,
    pub dropped_design_columns: Vec<String>,
    pub caliper_threshold: f64,
    pub n_forbidden_pairs: usize,
    pub unmatchable: Vec<String>,
    /// Cohort row of every pooled subject, keyed by id.
    pub rows_by_id: BTreeMap<String, usize>,
}

/// Exposed and control cohort rows for a node under the availability filter.
pub fn node_rows(
    classifications: &[Classification],
    availability: &[bool],
    node: ExposureNode,
    filter_availability: bool,
) -> (Vec<usize>, Vec<usize>) {
    let keep = |i: usize| !filter_availability || availability[i];
    let exposed = (0..classifications.len())
        .filter(|&i| classifications[i].is_member(node) && keep(i))
        .collect();
    let control = (0..classifications.len())
        .filter(|&i| classifications[i].control && keep(i))
        .collect();
    (exposed, control)
}

/// Build the matched study for one node.
pub fn node_study(
    cohort: &Cohort,
    classifications: &[Classification],
    availability: &[bool],
    node: ExposureNode,
    options: &StudyOptions,
) -> Result<NodeStudy> {
    let (exposed_rows, control_rows) = node_rows(
        classifications,
        availability,
        node,
        options.filter_availability,
    );
    if exposed_rows.is_empty() {
        return Err(Error::EmptyGroup(format!(
            "node {} has no exposed subjects",
            node.name()
        )));
    }
    if control_rows.is_empty() {
        return Err(Error::EmptyGroup("no control subjects available".into()));
    }

    let pooled: Vec<usize> = exposed_rows.iter().chain(&control_rows).copied().collect();
    let n_exposed = exposed_rows.len();
    let z: Vec<f64> = (0..pooled.len())
        .map(|i| (i < n_exposed) as u8 as f64)
        .collect();

    let design = design_matrix(cohort, &pooled)?;
    let model = fit_balance_labeled(&design.matrix, &z, design.labels.clone())?;
    let probabilities = model.probabilities(&design.matrix);

    // Rank distances over the non-intercept design columns.
    let columns: Vec<Vec<f64>> = (1..design.matrix.ncols())
        .map(|j| design.matrix.column(j).iter().copied().collect())
        .collect();
    let engine = RankMahalanobis::from_columns(&columns)?;

    let exposed_ids: Vec<String> = exposed_rows
        .iter()
        .map(|&r| cohort.subjects[r].id.clone())
        .collect();
    let control_ids: Vec<String> = control_rows
        .iter()
        .map(|&r| cohort.subjects[r].id.clone())
        .collect();
    let matrix = DistanceMatrix::build(exposed_ids, control_ids, |e, c| {
        engine.distance(e, n_exposed + c)
    })?;

    // Propensities aligned with the (sorted) matrix rows and columns.
    let prob_by_id: BTreeMap<&str, f64> = pooled
        .iter()
        .enumerate()
        .map(|(i, &r)| (cohort.subjects[r].id.as_str(), probabilities[i]))
        .collect();
    let exposed_probs: Vec<f64> = matrix
        .exposed_ids
        .iter()
        .map(|id| prob_by_id[id.as_str()])
        .collect();
    let control_probs: Vec<f64> = matrix
        .control_ids
        .iter()
        .map(|id| prob_by_id[id.as_str()])
        .collect();
    let caliper = apply_caliper(&matrix, &exposed_probs, &control_probs, options.caliper_width)?;

    let ids: Vec<String> = pooled
        .iter()
        .map(|&r| cohort.subjects[r].id.clone())
        .collect();
    let balance_columns: Vec<(String, Vec<f64>)> = (1..design.matrix.ncols())
        .map(|j| {
            (
                design.labels[j].clone(),
                design.matrix.column(j).iter().copied().collect(),
            )
        })
        .collect();
    let thresholds = options.thresholds;
    let outcome = escalate(&caliper.matrix, &options.schedule(), |candidate| {
        balance_report(candidate, &balance_columns, &ids, &z, thresholds)
    })?;

    let mut unmatchable = caliper.unmatchable_exposed.clone();
    unmatchable.extend(caliper.unmatchable_controls.clone());
    unmatchable.sort();

    let rows_by_id: BTreeMap<String, usize> = pooled
        .iter()
        .map(|&r| (cohort.subjects[r].id.clone(), r))
        .collect();

    Ok(NodeStudy {
        node,
        n_exposed_available: exposed_rows.len(),
        n_control_available: control_rows.len(),
        design: outcome.design,
        balance: outcome.report,
        balanced: outcome.balanced,
        attempts: outcome.attempts,
        propensity_method: model.method,
        propensity_fallback: model.fallback,
        propensity_residual_norm: model.convergence.residual_norm,
        propensity_iterations: model.convergence.iterations,
        coefficient_labels: model.labels.clone(),
        coefficients: model.coefficients.iter().copied().collect(),
        dropped_design_columns: design.dropped.clone(),
        caliper_threshold: caliper.threshold,
        n_forbidden_pairs: caliper.n_forbidden,
        unmatchable,
        rows_by_id,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

/// Outcomes derivable from the raw survey fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DerivedOutcome {
    SelfRatedUnhealthy,
    Phq9Total,
    Bmi,
    Overweight,
    ProblematicDrinking,
    BingeDrinking,
    LifeSatisfaction,
}

impl DerivedOutcome {
    pub const ALL: [DerivedOutcome; 7] = [
        DerivedOutcome::SelfRatedUnhealthy,
        DerivedOutcome::Phq9Total,
        DerivedOutcome::Bmi,
        DerivedOutcome::Overweight,
        DerivedOutcome::ProblematicDrinking,
        DerivedOutcome::BingeDrinking,
        DerivedOutcome::LifeSatisfaction,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DerivedOutcome::SelfRatedUnhealthy => "self_rated_unhealthy",
            DerivedOutcome::Phq9Total => "phq9_total",
            DerivedOutcome::Bmi => "bmi",
            DerivedOutcome::Overweight => "overweight",
            DerivedOutcome::ProblematicDrinking => "problematic_drinking",
            DerivedOutcome::BingeDrinking => "binge_drinking",
            DerivedOutcome::LifeSatisfaction => "life_satisfaction",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        DerivedOutcome::ALL.into_iter().find(|o| o.name() == name)
    }

    pub fn default_kind(&self) -> OutcomeKind {
        match self {
            DerivedOutcome::Phq9Total
            | DerivedOutcome::Bmi
            | DerivedOutcome::LifeSatisfaction => OutcomeKind::Continuous,
            _ => OutcomeKind::Binary,
        }
    }

    /// Per-subject values, `None` where underivable.
    pub fn values(&self, cohort: &Cohort) -> Vec<Option<f64>> {
        cohort
            .derive_all_outcomes()
            .iter()
            .map(|o| match self {
                DerivedOutcome::SelfRatedUnhealthy => {
                    o.self_rated_unhealthy.map(|b| b as u8 as f64)
                }
                DerivedOutcome::Phq9Total => o.phq9_total.map(f64::from),
                DerivedOutcome::Bmi => o.bmi,
                DerivedOutcome::Overweight => o.overweight.map(|b| b as u8 as f64),
                DerivedOutcome::ProblematicDrinking => {
                    o.problematic_drinking.map(|b| b as u8 as f64)
                }
                DerivedOutcome::BingeDrinking => o.binge_drinking.map(|b| b as u8 as f64),
                DerivedOutcome::LifeSatisfaction => o.life_satisfaction.map(f64::from),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TestMethod {
    MTestNormal,
    MTestExact,
    ProportionsComposite,
}

/// Point estimate, marginal confidence interval, and p-value for one
/// (node, outcome) cell.
#[derive(Debug, Clone, Serialize)]
pub struct TestReport {
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub deviate: Option<f64>,
    pub unbounded_low: bool,
    pub unbounded_high: bool,
    pub n_sets: usize,
    /// Matched sets dropped because a member lacked this outcome.
    pub dropped_sets: usize,
}

/// Build per-set outcomes, dropping sets with missing values.
fn collect_outcomes<F>(design: &MatchedDesign, value_of: F) -> (MatchedOutcomes, usize)
where
    F: Fn(&str) -> Option<f64>,
{
    let mut sets = Vec::with_capacity(design.sets.len());
    let mut dropped = 0;
    for set in &design.sets {
        let exposed: Option<Vec<f64>> = set.exposed.iter().map(|id| value_of(id)).collect();
        let controls: Option<Vec<f64>> = set.controls.iter().map(|id| value_of(id)).collect();
        match (exposed, controls) {
            (Some(exposed), Some(controls)) => sets.push(crate::inference::SetOutcomes {
                set_id: set.id,
                exposed,
                controls,
            }),
            _ => dropped += 1,
        }
    }
    (MatchedOutcomes { sets }, dropped)
}

/// Test one outcome on a matched design: p-value at the zero null plus an
/// inverted confidence interval.
pub fn test_outcome<F>(
    design: &MatchedDesign,
    value_of: F,
    kind: OutcomeKind,
    ci_level: f64,
) -> Result<TestReport>
where
    F: Fn(&str) -> Option<f64>,
{
    let (outcomes, dropped_sets) = collect_outcomes(design, value_of);
    if outcomes.sets.is_empty() {
        return Err(Error::EmptyGroup("no matched sets carry this outcome".into()));
    }
    match kind {
        OutcomeKind::Continuous => {
            let test = m_test(&outcomes, 0.0)?;
            let inversion = m_test_ci(&outcomes, ci_level)?;
            Ok(TestReport {
                estimate: inversion.estimate,
                ci_low: inversion.ci_low,
                ci_high: inversion.ci_high,
                p_value: test.p_value,
                method: if test.exact {
                    TestMethod::MTestExact
                } else {
                    TestMethod::MTestNormal
                },
                deviate: test.deviate,
                unbounded_low: inversion.unbounded_low,
                unbounded_high: inversion.unbounded_high,
                n_sets: outcomes.n_sets(),
                dropped_sets,
            })
        }
        OutcomeKind::Binary => {
            let test = proportions_test(&outcomes, 0.0)?;
            let inversion = proportions_ci(&outcomes, ci_level)?;
            Ok(TestReport {
                estimate: test.estimate,
                ci_low: inversion.ci_low,
                ci_high: inversion.ci_high,
                p_value: test.p_value,
                method: TestMethod::ProportionsComposite,
                deviate: test.deviate,
                unbounded_low: inversion.unbounded_low,
                unbounded_high: inversion.unbounded_high,
                n_sets: outcomes.n_sets(),
                dropped_sets,
            })
        }
    }
}

/// Classification and availability for a cohort, computed once and shared
/// across node studies.
pub struct StudyContext {
    pub classifications: Vec<Classification>,
    pub availability: Vec<bool>,
}

impl StudyContext {
    pub fn build(cohort: &Cohort, precedence: ContactPrecedence) -> StudyContext {
        StudyContext::with_taxonomy(cohort, &crate::taxonomy::SportTaxonomy::default(), precedence)
    }

    pub fn with_taxonomy(
        cohort: &Cohort,
        taxonomy: &crate::taxonomy::SportTaxonomy,
        precedence: ContactPrecedence,
    ) -> StudyContext {
        StudyContext {
            classifications: cohort.classify(taxonomy, precedence),
            availability: cohort
                .derive_all_outcomes()
                .iter()
                .map(|o| o.availability)
                .collect(),
        }
    }
}

/// The outcome of one gatekept traversal: the trace and the per-node test
/// reports (tested nodes only).
pub struct HierarchyRun {
    pub trace: GatekeepingTrace,
    pub reports: BTreeMap<String, TestReport>,
    pub studies: BTreeMap<String, NodeStudy>,
}

/// Run the gatekept hierarchy for one outcome. Matching for a node happens
/// lazily, the first time the traversal needs its p-value; unreached nodes
/// are never matched or tested.
pub fn run_hierarchy_tests(
    cohort: &Cohort,
    tree: &ExposureTree,
    outcome_values: &[Option<f64>],
    kind: OutcomeKind,
    options: &StudyOptions,
) -> Result<HierarchyRun> {
    let context = StudyContext::build(cohort, options.precedence);
    let mut studies = BTreeMap::new();
    let (trace, reports) = run_hierarchy_tests_cached(
        cohort,
        &context,
        tree,
        outcome_values,
        kind,
        options,
        &mut studies,
    )?;
    Ok(HierarchyRun {
        trace,
        reports,
        studies,
    })
}

/// As [`run_hierarchy_tests`], but node studies persist in `studies` so
/// several outcomes can share one matching pass per node.
pub fn run_hierarchy_tests_cached(
    cohort: &Cohort,
    context: &StudyContext,
    tree: &ExposureTree,
    outcome_values: &[Option<f64>],
    kind: OutcomeKind,
    options: &StudyOptions,
    studies: &mut BTreeMap<String, NodeStudy>,
) -> Result<(GatekeepingTrace, BTreeMap<String, TestReport>)> {
    if outcome_values.len() != cohort.len() {
        return Err(Error::Internal(
            "outcome values are not aligned with the cohort".into(),
        ));
    }
    let mut reports: BTreeMap<String, TestReport> = BTreeMap::new();

    let trace = run_gatekeeping(tree, |name| {
        let node = ExposureNode::from_name(name)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))?;
        if !studies.contains_key(name) {
            let study = node_study(
                cohort,
                &context.classifications,
                &context.availability,
                node,
                options,
            )?;
            studies.insert(name.to_string(), study);
        }
        let study = &studies[name];
        let report = test_outcome(
            &study.design,
            |id| {
                study
                    .rows_by_id
                    .get(id)
                    .and_then(|&row| outcome_values[row])
            },
            kind,
            options.ci_level,
        )?;
        let p = report.p_value;
        reports.insert(name.to_string(), report);
        Ok(p)
    })?;

    Ok((trace, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{generate, GeneratorSpec};

    #[test]
    fn node_study_matches_and_balances_a_confounded_cohort() {
        let spec = GeneratorSpec::small_confounded(400, 0.5, 31);
        let synthetic = generate(&spec, 0).unwrap();
        let taxonomy = crate::taxonomy::SportTaxonomy::default();
        let classifications = synthetic
            .cohort
            .classify(&taxonomy, ContactPrecedence::Maximal);
        let availability = vec![true; synthetic.cohort.len()];
        let options = StudyOptions::default();
        let study = node_study(
            &synthetic.cohort,
            &classifications,
            &availability,
            ExposureNode::AnyActivity,
            &options,
        )
        .unwrap();
        assert!(study.design.n_matched_exposed() > 0);
        assert!(study.balance.max_abs_after() < study.balance.thresholds.acceptable);
        assert!(study.balanced);
        // Matching never invents subjects.
        assert!(study.design.n_matched_exposed() <= study.n_exposed_available);
        assert!(study.design.n_matched_controls() <= study.n_control_available);
    }

    #[test]
    fn lazy_matching_skips_unreached_nodes() {
        let spec = GeneratorSpec::small_confounded(300, 0.3, 55);
        let synthetic = generate(&spec, 2).unwrap();
        let tree = crate::gatekeeper::ExposureTree::default_hierarchy(1e-12).unwrap();
        // With an absurdly small alpha the root is tested and retained, so
        // only the root study is ever built.
        let run = run_hierarchy_tests(
            &synthetic.cohort,
            &tree,
            &synthetic.available_continuous_outcome(),
            OutcomeKind::Continuous,
            &StudyOptions::default(),
        )
        .unwrap();
        assert_eq!(run.trace.tested_count(), 1);
        assert_eq!(run.studies.len(), 1);
        assert_eq!(run.reports.len(), 1);
        assert!(run.studies.contains_key("any_activity"));
    }

    #[test]
    fn planted_huge_effects_reach_and_reject_everything() {
        let mut spec = GeneratorSpec::small_confounded(600, 0.3, 77);
        for node in ExposureNode::ALL {
            spec.continuous_outcome.node_effects.insert(node, -8.0);
        }
        let synthetic = generate(&spec, 0).unwrap();
        let tree = crate::gatekeeper::ExposureTree::default_hierarchy(0.025).unwrap();
        let run = run_hierarchy_tests(
            &synthetic.cohort,
            &tree,
            &synthetic.available_continuous_outcome(),
            OutcomeKind::Continuous,
            &StudyOptions::default(),
        )
        .unwrap();
        assert_eq!(run.trace.tested_count(), 7);
        assert_eq!(run.trace.rejected_count(), 7);
        for report in run.reports.values() {
            assert!(report.estimate < 0.0);
            assert!(report.ci_low <= report.estimate && report.estimate <= report.ci_high);
        }
    }
}
