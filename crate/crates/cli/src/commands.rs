//! Subcommand implementations: match, test, attrition, simulate, report.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::{bail, Context};
use serde::Serialize;

use treematch_core::attrition::attrition_report;
use treematch_core::balance::BalanceVerdict;
use treematch_core::cohort::{load_cohort, Cohort, ExposureNode};
use treematch_core::gatekeeper::{validate_fwer, Decision, ExposureTree};
use treematch_core::pipeline::{
    node_study, run_hierarchy_tests_cached, NodeStudy, OutcomeKind, StudyContext, TestMethod,
};

use crate::config::{OutcomeSource, ResolvedOutcome, RunConfig};
use crate::output::{format_ci, format_p, OutDir, Table};

pub fn read_cohort(config: &RunConfig, input: &Path) -> anyhow::Result<Cohort> {
    let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let cohort = load_cohort(BufReader::new(file), &config.schema, &config.load_options)?;
    Ok(cohort)
}

fn outcome_values(
    cohort: &Cohort,
    outcome: &ResolvedOutcome,
) -> anyhow::Result<Vec<Option<f64>>> {
    let values = match &outcome.source {
        OutcomeSource::Derived(derived) => derived.values(cohort),
        OutcomeSource::Column(name) => cohort
            .extra_columns
            .get(name)
            .with_context(|| {
                format!("column outcome {name} not loaded; list it under input.extra_outcome_columns")
            })?
            .clone(),
    };
    if outcome.kind == OutcomeKind::Binary {
        for v in values.iter().flatten() {
            if *v != 0.0 && *v != 1.0 {
                bail!(
                    "outcome {} is declared binary but contains the value {v}",
                    outcome.name
                );
            }
        }
    }
    Ok(values)
}

#[derive(Serialize)]
struct NodeCountsRecord {
    node: String,
    exposed_before: usize,
    control_before: usize,
    exposed_matched: usize,
    control_matched: usize,
    sets: usize,
    structure: Option<String>,
    max_abs_smd_after: Option<f64>,
    verdict: Option<String>,
    balanced: Option<bool>,
    excluded: usize,
    caliper_violations: usize,
    error: Option<String>,
}

#[derive(Serialize)]
struct PropensityRecord {
    node: String,
    method: String,
    fallback: bool,
    iterations: usize,
    residual_norm: f64,
    dropped_columns: Vec<String>,
    coefficients: Vec<(String, f64)>,
}

#[derive(Serialize)]
struct BalanceRecord {
    node: String,
    column: String,
    smd_before: f64,
    smd_after: f64,
}

fn verdict_name(verdict: BalanceVerdict) -> &'static str {
    match verdict {
        BalanceVerdict::Ideal => "ideal",
        BalanceVerdict::Acceptable => "acceptable",
        BalanceVerdict::Failed => "failed",
    }
}

fn counts_record(node: ExposureNode, outcome: &Result<NodeStudy, String>) -> NodeCountsRecord {
    match outcome {
        Ok(study) => NodeCountsRecord {
            node: node.name().to_string(),
            exposed_before: study.n_exposed_available,
            control_before: study.n_control_available,
            exposed_matched: study.design.n_matched_exposed(),
            control_matched: study.design.n_matched_controls(),
            sets: study.design.sets.len(),
            structure: Some(study.design.structure.label()),
            max_abs_smd_after: Some(study.balance.max_abs_after()),
            verdict: Some(verdict_name(study.balance.verdict).to_string()),
            balanced: Some(study.balanced),
            excluded: study.design.excluded.len(),
            caliper_violations: study.design.caliper_violations.len(),
            error: None,
        },
        Err(message) => NodeCountsRecord {
            node: node.name().to_string(),
            exposed_before: 0,
            control_before: 0,
            exposed_matched: 0,
            control_matched: 0,
            sets: 0,
            structure: None,
            max_abs_smd_after: None,
            verdict: None,
            balanced: None,
            excluded: 0,
            caliper_violations: 0,
            error: Some(message.clone()),
        },
    }
}

fn counts_table(records: &[NodeCountsRecord]) -> String {
    let mut table = Table::new(&[
        "exposure",
        "E before",
        "C before",
        "E matched",
        "C matched",
        "sets",
        "structure",
        "max|SMD|",
        "verdict",
    ]);
    for r in records {
        match &r.error {
            None => table.row(vec![
                r.node.clone(),
                r.exposed_before.to_string(),
                r.control_before.to_string(),
                r.exposed_matched.to_string(),
                r.control_matched.to_string(),
                r.sets.to_string(),
                r.structure.clone().unwrap_or_default(),
                r.max_abs_smd_after
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_default(),
                r.verdict.clone().unwrap_or_default(),
            ]),
            Some(e) => table.row(vec![
                r.node.clone(),
                "-".into(),
                "-".into(),
                "-".into(),
                "-".into(),
                "-".into(),
                "-".into(),
                "-".into(),
                format!("skipped: {e}"),
            ]),
        }
    }
    table.render()
}

fn write_study_outputs(
    out: &OutDir,
    studies: &[(ExposureNode, Result<NodeStudy, String>)],
) -> anyhow::Result<()> {
    let mut counts = Vec::new();
    let mut propensity = Vec::new();
    let mut balance = Vec::new();
    for (node, outcome) in studies {
        counts.push(counts_record(*node, outcome));
        if let Ok(study) = outcome {
            propensity.push(PropensityRecord {
                node: node.name().to_string(),
                method: format!("{:?}", study.propensity_method),
                fallback: study.propensity_fallback,
                iterations: study.propensity_iterations,
                residual_norm: study.propensity_residual_norm,
                dropped_columns: study.dropped_design_columns.clone(),
                coefficients: study
                    .coefficient_labels
                    .iter()
                    .cloned()
                    .zip(study.coefficients.iter().copied())
                    .collect(),
            });
            for column in &study.balance.columns {
                balance.push(BalanceRecord {
                    node: node.name().to_string(),
                    column: column.label.clone(),
                    smd_before: column.smd_before,
                    smd_after: column.smd_after,
                });
            }

            let mut design_rows = Vec::new();
            for set in &study.design.sets {
                for id in &set.exposed {
                    design_rows.push(vec![set.id.to_string(), id.clone(), "exposed".into()]);
                }
                for id in &set.controls {
                    design_rows.push(vec![set.id.to_string(), id.clone(), "control".into()]);
                }
            }
            out.write_csv(
                &format!("design_{}.csv", node.name()),
                &["set_id", "subject_id", "role"],
                &design_rows,
            )?;

            let balance_rows: Vec<Vec<String>> = study
                .balance
                .columns
                .iter()
                .map(|c| {
                    vec![
                        c.label.clone(),
                        format!("{:.6}", c.smd_before),
                        format!("{:.6}", c.smd_after),
                    ]
                })
                .collect();
            out.write_csv(
                &format!("balance_{}.csv", node.name()),
                &["column", "smd_before", "smd_after"],
                &balance_rows,
            )?;
        }
    }
    out.write_text("counts.txt", &counts_table(&counts))?;
    out.write_ndjson("counts.ndjson", &counts)?;
    out.write_ndjson("propensity.ndjson", &propensity)?;
    out.write_ndjson("balance.ndjson", &balance)?;
    Ok(())
}

/// Build matched designs and balance reports for every node.
pub fn cmd_match(config: &RunConfig, input: &Path, outdir: &Path) -> anyhow::Result<()> {
    let cohort = read_cohort(config, input)?;
    let context = StudyContext::with_taxonomy(&cohort, &config.taxonomy, config.study.precedence);
    let out = OutDir::create(outdir, &config.config_hash)?;

    let studies: Vec<(ExposureNode, Result<NodeStudy, String>)> = {
        use rayon::prelude::*;
        ExposureNode::ALL
            .into_par_iter()
            .map(|node| {
                let result = node_study(
                    &cohort,
                    &context.classifications,
                    &context.availability,
                    node,
                    &config.study,
                )
                .map_err(|e| e.to_string());
                (node, result)
            })
            .collect()
    };

    write_study_outputs(&out, &studies)?;
    eprintln!(
        "match: wrote designs for {} nodes to {}",
        studies.iter().filter(|(_, s)| s.is_ok()).count(),
        outdir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ResultRecord {
    outcome: String,
    node: String,
    tested: bool,
    decision: String,
    alpha: f64,
    p_value: Option<f64>,
    estimate: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    method: Option<String>,
    n_sets: Option<usize>,
    dropped_sets: Option<usize>,
    error: Option<String>,
}

fn decision_name(decision: Decision) -> &'static str {
    match decision {
        Decision::Rejected => "rejected",
        Decision::Retained => "retained",
        Decision::NotReached => "not_reached",
    }
}

fn method_name(method: TestMethod) -> &'static str {
    match method {
        TestMethod::MTestNormal => "m_test_normal",
        TestMethod::MTestExact => "m_test_exact",
        TestMethod::ProportionsComposite => "proportions_composite",
    }
}

/// Run the gatekept hierarchy tests for every configured outcome.
pub fn cmd_test(config: &RunConfig, input: &Path, outdir: &Path) -> anyhow::Result<()> {
    let cohort = read_cohort(config, input)?;
    let context = StudyContext::with_taxonomy(&cohort, &config.taxonomy, config.study.precedence);
    let out = OutDir::create(outdir, &config.config_hash)?;

    let mut studies: BTreeMap<String, NodeStudy> = BTreeMap::new();
    let mut records: Vec<ResultRecord> = Vec::new();
    let mut text = String::new();

    for outcome in &config.outcomes {
        let values = outcome_values(&cohort, outcome)?;
        let (trace, reports) = run_hierarchy_tests_cached(
            &cohort,
            &context,
            &config.tree,
            &values,
            outcome.kind,
            &config.study,
            &mut studies,
        )?;

        let mut table = Table::new(&[
            "exposure",
            "estimate (95% CI)",
            "p-value",
            "alpha",
            "decision",
        ]);
        for node_trace in &trace.nodes {
            let report = reports.get(&node_trace.name);
            table.row(vec![
                node_trace.name.clone(),
                report
                    .map(|r| {
                        format!("{:.3} {}", r.estimate, format_ci(r.ci_low, r.ci_high))
                    })
                    .unwrap_or_else(|| "-".into()),
                node_trace
                    .p_value
                    .map(format_p)
                    .unwrap_or_else(|| "-".into()),
                format!("{:.5}", node_trace.alpha),
                match &node_trace.error {
                    Some(e) => format!("not_reached ({e})"),
                    None => decision_name(node_trace.decision).to_string(),
                },
            ]);
            records.push(ResultRecord {
                outcome: outcome.name.clone(),
                node: node_trace.name.clone(),
                tested: node_trace.tested,
                decision: decision_name(node_trace.decision).to_string(),
                alpha: node_trace.alpha,
                p_value: node_trace.p_value,
                estimate: report.map(|r| r.estimate),
                ci_low: report.map(|r| r.ci_low),
                ci_high: report.map(|r| r.ci_high),
                method: report.map(|r| method_name(r.method).to_string()),
                n_sets: report.map(|r| r.n_sets),
                dropped_sets: report.map(|r| r.dropped_sets),
                error: node_trace.error.clone(),
            });
        }
        text.push_str(&format!("== outcome: {} ==\n", outcome.name));
        text.push_str(&table.render());
        text.push('\n');
    }

    out.write_text("results.txt", &text)?;
    out.write_ndjson("results.ndjson", &records)?;

    let study_list: Vec<(ExposureNode, Result<NodeStudy, String>)> = studies
        .into_iter()
        .map(|(name, study)| (ExposureNode::from_name(&name).unwrap(), Ok(study)))
        .collect();
    write_study_outputs(&out, &study_list)?;

    eprintln!("test: wrote results to {}", outdir.display());
    Ok(())
}

#[derive(Serialize)]
struct AttritionRecord {
    node: String,
    n_exposed: usize,
    n_control: usize,
    odds_ratio: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    p_value: Option<f64>,
    note: Option<String>,
}

/// Model outcome availability per exposure.
pub fn cmd_attrition(config: &RunConfig, input: &Path, outdir: &Path) -> anyhow::Result<()> {
    let cohort = read_cohort(config, input)?;
    let context = StudyContext::with_taxonomy(&cohort, &config.taxonomy, config.study.precedence);
    let out = OutDir::create(outdir, &config.config_hash)?;

    let report = attrition_report(&cohort, &context.classifications, &context.availability);

    let mut table = Table::new(&["exposure", "odds-ratio (95% CI)", "p-value"]);
    let mut records = Vec::new();
    for row in &report.rows {
        match (&row.estimate, &row.note) {
            (Some(e), _) => table.row(vec![
                row.node.clone(),
                format!("{:.2} ({:.2}, {:.2})", e.odds_ratio, e.ci_low, e.ci_high),
                format_p(e.p_value),
            ]),
            (None, note) => table.row(vec![
                row.node.clone(),
                format!("- ({})", note.as_deref().unwrap_or("unavailable")),
                "-".into(),
            ]),
        }
        records.push(AttritionRecord {
            node: row.node.clone(),
            n_exposed: row.n_exposed,
            n_control: row.n_control,
            odds_ratio: row.estimate.as_ref().map(|e| e.odds_ratio),
            ci_low: row.estimate.as_ref().map(|e| e.ci_low),
            ci_high: row.estimate.as_ref().map(|e| e.ci_high),
            p_value: row.estimate.as_ref().map(|e| e.p_value),
            note: row.note.clone(),
        });
    }

    out.write_text("attrition.txt", &table.render())?;
    out.write_ndjson("attrition.ndjson", &records)?;
    eprintln!("attrition: wrote report to {}", outdir.display());
    Ok(())
}

#[derive(Serialize)]
struct FwerSummaryRecord {
    replications: usize,
    empirical_fwer: f64,
    binomial_se: f64,
    false_rejection_replications: usize,
    replications_with_errors: usize,
    global_alpha: f64,
}

#[derive(Serialize)]
struct FwerNodeRecord {
    node: String,
    tested: usize,
    rejected: usize,
    rejection_rate: f64,
}

/// Monte Carlo FWER / power validation of the full pipeline.
pub fn cmd_simulate(
    config: &RunConfig,
    outdir: &Path,
    replications_override: Option<usize>,
) -> anyhow::Result<()> {
    let out = OutDir::create(outdir, &config.config_hash)?;
    let spec = config.generator_spec()?;
    let tree = ExposureTree::default_hierarchy(config.simulate.alpha)?;
    let replications = replications_override.unwrap_or(config.simulate.replications);

    let report = validate_fwer(&spec, &tree, replications, &config.study)?;

    let summary = FwerSummaryRecord {
        replications: report.replications,
        empirical_fwer: report.empirical_fwer,
        binomial_se: report.binomial_se,
        false_rejection_replications: report.false_rejection_replications,
        replications_with_errors: report.replications_with_errors,
        global_alpha: config.simulate.alpha,
    };
    let nodes: Vec<FwerNodeRecord> = report
        .per_node
        .iter()
        .map(|n| FwerNodeRecord {
            node: n.name.clone(),
            tested: n.tested,
            rejected: n.rejected,
            rejection_rate: n.rejected as f64 / report.replications as f64,
        })
        .collect();

    let mut text = format!(
        "replications: {}\nempirical FWER: {:.4} (binomial SE {:.4})\nreplications with errors: {}\n\n",
        report.replications,
        report.empirical_fwer,
        report.binomial_se,
        report.replications_with_errors
    );
    let mut table = Table::new(&["node", "tested", "rejected", "rejection rate"]);
    for n in &nodes {
        table.row(vec![
            n.node.clone(),
            n.tested.to_string(),
            n.rejected.to_string(),
            format!("{:.4}", n.rejection_rate),
        ]);
    }
    text.push_str(&table.render());

    out.write_text("fwer.txt", &text)?;
    out.write_ndjson("fwer.ndjson", std::slice::from_ref(&summary))?;
    out.write_ndjson("fwer_nodes.ndjson", &nodes)?;
    eprintln!(
        "simulate: {} replications, empirical FWER {:.4}",
        report.replications, report.empirical_fwer
    );
    Ok(())
}

/// Re-render machine-readable outputs in an output directory as tables.
pub fn cmd_report(outdir: &Path) -> anyhow::Result<()> {
    let read_ndjson = |name: &str| -> anyhow::Result<Vec<serde_json::Value>> {
        let path = outdir.join(name);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let file = BufReader::new(File::open(&path)?);
        let mut records = Vec::new();
        for line in file.lines() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(records)
    };
    let text = |v: &serde_json::Value, key: &str| -> String {
        match &v[key] {
            serde_json::Value::Null => "-".into(),
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    };

    let counts = read_ndjson("counts.ndjson")?;
    if !counts.is_empty() {
        println!("== matched cohort sizes ==");
        let mut table = Table::new(&["exposure", "E before", "C before", "E matched", "C matched", "verdict"]);
        for r in &counts {
            table.row(vec![
                text(r, "node"),
                text(r, "exposed_before"),
                text(r, "control_before"),
                text(r, "exposed_matched"),
                text(r, "control_matched"),
                r["error"]
                    .as_str()
                    .map(|e| format!("skipped: {e}"))
                    .unwrap_or_else(|| text(r, "verdict")),
            ]);
        }
        println!("{}", table.render());
    }

    let results = read_ndjson("results.ndjson")?;
    if !results.is_empty() {
        let mut outcomes: Vec<String> = Vec::new();
        for r in &results {
            let name = text(r, "outcome");
            if !outcomes.contains(&name) {
                outcomes.push(name);
            }
        }
        for outcome in outcomes {
            println!("== outcome: {outcome} ==");
            let mut table =
                Table::new(&["exposure", "estimate", "95% CI", "p-value", "alpha", "decision"]);
            for r in results.iter().filter(|r| text(r, "outcome") == outcome) {
                let ci = match (r["ci_low"].as_f64(), r["ci_high"].as_f64()) {
                    (Some(low), Some(high)) => format_ci(low, high),
                    _ => "-".into(),
                };
                table.row(vec![
                    text(r, "node"),
                    r["estimate"]
                        .as_f64()
                        .map(|e| format!("{e:.3}"))
                        .unwrap_or_else(|| "-".into()),
                    ci,
                    r["p_value"].as_f64().map(format_p).unwrap_or_else(|| "-".into()),
                    r["alpha"].as_f64().map(|a| format!("{a:.5}")).unwrap_or_default(),
                    text(r, "decision"),
                ]);
            }
            println!("{}", table.render());
        }
    }

    let attrition = read_ndjson("attrition.ndjson")?;
    if !attrition.is_empty() {
        println!("== outcome availability ==");
        let mut table = Table::new(&["exposure", "odds-ratio", "95% CI", "p-value"]);
        for r in &attrition {
            let ci = match (r["ci_low"].as_f64(), r["ci_high"].as_f64()) {
                (Some(low), Some(high)) => format!("({low:.2}, {high:.2})"),
                _ => "-".into(),
            };
            table.row(vec![
                text(r, "node"),
                r["odds_ratio"]
                    .as_f64()
                    .map(|o| format!("{o:.2}"))
                    .unwrap_or_else(|| "-".into()),
                ci,
                r["p_value"].as_f64().map(format_p).unwrap_or_else(|| "-".into()),
            ]);
        }
        println!("{}", table.render());
    }

    let fwer = read_ndjson("fwer.ndjson")?;
    for r in &fwer {
        println!(
            "empirical FWER: {} (SE {}) over {} replications",
            text(r, "empirical_fwer"),
            text(r, "binomial_se"),
            text(r, "replications")
        );
    }
    Ok(())
}
