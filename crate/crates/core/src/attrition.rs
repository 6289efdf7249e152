//! Attrition analysis: logistic regression of outcome availability on the
//! exposure indicator and baseline covariates, reported as adjusted odds
//! ratios with Wald confidence intervals.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cohort::{Classification, Cohort, ExposureNode};
use crate::error::{Error, Result};
use crate::propensity::{design_matrix, expit, fit_max_likelihood};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OddsRatioEstimate {
    pub odds_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

/// One exposure's attrition row. `estimate` is absent when the fit failed
/// (separation, no availability variation, ...), with the reason in `note`.
#[derive(Debug, Clone, Serialize)]
pub struct AttritionRow {
    pub node: String,
    pub n_exposed: usize,
    pub n_control: usize,
    pub estimate: Option<OddsRatioEstimate>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttritionReport {
    pub rows: Vec<AttritionRow>,
}

/// Wald z for the reported confidence level (95%).
const WALD_Z: f64 = 1.96;

/// Fit availability ~ exposure + covariates for one node and return the
/// exposure odds ratio.
pub fn attrition_row(
    cohort: &Cohort,
    node: ExposureNode,
    exposed_rows: &[usize],
    control_rows: &[usize],
    availability: &[bool],
) -> AttritionRow {
    let n_exposed = exposed_rows.len();
    let n_control = control_rows.len();
    let mut row = AttritionRow {
        node: node.name().to_string(),
        n_exposed,
        n_control,
        estimate: None,
        note: None,
    };
    if n_exposed == 0 || n_control == 0 {
        row.note = Some("empty exposed or control group".into());
        return row;
    }

    let pooled: Vec<usize> = exposed_rows.iter().chain(control_rows).copied().collect();
    let y: Vec<f64> = pooled.iter().map(|&r| availability[r] as u8 as f64).collect();
    if y.iter().all(|&v| v == 1.0) || y.iter().all(|&v| v == 0.0) {
        row.note = Some("no variation in availability".into());
        return row;
    }

    let design = match design_matrix(cohort, &pooled) {
        Ok(d) => d,
        Err(e) => {
            row.note = Some(e.to_string());
            return row;
        }
    };
    // [intercept | exposure | covariates]
    let n = pooled.len();
    let p = design.matrix.ncols() + 1;
    let x = DMatrix::from_fn(n, p, |i, j| match j {
        0 => 1.0,
        1 => (i < n_exposed) as u8 as f64,
        _ => design.matrix[(i, j - 1)],
    });

    match wald_odds_ratio(&x, &y, 1) {
        Ok(estimate) => row.estimate = Some(estimate),
        Err(e) => row.note = Some(e.to_string()),
    }
    row
}

/// Logistic fit plus a Wald interval for `exp(coefficient)` at
/// `coefficient_index`, with the standard error from the inverse observed
/// information.
pub fn wald_odds_ratio(
    x: &DMatrix<f64>,
    y: &[f64],
    coefficient_index: usize,
) -> Result<OddsRatioEstimate> {
    let model = fit_max_likelihood(x, y)?;
    let n = x.nrows();
    let p = x.ncols();

    let eta = x * &model.coefficients;
    let weights = DVector::from_fn(n, |i, _| {
        let pi = expit(eta[i]);
        (pi * (1.0 - pi)).max(1e-12)
    });
    let mut information: DMatrix<f64> = DMatrix::zeros(p, p);
    for i in 0..n {
        for a in 0..p {
            for b in a..p {
                information[(a, b)] += weights[i] * x[(i, a)] * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            information[(a, b)] = information[(b, a)];
        }
    }
    let inverse = information
        .cholesky()
        .ok_or_else(|| Error::Singular("information matrix".into()))?
        .inverse();

    let beta = model.coefficients[coefficient_index];
    let se = inverse[(coefficient_index, coefficient_index)].sqrt();
    let z = beta / se;
    let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
    use statrs::distribution::ContinuousCDF;
    Ok(OddsRatioEstimate {
        odds_ratio: beta.exp(),
        ci_low: (beta - WALD_Z * se).exp(),
        ci_high: (beta + WALD_Z * se).exp(),
        p_value: (2.0 * normal.cdf(-z.abs())).min(1.0),
    })
}

/// Attrition rows for every node in the hierarchy, sharing the control
/// group. Uses the full (availability-unfiltered) cohort.
pub fn attrition_report(
    cohort: &Cohort,
    classifications: &[Classification],
    availability: &[bool],
) -> AttritionReport {
    let control_rows: Vec<usize> = (0..cohort.len())
        .filter(|&i| classifications[i].control)
        .collect();
    let rows = ExposureNode::ALL
        .into_iter()
        .map(|node| {
            let exposed_rows: Vec<usize> = (0..cohort.len())
                .filter(|&i| classifications[i].is_member(node))
                .collect();
            attrition_row(cohort, node, &exposed_rows, &control_rows, availability)
        })
        .collect();
    AttritionReport { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Subject;
    use crate::outcomes::RawOutcomeFields;
    use crate::schema::{CovariateSchema, CovariateValue, SchemaEntry};
    use std::collections::BTreeSet;

    fn constant_covariate_cohort(n: usize) -> Cohort {
        // A two-level covariate split evenly so the design matrix is valid.
        let schema = CovariateSchema::new(vec![SchemaEntry::categorical(
            "flag",
            &["no", "yes"],
            "no",
        )])
        .unwrap();
        let subjects = (0..n)
            .map(|i| Subject {
                id: format!("s{i:03}"),
                covariates: vec![CovariateValue::Level(i % 2)],
                activities: BTreeSet::new(),
                raw_outcomes: RawOutcomeFields::default(),
                wave4_present: true,
            })
            .collect();
        Cohort::new(schema, subjects).unwrap()
    }

    #[test]
    fn covariate_free_two_by_two_matches_cross_product_exactly() {
        // a=10 (exposed, available), b=10, c=5, d=20: OR = (10*20)/(10*5) = 4.
        let n = 45;
        let x = DMatrix::from_fn(n, 2, |i, j| match j {
            0 => 1.0,
            _ => (i < 20) as u8 as f64,
        });
        let mut y = vec![0.0; n];
        for item in y.iter_mut().take(10) {
            *item = 1.0;
        }
        for item in y.iter_mut().take(25).skip(20) {
            *item = 1.0;
        }
        let estimate = wald_odds_ratio(&x, &y, 1).unwrap();
        assert!(
            (estimate.odds_ratio - 4.0).abs() < 1e-6,
            "odds ratio {}",
            estimate.odds_ratio
        );
        assert!(estimate.ci_low < 4.0 && 4.0 < estimate.ci_high);
    }

    #[test]
    fn adjusted_odds_ratio_stays_near_cross_product_with_orthogonal_covariate() {
        let cohort = constant_covariate_cohort(45);
        let exposed_rows: Vec<usize> = (0..20).collect();
        let control_rows: Vec<usize> = (20..45).collect();
        let mut availability = vec![false; 45];
        for i in 0..10 {
            availability[i] = true;
        }
        for i in 20..25 {
            availability[i] = true;
        }
        let row = attrition_row(
            &cohort,
            ExposureNode::AnyActivity,
            &exposed_rows,
            &control_rows,
            &availability,
        );
        let estimate = row.estimate.expect("fit should succeed");
        let expected = (10.0 * 20.0) / (10.0 * 5.0);
        assert!(
            (estimate.odds_ratio - expected).abs() < 0.2,
            "odds ratio {} vs {}",
            estimate.odds_ratio,
            expected
        );
    }

    #[test]
    fn zero_coefficient_gives_unit_odds_ratio() {
        // Perfectly balanced availability across exposure: beta_z = 0.
        let n = 40;
        let x = DMatrix::from_fn(n, 2, |i, j| match j {
            0 => 1.0,
            _ => (i < 20) as u8 as f64,
        });
        let y: Vec<f64> = (0..n).map(|i| (i % 2 == 0) as u8 as f64).collect();
        let estimate = wald_odds_ratio(&x, &y, 1).unwrap();
        assert!((estimate.odds_ratio - 1.0).abs() < 1e-8);
        let low_gap = estimate.odds_ratio.ln() - estimate.ci_low.ln();
        let high_gap = estimate.ci_high.ln() - estimate.odds_ratio.ln();
        assert!((low_gap - high_gap).abs() < 1e-10);
    }

    #[test]
    fn log_odds_interval_is_symmetric() {
        let cohort = constant_covariate_cohort(60);
        let exposed_rows: Vec<usize> = (0..30).collect();
        let control_rows: Vec<usize> = (30..60).collect();
        let mut availability = vec![false; 60];
        for i in (0..60).step_by(3) {
            availability[i] = true;
        }
        availability[1] = true;
        let row = attrition_row(
            &cohort,
            ExposureNode::AnySports,
            &exposed_rows,
            &control_rows,
            &availability,
        );
        let estimate = row.estimate.unwrap();
        let low_gap = estimate.odds_ratio.ln() - estimate.ci_low.ln();
        let high_gap = estimate.ci_high.ln() - estimate.odds_ratio.ln();
        assert!((low_gap - high_gap).abs() < 1e-10);
    }

    #[test]
    fn constant_availability_is_flagged() {
        let cohort = constant_covariate_cohort(20);
        let exposed_rows: Vec<usize> = (0..10).collect();
        let control_rows: Vec<usize> = (10..20).collect();
        let availability = vec![true; 20];
        let row = attrition_row(
            &cohort,
            ExposureNode::AnyActivity,
            &exposed_rows,
            &control_rows,
            &availability,
        );
        assert!(row.estimate.is_none());
        assert!(row.note.unwrap().contains("no variation"));
    }

    #[test]
    fn empty_control_group_is_flagged() {
        let cohort = constant_covariate_cohort(10);
        let exposed_rows: Vec<usize> = (0..10).collect();
        let row = attrition_row(
            &cohort,
            ExposureNode::AnyActivity,
            &exposed_rows,
            &[],
            &vec![true; 10],
        );
        assert!(row.estimate.is_none());
    }
}
