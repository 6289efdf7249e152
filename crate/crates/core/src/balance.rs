//! Covariate balance diagnostics: standardized mean differences before and
//! after matching, judged against the acceptable (0.2) and ideal (0.1)
//! bands. Before and after share the pre-matching pooled standard deviation
//! so improvement ratios are well defined.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matching::MatchedDesign;

/// Balance thresholds: every post-match standardized difference must sit
/// strictly inside (-acceptable, acceptable), ideally (-ideal, ideal).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BalanceThresholds {
    pub ideal: f64,
    pub acceptable: f64,
}

impl Default for BalanceThresholds {
    fn default() -> Self {
        BalanceThresholds {
            ideal: 0.1,
            acceptable: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BalanceVerdict {
    Ideal,
    Acceptable,
    Failed,
}

/// Standardized differences for one design-matrix column.
#[derive(Debug, Clone, Serialize)]
pub struct ColumnBalance {
    pub label: String,
    pub smd_before: f64,
    pub smd_after: f64,
}

/// Balance over every design column, with a verdict.
#[derive(Debug, Clone, Serialize)]
pub struct BalanceReport {
    pub columns: Vec<ColumnBalance>,
    pub thresholds: BalanceThresholds,
    pub verdict: BalanceVerdict,
}

impl BalanceReport {
    pub fn from_columns(columns: Vec<ColumnBalance>, thresholds: BalanceThresholds) -> Self {
        let max_abs = columns
            .iter()
            .map(|c| c.smd_after.abs())
            .fold(0.0, f64::max);
        let verdict = if max_abs < thresholds.ideal {
            BalanceVerdict::Ideal
        } else if max_abs < thresholds.acceptable {
            BalanceVerdict::Acceptable
        } else {
            BalanceVerdict::Failed
        };
        BalanceReport {
            columns,
            thresholds,
            verdict,
        }
    }

    pub fn max_abs_after(&self) -> f64 {
        self.columns
            .iter()
            .map(|c| c.smd_after.abs())
            .fold(0.0, f64::max)
    }

    /// Fraction of columns with |post-match difference| below `bound`.
    pub fn fraction_after_below(&self, bound: f64) -> f64 {
        if self.columns.is_empty() {
            return 1.0;
        }
        self.columns
            .iter()
            .filter(|c| c.smd_after.abs() < bound)
            .count() as f64
            / self.columns.len() as f64
    }
}

fn group_mean_var(column: &[f64], select: impl Fn(usize) -> bool) -> Option<(f64, f64, usize)> {
    let values: Vec<f64> = (0..column.len()).filter(|&i| select(i)).map(|i| column[i]).collect();
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Some((mean, var, n))
}

/// Pooled standard deviation before matching:
/// sqrt((var_exposed + var_control) / 2) with n-1 denominators.
pub fn pooled_sd(column: &[f64], z: &[f64]) -> Result<f64> {
    let (_, var_e, _) = group_mean_var(column, |i| z[i] == 1.0)
        .ok_or_else(|| Error::EmptyGroup("no exposed subjects".into()))?;
    let (_, var_c, _) = group_mean_var(column, |i| z[i] != 1.0)
        .ok_or_else(|| Error::EmptyGroup("no control subjects".into()))?;
    Ok(((var_e + var_c) / 2.0).sqrt())
}

fn standardize(difference: f64, s_pool: f64) -> f64 {
    if s_pool > 0.0 {
        difference / s_pool
    } else if difference == 0.0 {
        0.0
    } else {
        // Undefined: flagged as infinite.
        f64::INFINITY
    }
}

/// Pre-matching standardized mean difference of a column.
pub fn smd_before(column: &[f64], z: &[f64]) -> Result<f64> {
    let (mean_e, _, _) = group_mean_var(column, |i| z[i] == 1.0)
        .ok_or_else(|| Error::EmptyGroup("no exposed subjects".into()))?;
    let (mean_c, _, _) = group_mean_var(column, |i| z[i] != 1.0)
        .ok_or_else(|| Error::EmptyGroup("no control subjects".into()))?;
    Ok(standardize(mean_e - mean_c, pooled_sd(column, z)?))
}

/// Post-matching standardized mean difference: each set contributes its
/// within-set exposed mean minus control mean, weighted by its exposed
/// count; the denominator is the pre-matching pooled SD.
pub fn smd_after<F>(design: &MatchedDesign, value_of: F, s_pool: f64) -> Result<f64>
where
    F: Fn(&str) -> Option<f64>,
{
    if design.sets.is_empty() {
        return Err(Error::EmptyGroup("matched design has no sets".into()));
    }
    let weights = design.exposed_count_weights();
    let mut difference = 0.0;
    for (set, weight) in design.sets.iter().zip(weights) {
        let mean = |ids: &[String]| -> Result<f64> {
            let mut total = 0.0;
            for id in ids {
                total += value_of(id).ok_or_else(|| Error::MissingOutcome(id.clone()))?;
            }
            Ok(total / ids.len() as f64)
        };
        difference += weight * (mean(&set.exposed)? - mean(&set.controls)?);
    }
    Ok(standardize(difference, s_pool))
}

/// Build the balance report for a matched design over labeled columns
/// aligned with `ids` and exposure indicators `z`.
pub fn balance_report(
    design: &MatchedDesign,
    columns: &[(String, Vec<f64>)],
    ids: &[String],
    z: &[f64],
    thresholds: BalanceThresholds,
) -> Result<BalanceReport> {
    let index: BTreeMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut report_columns = Vec::with_capacity(columns.len());
    for (label, column) in columns {
        let before = smd_before(column, z)?;
        let s_pool = pooled_sd(column, z)?;
        let after = smd_after(design, |id| index.get(id).map(|&i| column[i]), s_pool)?;
        report_columns.push(ColumnBalance {
            label: label.clone(),
            smd_before: before,
            smd_after: after,
        });
    }
    Ok(BalanceReport::from_columns(report_columns, thresholds))
}
