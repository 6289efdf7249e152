//! Randomization inference within matched sets: m-tests for the null of no
//! constant additive effect on continuous outcomes, a composite
//! difference-in-proportions test for binary outcomes, and confidence
//! intervals by test inversion.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::matching::MatchedDesign;

/// Huber psi clipping point, in scale units.
pub const HUBER_CLIP: f64 = 2.5;

/// Exact enumeration is used when the product of within-set role assignments
/// is at most this many.
pub const EXACT_ENUMERATION_LIMIT: u128 = 1_000_000;

/// Outcome values grouped by matched set.
#[derive(Debug, Clone)]
pub struct SetOutcomes {
    pub set_id: usize,
    pub exposed: Vec<f64>,
    pub controls: Vec<f64>,
}

/// Outcomes for a whole matched design; construction fails when a matched
/// subject is missing its outcome (availability filtering belongs upstream).
#[derive(Debug, Clone)]
pub struct MatchedOutcomes {
    pub sets: Vec<SetOutcomes>,
}

impl MatchedOutcomes {
    pub fn from_design<F>(design: &MatchedDesign, value_of: F) -> Result<Self>
    where
        F: Fn(&str) -> Option<f64>,
    {
        let mut sets = Vec::with_capacity(design.sets.len());
        for set in &design.sets {
            let collect = |ids: &[String]| -> Result<Vec<f64>> {
                ids.iter()
                    .map(|id| value_of(id).ok_or_else(|| Error::MissingOutcome(id.clone())))
                    .collect()
            };
            sets.push(SetOutcomes {
                set_id: set.id,
                exposed: collect(&set.exposed)?,
                controls: collect(&set.controls)?,
            });
        }
        Ok(MatchedOutcomes { sets })
    }

    pub fn n_sets(&self) -> usize {
        self.sets.len()
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.sets
            .iter()
            .flat_map(|s| s.exposed.iter().chain(s.controls.iter()).copied())
    }

    /// Standard deviation of all outcome values, used to size CI search
    /// grids.
    pub fn outcome_sd(&self) -> f64 {
        let values: Vec<f64> = self.values().collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn huber_psi(u: f64) -> f64 {
    u.clamp(-HUBER_CLIP, HUBER_CLIP)
}

/// Which null distribution the m-test used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MTestMode {
    Auto,
    Normal,
    Exact,
}

/// An m-test evaluation at one hypothesized effect.
#[derive(Debug, Clone, Serialize)]
pub struct MTest {
    pub p_value: f64,
    pub statistic: f64,
    pub expectation: f64,
    pub variance: f64,
    pub deviate: Option<f64>,
    pub exact: bool,
    /// Median-absolute-deviation scale of the adjusted responses.
    pub scale: f64,
}

struct SetScores {
    /// Statistic contribution for each choice of which member carries the
    /// singleton role, all equally likely under the null.
    contributions: Vec<f64>,
    observed: f64,
}

fn set_scores(outcomes: &MatchedOutcomes, tau0: f64) -> Result<(Vec<SetScores>, f64)> {
    // Adjusted responses y - tau0 * z.
    let mut adjusted_sets: Vec<(Vec<f64>, usize)> = Vec::with_capacity(outcomes.sets.len());
    let mut all_adjusted: Vec<f64> = Vec::new();
    for set in &outcomes.sets {
        let n_exposed = set.exposed.len();
        let n_controls = set.controls.len();
        if set.exposed.is_empty() || set.controls.is_empty() {
            return Err(Error::Degenerate(format!(
                "set {} lacks an exposed or control member",
                set.set_id
            )));
        }
        if n_exposed > 1 && n_controls > 1 {
            return Err(Error::Degenerate(format!(
                "set {} has multiple exposed and multiple controls",
                set.set_id
            )));
        }
        // Members ordered exposed-first; record how many are exposed.
        let mut members: Vec<f64> = set.exposed.iter().map(|y| y - tau0).collect();
        members.extend(set.controls.iter().copied());
        all_adjusted.extend(members.iter().copied());
        adjusted_sets.push((members, n_exposed));
    }

    // Scale: median absolute deviation of the adjusted responses across the
    // whole design; mean absolute deviation as fallback when the median
    // deviation vanishes without the responses being constant.
    let mut sorted = all_adjusted.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let center = median(&sorted);
    let mut deviations: Vec<f64> = all_adjusted.iter().map(|v| (v - center).abs()).collect();
    deviations.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut scale = median(&deviations);
    if scale == 0.0 {
        scale = deviations.iter().sum::<f64>() / deviations.len() as f64;
        if scale == 0.0 {
            return Ok((Vec::new(), 0.0));
        }
    }

    let mut scored = Vec::with_capacity(adjusted_sets.len());
    for (members, n_exposed) in &adjusted_sets {
        let n = members.len();
        let mut q = vec![0.0; n];
        for m in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                if k != m {
                    acc += huber_psi((members[m] - members[k]) / scale);
                }
            }
            q[m] = acc / (n - 1) as f64;
        }
        let q_total: f64 = q.iter().sum();
        // One exposed member: statistic picks that member's score. One
        // control member: statistic is the set total minus that score.
        let (contributions, observed) = if *n_exposed == 1 {
            (q.clone(), q[0])
        } else {
            let control_index = n - 1;
            (
                q.iter().map(|qi| q_total - qi).collect(),
                q_total - q[control_index],
            )
        };
        scored.push(SetScores {
            contributions,
            observed,
        });
    }
    Ok((scored, scale))
}

/// Randomization m-test of the null that the constant additive effect equals
/// `tau0`. Scores come from Huber's psi on pairwise within-set differences of
/// the adjusted responses; the null distribution assigns the singleton role
/// uniformly within each set. Exact enumeration when the assignment count is
/// small, normal approximation otherwise.
pub fn m_test(outcomes: &MatchedOutcomes, tau0: f64) -> Result<MTest> {
    m_test_with_mode(outcomes, tau0, MTestMode::Auto)
}

pub fn m_test_with_mode(outcomes: &MatchedOutcomes, tau0: f64, mode: MTestMode) -> Result<MTest> {
    if outcomes.sets.is_empty() {
        return Err(Error::EmptyGroup("no matched sets to test".into()));
    }
    let (scored, scale) = set_scores(outcomes, tau0)?;
    if scale == 0.0 {
        // All adjusted responses identical.
        return Ok(MTest {
            p_value: 1.0,
            statistic: 0.0,
            expectation: 0.0,
            variance: 0.0,
            deviate: None,
            exact: true,
            scale,
        });
    }

    let statistic: f64 = scored.iter().map(|s| s.observed).sum();
    let mut expectation = 0.0;
    let mut variance = 0.0;
    for set in &scored {
        let n = set.contributions.len() as f64;
        let mean = set.contributions.iter().sum::<f64>() / n;
        expectation += mean;
        variance += set.contributions.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    }

    let mut assignments: u128 = 1;
    for set in &scored {
        assignments = assignments.saturating_mul(set.contributions.len() as u128);
        if assignments > EXACT_ENUMERATION_LIMIT {
            break;
        }
    }
    let use_exact = match mode {
        MTestMode::Auto => assignments <= EXACT_ENUMERATION_LIMIT,
        MTestMode::Exact => {
            if assignments > EXACT_ENUMERATION_LIMIT {
                return Err(Error::Degenerate(
                    "assignment space too large for exact enumeration".into(),
                ));
            }
            true
        }
        MTestMode::Normal => false,
    };

    if use_exact {
        let epsilon = 1e-9 * (1.0 + statistic.abs());
        let mut at_least = 0u64;
        let mut at_most = 0u64;
        let mut total = 0u64;
        enumerate_sums(&scored, 0, 0.0, &mut |sum| {
            total += 1;
            at_least += (sum >= statistic - epsilon) as u64;
            at_most += (sum <= statistic + epsilon) as u64;
        });
        let tail = at_least.min(at_most) as f64 / total as f64;
        Ok(MTest {
            p_value: (2.0 * tail).min(1.0),
            statistic,
            expectation,
            variance,
            deviate: None,
            exact: true,
            scale,
        })
    } else {
        if variance <= 0.0 {
            return Ok(MTest {
                p_value: 1.0,
                statistic,
                expectation,
                variance,
                deviate: None,
                exact: false,
                scale,
            });
        }
        let deviate = (statistic - expectation) / variance.sqrt();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let p = (2.0 * normal.cdf(-deviate.abs())).min(1.0);
        Ok(MTest {
            p_value: p,
            statistic,
            expectation,
            variance,
            deviate: Some(deviate),
            exact: false,
            scale,
        })
    }
}

fn enumerate_sums<F: FnMut(f64)>(sets: &[SetScores], index: usize, acc: f64, visit: &mut F) {
    if index == sets.len() {
        visit(acc);
        return;
    }
    for &contribution in &sets[index].contributions {
        enumerate_sums(sets, index + 1, acc + contribution, visit);
    }
}

/// Composite difference-in-proportions test.
#[derive(Debug, Clone, Serialize)]
pub struct ProportionsTest {
    pub p_value: f64,
    /// Exposed-count-weighted average of within-set risk differences.
    pub estimate: f64,
    pub variance: f64,
    pub deviate: Option<f64>,
}

/// Test the composite null that the average risk difference equals
/// `delta0`. The estimator weights within-set exposed-minus-control
/// proportion differences by exposed counts; the variance is the
/// conservative between-set bound, giving a studentized statistic with a
/// two-sided normal reference.
pub fn proportions_test(outcomes: &MatchedOutcomes, delta0: f64) -> Result<ProportionsTest> {
    let sets = &outcomes.sets;
    if sets.len() < 2 {
        return Err(Error::Degenerate(
            "proportions test needs at least two matched sets".into(),
        ));
    }
    for set in sets {
        for v in set.exposed.iter().chain(set.controls.iter()) {
            if *v != 0.0 && *v != 1.0 {
                return Err(Error::InvalidConfig(
                    "proportions test requires binary (0/1) outcomes".into(),
                ));
            }
        }
    }

    let count = sets.len() as f64;
    let total_exposed: usize = sets.iter().map(|s| s.exposed.len()).sum();
    let weighted: Vec<f64> = sets
        .iter()
        .map(|s| {
            let w = s.exposed.len() as f64 / total_exposed as f64;
            let mean_e = s.exposed.iter().sum::<f64>() / s.exposed.len() as f64;
            let mean_c = s.controls.iter().sum::<f64>() / s.controls.len() as f64;
            w * (mean_e - mean_c)
        })
        .collect();
    let estimate: f64 = weighted.iter().sum();

    let variance = weighted
        .iter()
        .map(|wd| (wd - estimate / count).powi(2))
        .sum::<f64>()
        * count
        / (count - 1.0);

    if variance <= 0.0 {
        let p = if (estimate - delta0).abs() < 1e-12 { 1.0 } else { 0.0 };
        return Ok(ProportionsTest {
            p_value: p,
            estimate,
            variance,
            deviate: None,
        });
    }
    let deviate = (estimate - delta0) / variance.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    Ok(ProportionsTest {
        p_value: (2.0 * normal.cdf(-deviate.abs())).min(1.0),
        estimate,
        variance,
        deviate: Some(deviate),
    })
}

/// A confidence interval from test inversion.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TestInversion {
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub unbounded_low: bool,
    pub unbounded_high: bool,
}

/// Invert a test into a point estimate and confidence interval.
///
/// `centered` must be nonincreasing in the hypothesized parameter and cross
/// zero at the estimate (statistic minus its null expectation); `p_at` is the
/// two-sided p-value. The interval is every parameter whose p-value exceeds
/// `1 - level`, found by bisection on each side of the estimate at `grid`
/// resolution within `bounds`.
pub fn invert_ci<P, C>(
    mut p_at: P,
    mut centered: C,
    level: f64,
    bounds: (f64, f64),
    grid: f64,
) -> Result<TestInversion>
where
    P: FnMut(f64) -> Result<f64>,
    C: FnMut(f64) -> Result<f64>,
{
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidConfig(format!("level {level} outside (0,1)")));
    }
    let (lo, hi) = bounds;
    if !(lo < hi) || !(grid > 0.0) {
        return Err(Error::InvalidConfig("bad CI search bounds or grid".into()));
    }

    // Point estimate: midpoint of the sign-change region of the centered
    // statistic (a Hodges-Lehmann-type estimate).
    let estimate = {
        let g_lo = centered(lo)?;
        let g_hi = centered(hi)?;
        if g_lo <= 0.0 {
            lo
        } else if g_hi > 0.0 {
            hi
        } else {
            let mut edge = [lo, lo];
            for (which, strict) in [(0usize, true), (1usize, false)] {
                let mut a = lo;
                let mut b = hi;
                while b - a > grid {
                    let mid = 0.5 * (a + b);
                    let g = centered(mid)?;
                    let keep_low = if strict { g > 0.0 } else { g >= 0.0 };
                    if keep_low {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                edge[which] = 0.5 * (a + b);
            }
            0.5 * (edge[0] + edge[1])
        }
    };

    let threshold = 1.0 - level;
    let mut unbounded_low = false;
    let mut unbounded_high = false;

    if p_at(estimate)? <= threshold {
        // The p-curve never clears the threshold; collapse to the estimate.
        return Ok(TestInversion {
            estimate,
            ci_low: estimate,
            ci_high: estimate,
            level,
            unbounded_low,
            unbounded_high,
        });
    }

    let ci_low = if p_at(lo)? > threshold {
        unbounded_low = true;
        lo
    } else {
        let mut a = lo; // p <= threshold
        let mut b = estimate; // p > threshold
        while b - a > grid {
            let mid = 0.5 * (a + b);
            if p_at(mid)? > threshold {
                b = mid;
            } else {
                a = mid;
            }
        }
        0.5 * (a + b)
    };

    let ci_high = if p_at(hi)? > threshold {
        unbounded_high = true;
        hi
    } else {
        let mut a = estimate; // p > threshold
        let mut b = hi; // p <= threshold
        while b - a > grid {
            let mid = 0.5 * (a + b);
            if p_at(mid)? > threshold {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    };

    Ok(TestInversion {
        estimate,
        ci_low,
        ci_high,
        level,
        unbounded_low,
        unbounded_high,
    })
}

/// Invert the m-test for a matched design: estimate plus marginal CI.
pub fn m_test_ci(outcomes: &MatchedOutcomes, level: f64) -> Result<TestInversion> {
    let sd = outcomes.outcome_sd();
    let half_width = 10.0 * sd.max(1e-12);
    let grid = 1e-4 * sd.max(1e-12);
    invert_ci(
        |tau0| m_test(outcomes, tau0).map(|t| t.p_value),
        |tau0| m_test(outcomes, tau0).map(|t| t.statistic - t.expectation),
        level,
        (-half_width, half_width),
        grid,
    )
}

/// Invert the proportions test: estimate plus marginal CI on [-1, 1].
pub fn proportions_ci(outcomes: &MatchedOutcomes, level: f64) -> Result<TestInversion> {
    let estimate = proportions_test(outcomes, 0.0)?.estimate;
    let inversion = invert_ci(
        |delta0| proportions_test(outcomes, delta0).map(|t| t.p_value),
        |delta0| Ok(estimate - delta0),
        level,
        (-1.0, 1.0),
        1e-4,
    )?;
    Ok(TestInversion {
        estimate,
        ..inversion
    })
}
