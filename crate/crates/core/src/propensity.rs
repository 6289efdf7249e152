//! Propensity estimation: probability of exposure given baseline covariates.
//!
//! The primary fit solves the just-identified covariate-balancing conditions
//! (inverse-probability-weighted covariate sums equal between exposed and
//! control); a maximum-likelihood logistic fit provides the initial point and
//! the fallback when the balance conditions do not converge.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::schema::{CovariateKind, CovariateValue};

/// Fitted probabilities are clamped to this band before any downstream use,
/// so infinite logits cannot dominate caliper distances.
pub const PROBABILITY_CLAMP: f64 = 1e-6;

/// Balance-condition residual max-norm accepted as converged.
pub const BALANCE_TOLERANCE: f64 = 1e-6;

const MLE_MAX_ITERATIONS: usize = 100;
const MLE_RELATIVE_TOLERANCE: f64 = 1e-10;
const BALANCE_MAX_ITERATIONS: usize = 200;
const SEPARATION_COEF_NORM: f64 = 50.0;

/// Design matrix over a cohort subset: intercept, standardized continuous
/// covariates, and one-hot categorical indicators with the first declared
/// level as reference.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    pub labels: Vec<String>,
    /// One-hot columns dropped because no subject (or every subject) in the
    /// subset occupies the level.
    pub dropped: Vec<String>,
}

/// Build the design matrix for the given subject rows.
pub fn design_matrix(cohort: &Cohort, rows: &[usize]) -> Result<DesignMatrix> {
    if rows.is_empty() {
        return Err(Error::EmptyGroup("design matrix over empty subset".into()));
    }
    let n = rows.len();
    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut labels: Vec<String> = vec!["(intercept)".into()];
    let mut dropped: Vec<String> = Vec::new();

    for (j, entry) in cohort.schema.entries.iter().enumerate() {
        match &entry.kind {
            CovariateKind::Continuous => {
                let mut v = Vec::with_capacity(n);
                for &r in rows {
                    match cohort.subjects[r].covariates[j] {
                        CovariateValue::Continuous(x) => v.push(x),
                        CovariateValue::Level(_) => {
                            return Err(Error::Internal(format!(
                                "categorical value in continuous covariate {}",
                                entry.name
                            )))
                        }
                    }
                }
                let mean = v.iter().sum::<f64>() / n as f64;
                let var = if n > 1 {
                    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
                } else {
                    0.0
                };
                if var <= 0.0 {
                    return Err(Error::ZeroVariance(entry.name.clone()));
                }
                let sd = var.sqrt();
                columns.push(v.iter().map(|x| (x - mean) / sd).collect());
                labels.push(entry.name.clone());
            }
            CovariateKind::Categorical { levels, .. } => {
                for (l, level) in levels.iter().enumerate().skip(1) {
                    let mut v = Vec::with_capacity(n);
                    let mut count = 0usize;
                    for &r in rows {
                        let hit = matches!(
                            cohort.subjects[r].covariates[j],
                            CovariateValue::Level(k) if k == l
                        );
                        count += hit as usize;
                        v.push(hit as u8 as f64);
                    }
                    let label = format!("{}={}", entry.name, level);
                    if count == 0 || count == n {
                        dropped.push(label);
                    } else {
                        columns.push(v);
                        labels.push(label);
                    }
                }
            }
        }
    }

    let p = columns.len();
    let matrix = DMatrix::from_fn(n, p, |i, j| columns[j][i]);
    Ok(DesignMatrix {
        matrix,
        labels,
        dropped,
    })
}

/// How the propensity coefficients were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FitMethod {
    BalanceConditions,
    MaxLikelihood,
}

/// Convergence record for a fit.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Convergence {
    pub iterations: usize,
    /// Score max-norm for likelihood fits; balance-condition residual
    /// max-norm for balance fits.
    pub residual_norm: f64,
}

/// A fitted propensity model.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub coefficients: DVector<f64>,
    pub labels: Vec<String>,
    pub method: FitMethod,
    pub convergence: Convergence,
    /// Set when the balance fit did not converge and the likelihood solution
    /// was returned instead.
    pub fallback: bool,
}

impl PropensityModel {
    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> DVector<f64> {
        x * &self.coefficients
    }

    /// Fitted probabilities, clamped into (0, 1).
    pub fn probabilities(&self, x: &DMatrix<f64>) -> DVector<f64> {
        self.linear_predictor(x)
            .map(|eta| expit(eta).clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP))
    }
}

/// Numerically stable logistic function.
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn log_likelihood(eta: &DVector<f64>, z: &[f64]) -> f64 {
    // z*eta - log(1 + exp(eta)), with the stable softplus branch.
    eta.iter()
        .zip(z)
        .map(|(&e, &zi)| {
            let softplus = if e > 30.0 {
                e
            } else if e < -30.0 {
                0.0
            } else {
                e.exp().ln_1p()
            };
            zi * e - softplus
        })
        .sum()
}

fn check_binary_groups(z: &[f64]) -> Result<()> {
    let ones = z.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == z.len() {
        return Err(Error::EmptyGroup(
            "exposure indicator needs both exposed and control subjects".into(),
        ));
    }
    Ok(())
}

/// Logistic regression by iteratively reweighted least squares.
pub fn fit_max_likelihood(x: &DMatrix<f64>, z: &[f64]) -> Result<PropensityModel> {
    fit_max_likelihood_labeled(x, z, default_labels(x.ncols()))
}

fn default_labels(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

pub fn fit_max_likelihood_labeled(
    x: &DMatrix<f64>,
    z: &[f64],
    labels: Vec<String>,
) -> Result<PropensityModel> {
    let n = x.nrows();
    let p = x.ncols();
    if z.len() != n {
        return Err(Error::Internal("design rows and indicator length differ".into()));
    }
    check_binary_groups(z)?;

    let mut beta = DVector::zeros(p);
    let mut eta = x * &beta;
    let mut loglik = log_likelihood(&eta, z);
    let mut iterations = 0;

    for iteration in 1..=MLE_MAX_ITERATIONS {
        iterations = iteration;
        let pi = eta.map(expit);
        // Score and weighted normal equations for the Newton step.
        let residual = DVector::from_fn(n, |i, _| z[i] - pi[i]);
        let score = x.transpose() * &residual;
        let weights = pi.map(|p| (p * (1.0 - p)).max(1e-12));
        let hessian = weighted_gram(x, &weights);
        let chol = hessian
            .cholesky()
            .ok_or_else(|| Error::Singular("singular weighted normal equations".into()))?;
        let mut delta = chol.solve(&score);

        // Step-halving keeps the likelihood non-decreasing.
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &beta + &delta;
            let eta_new = x * &candidate;
            let ll_new = log_likelihood(&eta_new, z);
            if ll_new.is_finite() && ll_new >= loglik - 1e-12 {
                let rel_change = (ll_new - loglik).abs() / (loglik.abs() + 1e-10);
                beta = candidate;
                eta = eta_new;
                loglik = ll_new;
                accepted = true;
                if candidate_norm(&beta) > SEPARATION_COEF_NORM {
                    return Err(Error::Separation);
                }
                if rel_change < MLE_RELATIVE_TOLERANCE {
                    let final_score = x.transpose()
                        * DVector::from_fn(n, |i, _| z[i] - expit(eta[i]));
                    return Ok(PropensityModel {
                        coefficients: beta,
                        labels,
                        method: FitMethod::MaxLikelihood,
                        convergence: Convergence {
                            iterations,
                            residual_norm: final_score.amax(),
                        },
                        fallback: false,
                    });
                }
                break;
            }
            delta /= 2.0;
        }
        if !accepted {
            break;
        }
    }

    if candidate_norm(&beta) > SEPARATION_COEF_NORM {
        return Err(Error::Separation);
    }
    let final_score = x.transpose() * DVector::from_fn(n, |i, _| z[i] - expit(eta[i]));
    Ok(PropensityModel {
        coefficients: beta,
        labels,
        method: FitMethod::MaxLikelihood,
        convergence: Convergence {
            iterations,
            residual_norm: final_score.amax(),
        },
        fallback: false,
    })
}

fn candidate_norm(beta: &DVector<f64>) -> f64 {
    beta.amax()
}

fn weighted_gram(x: &DMatrix<f64>, weights: &DVector<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let p = x.ncols();
    let mut gram = DMatrix::zeros(p, p);
    for i in 0..n {
        let w = weights[i];
        for a in 0..p {
            let xa = x[(i, a)] * w;
            for b in a..p {
                gram[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    gram
}

/// Balance-condition residual: for each design column, the difference between
/// inverse-probability-weighted exposed and control sums.
pub fn balance_residual(x: &DMatrix<f64>, z: &[f64], probabilities: &DVector<f64>) -> DVector<f64> {
    let n = x.nrows();
    let u = DVector::from_fn(n, |i, _| {
        let pi = probabilities[i].clamp(1e-9, 1.0 - 1e-9);
        if z[i] == 1.0 {
            1.0 / pi
        } else {
            -1.0 / (1.0 - pi)
        }
    });
    x.transpose() * u
}

/// Inverse-probability-weighted covariate means of the exposed and control
/// groups.
pub fn ipw_group_means(
    x: &DMatrix<f64>,
    z: &[f64],
    probabilities: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = x.nrows();
    let p = x.ncols();
    let mut exposed = DVector::zeros(p);
    let mut control = DVector::zeros(p);
    let mut exposed_weight = 0.0;
    let mut control_weight = 0.0;
    for i in 0..n {
        let pi = probabilities[i].clamp(1e-9, 1.0 - 1e-9);
        if z[i] == 1.0 {
            let w = 1.0 / pi;
            exposed_weight += w;
            for j in 0..p {
                exposed[j] += w * x[(i, j)];
            }
        } else {
            let w = 1.0 / (1.0 - pi);
            control_weight += w;
            for j in 0..p {
                control[j] += w * x[(i, j)];
            }
        }
    }
    (exposed / exposed_weight, control / control_weight)
}

/// Covariate-balancing propensity fit: damped Newton root-finding on the
/// just-identified balance conditions, initialized at the likelihood
/// solution. Falls back to that solution (flagged) when the residual does not
/// reach tolerance within the iteration budget.
pub fn fit_balance(x: &DMatrix<f64>, z: &[f64]) -> Result<PropensityModel> {
    fit_balance_labeled(x, z, default_labels(x.ncols()))
}

pub fn fit_balance_labeled(
    x: &DMatrix<f64>,
    z: &[f64],
    labels: Vec<String>,
) -> Result<PropensityModel> {
    let mle = fit_max_likelihood_labeled(x, z, labels.clone())?;
    let n = x.nrows();

    let probabilities = |beta: &DVector<f64>| -> DVector<f64> {
        (x * beta).map(|eta| expit(eta).clamp(1e-9, 1.0 - 1e-9))
    };

    let mut beta = mle.coefficients.clone();
    let mut pi = probabilities(&beta);
    let mut residual = balance_residual(x, z, &pi);
    let mut residual_norm = residual.amax();
    let mut iterations = 0;

    while residual_norm > 1e-9 && iterations < BALANCE_MAX_ITERATIONS {
        iterations += 1;
        // Jacobian of the balance conditions is -X' W X with
        // w_i = z_i (1-pi)/pi + (1-z_i) pi/(1-pi).
        let weights = DVector::from_fn(n, |i, _| {
            if z[i] == 1.0 {
                (1.0 - pi[i]) / pi[i]
            } else {
                pi[i] / (1.0 - pi[i])
            }
        });
        let jacobian = weighted_gram(x, &weights);
        let Some(chol) = jacobian.cholesky() else { break };
        let mut step = chol.solve(&residual);

        // Step-halving on residual-norm increase.
        let mut improved = false;
        for _ in 0..30 {
            let candidate = &beta + &step;
            let pi_new = probabilities(&candidate);
            let residual_new = balance_residual(x, z, &pi_new);
            let norm_new = residual_new.amax();
            if norm_new < residual_norm {
                beta = candidate;
                pi = pi_new;
                residual = residual_new;
                residual_norm = norm_new;
                improved = true;
                break;
            }
            step /= 2.0;
        }
        if !improved {
            break;
        }
    }

    if residual_norm <= BALANCE_TOLERANCE {
        Ok(PropensityModel {
            coefficients: beta,
            labels,
            method: FitMethod::BalanceConditions,
            convergence: Convergence {
                iterations,
                residual_norm,
            },
            fallback: false,
        })
    } else {
        Ok(PropensityModel {
            fallback: true,
            ..mle
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Cohort, Subject};
    use crate::outcomes::RawOutcomeFields;
    use crate::schema::{CovariateSchema, SchemaEntry};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeSet;

    fn subject(id: &str, covariates: Vec<CovariateValue>) -> Subject {
        Subject {
            id: id.into(),
            covariates,
            activities: BTreeSet::new(),
            raw_outcomes: RawOutcomeFields::default(),
            wave4_present: true,
        }
    }

    fn binary_cohort() -> Cohort {
        let schema = CovariateSchema::new(vec![SchemaEntry::categorical(
            "flag",
            &["no", "yes"],
            "no",
        )])
        .unwrap();
        let subjects = (0..4)
            .map(|i| subject(&format!("s{i}"), vec![CovariateValue::Level(i % 2)]))
            .collect();
        Cohort::new(schema, subjects).unwrap()
    }

    #[test]
    fn binary_covariate_gives_two_columns() {
        let cohort = binary_cohort();
        let design = design_matrix(&cohort, &[0, 1, 2, 3]).unwrap();
        assert_eq!(design.matrix.nrows(), 4);
        assert_eq!(design.matrix.ncols(), 2);
        assert_eq!(design.labels, vec!["(intercept)", "flag=yes"]);
    }

    #[test]
    fn constant_continuous_covariate_is_an_error() {
        let schema =
            CovariateSchema::new(vec![SchemaEntry::continuous("age")]).unwrap();
        let subjects = (0..3)
            .map(|i| subject(&format!("s{i}"), vec![CovariateValue::Continuous(15.0)]))
            .collect();
        let cohort = Cohort::new(schema, subjects).unwrap();
        let err = design_matrix(&cohort, &[0, 1, 2]).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance(name) if name == "age"));
    }

    #[test]
    fn identical_covariates_give_identical_rows() {
        let cohort = binary_cohort();
        let design = design_matrix(&cohort, &[0, 2]).unwrap();
        assert_eq!(design.matrix.row(0), design.matrix.row(1));
    }

    #[test]
    fn empty_level_is_dropped_and_recorded() {
        let schema = CovariateSchema::new(vec![SchemaEntry::categorical(
            "race",
            &["white", "black", "missing"],
            "missing",
        )])
        .unwrap();
        let subjects = (0..5)
            .map(|i| subject(&format!("s{i}"), vec![CovariateValue::Level(i % 2)]))
            .collect();
        let cohort = Cohort::new(schema, subjects).unwrap();
        let design = design_matrix(&cohort, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(design.dropped, vec!["race=missing"]);
        assert_eq!(design.labels, vec!["(intercept)", "race=black"]);
    }

    #[test]
    fn intercept_only_mle_matches_closed_form() {
        let x = DMatrix::from_element(100, 1, 1.0);
        let z: Vec<f64> = (0..100).map(|i| (i < 30) as u8 as f64).collect();
        let model = fit_max_likelihood(&x, &z).unwrap();
        let expected = (30.0f64 / 70.0).ln();
        assert!((model.coefficients[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn perfect_separation_is_detected() {
        let n = 40;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 / n as f64 });
        let z: Vec<f64> = (0..n).map(|i| (i >= n / 2) as u8 as f64).collect();
        let err = fit_max_likelihood(&x, &z).unwrap_err();
        assert!(matches!(err, Error::Separation));
    }

    #[test]
    fn mle_is_invariant_to_row_permutation() {
        let mut rng = StdRng::seed_from_u64(7);
        let n = 60;
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() });
        let z: Vec<f64> = (0..n).map(|_| rng.random::<bool>() as u8 as f64).collect();
        let model = fit_max_likelihood(&x, &z).unwrap();

        let perm: Vec<usize> = (0..n).rev().collect();
        let x_perm = DMatrix::from_fn(n, 2, |i, j| x[(perm[i], j)]);
        let z_perm: Vec<f64> = perm.iter().map(|&i| z[i]).collect();
        let model_perm = fit_max_likelihood(&x_perm, &z_perm).unwrap();
        for j in 0..2 {
            assert!((model.coefficients[j] - model_perm.coefficients[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn mle_score_vanishes_at_optimum() {
        let mut rng = StdRng::seed_from_u64(11);
        let n = 200;
        let x = DMatrix::from_fn(n, 3, |_, j| {
            if j == 0 {
                1.0
            } else {
                rng.random::<f64>() * 2.0 - 1.0
            }
        });
        let z: Vec<f64> = (0..n)
            .map(|i| {
                let eta = 0.3 * x[(i, 1)] - 0.5 * x[(i, 2)];
                (rng.random::<f64>() < expit(eta)) as u8 as f64
            })
            .collect();
        let model = fit_max_likelihood(&x, &z).unwrap();
        assert!(model.convergence.residual_norm < 1e-8);
    }

    #[test]
    fn balance_fit_satisfies_balance_conditions() {
        let mut rng = StdRng::seed_from_u64(3);
        let n = 300;
        let x = DMatrix::from_fn(n, 3, |_, j| {
            if j == 0 {
                1.0
            } else {
                rng.random::<f64>() * 2.0 - 1.0
            }
        });
        let z: Vec<f64> = (0..n)
            .map(|i| {
                let eta = 0.8 * x[(i, 1)] + 0.4 * x[(i, 2)] - 0.2;
                (rng.random::<f64>() < expit(eta)) as u8 as f64
            })
            .collect();
        let model = fit_balance(&x, &z).unwrap();
        assert_eq!(model.method, FitMethod::BalanceConditions);
        assert!(!model.fallback);
        let probs = (x.clone() * &model.coefficients).map(expit);
        let residual = balance_residual(&x, &z, &probs);
        assert!(residual.amax() <= BALANCE_TOLERANCE);

        let (exposed, control) = ipw_group_means(&x, &z, &probs);
        for j in 0..3 {
            assert!(
                (exposed[j] - control[j]).abs() <= 1e-6,
                "column {j}: weighted means differ"
            );
        }
    }

    #[test]
    fn independent_exposure_gives_near_zero_slopes() {
        // With z independent of X, the slope estimates over repeated draws
        // should be centered at zero; their mean over 1,000 cohorts of n=500
        // sits within Monte Carlo noise of zero.
        let mut slope_sum = 0.0;
        let mut slope_sq_sum = 0.0;
        let reps = 1000;
        for rep in 0..reps {
            let mut rng = StdRng::seed_from_u64(1000 + rep);
            let n = 500;
            let x = DMatrix::from_fn(n, 2, |_, j| {
                if j == 0 {
                    1.0
                } else {
                    rng.random::<f64>() * 2.0 - 1.0
                }
            });
            let z: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() < 0.4) as u8 as f64).collect();
            let model = fit_balance(&x, &z).unwrap();
            slope_sum += model.coefficients[1];
            slope_sq_sum += model.coefficients[1] * model.coefficients[1];
        }
        let mean = slope_sum / reps as f64;
        let sd = (slope_sq_sum / reps as f64 - mean * mean).sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!(
            mean.abs() < 4.0 * se + 1e-3,
            "slope mean {mean} exceeds MC noise (se {se})"
        );
    }

    #[test]
    fn fitted_probabilities_invariant_to_reference_relabeling() {
        // Swapping the reference level reparameterizes the coefficients but
        // not the fitted probabilities.
        let mut rng = StdRng::seed_from_u64(21);
        let n = 120;
        let level: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let z: Vec<f64> = (0..n)
            .map(|i| (rng.random::<f64>() < 0.3 + 0.2 * (level[i] as f64) / 2.0) as u8 as f64)
            .collect();

        let one_hot = |reference: usize| -> DMatrix<f64> {
            let others: Vec<usize> = (0..3).filter(|&l| l != reference).collect();
            DMatrix::from_fn(n, 3, |i, j| {
                if j == 0 {
                    1.0
                } else {
                    (level[i] == others[j - 1]) as u8 as f64
                }
            })
        };

        let m0 = fit_max_likelihood(&one_hot(0), &z).unwrap();
        let m1 = fit_max_likelihood(&one_hot(1), &z).unwrap();
        let p0 = m0.probabilities(&one_hot(0));
        let p1 = m1.probabilities(&one_hot(1));
        for i in 0..n {
            assert!((p0[i] - p1[i]).abs() < 1e-8);
        }
    }
}
