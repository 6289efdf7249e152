//! Exposed-by-control distances: rank-based Mahalanobis distance with a
//! propensity-score caliper. Ranks make the distance scale-free and
//! insensitive to outliers; the caliper forbids pairs whose propensity logits
//! are too far apart.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::propensity::logit;

/// Average ranks (ties share the mean of their positions), in [1, n].
pub fn rank_transform(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end are tied; 1-based average rank
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

/// Sample variance of the untied ranks 1..n.
fn untied_rank_variance(n: usize) -> f64 {
    (n as f64) * (n as f64 + 1.0) / 12.0
}

/// Rank-based Mahalanobis distance over a pooled set of subjects.
///
/// The covariance of the rank columns is rescaled so every diagonal equals
/// the variance of untied ranks, keeping tied columns from getting extra
/// weight. Distances are the squared Mahalanobis form (zero iff the rank
/// vectors coincide).
pub struct RankMahalanobis {
    ranks: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    /// Indexes of input columns dropped for having constant ranks.
    pub dropped_columns: Vec<usize>,
    /// A ridge was added to make the rescaled covariance invertible.
    pub ridge_repaired: bool,
}

impl RankMahalanobis {
    /// Build from raw covariate columns (each of pooled length n >= 2).
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::EmptyGroup("no covariate columns for distances".into()));
        }
        let n = columns[0].len();
        if n < 2 {
            return Err(Error::EmptyGroup("rank distances need at least 2 subjects".into()));
        }

        let ranked: Vec<Vec<f64>> = columns.iter().map(|c| rank_transform(c)).collect();
        let v_untied = untied_rank_variance(n);

        // Column means and variances of the ranks.
        let means: Vec<f64> = ranked.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
        let variances: Vec<f64> = ranked
            .iter()
            .zip(&means)
            .map(|(c, m)| c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64)
            .collect();

        let kept: Vec<usize> = (0..ranked.len()).filter(|&j| variances[j] > 0.0).collect();
        let dropped_columns: Vec<usize> =
            (0..ranked.len()).filter(|&j| variances[j] <= 0.0).collect();
        if kept.is_empty() {
            return Err(Error::Degenerate(
                "every covariate column has constant ranks".into(),
            ));
        }

        let p = kept.len();
        let ranks = DMatrix::from_fn(n, p, |i, j| ranked[kept[j]][i]);
        let kept_means: Vec<f64> = kept.iter().map(|&j| means[j]).collect();

        // Covariance of rank columns, then diagonal rescaling to v_untied.
        let mut cov = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in a..p {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += (ranks[(i, a)] - kept_means[a]) * (ranks[(i, b)] - kept_means[b]);
                }
                let c = acc / (n - 1) as f64;
                cov[(a, b)] = c;
                cov[(b, a)] = c;
            }
        }
        let scale: Vec<f64> = (0..p).map(|a| (v_untied / cov[(a, a)]).sqrt()).collect();
        let mut rescaled = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in 0..p {
                rescaled[(a, b)] = cov[(a, b)] * scale[a] * scale[b];
            }
        }

        let mut ridge_repaired = false;
        let chol = match rescaled.clone().cholesky() {
            Some(c) => c,
            None => {
                ridge_repaired = true;
                let ridge = 1e-8 * rescaled.diagonal().mean();
                for a in 0..p {
                    rescaled[(a, a)] += ridge;
                }
                rescaled
                    .cholesky()
                    .ok_or_else(|| Error::Singular("rank covariance matrix".into()))?
            }
        };

        Ok(RankMahalanobis {
            ranks,
            chol,
            dropped_columns,
            ridge_repaired,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.ranks.nrows()
    }

    /// Squared Mahalanobis distance between pooled subjects i and j.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let p = self.ranks.ncols();
        let delta = DVector::from_fn(p, |k, _| self.ranks[(i, k)] - self.ranks[(j, k)]);
        let solved = self.chol.solve(&delta);
        delta.dot(&solved).max(0.0)
    }
}

/// Exposed-by-control distance matrix with caliper-forbidden pairs marked.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub exposed_ids: Vec<String>,
    pub control_ids: Vec<String>,
    values: Vec<f64>,
    forbidden: Vec<bool>,
}

impl DistanceMatrix {
    /// Build from a distance function over (exposed index, control index).
    /// Rows and columns are reordered lexicographically by id so outputs are
    /// deterministic regardless of input order.
    pub fn build<F>(exposed_ids: Vec<String>, control_ids: Vec<String>, dist: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> f64,
    {
        let ne = exposed_ids.len();
        let nc = control_ids.len();
        if ne == 0 || nc == 0 {
            return Err(Error::EmptyGroup(
                "distance matrix needs exposed and control subjects".into(),
            ));
        }
        let mut exposed_order: Vec<usize> = (0..ne).collect();
        exposed_order.sort_by(|&a, &b| exposed_ids[a].cmp(&exposed_ids[b]));
        let mut control_order: Vec<usize> = (0..nc).collect();
        control_order.sort_by(|&a, &b| control_ids[a].cmp(&control_ids[b]));

        let mut values = Vec::with_capacity(ne * nc);
        for &e in &exposed_order {
            for &c in &control_order {
                let d = dist(e, c);
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::Internal(format!(
                        "distance must be finite and nonnegative, got {d}"
                    )));
                }
                values.push(d);
            }
        }
        Ok(DistanceMatrix {
            exposed_ids: exposed_order.iter().map(|&i| exposed_ids[i].clone()).collect(),
            control_ids: control_order.iter().map(|&i| control_ids[i].clone()).collect(),
            forbidden: vec![false; values.len()],
            values,
        })
    }

    pub fn n_exposed(&self) -> usize {
        self.exposed_ids.len()
    }

    pub fn n_controls(&self) -> usize {
        self.control_ids.len()
    }

    pub fn value(&self, exposed: usize, control: usize) -> f64 {
        self.values[exposed * self.n_controls() + control]
    }

    pub fn is_forbidden(&self, exposed: usize, control: usize) -> bool {
        self.forbidden[exposed * self.n_controls() + control]
    }

    pub fn max_finite(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Exposed rows whose every pair is forbidden.
    pub fn unmatchable_exposed(&self) -> Vec<usize> {
        (0..self.n_exposed())
            .filter(|&e| (0..self.n_controls()).all(|c| self.is_forbidden(e, c)))
            .collect()
    }

    /// Control columns whose every pair is forbidden.
    pub fn unmatchable_controls(&self) -> Vec<usize> {
        (0..self.n_controls())
            .filter(|&c| (0..self.n_exposed()).all(|e| self.is_forbidden(e, c)))
            .collect()
    }

    pub fn n_forbidden(&self) -> usize {
        self.forbidden.iter().filter(|&&f| f).count()
    }
}

/// Result of applying a caliper.
#[derive(Debug, Clone)]
pub struct CaliperOutcome {
    pub matrix: DistanceMatrix,
    /// Absolute logit threshold actually applied.
    pub threshold: f64,
    pub n_forbidden: usize,
    pub unmatchable_exposed: Vec<String>,
    pub unmatchable_controls: Vec<String>,
}

/// Forbid pairs whose propensity logits differ by more than
/// `width` pooled standard deviations of the logit. Probabilities must
/// already be clamped into (0, 1).
pub fn apply_caliper(
    matrix: &DistanceMatrix,
    exposed_probabilities: &[f64],
    control_probabilities: &[f64],
    width: f64,
) -> Result<CaliperOutcome> {
    if !(width > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "caliper width must be positive, got {width}"
        )));
    }
    let ne = matrix.n_exposed();
    let nc = matrix.n_controls();
    if exposed_probabilities.len() != ne || control_probabilities.len() != nc {
        return Err(Error::Internal("propensity vectors do not match matrix".into()));
    }

    let exposed_logits: Vec<f64> = exposed_probabilities.iter().map(|&p| logit(p)).collect();
    let control_logits: Vec<f64> = control_probabilities.iter().map(|&p| logit(p)).collect();

    let pooled: Vec<f64> = exposed_logits
        .iter()
        .chain(control_logits.iter())
        .cloned()
        .collect();
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let sd = if pooled.len() > 1 {
        (pooled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let threshold = width * sd;

    let mut out = matrix.clone();
    let mut n_forbidden = 0;
    for e in 0..ne {
        for c in 0..nc {
            if (exposed_logits[e] - control_logits[c]).abs() > threshold {
                out.forbidden[e * nc + c] = true;
            }
            n_forbidden += out.forbidden[e * nc + c] as usize;
        }
    }

    let unmatchable_exposed = out
        .unmatchable_exposed()
        .into_iter()
        .map(|e| out.exposed_ids[e].clone())
        .collect();
    let unmatchable_controls = out
        .unmatchable_controls()
        .into_iter()
        .map(|c| out.control_ids[c].clone())
        .collect();

    Ok(CaliperOutcome {
        threshold,
        n_forbidden,
        unmatchable_exposed,
        unmatchable_controls,
        matrix: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn average_rank_tie_convention() {
        assert_eq!(rank_transform(&[3.1, 2.0, 2.0, 5.0]), vec![3.0, 1.5, 1.5, 4.0]);
    }

    #[test]
    fn strictly_increasing_input_is_identity_ranking() {
        let v: Vec<f64> = (0..6).map(|i| i as f64 * 2.5).collect();
        assert_eq!(rank_transform(&v), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn constant_vector_ranks_all_tied() {
        assert_eq!(rank_transform(&[7.0; 4]), vec![2.5, 2.5, 2.5, 2.5]);
    }

    #[test]
    fn identical_rank_vectors_have_zero_distance() {
        let columns = vec![vec![1.0, 1.0, 3.0, 4.0], vec![2.0, 2.0, 0.0, 5.0]];
        let engine = RankMahalanobis::from_columns(&columns).unwrap();
        assert!(engine.distance(0, 1) < 1e-12);
        assert!(engine.distance(0, 2) > 0.0);
    }

    #[test]
    fn one_dimensional_distance_matches_direct_computation() {
        let column = vec![vec![10.0, 3.0, 7.0, 1.0, 5.0]];
        let engine = RankMahalanobis::from_columns(&column).unwrap();
        let ranks = rank_transform(&column[0]);
        let n = ranks.len();
        let v = (n as f64) * (n as f64 + 1.0) / 12.0;
        for i in 0..n {
            for j in 0..n {
                let expected = (ranks[i] - ranks[j]).powi(2) / v;
                assert!((engine.distance(i, j) - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn infinite_width_caliper_is_a_no_op() {
        let matrix = DistanceMatrix::build(
            vec!["e1".into(), "e2".into()],
            vec!["c1".into(), "c2".into()],
            |e, c| (e + c) as f64,
        )
        .unwrap();
        let outcome =
            apply_caliper(&matrix, &[0.9, 0.2], &[0.5, 0.6], f64::INFINITY).unwrap();
        assert_eq!(outcome.n_forbidden, 0);
    }

    #[test]
    fn identical_propensities_are_never_forbidden() {
        let matrix = DistanceMatrix::build(
            vec!["e1".into()],
            vec!["c1".into()],
            |_, _| 1.0,
        )
        .unwrap();
        let outcome = apply_caliper(&matrix, &[0.37], &[0.37], 0.2).unwrap();
        assert_eq!(outcome.n_forbidden, 0);
    }

    #[test]
    fn hand_built_caliper_marks_the_expected_pairs() {
        let matrix = DistanceMatrix::build(
            vec!["e1".into(), "e2".into()],
            vec!["c1".into(), "c2".into()],
            |_, _| 1.0,
        )
        .unwrap();
        let expit = |l: f64| 1.0 / (1.0 + (-l).exp());

        // Pooled logits {0, 0.1, 0, 1}: the rule forbids exactly the pairs
        // whose logit gap exceeds width * pooled SD.
        let ep = [expit(0.0), expit(0.1)];
        let cp = [expit(0.0), expit(1.0)];
        let pooled = [0.0, 0.1, 0.0, 1.0];
        let mean = pooled.iter().sum::<f64>() / 4.0;
        let sd = (pooled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        let width = 0.5;
        let outcome = apply_caliper(&matrix, &ep, &cp, width).unwrap();
        let threshold = width * sd;
        let mut expected = 0;
        for el in [0.0f64, 0.1] {
            for cl in [0.0f64, 1.0] {
                if (el - cl).abs() > threshold {
                    expected += 1;
                }
            }
        }
        assert_eq!(outcome.n_forbidden, expected);
        assert!(expected > 0 && expected < 4);
    }

    proptest! {
        #[test]
        fn distances_are_symmetric(values in proptest::collection::vec(-50.0..50.0f64, 8..20)) {
            let half = values.len() / 2;
            let columns = vec![values[..half].to_vec(), values[half..2 * half].to_vec()];
            let engine = RankMahalanobis::from_columns(&columns);
            prop_assume!(engine.is_ok());
            let engine = engine.unwrap();
            for i in 0..half {
                for j in 0..half {
                    prop_assert!((engine.distance(i, j) - engine.distance(j, i)).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn monotone_transforms_leave_distances_unchanged(
            values in proptest::collection::vec(0.1..10.0f64, 10)
        ) {
            // exp is strictly increasing, so ranks (hence distances) agree.
            let original = vec![values.clone()];
            let transformed = vec![values.iter().map(|v| v.exp()).collect::<Vec<_>>()];
            let a = RankMahalanobis::from_columns(&original);
            let b = RankMahalanobis::from_columns(&transformed);
            prop_assume!(a.is_ok() && b.is_ok());
            let (a, b) = (a.unwrap(), b.unwrap());
            for i in 0..values.len() {
                for j in 0..values.len() {
                    prop_assert!((a.distance(i, j) - b.distance(i, j)).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn widening_the_caliper_never_forbids_more(
            e_probs in proptest::collection::vec(0.05..0.95f64, 3),
            c_probs in proptest::collection::vec(0.05..0.95f64, 3),
            width in 0.01..2.0f64,
        ) {
            let matrix = DistanceMatrix::build(
                vec!["e1".into(), "e2".into(), "e3".into()],
                vec!["c1".into(), "c2".into(), "c3".into()],
                |_, _| 1.0,
            ).unwrap();
            let narrow = apply_caliper(&matrix, &e_probs, &c_probs, width).unwrap();
            let wide = apply_caliper(&matrix, &e_probs, &c_probs, width * 2.0).unwrap();
            for e in 0..3 {
                for c in 0..3 {
                    if !narrow.matrix.is_forbidden(e, c) {
                        prop_assert!(!wide.matrix.is_forbidden(e, c));
                    }
                }
            }
        }
    }
}
