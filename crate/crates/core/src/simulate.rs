//! Synthetic cohort generation with known ground truth: covariates drawn per
//! schema, exposure memberships via sequential logistic splits down the
//! hierarchy, outcomes with planted per-node additive effects, and an
//! optional attrition model. Every replication uses its own counter-based
//! random stream, so parallel runs are independent of scheduling.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cohort::{
    classify_exposure, Classification, Cohort, ContactPrecedence, ExposureNode, Subject,
};
use crate::error::{Error, Result};
use crate::outcomes::{BmiCategory, HealthRating, RawOutcomeFields};
use crate::propensity::expit;
use crate::schema::{CovariateKind, CovariateSchema, CovariateValue, SchemaEntry};
use crate::taxonomy::SportTaxonomy;

/// Marginal model for one covariate, aligned with a schema entry.
#[derive(Debug, Clone)]
pub enum CovariateModel {
    Continuous { mean: f64, sd: f64 },
    /// Level probabilities aligned with the schema's level list.
    Categorical { probs: Vec<f64> },
}

/// Logistic model for one binary split of the hierarchy: probability of
/// falling into the "any" child given membership in the parent.
#[derive(Debug, Clone)]
pub struct SplitModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

/// The four sequential splits of the default hierarchy.
#[derive(Debug, Clone)]
pub struct SplitModels {
    pub any_activity: SplitModel,
    pub any_sports: SplitModel,
    pub any_contact: SplitModel,
    pub any_collision: SplitModel,
}

/// Continuous outcome: baseline + covariate effects + sum of planted node
/// effects + Gaussian noise.
#[derive(Debug, Clone)]
pub struct ContinuousOutcomeModel {
    pub baseline_mean: f64,
    pub noise_sd: f64,
    pub covariate_effects: Vec<f64>,
    pub node_effects: BTreeMap<ExposureNode, f64>,
}

/// Binary outcome: success probability = base rate + covariate effects +
/// planted risk shifts, clamped inside (0, 1).
#[derive(Debug, Clone)]
pub struct BinaryOutcomeModel {
    pub base_rate: f64,
    pub covariate_effects: Vec<f64>,
    pub node_risk_shifts: BTreeMap<ExposureNode, f64>,
}

/// Availability model on the logit scale; `None` makes every subject
/// available.
#[derive(Debug, Clone)]
pub struct AttritionModel {
    pub intercept: f64,
    pub covariate_effects: Vec<f64>,
    /// Extra logit for members of the any-activity root.
    pub exposure_effect: f64,
}

/// Complete generator specification.
#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub n: usize,
    pub seed: u64,
    pub schema: CovariateSchema,
    pub covariates: Vec<CovariateModel>,
    pub splits: SplitModels,
    pub continuous_outcome: ContinuousOutcomeModel,
    pub binary_outcome: BinaryOutcomeModel,
    pub attrition: Option<AttritionModel>,
}

/// Ground truth attached to a generated cohort.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub classifications: Vec<Classification>,
    pub availability: Vec<bool>,
    pub continuous_effects: BTreeMap<ExposureNode, f64>,
    pub binary_shifts: BTreeMap<ExposureNode, f64>,
}

/// A generated cohort plus the exact outcome values and truth labels.
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub cohort: Cohort,
    pub y_continuous: Vec<f64>,
    pub y_binary: Vec<f64>,
    pub truth: GroundTruth,
}

impl SyntheticCohort {
    /// Continuous outcome masked by availability, as the pipeline sees it.
    pub fn available_continuous_outcome(&self) -> Vec<Option<f64>> {
        self.y_continuous
            .iter()
            .zip(&self.truth.availability)
            .map(|(&y, &a)| a.then_some(y))
            .collect()
    }

    /// Binary outcome masked by availability.
    pub fn available_binary_outcome(&self) -> Vec<Option<f64>> {
        self.y_binary
            .iter()
            .zip(&self.truth.availability)
            .map(|(&y, &a)| a.then_some(y))
            .collect()
    }
}

impl GeneratorSpec {
    /// Length of the feature expansion: one slot per continuous covariate,
    /// levels-1 per categorical.
    pub fn feature_len(&self) -> usize {
        self.schema
            .entries
            .iter()
            .map(|e| match &e.kind {
                CovariateKind::Continuous => 1,
                CovariateKind::Categorical { levels, .. } => levels.len() - 1,
            })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.n == 0 {
            return Err(Error::InvalidConfig("generator needs n > 0".into()));
        }
        if self.covariates.len() != self.schema.len() {
            return Err(Error::InvalidConfig(
                "covariate models must align with the schema".into(),
            ));
        }
        for (model, entry) in self.covariates.iter().zip(&self.schema.entries) {
            match (model, &entry.kind) {
                (CovariateModel::Continuous { sd, .. }, CovariateKind::Continuous) => {
                    if *sd <= 0.0 {
                        return Err(Error::InvalidConfig(format!(
                            "covariate {} needs positive sd",
                            entry.name
                        )));
                    }
                }
                (
                    CovariateModel::Categorical { probs },
                    CovariateKind::Categorical { levels, .. },
                ) => {
                    if probs.len() != levels.len() {
                        return Err(Error::InvalidConfig(format!(
                            "covariate {}: {} probabilities for {} levels",
                            entry.name,
                            probs.len(),
                            levels.len()
                        )));
                    }
                    if probs.iter().any(|p| *p < 0.0) {
                        return Err(Error::InvalidConfig("negative level probability".into()));
                    }
                    let total: f64 = probs.iter().sum();
                    if (total - 1.0).abs() > 1e-9 {
                        return Err(Error::InvalidConfig(format!(
                            "covariate {} level probabilities sum to {total}",
                            entry.name
                        )));
                    }
                }
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "covariate model kind mismatch for {}",
                        entry.name
                    )))
                }
            }
        }
        let f = self.feature_len();
        for (name, split) in [
            ("any_activity", &self.splits.any_activity),
            ("any_sports", &self.splits.any_sports),
            ("any_contact", &self.splits.any_contact),
            ("any_collision", &self.splits.any_collision),
        ] {
            if split.coefficients.len() != f {
                return Err(Error::InvalidConfig(format!(
                    "split {name} has {} coefficients, expected {f}",
                    split.coefficients.len()
                )));
            }
        }
        if self.continuous_outcome.covariate_effects.len() != f
            || self.binary_outcome.covariate_effects.len() != f
        {
            return Err(Error::InvalidConfig(
                "outcome covariate effects must match the feature expansion".into(),
            ));
        }
        if self.continuous_outcome.noise_sd <= 0.0 {
            return Err(Error::InvalidConfig("outcome noise sd must be positive".into()));
        }
        if !(0.0 < self.binary_outcome.base_rate && self.binary_outcome.base_rate < 1.0) {
            return Err(Error::InvalidConfig("binary base rate outside (0,1)".into()));
        }
        if let Some(attrition) = &self.attrition {
            if attrition.covariate_effects.len() != f {
                return Err(Error::InvalidConfig(
                    "attrition covariate effects must match the feature expansion".into(),
                ));
            }
        }
        Ok(())
    }

    /// Nodes whose planted continuous effect is zero.
    pub fn true_null_nodes(&self) -> BTreeSet<ExposureNode> {
        ExposureNode::ALL
            .into_iter()
            .filter(|node| {
                self.continuous_outcome
                    .node_effects
                    .get(node)
                    .map(|t| *t == 0.0)
                    .unwrap_or(true)
            })
            .collect()
    }
}

fn features(schema: &CovariateSchema, models: &[CovariateModel], values: &[CovariateValue]) -> Vec<f64> {
    let mut out = Vec::new();
    for ((entry, model), value) in schema.entries.iter().zip(models).zip(values) {
        match (&entry.kind, model, value) {
            (
                CovariateKind::Continuous,
                CovariateModel::Continuous { mean, sd },
                CovariateValue::Continuous(v),
            ) => out.push((v - mean) / sd),
            (CovariateKind::Categorical { levels, .. }, _, CovariateValue::Level(l)) => {
                for k in 1..levels.len() {
                    out.push((k == *l) as u8 as f64);
                }
            }
            _ => unreachable!("validated spec"),
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn representative_activities(classification_leaf: Option<ExposureNode>) -> Vec<&'static str> {
    match classification_leaf {
        None => vec![],
        Some(ExposureNode::NoSports) => vec!["student council"],
        Some(ExposureNode::NoContact) => vec!["track"],
        Some(ExposureNode::NoCollision) => vec!["basketball"],
        Some(ExposureNode::AnyCollision) => vec!["football"],
        Some(other) => unreachable!("{other:?} is not a leaf"),
    }
}

/// Distribute a total of 0..=27 over nine items of 0..=3 each.
fn phq_items_from_total(total: u8) -> [Option<u8>; 9] {
    let base = total / 9;
    let remainder = (total % 9) as usize;
    let mut items = [Some(base); 9];
    for item in items.iter_mut().take(remainder) {
        *item = Some(base + 1);
    }
    items
}

/// Generate one synthetic cohort for the given replication index.
/// Deterministic in (spec.seed, replication).
pub fn generate(spec: &GeneratorSpec, replication: u64) -> Result<SyntheticCohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(replication);
    let taxonomy = SportTaxonomy::default();

    let mut subjects = Vec::with_capacity(spec.n);
    let mut y_continuous = Vec::with_capacity(spec.n);
    let mut y_binary = Vec::with_capacity(spec.n);
    let mut availability = Vec::with_capacity(spec.n);
    let mut classifications = Vec::with_capacity(spec.n);
    let mut y_column: Vec<Option<f64>> = Vec::with_capacity(spec.n);
    let mut y_bin_column: Vec<Option<f64>> = Vec::with_capacity(spec.n);

    let noise = Normal::new(0.0, spec.continuous_outcome.noise_sd)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    for i in 0..spec.n {
        // Covariates.
        let mut values = Vec::with_capacity(spec.schema.len());
        for (entry, model) in spec.schema.entries.iter().zip(&spec.covariates) {
            match (model, &entry.kind) {
                (CovariateModel::Continuous { mean, sd }, _) => {
                    let draw = Normal::new(*mean, *sd).unwrap().sample(&mut rng);
                    values.push(CovariateValue::Continuous(draw));
                }
                (CovariateModel::Categorical { probs }, _) => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut level = probs.len() - 1;
                    for (k, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            level = k;
                            break;
                        }
                    }
                    values.push(CovariateValue::Level(level));
                }
            }
        }
        let f = features(&spec.schema, &spec.covariates, &values);

        // Sequential splits down the hierarchy.
        let split = |rng: &mut ChaCha8Rng, model: &SplitModel| -> bool {
            let p = expit(model.intercept + dot(&model.coefficients, &f));
            rng.random::<f64>() < p
        };
        let leaf = if !split(&mut rng, &spec.splits.any_activity) {
            None
        } else if !split(&mut rng, &spec.splits.any_sports) {
            Some(ExposureNode::NoSports)
        } else if !split(&mut rng, &spec.splits.any_contact) {
            Some(ExposureNode::NoContact)
        } else if split(&mut rng, &spec.splits.any_collision) {
            Some(ExposureNode::AnyCollision)
        } else {
            Some(ExposureNode::NoCollision)
        };

        let activities: BTreeSet<String> = representative_activities(leaf)
            .into_iter()
            .map(String::from)
            .collect();
        let classification =
            classify_exposure(&activities, &taxonomy, ContactPrecedence::Maximal);

        // Outcomes.
        let mut effect = 0.0;
        for (node, tau) in &spec.continuous_outcome.node_effects {
            if classification.is_member(*node) {
                effect += tau;
            }
        }
        let y = spec.continuous_outcome.baseline_mean
            + dot(&spec.continuous_outcome.covariate_effects, &f)
            + effect
            + noise.sample(&mut rng);

        let mut shift = 0.0;
        for (node, delta) in &spec.binary_outcome.node_risk_shifts {
            if classification.is_member(*node) {
                shift += delta;
            }
        }
        let p_bin = (spec.binary_outcome.base_rate
            + dot(&spec.binary_outcome.covariate_effects, &f)
            + shift)
            .clamp(0.01, 0.99);
        let yb = (rng.random::<f64>() < p_bin) as u8 as f64;

        // Availability.
        let available = match &spec.attrition {
            None => true,
            Some(model) => {
                let eta = model.intercept
                    + dot(&model.covariate_effects, &f)
                    + if classification.is_member(ExposureNode::AnyActivity) {
                        model.exposure_effect
                    } else {
                        0.0
                    };
                rng.random::<f64>() < expit(eta)
            }
        };

        // Raw fields consistent with the drawn outcomes.
        let mut raw = RawOutcomeFields::default();
        if available {
            let total = y.round().clamp(0.0, 27.0) as u8;
            raw.phq_items = phq_items_from_total(total);
            raw.health_rating = Some(if yb == 1.0 {
                HealthRating::Fair
            } else {
                HealthRating::Good
            });
        }
        let weight = 120.0 + 100.0 * rng.random::<f64>();
        let height = 60.0 + 15.0 * rng.random::<f64>();
        raw.weight_lbs = Some(weight);
        raw.height_in = Some(height);
        let bmi = 703.0 * weight / (height * height);
        raw.bmi_category = Some(if bmi < 18.5 {
            BmiCategory::Underweight
        } else if bmi < 25.0 {
            BmiCategory::Normal
        } else if bmi < 30.0 {
            BmiCategory::Overweight
        } else {
            BmiCategory::Obese
        });
        let never = rng.random::<f64>() < 0.3;
        raw.never_drinks = Some(never);
        if !never {
            raw.cage_items = core::array::from_fn(|_| Some(rng.random::<f64>() < 0.15));
            raw.binge_episodes = Some(rng.random_range(0..8));
        }
        raw.life_sat_items = core::array::from_fn(|_| Some(rng.random_range(0..=3u8)));

        subjects.push(Subject {
            id: format!("s{i:06}"),
            covariates: values,
            activities,
            raw_outcomes: raw,
            wave4_present: available,
        });
        y_column.push(available.then_some(y));
        y_bin_column.push(available.then_some(yb));
        y_continuous.push(y);
        y_binary.push(yb);
        availability.push(available);
        classifications.push(classification);
    }

    let mut cohort = Cohort::new(spec.schema.clone(), subjects)?;
    cohort.extra_columns.insert("y".into(), y_column);
    cohort.extra_columns.insert("y_bin".into(), y_bin_column);

    Ok(SyntheticCohort {
        cohort,
        y_continuous,
        y_binary,
        truth: GroundTruth {
            classifications,
            availability,
            continuous_effects: spec.continuous_outcome.node_effects.clone(),
            binary_shifts: spec.binary_outcome.node_risk_shifts.clone(),
        },
    })
}

fn pattern(len: usize, scale: f64) -> Vec<f64> {
    let base = [0.6, -0.4, 0.3, -0.2, 0.5, -0.3];
    (0..len).map(|i| scale * base[i % base.len()]).collect()
}

impl GeneratorSpec {
    /// A confounded fixture at the scale of the published any-activity
    /// cohort: four baseline covariates whose effects tilt both exposure and
    /// outcomes, with exposure marginals shaped like the study's.
    pub fn confounded(n: usize, strength: f64, seed: u64) -> Self {
        let schema = CovariateSchema::new(vec![
            SchemaEntry::continuous("age"),
            SchemaEntry::categorical("gender", &["male", "female", "missing"], "missing"),
            SchemaEntry::categorical(
                "family_income",
                &["q1", "q2", "q3", "q4", "q5", "missing"],
                "missing",
            ),
            SchemaEntry::categorical(
                "region",
                &["northeast", "midwest", "south", "west", "missing"],
                "missing",
            ),
        ])
        .unwrap();
        let covariates = vec![
            CovariateModel::Continuous {
                mean: 15.5,
                sd: 1.2,
            },
            CovariateModel::Categorical {
                probs: vec![0.49, 0.49, 0.02],
            },
            CovariateModel::Categorical {
                probs: vec![0.20, 0.25, 0.18, 0.20, 0.15, 0.02],
            },
            CovariateModel::Categorical {
                probs: vec![0.17, 0.25, 0.37, 0.19, 0.02],
            },
        ];
        let feature_len = 1 + 2 + 5 + 4;
        let splits = SplitModels {
            any_activity: SplitModel {
                intercept: 0.97,
                coefficients: pattern(feature_len, strength),
            },
            any_sports: SplitModel {
                intercept: 0.44,
                coefficients: pattern(feature_len, 0.6 * strength),
            },
            any_contact: SplitModel {
                intercept: 1.50,
                coefficients: pattern(feature_len, 0.5 * strength),
            },
            any_collision: SplitModel {
                intercept: -0.41,
                coefficients: pattern(feature_len, 0.5 * strength),
            },
        };
        GeneratorSpec {
            n,
            seed,
            schema,
            covariates,
            splits,
            continuous_outcome: ContinuousOutcomeModel {
                baseline_mean: 5.5,
                noise_sd: 4.0,
                covariate_effects: pattern(feature_len, 1.2 * strength),
                node_effects: BTreeMap::new(),
            },
            binary_outcome: BinaryOutcomeModel {
                base_rate: 0.30,
                covariate_effects: pattern(feature_len, 0.06 * strength),
                node_risk_shifts: BTreeMap::new(),
            },
            attrition: None,
        }
    }

    /// A lighter fixture (three covariates) for Monte Carlo runs at small n.
    pub fn small_confounded(n: usize, strength: f64, seed: u64) -> Self {
        let schema = CovariateSchema::new(vec![
            SchemaEntry::continuous("age"),
            SchemaEntry::categorical("gender", &["male", "female"], "female"),
            SchemaEntry::categorical("family_income", &["low", "middle", "high"], "middle"),
        ])
        .unwrap();
        let covariates = vec![
            CovariateModel::Continuous {
                mean: 15.5,
                sd: 1.2,
            },
            CovariateModel::Categorical {
                probs: vec![0.5, 0.5],
            },
            CovariateModel::Categorical {
                probs: vec![0.3, 0.45, 0.25],
            },
        ];
        let feature_len = 1 + 1 + 2;
        let splits = SplitModels {
            any_activity: SplitModel {
                intercept: 0.97,
                coefficients: pattern(feature_len, strength),
            },
            any_sports: SplitModel {
                intercept: 0.44,
                coefficients: pattern(feature_len, 0.6 * strength),
            },
            any_contact: SplitModel {
                intercept: 1.50,
                coefficients: pattern(feature_len, 0.5 * strength),
            },
            any_collision: SplitModel {
                intercept: -0.41,
                coefficients: pattern(feature_len, 0.5 * strength),
            },
        };
        GeneratorSpec {
            n,
            seed,
            schema,
            covariates,
            splits,
            continuous_outcome: ContinuousOutcomeModel {
                baseline_mean: 5.5,
                noise_sd: 4.0,
                covariate_effects: pattern(feature_len, 1.2 * strength),
                node_effects: BTreeMap::new(),
            },
            binary_outcome: BinaryOutcomeModel {
                base_rate: 0.30,
                covariate_effects: pattern(feature_len, 0.06 * strength),
                node_risk_shifts: BTreeMap::new(),
            },
            attrition: None,
        }
    }
}
