//! Run configuration: a TOML file plus command-line overrides, resolved into
//! the core library's option types. The raw file bytes are hashed so every
//! output can carry its provenance.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use treematch_core::balance::BalanceThresholds;
use treematch_core::cohort::{ContactPrecedence, ExposureNode, LoadOptions};
use treematch_core::gatekeeper::{default_alpha_schedule, ExposureTree, TreeNode};
use treematch_core::matching::Structure;
use treematch_core::pipeline::{DerivedOutcome, OutcomeKind, StudyOptions};
use treematch_core::schema::{CovariateSchema, SchemaEntry};
use treematch_core::simulate::{AttritionModel, GeneratorSpec};
use treematch_core::taxonomy::SportTaxonomy;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub input: InputConfig,
    pub schema: Option<SchemaConfig>,
    pub taxonomy: Option<TaxonomyConfig>,
    #[serde(default)]
    pub matching: MatchingConfig,
    #[serde(default)]
    pub tree: TreeConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default, rename = "outcome")]
    pub outcomes: Vec<OutcomeConfig>,
    #[serde(default)]
    pub simulate: SimulateConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub delimiter: Option<String>,
    #[serde(default)]
    pub extra_outcome_columns: Vec<String>,
    #[serde(default)]
    pub rename: BTreeMap<String, String>,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            delimiter: None,
            extra_outcome_columns: Vec::new(),
            rename: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    #[serde(rename = "covariate")]
    pub covariates: Vec<CovariateConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateConfig {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub levels: Vec<String>,
    pub missing_level: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyConfig {
    pub non_contact: Vec<String>,
    pub contact: Vec<String>,
    pub collision: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchingConfig {
    pub caliper_width: Option<f64>,
    pub max_k: Option<usize>,
    pub schedule: Option<Vec<[usize; 2]>>,
    pub smd_ideal: Option<f64>,
    pub smd_acceptable: Option<f64>,
    pub precedence: Option<String>,
    pub filter_availability: Option<bool>,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        MatchingConfig {
            caliper_width: None,
            max_k: None,
            schedule: None,
            smd_ideal: None,
            smd_acceptable: None,
            precedence: None,
            filter_availability: None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    pub global_alpha: Option<f64>,
    #[serde(default, rename = "node")]
    pub nodes: Vec<TreeNodeConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeNodeConfig {
    pub name: String,
    pub alpha: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub ci_level: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeConfig {
    pub name: String,
    /// "continuous" or "binary"; defaults by outcome for derived ones.
    pub kind: Option<String>,
    /// "derived" (default) or "column".
    pub source: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: Option<usize>,
    pub replications: Option<usize>,
    pub strength: Option<f64>,
    /// "small" (three covariates) or "standard" (four covariates).
    pub fixture: Option<String>,
    pub alpha: Option<f64>,
    #[serde(default)]
    pub effects: BTreeMap<String, f64>,
    pub attrition_intercept: Option<f64>,
    pub attrition_exposure_effect: Option<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n: None,
            replications: None,
            strength: None,
            fixture: None,
            alpha: None,
            effects: BTreeMap::new(),
            attrition_intercept: None,
            attrition_exposure_effect: None,
        }
    }
}

/// One outcome to analyze.
#[derive(Debug, Clone)]
pub struct ResolvedOutcome {
    pub name: String,
    pub kind: OutcomeKind,
    pub source: OutcomeSource,
}

#[derive(Debug, Clone)]
pub enum OutcomeSource {
    Derived(DerivedOutcome),
    Column(String),
}

/// Fully resolved run configuration.
pub struct RunConfig {
    pub config_hash: String,
    pub seed: u64,
    pub load_options: LoadOptions,
    pub schema: CovariateSchema,
    pub taxonomy: SportTaxonomy,
    pub study: StudyOptions,
    pub tree: ExposureTree,
    pub outcomes: Vec<ResolvedOutcome>,
    pub simulate: ResolvedSimulate,
}

pub struct ResolvedSimulate {
    pub n: usize,
    pub replications: usize,
    pub strength: f64,
    pub fixture: String,
    pub alpha: f64,
    pub effects: BTreeMap<ExposureNode, f64>,
    pub attrition_intercept: Option<f64>,
    pub attrition_exposure_effect: f64,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub caliper: Option<f64>,
    pub max_k: Option<usize>,
}

pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<RunConfig> {
    let (raw, file): (Vec<u8>, FileConfig) = match path {
        Some(path) => {
            let raw = std::fs::read(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let text = String::from_utf8(raw.clone()).context("config is not UTF-8")?;
            let file = toml::from_str(&text).context("parsing config")?;
            (raw, file)
        }
        None => (Vec::new(), FileConfig::default()),
    };
    resolve(&raw, file, overrides)
}

fn resolve(raw: &[u8], file: FileConfig, overrides: &Overrides) -> anyhow::Result<RunConfig> {
    let mut hasher = Sha256::new();
    hasher.update(raw);
    let config_hash = format!("{:x}", hasher.finalize())[..16].to_string();

    let seed = overrides.seed.or(file.seed).unwrap_or(0);

    let delimiter = match file.input.delimiter.as_deref() {
        None => b',',
        Some(d) if d.len() == 1 => d.as_bytes()[0],
        Some(d) => bail!("delimiter must be a single character, got {d:?}"),
    };

    let schema = match &file.schema {
        None => CovariateSchema::default_study(),
        Some(config) => {
            let mut entries = Vec::new();
            for c in &config.covariates {
                match c.kind.as_str() {
                    "continuous" => entries.push(SchemaEntry::continuous(&c.name)),
                    "categorical" => {
                        if c.levels.len() < 2 {
                            bail!("covariate {} needs at least 2 levels", c.name);
                        }
                        let missing = c.missing_level.clone().unwrap_or_else(|| "missing".into());
                        let levels: Vec<&str> = c.levels.iter().map(String::as_str).collect();
                        entries.push(SchemaEntry::categorical(&c.name, &levels, &missing));
                    }
                    other => bail!("unknown covariate kind {other:?} for {}", c.name),
                }
            }
            CovariateSchema::new(entries)?
        }
    };

    let taxonomy = match &file.taxonomy {
        None => SportTaxonomy::default(),
        Some(t) => SportTaxonomy::new(&t.non_contact, &t.contact, &t.collision)?,
    };

    let precedence = match file.matching.precedence.as_deref() {
        None | Some("maximal") => ContactPrecedence::Maximal,
        Some("minimal") => ContactPrecedence::Minimal,
        Some(other) => bail!("unknown precedence {other:?} (use maximal or minimal)"),
    };

    let thresholds = BalanceThresholds {
        ideal: file.matching.smd_ideal.unwrap_or(0.1),
        acceptable: file.matching.smd_acceptable.unwrap_or(0.2),
    };
    let schedule = file
        .matching
        .schedule
        .as_ref()
        .map(|entries| {
            entries
                .iter()
                .map(|[k_c, k_e]| Structure::new(*k_c, *k_e))
                .collect::<Vec<_>>()
        });

    let study = StudyOptions {
        caliper_width: overrides
            .caliper
            .or(file.matching.caliper_width)
            .unwrap_or(0.2),
        max_k: overrides.max_k.or(file.matching.max_k).unwrap_or(6),
        schedule,
        thresholds,
        precedence,
        filter_availability: file.matching.filter_availability.unwrap_or(true),
        ci_level: file.inference.ci_level.unwrap_or(0.95),
    };

    let global_alpha = overrides
        .alpha
        .or(file.tree.global_alpha)
        .unwrap_or(0.025);
    let mut tree = {
        let mut nodes = Vec::new();
        for node in ExposureNode::ALL {
            let parent = node
                .parent()
                .map(|p| ExposureNode::ALL.iter().position(|n| *n == p).unwrap());
            nodes.push(TreeNode {
                name: node.name().to_string(),
                parent,
                alpha: 1e-3,
            });
        }
        let tree = ExposureTree { nodes };
        let alphas = default_alpha_schedule(&tree, global_alpha)?;
        let mut tree = tree;
        for (node, alpha) in tree.nodes.iter_mut().zip(alphas) {
            node.alpha = alpha;
        }
        tree
    };
    for override_node in &file.tree.nodes {
        match tree.node_by_name(&override_node.name) {
            Some(i) => tree.nodes[i].alpha = override_node.alpha,
            None => bail!("tree override names unknown node {}", override_node.name),
        }
    }
    tree.validate()?;

    let mut outcomes = Vec::new();
    let outcome_configs = if file.outcomes.is_empty() {
        vec![
            OutcomeConfig {
                name: "self_rated_unhealthy".into(),
                kind: None,
                source: None,
            },
            OutcomeConfig {
                name: "phq9_total".into(),
                kind: None,
                source: None,
            },
        ]
    } else {
        file.outcomes
    };
    for outcome in &outcome_configs {
        let source = match outcome.source.as_deref() {
            None | Some("derived") => {
                let derived = DerivedOutcome::from_name(&outcome.name).ok_or_else(|| {
                    anyhow::anyhow!(
                        "{} is not a derivable outcome; use source = \"column\"",
                        outcome.name
                    )
                })?;
                OutcomeSource::Derived(derived)
            }
            Some("column") => OutcomeSource::Column(outcome.name.clone()),
            Some(other) => bail!("unknown outcome source {other:?}"),
        };
        let kind = match outcome.kind.as_deref() {
            None => match &source {
                OutcomeSource::Derived(d) => d.default_kind(),
                OutcomeSource::Column(_) => bail!(
                    "outcome {} from a column needs an explicit kind",
                    outcome.name
                ),
            },
            Some("continuous") => OutcomeKind::Continuous,
            Some("binary") => OutcomeKind::Binary,
            Some(other) => bail!("unknown outcome kind {other:?}"),
        };
        outcomes.push(ResolvedOutcome {
            name: outcome.name.clone(),
            kind,
            source,
        });
    }

    let mut effects = BTreeMap::new();
    for (name, effect) in &file.simulate.effects {
        let node = ExposureNode::from_name(name)
            .ok_or_else(|| anyhow::anyhow!("simulate.effects names unknown node {name}"))?;
        effects.insert(node, *effect);
    }
    let simulate = ResolvedSimulate {
        n: file.simulate.n.unwrap_or(300),
        replications: file.simulate.replications.unwrap_or(1000),
        strength: file.simulate.strength.unwrap_or(0.5),
        fixture: file.simulate.fixture.clone().unwrap_or_else(|| "small".into()),
        alpha: file.simulate.alpha.unwrap_or(0.05),
        effects,
        attrition_intercept: file.simulate.attrition_intercept,
        attrition_exposure_effect: file.simulate.attrition_exposure_effect.unwrap_or(0.0),
    };

    let load_options = LoadOptions {
        delimiter,
        rename: file.input.rename.clone(),
        extra_outcome_columns: file.input.extra_outcome_columns.clone(),
    };

    Ok(RunConfig {
        config_hash,
        seed,
        load_options,
        schema,
        taxonomy,
        study,
        tree,
        outcomes,
        simulate,
    })
}

impl RunConfig {
    /// Generator spec for the simulate command.
    pub fn generator_spec(&self) -> anyhow::Result<GeneratorSpec> {
        let mut spec = match self.simulate.fixture.as_str() {
            "small" => GeneratorSpec::small_confounded(
                self.simulate.n,
                self.simulate.strength,
                self.seed,
            ),
            "standard" => {
                GeneratorSpec::confounded(self.simulate.n, self.simulate.strength, self.seed)
            }
            other => bail!("unknown simulate fixture {other:?} (use small or standard)"),
        };
        for (node, effect) in &self.simulate.effects {
            spec.continuous_outcome.node_effects.insert(*node, *effect);
        }
        if let Some(intercept) = self.simulate.attrition_intercept {
            spec.attrition = Some(AttritionModel {
                intercept,
                covariate_effects: vec![0.0; spec.feature_len()],
                exposure_effect: self.simulate.attrition_exposure_effect,
            });
        }
        Ok(spec)
    }
}
