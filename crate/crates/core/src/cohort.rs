//! Cohort data model and ingestion: subjects with baseline covariates,
//! free-text activity lists, raw outcome fields, and classification into the
//! exposure hierarchy.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::outcomes::{
    derive_outcomes, BmiCategory, HealthRating, Outcomes, RawOutcomeFields,
};
use crate::schema::{CovariateKind, CovariateSchema, CovariateValue};
use crate::taxonomy::{normalize_label, ContactLevel, SportTaxonomy};

/// The seven exposure definitions, from broadest to narrowest. The control
/// group (no activity at all) is not a node: it is the shared comparison
/// cohort for every node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExposureNode {
    AnyActivity,
    AnySports,
    NoSports,
    AnyContact,
    NoContact,
    AnyCollision,
    NoCollision,
}

impl ExposureNode {
    pub const ALL: [ExposureNode; 7] = [
        ExposureNode::AnyActivity,
        ExposureNode::AnySports,
        ExposureNode::NoSports,
        ExposureNode::AnyContact,
        ExposureNode::NoContact,
        ExposureNode::AnyCollision,
        ExposureNode::NoCollision,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExposureNode::AnyActivity => "any_activity",
            ExposureNode::AnySports => "any_sports",
            ExposureNode::NoSports => "no_sports",
            ExposureNode::AnyContact => "any_contact",
            ExposureNode::NoContact => "no_contact",
            ExposureNode::AnyCollision => "any_collision",
            ExposureNode::NoCollision => "no_collision",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ExposureNode::ALL.into_iter().find(|n| n.name() == name)
    }

    pub fn parent(&self) -> Option<ExposureNode> {
        match self {
            ExposureNode::AnyActivity => None,
            ExposureNode::AnySports | ExposureNode::NoSports => Some(ExposureNode::AnyActivity),
            ExposureNode::AnyContact | ExposureNode::NoContact => Some(ExposureNode::AnySports),
            ExposureNode::AnyCollision | ExposureNode::NoCollision => {
                Some(ExposureNode::AnyContact)
            }
        }
    }

    pub fn children(&self) -> &'static [ExposureNode] {
        match self {
            ExposureNode::AnyActivity => &[ExposureNode::AnySports, ExposureNode::NoSports],
            ExposureNode::AnySports => &[ExposureNode::AnyContact, ExposureNode::NoContact],
            ExposureNode::AnyContact => &[ExposureNode::AnyCollision, ExposureNode::NoCollision],
            _ => &[],
        }
    }

    pub fn depth(&self) -> usize {
        match self.parent() {
            None => 0,
            Some(p) => p.depth() + 1,
        }
    }

    fn index(&self) -> usize {
        ExposureNode::ALL.iter().position(|n| n == self).unwrap()
    }
}

/// Tie-break rule when a subject reports sports from several contact classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ContactPrecedence {
    /// Classify at the highest contact level reported (collision beats
    /// contact beats non-contact). Consistent with a disjoint partition of
    /// the sports cohort by maximal exposure.
    #[default]
    Maximal,
    /// Classify at the lowest contact level reported.
    Minimal,
}

/// Node memberships for a single subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classification {
    pub control: bool,
    members: [bool; 7],
}

impl Classification {
    pub fn is_member(&self, node: ExposureNode) -> bool {
        self.members[node.index()]
    }
}

/// Classify a subject's activity set into the exposure hierarchy.
///
/// Unrecognized activities count as non-sport activities: they still grant
/// membership in the any-activity root.
pub fn classify_exposure(
    activities: &BTreeSet<String>,
    taxonomy: &SportTaxonomy,
    precedence: ContactPrecedence,
) -> Classification {
    let mut members = [false; 7];
    if activities.is_empty() {
        return Classification {
            control: true,
            members,
        };
    }
    members[ExposureNode::AnyActivity.index()] = true;

    let levels: Vec<ContactLevel> = activities
        .iter()
        .filter_map(|a| taxonomy.classify(a))
        .collect();
    if levels.is_empty() {
        members[ExposureNode::NoSports.index()] = true;
        return Classification {
            control: false,
            members,
        };
    }
    members[ExposureNode::AnySports.index()] = true;

    let level = match precedence {
        ContactPrecedence::Maximal => levels.iter().copied().max().unwrap(),
        ContactPrecedence::Minimal => levels.iter().copied().min().unwrap(),
    };
    match level {
        ContactLevel::NonContact => members[ExposureNode::NoContact.index()] = true,
        ContactLevel::Contact => {
            members[ExposureNode::AnyContact.index()] = true;
            members[ExposureNode::NoCollision.index()] = true;
        }
        ContactLevel::Collision => {
            members[ExposureNode::AnyContact.index()] = true;
            members[ExposureNode::AnyCollision.index()] = true;
        }
    }
    Classification {
        control: false,
        members,
    }
}

/// One study subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Aligned with the cohort schema's entries.
    pub covariates: Vec<CovariateValue>,
    /// Normalized free-text activity labels.
    pub activities: BTreeSet<String>,
    pub raw_outcomes: RawOutcomeFields,
    pub wave4_present: bool,
}

/// A loaded cohort: immutable after construction.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub schema: CovariateSchema,
    pub subjects: Vec<Subject>,
    /// Extra numeric outcome columns requested at load time, keyed by name.
    pub extra_columns: BTreeMap<String, Vec<Option<f64>>>,
}

impl Cohort {
    pub fn new(schema: CovariateSchema, subjects: Vec<Subject>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &subjects {
            if !seen.insert(s.id.clone()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
            if s.covariates.len() != schema.len() {
                return Err(Error::Internal(format!(
                    "subject {} has {} covariates, schema has {}",
                    s.id,
                    s.covariates.len(),
                    schema.len()
                )));
            }
        }
        Ok(Cohort {
            schema,
            subjects,
            extra_columns: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Classify every subject. Output is aligned with `subjects`.
    pub fn classify(
        &self,
        taxonomy: &SportTaxonomy,
        precedence: ContactPrecedence,
    ) -> Vec<Classification> {
        self.subjects
            .iter()
            .map(|s| classify_exposure(&s.activities, taxonomy, precedence))
            .collect()
    }

    /// Derive outcomes for every subject. Output is aligned with `subjects`.
    pub fn derive_all_outcomes(&self) -> Vec<Outcomes> {
        self.subjects
            .iter()
            .map(|s| derive_outcomes(&s.raw_outcomes))
            .collect()
    }

    /// Per-node and control membership counts.
    pub fn node_counts(
        &self,
        taxonomy: &SportTaxonomy,
        precedence: ContactPrecedence,
    ) -> NodeCounts {
        let classifications = self.classify(taxonomy, precedence);
        let mut counts = NodeCounts::default();
        for c in &classifications {
            if c.control {
                counts.control += 1;
            }
            for node in ExposureNode::ALL {
                if c.is_member(node) {
                    counts.nodes[node.index()] += 1;
                }
            }
        }
        counts
    }
}

/// Membership counts over the hierarchy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeCounts {
    pub control: usize,
    nodes: [usize; 7],
}

impl NodeCounts {
    pub fn node(&self, node: ExposureNode) -> usize {
        self.nodes[node.index()]
    }
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

/// Canonical raw-outcome column names for the ingestion format.
pub const OUTCOME_COLUMNS: &[&str] = &[
    "health_rating",
    "phq1",
    "phq2",
    "phq3",
    "phq4",
    "phq5",
    "phq6",
    "phq7",
    "phq8",
    "phq9",
    "weight_lbs",
    "height_in",
    "bmi_category",
    "never_drinks",
    "cage1",
    "cage2",
    "cage3",
    "cage4",
    "binge_episodes",
    "ls1",
    "ls2",
    "ls3",
    "ls4",
];

/// Ingestion options.
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub delimiter: u8,
    /// Maps canonical column names (schema entries, `id`, `activities`,
    /// raw-outcome columns) to the names actually used in the file.
    pub rename: BTreeMap<String, String>,
    /// Extra numeric columns to retain as custom outcomes.
    pub extra_outcome_columns: Vec<String>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            delimiter: b',',
            rename: BTreeMap::new(),
            extra_outcome_columns: Vec::new(),
        }
    }
}

fn is_missing_token(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || matches!(t.to_lowercase().as_str(), "na" | "n/a" | "missing" | ".")
}

fn normalize_level(cell: &str) -> String {
    cell.trim()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
        .replace('-', "_")
}

fn parse_bool(cell: &str) -> Option<bool> {
    match cell.trim().to_lowercase().as_str() {
        "1" | "true" | "yes" | "y" => Some(true),
        "0" | "false" | "no" | "n" => Some(false),
        _ => None,
    }
}

struct ColumnIndex {
    by_name: BTreeMap<String, usize>,
    rename: BTreeMap<String, String>,
}

impl ColumnIndex {
    fn actual_name<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.rename
            .get(canonical)
            .map(String::as_str)
            .unwrap_or(canonical)
    }

    fn required(&self, canonical: &str) -> Result<usize> {
        let actual = self.actual_name(canonical);
        self.by_name
            .get(actual)
            .copied()
            .ok_or_else(|| Error::MissingColumn(canonical.to_string()))
    }

    fn optional(&self, canonical: &str) -> Option<usize> {
        self.by_name.get(self.actual_name(canonical)).copied()
    }
}

fn parse_item_0_3(cell: &str, row: usize, column: &str) -> Result<Option<u8>> {
    if is_missing_token(cell) {
        return Ok(None);
    }
    let v: u8 = cell.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("expected an integer 0..=3, got {cell:?}"),
    })?;
    if v > 3 {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("item score {v} out of range 0..=3"),
        });
    }
    Ok(Some(v))
}

fn parse_positive_real(cell: &str, row: usize, column: &str) -> Result<Option<f64>> {
    if is_missing_token(cell) {
        return Ok(None);
    }
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("expected a number, got {cell:?}"),
    })?;
    if !v.is_finite() || v <= 0.0 {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("expected a positive number, got {cell}"),
        });
    }
    Ok(Some(v))
}

fn parse_bool_cell(cell: &str, row: usize, column: &str) -> Result<Option<bool>> {
    if is_missing_token(cell) {
        return Ok(None);
    }
    parse_bool(cell).map(Some).ok_or(()).map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("expected a boolean, got {cell:?}"),
    })
}

/// Load a cohort from delimiter-separated text with a header row.
///
/// Every schema entry plus `id` and `activities` must be present as columns.
/// Raw-outcome columns are optional; absent columns read as missing for
/// every subject. Unparseable categorical covariate values map to the
/// schema's missing level; unparseable continuous values are rejected.
pub fn load_cohort<R: Read>(
    reader: R,
    schema: &CovariateSchema,
    options: &LoadOptions,
) -> Result<Cohort> {
    schema.validate()?;
    let mut csv_reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .flexible(false)
        .from_reader(reader);

    let headers = csv_reader.headers()?.clone();
    let mut by_name = BTreeMap::new();
    for (i, h) in headers.iter().enumerate() {
        by_name.insert(h.trim().to_string(), i);
    }
    let index = ColumnIndex {
        by_name,
        rename: options.rename.clone(),
    };

    let id_col = index.required("id")?;
    let activities_col = index.required("activities")?;
    let mut covariate_cols = Vec::with_capacity(schema.len());
    for entry in &schema.entries {
        covariate_cols.push(index.required(&entry.name)?);
    }
    let wave4_col = index.optional("wave4_present");
    let outcome_cols: BTreeMap<&str, usize> = OUTCOME_COLUMNS
        .iter()
        .filter_map(|c| index.optional(c).map(|i| (*c, i)))
        .collect();
    let mut extra_cols = Vec::new();
    for name in &options.extra_outcome_columns {
        extra_cols.push((name.clone(), index.required(name)?));
    }

    let mut subjects = Vec::new();
    let mut extras: BTreeMap<String, Vec<Option<f64>>> = options
        .extra_outcome_columns
        .iter()
        .map(|n| (n.clone(), Vec::new()))
        .collect();
    let mut seen_ids = BTreeSet::new();

    for (row_number, record) in csv_reader.records().enumerate() {
        let record = record?;
        let row = row_number + 2; // 1-based, after the header
        let get = |col: usize| record.get(col).unwrap_or("");

        let id = get(id_col).trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                row,
                column: "id".into(),
                message: "empty subject id".into(),
            });
        }
        if !seen_ids.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }

        let mut covariates = Vec::with_capacity(schema.len());
        for (entry, &col) in schema.entries.iter().zip(&covariate_cols) {
            let cell = get(col);
            match &entry.kind {
                CovariateKind::Continuous => {
                    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                        row,
                        column: entry.name.clone(),
                        message: format!(
                            "continuous covariate must be a number, got {cell:?}"
                        ),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Parse {
                            row,
                            column: entry.name.clone(),
                            message: "continuous covariate must be finite".into(),
                        });
                    }
                    covariates.push(CovariateValue::Continuous(v));
                }
                CovariateKind::Categorical {
                    levels,
                    missing_level,
                } => {
                    let norm = normalize_level(cell);
                    let level = levels
                        .iter()
                        .position(|l| normalize_level(l) == norm)
                        .unwrap_or(*missing_level);
                    covariates.push(CovariateValue::Level(level));
                }
            }
        }

        let activities: BTreeSet<String> = get(activities_col)
            .split(';')
            .map(normalize_label)
            .filter(|a| !a.is_empty())
            .collect();

        let wave4_present = match wave4_col {
            Some(col) => parse_bool_cell(get(col), row, "wave4_present")?.unwrap_or(true),
            None => true,
        };

        let mut raw = RawOutcomeFields::default();
        if let Some(&col) = outcome_cols.get("health_rating") {
            let cell = get(col);
            if !is_missing_token(cell) {
                raw.health_rating =
                    Some(HealthRating::parse(cell).ok_or_else(|| Error::Parse {
                        row,
                        column: "health_rating".into(),
                        message: format!("unknown health rating {cell:?}"),
                    })?);
            }
        }
        for i in 0..9 {
            let name = format!("phq{}", i + 1);
            if let Some(&col) = outcome_cols.get(name.as_str()) {
                raw.phq_items[i] = parse_item_0_3(get(col), row, &name)?;
            }
        }
        if let Some(&col) = outcome_cols.get("weight_lbs") {
            raw.weight_lbs = parse_positive_real(get(col), row, "weight_lbs")?;
        }
        if let Some(&col) = outcome_cols.get("height_in") {
            raw.height_in = parse_positive_real(get(col), row, "height_in")?;
        }
        if let Some(&col) = outcome_cols.get("bmi_category") {
            let cell = get(col);
            if !is_missing_token(cell) {
                raw.bmi_category =
                    Some(BmiCategory::parse(cell).ok_or_else(|| Error::Parse {
                        row,
                        column: "bmi_category".into(),
                        message: format!("unknown weight category {cell:?}"),
                    })?);
            }
        }
        if let Some(&col) = outcome_cols.get("never_drinks") {
            raw.never_drinks = parse_bool_cell(get(col), row, "never_drinks")?;
        }
        for i in 0..4 {
            let name = format!("cage{}", i + 1);
            if let Some(&col) = outcome_cols.get(name.as_str()) {
                raw.cage_items[i] = parse_bool_cell(get(col), row, &name)?;
            }
        }
        if let Some(&col) = outcome_cols.get("binge_episodes") {
            let cell = get(col);
            if !is_missing_token(cell) {
                raw.binge_episodes = Some(cell.trim().parse().map_err(|_| Error::Parse {
                    row,
                    column: "binge_episodes".into(),
                    message: format!("expected a count, got {cell:?}"),
                })?);
            }
        }
        for i in 0..4 {
            let name = format!("ls{}", i + 1);
            if let Some(&col) = outcome_cols.get(name.as_str()) {
                raw.life_sat_items[i] = parse_item_0_3(get(col), row, &name)?;
            }
        }

        for (name, col) in &extra_cols {
            let cell = get(*col);
            let value = if is_missing_token(cell) {
                None
            } else {
                Some(cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    column: name.clone(),
                    message: format!("expected a number, got {cell:?}"),
                })?)
            };
            extras.get_mut(name).unwrap().push(value);
        }

        subjects.push(Subject {
            id,
            covariates,
            activities,
            raw_outcomes: raw,
            wave4_present,
        });
    }

    let mut cohort = Cohort::new(schema.clone(), subjects)?;
    cohort.extra_columns = extras;
    Ok(cohort)
}

/// Write a cohort in the ingestion format (canonical column names).
pub fn write_cohort<W: Write>(cohort: &Cohort, writer: W, delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(writer);

    let mut header: Vec<String> = vec!["id".into(), "activities".into(), "wave4_present".into()];
    header.extend(cohort.schema.entries.iter().map(|e| e.name.clone()));
    header.extend(OUTCOME_COLUMNS.iter().map(|c| c.to_string()));
    header.extend(cohort.extra_columns.keys().cloned());
    w.write_record(&header)?;

    let fmt_opt_u8 = |v: Option<u8>| v.map(|x| x.to_string()).unwrap_or_default();
    let fmt_opt_bool = |v: Option<bool>| v.map(|x| (x as u8).to_string()).unwrap_or_default();

    for (i, s) in cohort.subjects.iter().enumerate() {
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        record.push(s.id.clone());
        record.push(s.activities.iter().cloned().collect::<Vec<_>>().join(";"));
        record.push((s.wave4_present as u8).to_string());
        for (entry, value) in cohort.schema.entries.iter().zip(&s.covariates) {
            match (value, &entry.kind) {
                (CovariateValue::Continuous(v), _) => record.push(v.to_string()),
                (CovariateValue::Level(l), CovariateKind::Categorical { levels, .. }) => {
                    record.push(levels[*l].clone())
                }
                (CovariateValue::Level(_), CovariateKind::Continuous) => {
                    return Err(Error::Internal("level value in continuous covariate".into()))
                }
            }
        }
        let raw = &s.raw_outcomes;
        record.push(raw.health_rating.map(|h| h.label().to_string()).unwrap_or_default());
        for item in &raw.phq_items {
            record.push(fmt_opt_u8(*item));
        }
        record.push(raw.weight_lbs.map(|v| v.to_string()).unwrap_or_default());
        record.push(raw.height_in.map(|v| v.to_string()).unwrap_or_default());
        record.push(raw.bmi_category.map(|c| c.label().to_string()).unwrap_or_default());
        record.push(fmt_opt_bool(raw.never_drinks));
        for item in &raw.cage_items {
            record.push(fmt_opt_bool(*item));
        }
        record.push(raw.binge_episodes.map(|v| v.to_string()).unwrap_or_default());
        for item in &raw.life_sat_items {
            record.push(fmt_opt_u8(*item));
        }
        for column in cohort.extra_columns.values() {
            record.push(column[i].map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::SchemaEntry;

    fn tiny_schema() -> CovariateSchema {
        CovariateSchema::new(vec![
            SchemaEntry::continuous("age"),
            SchemaEntry::categorical("race", &["white", "black", "missing"], "missing"),
        ])
        .unwrap()
    }

    fn activities(labels: &[&str]) -> BTreeSet<String> {
        labels.iter().map(|l| normalize_label(l)).collect()
    }

    #[test]
    fn empty_file_gives_empty_cohort() {
        let data = "id,activities,age,race\n";
        let cohort = load_cohort(data.as_bytes(), &tiny_schema(), &LoadOptions::default()).unwrap();
        assert!(cohort.is_empty());
    }

    #[test]
    fn unknown_categorical_token_maps_to_missing_level() {
        let data = "id,activities,age,race\ns1,,17,unknown-token\n";
        let cohort = load_cohort(data.as_bytes(), &tiny_schema(), &LoadOptions::default()).unwrap();
        assert_eq!(cohort.subjects[0].covariates[1], CovariateValue::Level(2));
    }

    #[test]
    fn missing_schema_column_is_named() {
        let data = "id,activities,race\ns1,,white\n";
        let err = load_cohort(data.as_bytes(), &tiny_schema(), &LoadOptions::default()).unwrap_err();
        match err {
            Error::MissingColumn(c) => assert_eq!(c, "age"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn unparseable_continuous_is_rejected() {
        let data = "id,activities,age,race\ns1,,not-a-number,white\n";
        assert!(load_cohort(data.as_bytes(), &tiny_schema(), &LoadOptions::default()).is_err());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let data = "id,activities,age,race\ns1,,17,white\ns1,,16,black\n";
        let err = load_cohort(data.as_bytes(), &tiny_schema(), &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(_)));
    }

    #[test]
    fn empty_activity_set_is_control() {
        let taxonomy = SportTaxonomy::default();
        let c = classify_exposure(&activities(&[]), &taxonomy, ContactPrecedence::Maximal);
        assert!(c.control);
        for node in ExposureNode::ALL {
            assert!(!c.is_member(node));
        }
    }

    #[test]
    fn collision_precedence_over_non_contact() {
        let taxonomy = SportTaxonomy::default();
        let c = classify_exposure(
            &activities(&["Football", "Track"]),
            &taxonomy,
            ContactPrecedence::Maximal,
        );
        assert!(c.is_member(ExposureNode::AnyCollision));
        assert!(c.is_member(ExposureNode::AnyContact));
        assert!(c.is_member(ExposureNode::AnySports));
        assert!(c.is_member(ExposureNode::AnyActivity));
        assert!(!c.is_member(ExposureNode::NoCollision));
        assert!(!c.is_member(ExposureNode::NoContact));
        assert!(!c.is_member(ExposureNode::NoSports));
    }

    #[test]
    fn minimal_precedence_override() {
        let taxonomy = SportTaxonomy::default();
        let c = classify_exposure(
            &activities(&["Football", "Track"]),
            &taxonomy,
            ContactPrecedence::Minimal,
        );
        assert!(c.is_member(ExposureNode::NoContact));
        assert!(!c.is_member(ExposureNode::AnyContact));
    }

    #[test]
    fn unrecognized_activity_is_non_sport() {
        let taxonomy = SportTaxonomy::default();
        let c = classify_exposure(
            &activities(&["chess club"]),
            &taxonomy,
            ContactPrecedence::Maximal,
        );
        assert!(c.is_member(ExposureNode::AnyActivity));
        assert!(c.is_member(ExposureNode::NoSports));
        assert!(!c.is_member(ExposureNode::AnySports));
    }

    #[test]
    fn sport_plus_club_is_sports_only() {
        let taxonomy = SportTaxonomy::default();
        let c = classify_exposure(
            &activities(&["soccer", "chess club"]),
            &taxonomy,
            ContactPrecedence::Maximal,
        );
        assert!(c.is_member(ExposureNode::AnySports));
        assert!(!c.is_member(ExposureNode::NoSports));
        assert!(c.is_member(ExposureNode::NoCollision));
    }

    #[test]
    fn memberships_respect_tree_containment() {
        let taxonomy = SportTaxonomy::default();
        for labels in [
            vec![],
            vec!["football"],
            vec!["basketball"],
            vec!["track"],
            vec!["band"],
            vec!["football", "track", "band"],
        ] {
            let c = classify_exposure(
                &activities(&labels),
                &taxonomy,
                ContactPrecedence::Maximal,
            );
            for node in ExposureNode::ALL {
                if c.is_member(node) {
                    if let Some(parent) = node.parent() {
                        assert!(c.is_member(parent), "{node:?} member but not {parent:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn split_counts_partition_parents() {
        let taxonomy = SportTaxonomy::default();
        let schema = tiny_schema();
        let mut subjects = Vec::new();
        let lists = [
            vec![],
            vec!["football"],
            vec!["wrestling", "track"],
            vec!["basketball"],
            vec!["soccer", "band"],
            vec!["track"],
            vec!["golf", "tennis"],
            vec!["band"],
            vec!["drama"],
        ];
        for (i, labels) in lists.iter().enumerate() {
            subjects.push(Subject {
                id: format!("s{i}"),
                covariates: vec![
                    CovariateValue::Continuous(15.0 + i as f64),
                    CovariateValue::Level(i % 2),
                ],
                activities: activities(labels),
                raw_outcomes: RawOutcomeFields::default(),
                wave4_present: true,
            });
        }
        let cohort = Cohort::new(schema, subjects).unwrap();
        let counts = cohort.node_counts(&taxonomy, ContactPrecedence::Maximal);
        assert_eq!(
            counts.node(ExposureNode::AnySports) + counts.node(ExposureNode::NoSports),
            counts.node(ExposureNode::AnyActivity)
        );
        assert_eq!(
            counts.node(ExposureNode::AnyContact) + counts.node(ExposureNode::NoContact),
            counts.node(ExposureNode::AnySports)
        );
        assert_eq!(
            counts.node(ExposureNode::AnyCollision) + counts.node(ExposureNode::NoCollision),
            counts.node(ExposureNode::AnyContact)
        );
        assert_eq!(counts.control + counts.node(ExposureNode::AnyActivity), cohort.len());
    }
}
