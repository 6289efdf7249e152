//! Covariate schema: the ordered list of baseline covariates, their kinds,
//! and their level sets. The schema order fixes the column order of every
//! design matrix built from a cohort.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kind of a baseline covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovariateKind {
    Continuous,
    /// Categorical with a declared level set. Missingness is itself a level;
    /// `missing_level` indexes into `levels`.
    Categorical {
        levels: Vec<String>,
        missing_level: usize,
    },
}

/// One schema entry: a named covariate and its kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaEntry {
    pub name: String,
    pub kind: CovariateKind,
}

impl SchemaEntry {
    pub fn continuous(name: &str) -> Self {
        SchemaEntry {
            name: name.to_string(),
            kind: CovariateKind::Continuous,
        }
    }

    /// Categorical entry whose last level is the declared missing level.
    pub fn categorical(name: &str, levels: &[&str], missing: &str) -> Self {
        let mut levels: Vec<String> = levels.iter().map(|s| s.to_string()).collect();
        let missing_level = match levels.iter().position(|l| l == missing) {
            Some(i) => i,
            None => {
                levels.push(missing.to_string());
                levels.len() - 1
            }
        };
        SchemaEntry {
            name: name.to_string(),
            kind: CovariateKind::Categorical {
                levels,
                missing_level,
            },
        }
    }
}

/// Ordered covariate schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub entries: Vec<SchemaEntry>,
}

impl CovariateSchema {
    pub fn new(entries: Vec<SchemaEntry>) -> Result<Self> {
        let schema = CovariateSchema { entries };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.name.clone()) {
                return Err(Error::InvalidSchema(format!(
                    "duplicate covariate name: {}",
                    entry.name
                )));
            }
            if let CovariateKind::Categorical {
                levels,
                missing_level,
            } = &entry.kind
            {
                if levels.len() < 2 {
                    return Err(Error::InvalidSchema(format!(
                        "categorical covariate {} needs at least 2 levels",
                        entry.name
                    )));
                }
                if *missing_level >= levels.len() {
                    return Err(Error::InvalidSchema(format!(
                        "missing level index out of range for {}",
                        entry.name
                    )));
                }
                let mut lv = std::collections::BTreeSet::new();
                for l in levels {
                    if !lv.insert(l) {
                        return Err(Error::InvalidSchema(format!(
                            "duplicate level {l} in covariate {}",
                            entry.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<(usize, &SchemaEntry)> {
        self.entries
            .iter()
            .enumerate()
            .find(|(_, e)| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The baseline covariate set of the default study design: demographics
    /// plus family socioeconomic status, each categorical carrying an
    /// explicit missing level.
    pub fn default_study() -> Self {
        CovariateSchema {
            entries: vec![
                SchemaEntry::continuous("age"),
                SchemaEntry::categorical("gender", &["male", "female", "missing"], "missing"),
                SchemaEntry::categorical(
                    "race",
                    &[
                        "white",
                        "black",
                        "hispanic",
                        "asian",
                        "islander",
                        "native_american",
                        "mixed",
                        "other",
                        "missing",
                    ],
                    "missing",
                ),
                SchemaEntry::categorical(
                    "region",
                    &["northeast", "midwest", "south", "west", "missing"],
                    "missing",
                ),
                SchemaEntry::categorical(
                    "family_income",
                    &["q1", "q2", "q3", "q4", "q5", "missing"],
                    "missing",
                ),
                SchemaEntry::categorical(
                    "family_structure",
                    &[
                        "two_parent_biological",
                        "two_parent_nonbiological",
                        "single_parent_other",
                        "missing",
                    ],
                    "missing",
                ),
                SchemaEntry::categorical(
                    "parent_education",
                    &[
                        "less_than_high_school",
                        "high_school",
                        "aa_vocational",
                        "ba_bs",
                        "higher_degree",
                        "missing",
                    ],
                    "missing",
                ),
                SchemaEntry::categorical(
                    "school",
                    &["public", "private", "home", "other", "missing"],
                    "missing",
                ),
            ],
        }
    }
}

/// A single covariate value, aligned with a schema entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovariateValue {
    Continuous(f64),
    /// Index into the entry's level set.
    Level(usize),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_validates() {
        CovariateSchema::default_study().validate().unwrap();
    }

    #[test]
    fn rejects_single_level_categorical() {
        let schema = CovariateSchema {
            entries: vec![SchemaEntry {
                name: "x".into(),
                kind: CovariateKind::Categorical {
                    levels: vec!["only".into()],
                    missing_level: 0,
                },
            }],
        };
        assert!(schema.validate().is_err());
    }

    #[test]
    fn rejects_duplicate_names() {
        let schema = CovariateSchema {
            entries: vec![SchemaEntry::continuous("age"), SchemaEntry::continuous("age")],
        };
        assert!(schema.validate().is_err());
    }
}
