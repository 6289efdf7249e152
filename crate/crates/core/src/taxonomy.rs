//! Sport taxonomy: which activity labels count as non-contact, contact, or
//! collision sports. Body-to-body and body-to-ground contact is legal and
//! purposeful in collision sports, can occur but is not legal in contact
//! sports, and is rare in non-contact sports.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contact level of a sport, ordered from least to most contact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContactLevel {
    NonContact,
    Contact,
    Collision,
}

/// Classification tables for sports, keyed by normalized label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SportTaxonomy {
    pub non_contact: BTreeSet<String>,
    pub contact: BTreeSet<String>,
    pub collision: BTreeSet<String>,
}

const NON_CONTACT: &[&str] = &[
    "track",
    "volleyball",
    "cross country",
    "tennis",
    "swimming",
    "golf",
    "racquetball",
    "crew",
];

const CONTACT: &[&str] = &[
    "basketball",
    "soccer",
    "baseball",
    "softball",
    "gymnastics",
    "field hockey",
    "fencing",
    "flag football",
    "water polo",
    "roller hockey",
];

const COLLISION: &[&str] = &[
    "football",
    "wrestling",
    "martial arts",
    "lacrosse",
    "hockey",
    "boxing",
    "diving",
    "rugby",
];

/// Case-fold and collapse internal whitespace so free-text activity labels
/// compare predictably.
pub fn normalize_label(label: &str) -> String {
    label
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

impl SportTaxonomy {
    /// Build a taxonomy from raw label lists, normalizing and checking that
    /// the three sets are pairwise disjoint.
    pub fn new<S: AsRef<str>>(non_contact: &[S], contact: &[S], collision: &[S]) -> Result<Self> {
        let norm = |labels: &[S]| -> BTreeSet<String> {
            labels.iter().map(|l| normalize_label(l.as_ref())).collect()
        };
        let taxonomy = SportTaxonomy {
            non_contact: norm(non_contact),
            contact: norm(contact),
            collision: norm(collision),
        };
        taxonomy.validate()?;
        Ok(taxonomy)
    }

    pub fn validate(&self) -> Result<()> {
        for label in &self.non_contact {
            if self.contact.contains(label) || self.collision.contains(label) {
                return Err(Error::InvalidConfig(format!(
                    "sport {label} appears in more than one contact class"
                )));
            }
        }
        for label in &self.contact {
            if self.collision.contains(label) {
                return Err(Error::InvalidConfig(format!(
                    "sport {label} appears in more than one contact class"
                )));
            }
        }
        Ok(())
    }

    /// Contact level of a normalized activity label, or `None` when the
    /// label is not a recognized sport.
    pub fn classify(&self, normalized_label: &str) -> Option<ContactLevel> {
        if self.collision.contains(normalized_label) {
            Some(ContactLevel::Collision)
        } else if self.contact.contains(normalized_label) {
            Some(ContactLevel::Contact)
        } else if self.non_contact.contains(normalized_label) {
            Some(ContactLevel::NonContact)
        } else {
            None
        }
    }

    pub fn is_sport(&self, normalized_label: &str) -> bool {
        self.classify(normalized_label).is_some()
    }
}

impl Default for SportTaxonomy {
    fn default() -> Self {
        SportTaxonomy::new(NON_CONTACT, CONTACT, COLLISION).expect("default tables are disjoint")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_tables_are_disjoint() {
        SportTaxonomy::default().validate().unwrap();
    }

    #[test]
    fn normalization_folds_case_and_whitespace() {
        assert_eq!(normalize_label("  Cross   COUNTRY "), "cross country");
        let taxonomy = SportTaxonomy::default();
        assert_eq!(
            taxonomy.classify(&normalize_label("Football")),
            Some(ContactLevel::Collision)
        );
        assert_eq!(
            taxonomy.classify(&normalize_label("Track")),
            Some(ContactLevel::NonContact)
        );
    }

    #[test]
    fn unrecognized_labels_are_not_sports() {
        let taxonomy = SportTaxonomy::default();
        assert_eq!(taxonomy.classify("chess club"), None);
    }

    #[test]
    fn contact_levels_are_ordered() {
        assert!(ContactLevel::Collision > ContactLevel::Contact);
        assert!(ContactLevel::Contact > ContactLevel::NonContact);
    }
}
