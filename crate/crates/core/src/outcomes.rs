//! Outcome construction from raw survey fields: the two co-primary outcomes
//! (self-rated health and the nine-item depression total) plus the secondary
//! outcomes (BMI, overweight, problematic and binge drinking, life
//! satisfaction).

use serde::{Deserialize, Serialize};

/// Self-rated health response categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HealthRating {
    Excellent,
    VeryGood,
    Good,
    Fair,
    Poor,
}

impl HealthRating {
    pub fn parse(text: &str) -> Option<Self> {
        match text.trim().to_lowercase().replace(['_', '-'], " ").as_str() {
            "excellent" => Some(HealthRating::Excellent),
            "very good" => Some(HealthRating::VeryGood),
            "good" => Some(HealthRating::Good),
            "fair" => Some(HealthRating::Fair),
            "poor" => Some(HealthRating::Poor),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            HealthRating::Excellent => "excellent",
            HealthRating::VeryGood => "very good",
            HealthRating::Good => "good",
            HealthRating::Fair => "fair",
            HealthRating::Poor => "poor",
        }
    }
}

/// Weight categories from the survey's BMI classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BmiCategory {
    Underweight,
    Normal,
    Overweight,
    Obese,
}

impl BmiCategory {
    pub fn parse(text: &str) -> Option<Self> {
        match text.trim().to_lowercase().replace(['_', '-'], " ").as_str() {
            "underweight" => Some(BmiCategory::Underweight),
            "normal" | "normal weight" => Some(BmiCategory::Normal),
            "overweight" => Some(BmiCategory::Overweight),
            "obese" => Some(BmiCategory::Obese),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            BmiCategory::Underweight => "underweight",
            BmiCategory::Normal => "normal",
            BmiCategory::Overweight => "overweight",
            BmiCategory::Obese => "obese",
        }
    }
}

/// Raw survey fields feeding the outcome derivations. `None` means the field
/// is missing for the subject.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawOutcomeFields {
    pub health_rating: Option<HealthRating>,
    /// Nine depression-symptom items, each scored 0..=3.
    pub phq_items: [Option<u8>; 9],
    pub weight_lbs: Option<f64>,
    pub height_in: Option<f64>,
    pub bmi_category: Option<BmiCategory>,
    /// Whether the subject reports never drinking.
    pub never_drinks: Option<bool>,
    /// Four alcohol-screen items (cut down, annoyed, guilty, eye-opener).
    pub cage_items: [Option<bool>; 4],
    /// Episodes of binge drinking in a two-week period.
    pub binge_episodes: Option<u32>,
    /// Four life-satisfaction items, each scored 0..=3.
    pub life_sat_items: [Option<u8>; 4],
}

/// Derived outcomes for one subject. `None` marks an underivable (missing)
/// outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcomes {
    /// 1 when self-rated health is fair or poor.
    pub self_rated_unhealthy: Option<bool>,
    /// Depression total, 0..=27.
    pub phq9_total: Option<u8>,
    /// 703 * weight_lbs / height_in^2.
    pub bmi: Option<f64>,
    /// 1 when the weight category is overweight or obese.
    pub overweight: Option<bool>,
    /// 1 when the alcohol-screen score is >= 2; never-drinkers score 0.
    pub problematic_drinking: Option<bool>,
    /// 1 when binge episodes >= 5 in two weeks; never-drinkers score 0.
    pub binge_drinking: Option<bool>,
    /// Life-satisfaction total, 0..=12.
    pub life_satisfaction: Option<u8>,
    /// Both co-primary outcomes are present.
    pub availability: bool,
}

/// Number of binge episodes at or above which the binge indicator is set.
pub const BINGE_EPISODE_THRESHOLD: u32 = 5;
/// Alcohol-screen score at or above which drinking is flagged problematic.
pub const CAGE_THRESHOLD: u8 = 2;

fn sum_items<const N: usize>(items: &[Option<u8>; N]) -> Option<u8> {
    let mut total = 0u8;
    for item in items {
        total += (*item)?;
    }
    Some(total)
}

/// Derive all outcomes from the raw fields. Pure.
pub fn derive_outcomes(raw: &RawOutcomeFields) -> Outcomes {
    let self_rated_unhealthy = raw
        .health_rating
        .map(|r| matches!(r, HealthRating::Fair | HealthRating::Poor));

    let phq9_total = sum_items(&raw.phq_items);

    let bmi = match (raw.weight_lbs, raw.height_in) {
        (Some(w), Some(h)) if w > 0.0 && h > 0.0 => Some(703.0 * w / (h * h)),
        _ => None,
    };

    let overweight = raw
        .bmi_category
        .map(|c| matches!(c, BmiCategory::Overweight | BmiCategory::Obese));

    // Never-drinkers are scored 0 on the alcohol screen and on binge episodes
    // even when the individual items are unanswered.
    let never = raw.never_drinks;
    let cage_score = sum_items(&raw.cage_items.map(|i| i.map(u8::from)));
    let problematic_drinking = match never {
        Some(true) => Some(false),
        _ => cage_score.map(|s| s >= CAGE_THRESHOLD),
    };
    let binge_drinking = match never {
        Some(true) => Some(false),
        _ => raw.binge_episodes.map(|n| n >= BINGE_EPISODE_THRESHOLD),
    };

    let life_satisfaction = sum_items(&raw.life_sat_items);

    let availability = self_rated_unhealthy.is_some() && phq9_total.is_some();

    Outcomes {
        self_rated_unhealthy,
        phq9_total,
        bmi,
        overweight,
        problematic_drinking,
        binge_drinking,
        life_satisfaction,
        availability,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_raw() -> RawOutcomeFields {
        RawOutcomeFields {
            health_rating: Some(HealthRating::Good),
            phq_items: [Some(1); 9],
            weight_lbs: Some(150.0),
            height_in: Some(68.0),
            bmi_category: Some(BmiCategory::Normal),
            never_drinks: Some(false),
            cage_items: [Some(true), Some(true), Some(false), Some(false)],
            binge_episodes: Some(2),
            life_sat_items: [Some(3), Some(2), Some(1), Some(0)],
        }
    }

    #[test]
    fn phq_minimum_score() {
        let mut raw = full_raw();
        raw.phq_items = [Some(0); 9];
        assert_eq!(derive_outcomes(&raw).phq9_total, Some(0));
    }

    #[test]
    fn phq_missing_item_blocks_total_and_availability() {
        let mut raw = full_raw();
        raw.phq_items[4] = None;
        let out = derive_outcomes(&raw);
        assert_eq!(out.phq9_total, None);
        assert!(!out.availability);
    }

    #[test]
    fn bmi_formula() {
        let out = derive_outcomes(&full_raw());
        let expected = 703.0 * 150.0 / (68.0 * 68.0);
        assert!((out.bmi.unwrap() - expected).abs() < 1e-12);
        assert!((out.bmi.unwrap() - 22.8049).abs() < 1e-4);
    }

    #[test]
    fn never_drinker_scores_zero_with_unanswered_items() {
        let mut raw = full_raw();
        raw.never_drinks = Some(true);
        raw.cage_items = [None; 4];
        raw.binge_episodes = None;
        let out = derive_outcomes(&raw);
        assert_eq!(out.problematic_drinking, Some(false));
        assert_eq!(out.binge_drinking, Some(false));
    }

    #[test]
    fn cage_threshold_is_two() {
        let mut raw = full_raw();
        raw.cage_items = [Some(true), Some(false), Some(false), Some(false)];
        assert_eq!(derive_outcomes(&raw).problematic_drinking, Some(false));
        raw.cage_items = [Some(true), Some(true), Some(false), Some(false)];
        assert_eq!(derive_outcomes(&raw).problematic_drinking, Some(true));
    }

    #[test]
    fn binge_threshold_is_five_episodes() {
        let mut raw = full_raw();
        raw.binge_episodes = Some(4);
        assert_eq!(derive_outcomes(&raw).binge_drinking, Some(false));
        raw.binge_episodes = Some(5);
        assert_eq!(derive_outcomes(&raw).binge_drinking, Some(true));
    }

    #[test]
    fn unhealthy_coding_follows_fair_poor() {
        let mut raw = full_raw();
        raw.health_rating = Some(HealthRating::Fair);
        assert_eq!(derive_outcomes(&raw).self_rated_unhealthy, Some(true));
        raw.health_rating = Some(HealthRating::VeryGood);
        assert_eq!(derive_outcomes(&raw).self_rated_unhealthy, Some(false));
    }

    #[test]
    fn availability_needs_both_co_primaries() {
        let mut raw = full_raw();
        assert!(derive_outcomes(&raw).availability);
        raw.health_rating = None;
        assert!(!derive_outcomes(&raw).availability);
    }
}
