//! Learning/forgetting scores, Pareto frontiers and the published
//! learning-vs-forgetting reference table.
//!
//! Scores keep the units of their inputs: error fractions in, fractions out.
//! Reporting code multiplies by 100 to express them in error-rate points.

use crate::adapters::Method;
use crate::error::{contract, Result};

/// Outcome of one adaptation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub run_id: String,
    pub method: Method,
    /// Inner ratio, for methods that use it.
    pub p: Option<f64>,
    pub l: Option<usize>,
    pub r: Option<usize>,
    pub trainable: usize,
    pub seed: u64,
    /// Optimizer steps taken.
    pub steps: usize,
    /// `(step, loss)` of every logged training step.
    pub train_loss: Vec<(usize, f64)>,
    pub zero_shot_target_error: f64,
    pub target_error: f64,
    /// Source-domain errors before adaptation, one per source domain.
    pub source_before: Vec<f64>,
    pub source_after: Vec<f64>,
    pub wall_seconds: f64,
}

impl RunMetrics {
    pub fn learning(&self) -> f64 {
        learning_score(self.zero_shot_target_error, self.target_error)
    }

    pub fn forgetting(&self) -> Result<f64> {
        forgetting_score(&self.source_before, &self.source_after)
    }

    /// Frontier coordinates in error-rate points.
    pub fn frontier_point(&self) -> Result<FrontierPoint> {
        Ok(FrontierPoint::new(self.run_id.clone(), 100.0 * self.learning(), 100.0 * self.forgetting()?))
    }
}

/// Adapted target error minus zero-shot target error; negative means learning.
pub fn learning_score(zero_shot: f64, adapted: f64) -> f64 {
    adapted - zero_shot
}

/// Mean over source domains of `after − before`; positive means forgetting.
pub fn forgetting_score(before: &[f64], after: &[f64]) -> Result<f64> {
    if before.len() != after.len() {
        return contract(format!("{} source domains before adaptation but {} after", before.len(), after.len()));
    }
    if before.is_empty() {
        return contract("forgetting needs at least one source domain");
    }
    Ok(before.iter().zip(after).map(|(b, a)| a - b).sum::<f64>() / before.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontierPoint {
    pub label: String,
    pub learning: f64,
    pub forgetting: f64,
    pub pareto: bool,
}

impl FrontierPoint {
    pub fn new(label: impl Into<String>, learning: f64, forgetting: f64) -> Self {
        Self { label: label.into(), learning, forgetting, pareto: false }
    }

    /// `self` is no worse in both coordinates and strictly better in one.
    pub fn dominates(&self, other: &FrontierPoint) -> bool {
        self.learning <= other.learning
            && self.forgetting <= other.forgetting
            && (self.learning < other.learning || self.forgetting < other.forgetting)
    }
}

/// Sets `pareto` on every point that no other point dominates. Order is kept.
pub fn frontier(mut points: Vec<FrontierPoint>) -> Result<Vec<FrontierPoint>> {
    if points.is_empty() {
        return contract("frontier needs at least one point");
    }
    if let Some(p) = points.iter().find(|p| !p.learning.is_finite() || !p.forgetting.is_finite()) {
        return contract(format!("non-finite frontier point '{}'", p.label));
    }
    let flags: Vec<bool> = points.iter().map(|p| !points.iter().any(|q| q.dominates(p))).collect();
    for (p, f) in points.iter_mut().zip(flags) {
        p.pareto = f;
    }
    Ok(points)
}

/// One row of the reference table: absolute error-rate changes in points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub label: &'static str,
    /// Change on the adaptation target (the learning column).
    pub target: f64,
    /// Change on the in-language source evaluation.
    pub in_language: f64,
    /// Changes on the other source languages: DE, ES, FR, IT, PL, PT.
    pub other_languages: [f64; 6],
    /// Published average over `other_languages`, rounded to one decimal.
    pub avg_forgetting: f64,
}

pub const REFERENCE_LANGUAGES: [&str; 6] = ["DE", "ES", "FR", "IT", "PL", "PT"];

/// Learning vs forgetting of a 0.1B speech model adapted to Dutch (CGN) and
/// evaluated on multilingual read speech.
pub const TABLE1: [ReferenceRow; 8] = [
    ReferenceRow {
        label: "Full fine-tuning",
        target: -38.6,
        in_language: -8.4,
        other_languages: [85.3, 71.5, 70.1, 66.2, 100.9, 74.7],
        avg_forgetting: 78.1,
    },
    ReferenceRow {
        label: "Fine-tuning FF layers",
        target: -32.0,
        in_language: -5.6,
        other_languages: [37.3, 10.3, 12.7, 19.9, 51.8, 28.5],
        avg_forgetting: 26.8,
    },
    ReferenceRow {
        label: "SSVD-O p=100% l=256",
        target: -33.4,
        in_language: -6.1,
        other_languages: [56.3, 20.6, 19.3, 31.7, 67.9, 44.8],
        avg_forgetting: 40.1,
    },
    ReferenceRow {
        label: "SSVD-O p=50% l=256",
        target: -30.6,
        in_language: -5.1,
        other_languages: [30.0, 8.3, 10.0, 16.8, 42.4, 28.0],
        avg_forgetting: 22.6,
    },
    ReferenceRow {
        label: "SSVD-O p=40% l=256",
        target: -29.7,
        in_language: -5.0,
        other_languages: [24.7, 6.7, 7.9, 12.6, 31.5, 22.9],
        avg_forgetting: 17.7,
    },
    ReferenceRow {
        label: "SSVD p=100%",
        target: -30.7,
        in_language: -4.5,
        other_languages: [38.0, 10.1, 12.7, 18.8, 50.3, 35.0],
        avg_forgetting: 27.5,
    },
    ReferenceRow {
        label: "DoRA r=256",
        target: -27.7,
        in_language: -3.0,
        other_languages: [42.8, 19.9, 20.3, 33.7, 71.0, 44.5],
        avg_forgetting: 38.7,
    },
    ReferenceRow {
        label: "LoRA r=256",
        target: -24.6,
        in_language: -2.9,
        other_languages: [18.4, 6.8, 7.9, 15.3, 38.6, 28.0],
        avg_forgetting: 19.2,
    },
];

/// Frontier over the reference table using its published columns.
pub fn table1_frontier() -> Vec<FrontierPoint> {
    frontier(TABLE1.iter().map(|r| FrontierPoint::new(r.label, r.target, r.avg_forgetting)).collect())
        .expect("reference table is non-empty and finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_examples() {
        assert!((learning_score(0.40, 0.10) + 0.30).abs() < 1e-15);
        assert_eq!(learning_score(0.25, 0.25), 0.0);
    }

    #[test]
    fn forgetting_examples() {
        assert_eq!(forgetting_score(&[0.1, 0.2], &[0.1, 0.2]).unwrap(), 0.0);
        assert_eq!(forgetting_score(&[1.0, 1.0], &[3.0, 5.0]).unwrap(), 3.0);
        assert!(forgetting_score(&[1.0], &[1.0, 2.0]).is_err());
        assert!(forgetting_score(&[], &[]).is_err());
    }

    #[test]
    fn frontier_examples() {
        let one = frontier(vec![FrontierPoint::new("a", 1.0, 1.0)]).unwrap();
        assert!(one[0].pareto);
        let two = frontier(vec![FrontierPoint::new("a", -3.0, 1.0), FrontierPoint::new("b", -2.0, 2.0)]).unwrap();
        assert_eq!(two.iter().map(|p| p.pareto).collect::<Vec<_>>(), vec![true, false]);
        assert!(frontier(vec![]).is_err());
    }

    #[test]
    fn identical_points_are_both_pareto() {
        let pts = frontier(vec![FrontierPoint::new("a", -1.0, 1.0), FrontierPoint::new("b", -1.0, 1.0)]).unwrap();
        assert!(pts.iter().all(|p| p.pareto));
    }

    #[test]
    fn reference_averages_match_language_means() {
        for row in TABLE1 {
            let mean = row.other_languages.iter().sum::<f64>() / 6.0;
            assert!((mean - row.avg_forgetting).abs() <= 0.05 + 1e-9, "{}: {mean}", row.label);
        }
    }

    #[test]
    fn reference_frontier_flags() {
        let pts = table1_frontier();
        let flags: Vec<(&str, bool)> = pts.iter().map(|p| (p.label.as_str(), p.pareto)).collect();
        assert_eq!(
            flags,
            vec![
                ("Full fine-tuning", true),
                ("Fine-tuning FF layers", true),
                ("SSVD-O p=100% l=256", true),
                ("SSVD-O p=50% l=256", true),
                ("SSVD-O p=40% l=256", true),
                ("SSVD p=100%", false),
                ("DoRA r=256", false),
                ("LoRA r=256", false),
            ]
        );
        assert!(pts[4].dominates(&pts[6]));
        assert_eq!((pts[0].learning, pts[0].forgetting), (-38.6, 78.1));
        assert_eq!((pts[4].learning, pts[4].forgetting), (-29.7, 17.7));
    }
}
