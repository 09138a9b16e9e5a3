//! Scoring decisions against simulator ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decision::{DecisionStatus, DefectClass, TrackDecision};
use crate::simulator::GroundTruthRecord;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassTally {
    pub truth: usize,
    pub detected: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub indications: usize,
    /// Indications overlapped by an AutoAccepted or Delegated decision.
    pub detected: usize,
    pub auto_accepted: usize,
    /// AutoAccepted decisions whose class matches an overlapping indication.
    pub auto_correct: usize,
    /// AutoAccepted decisions overlapping no indication at all.
    pub auto_spurious: usize,
    pub delegated: usize,
    pub per_class: BTreeMap<String, ClassTally>,
}

impl DetectionReport {
    pub fn recall(&self) -> f64 {
        ratio(self.detected, self.indications)
    }

    pub fn auto_precision(&self) -> f64 {
        ratio(self.auto_correct, self.auto_accepted)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

fn overlaps(d: &TrackDecision, t: &GroundTruthRecord) -> bool {
    t.overlaps(d.track_start_m, d.track_end_m)
}

pub fn score(decisions: &[TrackDecision], truth: &[GroundTruthRecord]) -> DetectionReport {
    let mut report = DetectionReport {
        indications: truth.len(),
        ..DetectionReport::default()
    };
    let flagged: Vec<&TrackDecision> = decisions
        .iter()
        .filter(|d| {
            matches!(
                d.status,
                DecisionStatus::AutoAccepted | DecisionStatus::Delegated
            )
        })
        .collect();
    for t in truth {
        let hit = flagged.iter().any(|d| overlaps(d, t));
        let tally = report.per_class.entry(t.class.to_string()).or_default();
        tally.truth += 1;
        if hit {
            tally.detected += 1;
            report.detected += 1;
        }
    }
    for d in decisions {
        match d.status {
            DecisionStatus::AutoAccepted => {
                report.auto_accepted += 1;
                let near: Vec<&GroundTruthRecord> =
                    truth.iter().filter(|t| overlaps(d, t)).collect();
                if near.is_empty() {
                    report.auto_spurious += 1;
                }
                if near.iter().any(|t| t.class == d.class) {
                    report.auto_correct += 1;
                }
            }
            DecisionStatus::Delegated => report.delegated += 1,
            DecisionStatus::ExpertResolved => {}
        }
    }
    report
}

/// AutoAccepted decisions naming a defect (not a technological feature).
pub fn auto_defects(decisions: &[TrackDecision]) -> usize {
    decisions
        .iter()
        .filter(|d| d.status == DecisionStatus::AutoAccepted)
        .filter(|d| d.class != DefectClass::NoIndication && !d.class.is_technological())
        .count()
}
