use std::collections::HashMap;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::classifier::Verdict;
use crate::error::{Error, Result};
use crate::ingest::{ChannelFrame, ProbeAngle};
use crate::preprocess::{FusedInput, FusionGroup};

use super::{
    gate, DecisionStatus, DefectClass, Gate, RetrainingEntry, RetrainingSet, Thresholds,
    TrackDecision,
};

/// A delegated decision waiting for an expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewItem {
    pub decision_id: u64,
    pub track_start_m: f64,
    pub track_end_m: f64,
    /// Raw frames of the channels the contributing groups read.
    pub frames: Vec<ChannelFrame>,
    /// The five group inputs the classifiers saw.
    pub inputs: Vec<FusedInput>,
    pub verdicts: Vec<Verdict>,
    /// Groups whose verdict was not a confident NoIndication.
    pub groups: Vec<FusionGroup>,
    pub created_at_ms: u64,
}

impl ReviewItem {
    pub fn contributing_groups(&self) -> Vec<FusionGroup> {
        self.groups.clone()
    }
}

/// Channels shown for a review item: the members of its contributing
/// groups, or every channel when no group stands out.
pub fn review_angles(groups: &[FusionGroup]) -> Vec<ProbeAngle> {
    ProbeAngle::ALL
        .into_iter()
        .filter(|a| groups.is_empty() || groups.iter().any(|g| g.contains(*a)))
        .collect()
}

/// Groups that pointed at an indication or were unsure.
pub fn contributing_groups(verdicts: &[Verdict], thresholds: &Thresholds) -> Vec<FusionGroup> {
    let mut out: Vec<FusionGroup> = verdicts
        .iter()
        .filter(|v| {
            v.top_class != DefectClass::NoIndication || gate(v, thresholds) == Gate::Uncertain
        })
        .map(|v| v.group)
        .collect();
    out.sort();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertLabel {
    pub decision_id: u64,
    pub class: DefectClass,
    #[serde(default)]
    pub comment: Option<String>,
    #[serde(default)]
    pub timestamp_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelOutcome {
    pub decision: TrackDecision,
    pub entries: Vec<RetrainingEntry>,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Review queue, resolved decisions and the retraining set: one mutation
/// domain. Callers share it behind a lock.
#[derive(Debug, Default)]
pub struct ReviewDesk {
    pending: Vec<ReviewItem>,
    decisions: HashMap<u64, TrackDecision>,
    resolved: HashMap<u64, ExpertLabel>,
    retraining: RetrainingSet,
    thresholds: Thresholds,
}

impl ReviewDesk {
    pub fn new(retraining: RetrainingSet) -> Self {
        Self {
            retraining,
            ..Self::default()
        }
    }

    pub fn with_thresholds(retraining: RetrainingSet, thresholds: Thresholds) -> Self {
        Self {
            retraining,
            thresholds,
            ..Self::default()
        }
    }

    /// Queues a delegated decision, keeping the queue ordered by track
    /// coordinate.
    pub fn enqueue(
        &mut self,
        decision: &TrackDecision,
        frames: Vec<ChannelFrame>,
        inputs: Vec<FusedInput>,
    ) -> Result<&ReviewItem> {
        if decision.status != DecisionStatus::Delegated {
            return Err(Error::NotDelegated(decision.id));
        }
        if self.decisions.contains_key(&decision.id) {
            return Err(Error::AlreadyQueued(decision.id));
        }
        let groups = contributing_groups(&decision.verdicts, &self.thresholds);
        let angles = review_angles(&groups);
        let frames = frames
            .into_iter()
            .filter(|f| angles.contains(&f.angle))
            .collect();
        let item = ReviewItem {
            decision_id: decision.id,
            track_start_m: decision.track_start_m,
            track_end_m: decision.track_end_m,
            frames,
            inputs,
            verdicts: decision.verdicts.clone(),
            groups,
            created_at_ms: now_ms(),
        };
        let at = self.pending.partition_point(|p| {
            (p.track_start_m, p.decision_id) <= (item.track_start_m, item.decision_id)
        });
        self.pending.insert(at, item);
        self.decisions.insert(decision.id, decision.clone());
        Ok(&self.pending[at])
    }

    pub fn pending(&self) -> &[ReviewItem] {
        &self.pending
    }

    pub fn item(&self, decision_id: u64) -> Option<&ReviewItem> {
        self.pending.iter().find(|p| p.decision_id == decision_id)
    }

    pub fn decision(&self, decision_id: u64) -> Option<&TrackDecision> {
        self.decisions.get(&decision_id)
    }

    pub fn resolved_count(&self) -> usize {
        self.resolved.len()
    }

    pub fn retraining(&self) -> &RetrainingSet {
        &self.retraining
    }

    /// Resolves a queued decision with the expert's class and routes the
    /// window's group inputs into the retraining set.
    pub fn apply_label(&mut self, label: ExpertLabel) -> Result<LabelOutcome> {
        if self.resolved.contains_key(&label.decision_id) {
            return Err(Error::AlreadyLabeled(label.decision_id));
        }
        let Some(at) = self
            .pending
            .iter()
            .position(|p| p.decision_id == label.decision_id)
        else {
            return Err(Error::NotFound(label.decision_id));
        };
        let targets: Vec<FusionGroup> = if label.class == DefectClass::NoIndication {
            self.pending[at].contributing_groups()
        } else {
            FusionGroup::ALL
                .into_iter()
                .filter(|g| g.class_set().contains(&label.class))
                .collect()
        };
        let item = &self.pending[at];
        let entries: Vec<RetrainingEntry> = targets
            .into_iter()
            .filter_map(|g| item.inputs.iter().find(|i| i.group == g))
            .map(|input| RetrainingEntry {
                decision_id: label.decision_id,
                label: label.class,
                input: input.clone(),
            })
            .collect();
        self.retraining.append(&entries)?;

        self.pending.remove(at);
        let decision = self
            .decisions
            .get_mut(&label.decision_id)
            .expect("queued decisions are recorded");
        decision.status = DecisionStatus::ExpertResolved;
        decision.class = label.class;
        let decision = decision.clone();
        self.resolved.insert(label.decision_id, label);
        Ok(LabelOutcome { decision, entries })
    }
}
