//! Confidence gating, composition of group verdicts into track decisions,
//! and the expert review loop.

mod retrain;
mod review;
mod taxonomy;

use serde::{Deserialize, Serialize};

use crate::classifier::Verdict;
use crate::error::{Error, Result};
use crate::preprocess::FusionGroup;

pub use retrain::{RetrainingEntry, RetrainingSet};
pub use review::{
    contributing_groups, review_angles, ExpertLabel, LabelOutcome, ReviewDesk, ReviewItem,
};
pub use taxonomy::DefectClass;

/// Classes each group's classifier distinguishes. Every indication class is
/// owned by exactly one group.
pub fn group_class_set(group: FusionGroup) -> &'static [DefectClass] {
    use DefectClass::*;
    match group {
        FusionGroup::G1 => &[
            NoIndication,
            HeadHorizontalCrack,
            HeadDelamination,
            FootDetachment,
        ],
        FusionGroup::G2 => &[NoIndication, VerticalCrack],
        FusionGroup::G3 => &[NoIndication, BoltHoleIntact, BoltedJoint, BoltHoleStarCrack],
        FusionGroup::G4 => &[NoIndication, InclinedCrack],
        FusionGroup::G5 => &[NoIndication, WebCrack, WeldVoid, RailJoint, Weld],
    }
}

/// The group whose classifier reports `class`; `None` for `NoIndication`.
pub fn owning_group(class: DefectClass) -> Option<FusionGroup> {
    if class == DefectClass::NoIndication {
        return None;
    }
    FusionGroup::ALL
        .into_iter()
        .find(|g| g.class_set().contains(&class))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub confidence: f64,
    pub margin: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            confidence: 0.85,
            margin: 0.20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Accept,
    Uncertain,
}

/// Accepts iff both confidence and margin reach their thresholds
/// (boundaries inclusive).
pub fn gate(verdict: &Verdict, thresholds: &Thresholds) -> Gate {
    if verdict.confidence >= thresholds.confidence && verdict.margin >= thresholds.margin {
        Gate::Accept
    } else {
        Gate::Uncertain
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecisionStatus {
    AutoAccepted,
    Delegated,
    ExpertResolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackDecision {
    pub id: u64,
    pub track_start_m: f64,
    pub track_end_m: f64,
    pub class: DefectClass,
    pub confidence: f64,
    pub status: DecisionStatus,
    pub apparent_depth_mm: f64,
    /// Frame windows this decision covers.
    pub windows: Vec<u64>,
    pub verdicts: Vec<Verdict>,
}

impl TrackDecision {
    pub fn overlaps(&self, start_m: f64, end_m: f64) -> bool {
        self.track_start_m < end_m && start_m < self.track_end_m
    }
}

/// Composes the five verdicts of one window. Returned decisions carry id 0;
/// [`DecisionStream`] assigns ids.
pub fn compose(verdicts: &[Verdict], thresholds: &Thresholds) -> Result<Vec<TrackDecision>> {
    let Some(first) = verdicts.first() else {
        return Ok(Vec::new());
    };
    if let Some(bad) = verdicts.iter().find(|v| {
        v.window_index != first.window_index
            || v.track_start_m != first.track_start_m
            || v.track_end_m != first.track_end_m
    }) {
        return Err(Error::ExtentMismatch(format!(
            "{} verdict covers window {} [{}, {}] m, {} covers window {} [{}, {}] m",
            bad.group,
            bad.window_index,
            bad.track_start_m,
            bad.track_end_m,
            first.group,
            first.window_index,
            first.track_start_m,
            first.track_end_m
        )));
    }

    let mut accepted: Vec<&Verdict> = Vec::new();
    let mut uncertain: Vec<&Verdict> = Vec::new();
    for v in verdicts {
        match gate(v, thresholds) {
            Gate::Accept if v.top_class == DefectClass::NoIndication => {}
            Gate::Accept => accepted.push(v),
            Gate::Uncertain => uncertain.push(v),
        }
    }

    // clusters of agreeing accepted verdicts, in order of first appearance
    let mut clusters: Vec<(DefectClass, Vec<&Verdict>)> = Vec::new();
    for v in &accepted {
        match clusters.iter_mut().find(|(c, _)| *c == v.top_class) {
            Some((_, members)) => members.push(v),
            None => clusters.push((v.top_class, vec![v])),
        }
    }

    let window = first.window_index;
    if !uncertain.is_empty() || clusters.len() > 1 {
        let lead = accepted
            .iter()
            .chain(&uncertain)
            .filter(|v| v.top_class != DefectClass::NoIndication)
            .max_by(|a, b| a.confidence.total_cmp(&b.confidence))
            .or_else(|| uncertain.first())
            .copied()
            .expect("at least one surviving verdict");
        return Ok(vec![TrackDecision {
            id: 0,
            track_start_m: first.track_start_m,
            track_end_m: first.track_end_m,
            class: lead.top_class,
            confidence: lead.confidence,
            status: DecisionStatus::Delegated,
            apparent_depth_mm: lead.apparent_depth_mm,
            windows: vec![window],
            verdicts: verdicts.to_vec(),
        }]);
    }

    Ok(clusters
        .into_iter()
        .map(|(class, members)| {
            let confidence =
                members.iter().map(|v| v.confidence).sum::<f64>() / members.len() as f64;
            let lead = members
                .iter()
                .max_by(|a, b| a.confidence.total_cmp(&b.confidence))
                .expect("nonempty cluster");
            TrackDecision {
                id: 0,
                track_start_m: first.track_start_m,
                track_end_m: first.track_end_m,
                class,
                confidence,
                status: DecisionStatus::AutoAccepted,
                apparent_depth_mm: lead.apparent_depth_mm,
                windows: vec![window],
                verdicts: members.into_iter().cloned().collect(),
            }
        })
        .collect())
}

/// Orders window decisions into a track-level stream: assigns ids, and merges
/// auto-accepted decisions of the same class from overlapping adjacent
/// windows by extent union, keeping the maximum confidence.
///
/// Auto-accepted decisions are held back one window so later windows can
/// extend them; delegated decisions are released immediately.
#[derive(Debug, Default)]
pub struct DecisionStream {
    next_id: u64,
    held: Vec<TrackDecision>,
}

impl DecisionStream {
    pub fn new() -> Self {
        Self {
            next_id: 1,
            held: Vec::new(),
        }
    }

    /// Feeds the composed decisions of the next window (windows must arrive
    /// in order) and returns decisions that are final.
    pub fn push_window(&mut self, window: Vec<TrackDecision>) -> Vec<TrackDecision> {
        let mut released = Vec::new();
        let mut extended = vec![false; self.held.len()];
        let mut fresh = Vec::new();
        for d in window {
            if d.status != DecisionStatus::AutoAccepted {
                released.push(d);
                continue;
            }
            let target = self
                .held
                .iter()
                .position(|h| h.class == d.class && h.overlaps(d.track_start_m, d.track_end_m));
            match target {
                Some(i) => {
                    let h = &mut self.held[i];
                    h.track_start_m = h.track_start_m.min(d.track_start_m);
                    h.track_end_m = h.track_end_m.max(d.track_end_m);
                    if d.confidence > h.confidence {
                        h.confidence = d.confidence;
                        h.apparent_depth_mm = d.apparent_depth_mm;
                    }
                    h.windows.extend(d.windows);
                    h.verdicts.extend(d.verdicts);
                    extended[i] = true;
                }
                None => fresh.push(d),
            }
        }
        let held = std::mem::take(&mut self.held);
        for (h, keep) in held.into_iter().zip(extended) {
            if keep {
                self.held.push(h);
            } else {
                released.push(h);
            }
        }
        self.held.extend(fresh);
        released.sort_by(|a, b| a.track_start_m.total_cmp(&b.track_start_m));
        for d in &mut released {
            d.id = self.take_id();
        }
        released
    }

    /// Releases everything still held.
    pub fn finish(&mut self) -> Vec<TrackDecision> {
        let mut out: Vec<TrackDecision> = self.held.drain(..).collect();
        for d in &mut out {
            d.id = self.take_id();
        }
        out
    }

    fn take_id(&mut self) -> u64 {
        let id = self.next_id.max(1);
        self.next_id = id + 1;
        id
    }
}
