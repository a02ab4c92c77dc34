//! Consensus arbitration between the two grounding experts.
//!
//! Proposals that both experts agree on (same label, IoU above the effective
//! threshold) become trusted regions and are only highlighted. Everything
//! else is doubtful, scored by how strongly the other expert disagrees, and
//! competes for the zoom budget.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExpertId {
    A,
    B,
}

impl ExpertId {
    pub fn other(self) -> Self {
        match self {
            ExpertId::A => ExpertId::B,
            ExpertId::B => ExpertId::A,
        }
    }
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertId::A => "A",
            ExpertId::B => "B",
        })
    }
}

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize_label(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// One expert-attributed candidate region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: String,
    pub score: f64,
    pub expert: ExpertId,
}

impl Proposal {
    pub fn new(bbox: BBox, label: &str, score: f64, expert: ExpertId) -> Result<Self> {
        let label = normalize_label(label);
        if label.is_empty() {
            return Err(Error::InvalidConfig("proposal label is empty".into()));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidConfig(format!(
                "proposal score {score} outside [0, 1]"
            )));
        }
        Ok(Self {
            bbox,
            label,
            score,
            expert,
        })
    }

    /// Canonical order: score descending, then box, then label.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.bbox.lex_cmp(&other.bbox))
            .then_with(|| self.label.cmp(&other.label))
            .then_with(|| self.expert.cmp(&other.expert))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArbitrationConfig {
    pub tau_base: f64,
    pub delta: f64,
    pub tau_low: f64,
    pub tau_high: f64,
    /// Zoom budget in visual tokens.
    pub budget: u64,
    /// Visual tokens per rendered view.
    pub per_view_cost: u64,
}

impl Default for ArbitrationConfig {
    fn default() -> Self {
        Self {
            tau_base: 0.6,
            delta: 0.1,
            tau_low: 0.5,
            tau_high: 0.7,
            budget: 576,
            per_view_cost: 576,
        }
    }
}

impl ArbitrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.tau_base > 0.0 && self.tau_base < 1.0) {
            return bad(format!("tau_base {} outside (0, 1)", self.tau_base));
        }
        if !(self.delta > 0.0) {
            return bad(format!("delta {} must be positive", self.delta));
        }
        if !(self.tau_base - self.delta > 0.0 && self.tau_base + self.delta < 1.0) {
            return bad(format!(
                "tau_base +/- delta must stay inside (0, 1), got {} +/- {}",
                self.tau_base, self.delta
            ));
        }
        if !(0.0..=1.0).contains(&self.tau_low)
            || !(0.0..=1.0).contains(&self.tau_high)
            || self.tau_low >= self.tau_high
        {
            return bad(format!(
                "conflict bounds must satisfy 0 <= low < high <= 1, got ({}, {})",
                self.tau_low, self.tau_high
            ));
        }
        if self.per_view_cost == 0 {
            return bad("per_view_cost must be positive".into());
        }
        Ok(())
    }

    pub fn max_zoom_views(&self) -> u64 {
        self.budget / self.per_view_cost
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalMatch {
    pub a: Proposal,
    pub b: Proposal,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub matches: Vec<ProposalMatch>,
    pub unmatched_a: Vec<Proposal>,
    pub unmatched_b: Vec<Proposal>,
}

fn canonical(set: &[Proposal]) -> Vec<Proposal> {
    let mut v = set.to_vec();
    v.sort_by(Proposal::canonical_cmp);
    v
}

/// Greedy one-to-one matching of same-label pairs by descending IoU.
///
/// Candidate pairs tie-break on the canonical position of the A proposal,
/// then of the B proposal, so the result does not depend on input order.
pub fn match_proposals(set_a: &[Proposal], set_b: &[Proposal], tau: f64) -> MatchOutcome {
    let a = canonical(set_a);
    let b = canonical(set_b);

    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for (i, pa) in a.iter().enumerate() {
        for (j, pb) in b.iter().enumerate() {
            if pa.label != pb.label {
                continue;
            }
            let v = iou(&pa.bbox, &pb.bbox);
            if v >= tau {
                candidates.push((i, j, v));
            }
        }
    }
    candidates.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));

    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut matches = Vec::new();
    for (i, j, v) in candidates {
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        matches.push(ProposalMatch {
            a: a[i].clone(),
            b: b[j].clone(),
            iou: v,
        });
    }

    let leftover = |set: Vec<Proposal>, used: &[bool]| {
        set.into_iter()
            .zip(used)
            .filter(|(_, u)| !**u)
            .map(|(p, _)| p)
            .collect::<Vec<_>>()
    };
    MatchOutcome {
        matches,
        unmatched_a: leftover(a, &used_a),
        unmatched_b: leftover(b, &used_b),
    }
}

/// Adjusts the IoU threshold by the scene conflict ratio. Bounds are strict:
/// `gamma == tau_low` and `gamma == tau_high` keep the base threshold.
pub fn adaptive_threshold(gamma: f64, cfg: &ArbitrationConfig) -> f64 {
    if gamma < cfg.tau_low {
        cfg.tau_base - cfg.delta
    } else if gamma > cfg.tau_high {
        cfg.tau_base + cfg.delta
    } else {
        cfg.tau_base
    }
}

/// `1 - best same-label IoU` against the other expert's proposals.
pub fn disagreement_score(p: &Proposal, other_expert: &[Proposal]) -> f64 {
    let best = other_expert
        .iter()
        .filter(|q| q.label == p.label)
        .map(|q| iou(&p.bbox, &q.bbox))
        .fold(0.0f64, f64::max);
    1.0 - best
}

/// A region both experts agree on. Naive-union partitions also use this type
/// with a single member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustedRegion {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Mean confidence of the members.
    pub score: f64,
    pub members: Vec<Proposal>,
    pub iou: Option<f64>,
}

impl TrustedRegion {
    pub fn from_match(m: &ProposalMatch) -> Self {
        Self {
            label: m.a.label.clone(),
            bbox: merge_boxes(&m.a, &m.b),
            score: (m.a.score + m.b.score) / 2.0,
            members: vec![m.a.clone(), m.b.clone()],
            iou: Some(m.iou),
        }
    }

    pub fn from_single(p: &Proposal) -> Self {
        Self {
            label: p.label.clone(),
            bbox: p.bbox,
            score: p.score,
            members: vec![p.clone()],
            iou: None,
        }
    }
}

/// Confidence-weighted average of the two boxes' corners.
pub fn merge_boxes(a: &Proposal, b: &Proposal) -> BBox {
    let total = a.score + b.score;
    let (wa, wb) = if total > 0.0 {
        (a.score / total, b.score / total)
    } else {
        (0.5, 0.5)
    };
    let ca = a.bbox.to_array();
    let cb = b.bbox.to_array();
    let m: Vec<f64> = ca.iter().zip(cb.iter()).map(|(x, y)| wa * x + wb * y).collect();
    // Weighted averages of valid boxes stay valid; fall back to A on rounding.
    BBox::new(m[0], m[1], m[2], m[3]).unwrap_or(a.bbox)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoubtfulRegion {
    pub proposal: Proposal,
    pub disagreement: f64,
}

impl DoubtfulRegion {
    /// Selection priority: disagreement, expert score, area (all descending),
    /// then box lexicographic.
    pub fn priority_cmp(&self, other: &Self) -> Ordering {
        other
            .disagreement
            .total_cmp(&self.disagreement)
            .then_with(|| other.proposal.score.total_cmp(&self.proposal.score))
            .then_with(|| other.proposal.bbox.area().total_cmp(&self.proposal.bbox.area()))
            .then_with(|| self.proposal.bbox.lex_cmp(&other.proposal.bbox))
            .then_with(|| self.proposal.label.cmp(&other.proposal.label))
            .then_with(|| self.proposal.expert.cmp(&other.proposal.expert))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsensusPartition {
    pub trusted: Vec<TrustedRegion>,
    pub doubtful: Vec<DoubtfulRegion>,
    pub gamma: f64,
    pub tau_effective: f64,
    pub provisional_gamma: f64,
}

impl ConsensusPartition {
    pub fn is_empty(&self) -> bool {
        self.trusted.is_empty() && self.doubtful.is_empty()
    }

    /// Number of input proposals represented (trusted members + doubtful).
    pub fn proposal_count(&self) -> usize {
        self.trusted.iter().map(|t| t.members.len()).sum::<usize>() + self.doubtful.len()
    }

    /// Every proposal treated as trusted, no doubtful set.
    pub fn naive_union(set_a: &[Proposal], set_b: &[Proposal]) -> Self {
        let mut trusted: Vec<TrustedRegion> = set_a
            .iter()
            .chain(set_b)
            .map(TrustedRegion::from_single)
            .collect();
        sort_trusted(&mut trusted);
        Self {
            trusted,
            doubtful: Vec::new(),
            gamma: 0.0,
            tau_effective: 0.0,
            provisional_gamma: 0.0,
        }
    }
}

fn sort_trusted(trusted: &mut [TrustedRegion]) {
    trusted.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then_with(|| x.bbox.lex_cmp(&y.bbox))
            .then_with(|| x.label.cmp(&y.label))
    });
}

pub fn conflict_ratio(trusted: usize, doubtful: usize) -> f64 {
    let total = trusted + doubtful;
    if total == 0 {
        0.0
    } else {
        doubtful as f64 / total as f64
    }
}

fn ratio_of(outcome: &MatchOutcome) -> f64 {
    conflict_ratio(
        outcome.matches.len(),
        outcome.unmatched_a.len() + outcome.unmatched_b.len(),
    )
}

/// Partition at an explicit threshold, no adaptation.
pub fn partition_at(set_a: &[Proposal], set_b: &[Proposal], tau: f64) -> ConsensusPartition {
    let outcome = match_proposals(set_a, set_b, tau);
    let gamma = ratio_of(&outcome);

    let mut trusted: Vec<TrustedRegion> =
        outcome.matches.iter().map(TrustedRegion::from_match).collect();
    sort_trusted(&mut trusted);

    let mut doubtful: Vec<DoubtfulRegion> = outcome
        .unmatched_a
        .iter()
        .map(|p| (p, set_b))
        .chain(outcome.unmatched_b.iter().map(|p| (p, set_a)))
        .map(|(p, other)| DoubtfulRegion {
            proposal: p.clone(),
            disagreement: disagreement_score(p, other),
        })
        .collect();
    doubtful.sort_by(DoubtfulRegion::priority_cmp);

    ConsensusPartition {
        trusted,
        doubtful,
        gamma,
        tau_effective: tau,
        provisional_gamma: gamma,
    }
}

/// Two-pass arbitration: a provisional partition at `tau_base` yields the
/// conflict ratio, which picks the effective threshold for the final pass.
pub fn arbitrate(set_a: &[Proposal], set_b: &[Proposal], cfg: &ArbitrationConfig) -> ConsensusPartition {
    let provisional = match_proposals(set_a, set_b, cfg.tau_base);
    let provisional_gamma = ratio_of(&provisional);
    let tau = adaptive_threshold(provisional_gamma, cfg);
    let mut partition = partition_at(set_a, set_b, tau);
    partition.provisional_gamma = provisional_gamma;
    partition
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<DoubtfulRegion>,
    pub spent_tokens: u64,
    pub skipped: Vec<DoubtfulRegion>,
}

/// Greedy scan of doubtful regions in priority order under the token budget.
pub fn select_budgeted(partition: &ConsensusPartition, cfg: &ArbitrationConfig) -> SelectionResult {
    let mut ordered = partition.doubtful.clone();
    ordered.sort_by(DoubtfulRegion::priority_cmp);

    let mut result = SelectionResult::default();
    for region in ordered {
        if result.spent_tokens + cfg.per_view_cost <= cfg.budget {
            result.spent_tokens += cfg.per_view_cost;
            result.selected.push(region);
        } else {
            result.skipped.push(region);
        }
    }
    result
}
