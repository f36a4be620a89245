//! Per-node state machine.
//!
//! A node owns a private state (interaction log, random stream, privacy
//! accountant) and a pattern object holding one strategy row per task type.
//! Per round it solves a task, validates the raw signal by noise-free replay,
//! exports an artifact through [`crate::privacy::proj`], projects the field
//! into a self-excluding collective view, and updates its pattern.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privacy::{self, BudgetExhausted, DpParams};
use crate::rng::{self, domain, Stream};
use crate::space::{Artifact, CcfSnapshot, NodeId, NodeTag};
use crate::task::{self, Outcome, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeConfig {
    pub local_step_size: f64,
    /// η: weight of the collective centroid in the pattern blend.
    pub blend_rate: f64,
    /// τ_val: admissible gap between reported and replayed loss.
    pub tau_val: f64,
    pub log_capacity: usize,
    /// Local gradient steps per type per round, taken on the most recent
    /// logged tasks of that type.
    pub replay_budget: usize,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            local_step_size: 0.05,
            blend_rate: 0.2,
            tau_val: 0.1,
            log_capacity: 64,
            replay_budget: 1,
        }
    }
}

impl NodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.local_step_size > 0.0 && self.local_step_size.is_finite()) {
            return Err(Error::config("node.local_step_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.blend_rate) {
            return Err(Error::config("node.blend_rate", "must lie in [0, 1]"));
        }
        if !(self.tau_val > 0.0 && self.tau_val.is_finite()) {
            return Err(Error::config("node.tau_val", "must be positive"));
        }
        if self.log_capacity == 0 {
            return Err(Error::config("node.log_capacity", "must be positive"));
        }
        if self.replay_budget == 0 {
            return Err(Error::config("node.replay_budget", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternObject {
    pub per_type_strategies: Vec<Vec<f64>>,
    pub local_step_size: f64,
    pub blend_rate: f64,
}

impl PatternObject {
    pub fn zeros(k_types: usize, d_pattern: usize, local_step_size: f64, blend_rate: f64) -> Self {
        Self {
            per_type_strategies: vec![vec![0.0; d_pattern]; k_types],
            local_step_size,
            blend_rate,
        }
    }

    pub fn row(&self, task_type: usize) -> &[f64] {
        &self.per_type_strategies[task_type]
    }

    pub fn k_types(&self) -> usize {
        self.per_type_strategies.len()
    }

    pub fn is_finite(&self) -> bool {
        self.per_type_strategies.iter().flatten().all(|x| x.is_finite())
    }

    /// Blends every row toward `base` with weight `gamma`.
    pub fn blend_toward(&self, base: &[Vec<f64>], gamma: f64) -> PatternObject {
        let mut next = self.clone();
        if gamma == 0.0 {
            return next;
        }
        for (row, b) in next.per_type_strategies.iter_mut().zip(base) {
            for (x, y) in row.iter_mut().zip(b) {
                *x = (1.0 - gamma) * *x + gamma * y;
            }
        }
        next
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub round: u64,
    pub task: Task,
    pub outcome: Outcome,
}

/// Node-local state that never leaves the node.
#[derive(Debug, Clone)]
pub struct PrivateState {
    pub node_id: NodeId,
    pub interaction_log: VecDeque<InteractionRecord>,
    pub log_capacity: usize,
    pub replay_budget: usize,
    pub rng_stream: Stream,
    tag_secret: u64,
}

impl PrivateState {
    pub fn new(node_id: NodeId, run_seed: u64, config: &NodeConfig) -> Self {
        Self {
            node_id,
            interaction_log: VecDeque::with_capacity(config.log_capacity),
            log_capacity: config.log_capacity,
            replay_budget: config.replay_budget,
            rng_stream: rng::stream(&[run_seed, domain::NODE, node_id.0 as u64]),
            tag_secret: rng::derive(&[run_seed, domain::PSEUDONYM, node_id.0 as u64]),
        }
    }

    fn record(&mut self, rec: InteractionRecord) {
        if self.interaction_log.len() == self.log_capacity {
            self.interaction_log.pop_front();
        }
        self.interaction_log.push_back(rec);
    }
}

/// Node-specific view of the field: per-type weighted centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectiveView {
    pub per_type_centroids: Vec<Vec<f64>>,
    pub support_counts: Vec<usize>,
    pub source_round: u64,
}

impl CollectiveView {
    pub fn empty(k_types: usize, d_pattern: usize, source_round: u64) -> Self {
        Self {
            per_type_centroids: vec![vec![0.0; d_pattern]; k_types],
            support_counts: vec![0; k_types],
            source_round,
        }
    }

    pub fn centroid(&self, task_type: usize) -> Option<&[f64]> {
        (self.support_counts[task_type] > 0).then(|| self.per_type_centroids[task_type].as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.support_counts.iter().all(|&c| c == 0)
    }

    /// Row-wise average with `other`; a row present in only one view is kept.
    pub fn merge(&self, other: &CollectiveView) -> CollectiveView {
        let mut out = self.clone();
        for k in 0..out.support_counts.len() {
            match (self.centroid(k), other.centroid(k)) {
                (Some(a), Some(b)) => {
                    out.per_type_centroids[k] = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
                    out.support_counts[k] = self.support_counts[k] + other.support_counts[k];
                }
                (None, Some(b)) => {
                    out.per_type_centroids[k] = b.to_vec();
                    out.support_counts[k] = other.support_counts[k];
                }
                _ => {}
            }
        }
        out
    }
}

/// Pattern snapshot, task and outcome from one local solve. Stays on the node
/// until projected.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSignal {
    pub round: u64,
    pub node_id: NodeId,
    pub pattern_snapshot: Vec<f64>,
    pub task: Task,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RejectReason {
    InconsistentOutcome { reported: f64, replayed: f64 },
    NoImprovement { before: f64, after: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Validation {
    Accept { confidence: f64 },
    Reject(RejectReason),
}

impl Validation {
    pub fn confidence(&self) -> Option<f64> {
        match self {
            Validation::Accept { confidence } => Some(*confidence),
            Validation::Reject(_) => None,
        }
    }
}

/// Ψ's loss coordinate: `l / (1 + l)`, bounded in `[0, 1)`.
pub fn encode_loss(loss: f64) -> f64 {
    let l = loss.max(0.0);
    l / (1.0 + l)
}

/// Ψ(T, R): task-type one-hot followed by the encoded achieved loss.
pub fn outcome_image(task_type: usize, k_types: usize, achieved_loss: f64) -> Vec<f64> {
    let mut v = vec![0.0; k_types + 1];
    v[task_type] = 1.0;
    v[k_types] = encode_loss(achieved_loss);
    v
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub pattern: PatternObject,
    pub private: PrivateState,
    pub dp: DpParams,
    pub tau_val: f64,
    next_task_seq: u64,
}

impl Node {
    pub fn new(id: NodeId, run_seed: u64, k_types: usize, d_pattern: usize, config: &NodeConfig, dp: DpParams) -> Self {
        Self {
            id,
            pattern: PatternObject::zeros(k_types, d_pattern, config.local_step_size, config.blend_rate),
            private: PrivateState::new(id, run_seed, config),
            dp,
            tau_val: config.tau_val,
            next_task_seq: 0,
        }
    }

    pub fn k_types(&self) -> usize {
        self.pattern.k_types()
    }

    /// Round-scoped pseudonym; only this node and the aggregator can link it.
    pub fn tag(&self, round: u64) -> NodeTag {
        NodeTag(rng::derive(&[self.private.tag_secret, round]))
    }

    pub fn next_task_id(&mut self) -> u64 {
        let id = ((self.id.0 as u64) << 32) | self.next_task_seq;
        self.next_task_seq += 1;
        id
    }

    /// Solves `task` from the current row of its type and logs the interaction.
    pub fn generate_signal(&mut self, task: Task, round: u64) -> Result<RawSignal> {
        let row = self.pattern.row(task.task_type).to_vec();
        let outcome = task::solve(&task, &row, self.pattern.local_step_size, &mut self.private.rng_stream)?;
        self.private.record(InteractionRecord {
            round,
            task: task.clone(),
            outcome: outcome.clone(),
        });
        Ok(RawSignal {
            round,
            node_id: self.id,
            pattern_snapshot: row,
            task,
            outcome,
        })
    }

    /// Noise-free replay of the reported outcome.
    pub fn validate_signal(&self, raw: &RawSignal) -> Validation {
        let target = &raw.task.target;
        let start = &raw.outcome.strategy_used;
        let before = task::quadratic_loss(start, target);
        let after = task::quadratic_loss(
            &task::gradient_step(start, target, self.pattern.local_step_size),
            target,
        );
        if before < after {
            return Validation::Reject(RejectReason::NoImprovement { before, after });
        }
        let deviation = (raw.outcome.achieved_loss - after).abs();
        if !(deviation <= self.tau_val) {
            return Validation::Reject(RejectReason::InconsistentOutcome {
                reported: raw.outcome.achieved_loss,
                replayed: after,
            });
        }
        Validation::Accept {
            confidence: (-deviation / self.tau_val).exp(),
        }
    }

    /// Builds this round's artifact from a validated raw signal.
    pub fn export(&mut self, raw: &RawSignal, confidence: f64) -> std::result::Result<Artifact, BudgetExhausted> {
        let psi = outcome_image(raw.task.task_type, self.k_types(), raw.outcome.achieved_loss);
        let tag = self.tag(raw.round);
        privacy::proj(
            &raw.pattern_snapshot,
            &psi,
            &mut self.dp,
            &mut self.private.rng_stream,
            raw.round,
            tag,
            confidence,
        )
    }

    /// Π_i: drop own artifact, group by decoded type, weight-normalised centroids.
    pub fn project_ccf(&self, snapshot: &CcfSnapshot, weights: &[f64]) -> Result<CollectiveView> {
        if weights.len() != snapshot.artifacts.len() {
            return Err(Error::DimensionMismatch {
                expected: snapshot.artifacts.len(),
                got: weights.len(),
            });
        }
        let k = self.k_types();
        let d = self.pattern.per_type_strategies[0].len();
        let own = self.tag(snapshot.round);
        let mut sums = vec![vec![0.0; d]; k];
        let mut totals = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (a, &w) in snapshot.artifacts.iter().zip(weights) {
            if a.node_tag == own || !(w > 0.0) {
                continue;
            }
            if a.pattern.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: a.pattern.len(),
                });
            }
            let t = a.decoded_task_type(k);
            for (s, x) in sums[t].iter_mut().zip(&a.pattern) {
                *s += w * x;
            }
            totals[t] += w;
            counts[t] += 1;
        }
        let mut view = CollectiveView::empty(k, d, snapshot.round);
        for t in 0..k {
            if counts[t] > 0 {
                view.per_type_centroids[t] = sums[t].iter().map(|s| s / totals[t]).collect();
                view.support_counts[t] = counts[t];
            }
        }
        Ok(view)
    }

    /// UpdatePat: convex blend toward supported centroids, then local steps on
    /// this round's logged tasks of each type.
    pub fn update_pattern(&self, view: &CollectiveView) -> PatternObject {
        let mut next = self.pattern.clone();
        let eta = next.blend_rate;
        for (t, row) in next.per_type_strategies.iter_mut().enumerate() {
            if eta > 0.0 {
                if let Some(c) = view.centroid(t) {
                    for (x, y) in row.iter_mut().zip(c) {
                        *x = (1.0 - eta) * *x + eta * y;
                    }
                }
            }
            let recent = self
                .private
                .interaction_log
                .iter()
                .rev()
                .take_while(|r| r.round == view.source_round)
                .filter(|r| r.task.task_type == t)
                .take(self.private.replay_budget);
            for rec in recent {
                *row = task::gradient_step(row, &rec.task.target, next.local_step_size);
            }
        }
        next
    }

    /// Every private float this node holds right now: pattern rows and the
    /// full interaction log. Used by the transcript audit.
    pub fn private_floats(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.pattern.per_type_strategies.iter().flatten().copied().collect();
        for rec in &self.private.interaction_log {
            out.extend(&rec.task.target);
            out.push(rec.outcome.achieved_loss);
            out.push(rec.outcome.loss_before);
            out.extend(&rec.outcome.strategy_used);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{TaskFamily, TaskFamilyConfig};

    fn cfg() -> NodeConfig {
        NodeConfig::default()
    }

    fn node(id: u32, seed: u64) -> Node {
        Node::new(NodeId(id), seed, 2, 2, &cfg(), DpParams::non_private(100.0, 1000).unwrap())
    }

    fn task(t: usize, target: Vec<f64>, noise: f64) -> Task {
        Task {
            task_type: t,
            target,
            noise_std: noise,
            task_id: 0,
        }
    }

    fn artifact_from(n: &Node, round: u64, pattern: Vec<f64>, t: usize) -> Artifact {
        Artifact::new(round, n.tag(round), pattern, outcome_image(t, 2, 0.0), 1.0).unwrap()
    }

    fn foreign(tag: u64, round: u64, pattern: Vec<f64>, t: usize) -> Artifact {
        Artifact::new(round, NodeTag(tag), pattern, outcome_image(t, 2, 0.0), 1.0).unwrap()
    }

    fn snap(round: u64, artifacts: Vec<Artifact>) -> CcfSnapshot {
        let participant_set = (0..artifacts.len() as u32).map(NodeId).collect();
        CcfSnapshot {
            round,
            artifacts,
            participant_set,
        }
    }

    #[test]
    fn converged_node_emits_zero_loss() {
        let mut n = node(0, 1);
        n.pattern.per_type_strategies[1] = vec![0.5, -0.5];
        let raw = n.generate_signal(task(1, vec![0.5, -0.5], 0.0), 0).unwrap();
        assert_eq!(raw.outcome.achieved_loss, 0.0);
        assert_eq!(n.private.interaction_log.len(), 1);
    }

    #[test]
    fn same_seed_same_signal() {
        let mut a = node(3, 42);
        let mut b = node(3, 42);
        let t = task(0, vec![1.0, 2.0], 0.05);
        assert_eq!(a.generate_signal(t.clone(), 0).unwrap(), b.generate_signal(t, 0).unwrap());
    }

    #[test]
    fn strategy_used_is_the_pre_step_row() {
        let mut n = node(0, 1);
        n.pattern.per_type_strategies[0] = vec![0.25, 0.75];
        let before = n.pattern.clone();
        let raw = n.generate_signal(task(0, vec![1.0, 1.0], 0.0), 0).unwrap();
        assert_eq!(raw.outcome.strategy_used, before.per_type_strategies[0]);
        assert_eq!(raw.pattern_snapshot, before.per_type_strategies[0]);
        assert_eq!(n.pattern, before, "solve must not mutate the pattern");
    }

    #[test]
    fn honest_noise_free_signal_accepted_with_full_confidence() {
        let mut n = node(0, 1);
        let raw = n.generate_signal(task(0, vec![1.0, -1.0], 0.0), 0).unwrap();
        assert_eq!(n.validate_signal(&raw), Validation::Accept { confidence: 1.0 });
    }

    #[test]
    fn tampered_loss_is_inconsistent() {
        let mut n = node(0, 1);
        n.pattern.local_step_size = 1e-12;
        n.pattern.per_type_strategies[0] = vec![2.0, 0.0];
        let mut raw = n.generate_signal(task(0, vec![0.0, 0.0], 0.0), 0).unwrap();
        // replay gives loss ≈ 4; the claim is 0
        raw.outcome.achieved_loss = 0.0;
        match n.validate_signal(&raw) {
            Validation::Reject(RejectReason::InconsistentOutcome { reported, replayed }) => {
                assert_eq!(reported, 0.0);
                assert!((replayed - 4.0).abs() < 1e-9);
                assert!((replayed - reported).abs() > n.tau_val);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn deviation_exactly_tau_is_accepted_at_exp_minus_one() {
        let mut n = node(0, 1);
        n.tau_val = 0.25;
        n.pattern.local_step_size = 0.0;
        n.pattern.per_type_strategies[0] = vec![1.0, 0.0];
        let mut raw = n.generate_signal(task(0, vec![0.0, 0.0], 0.0), 0).unwrap();
        raw.outcome.achieved_loss = 1.25;
        assert_eq!(n.validate_signal(&raw), Validation::Accept { confidence: (-1.0f64).exp() });
        raw.outcome.achieved_loss = 1.2500001;
        assert!(matches!(n.validate_signal(&raw), Validation::Reject(_)));
    }

    #[test]
    fn diverging_step_is_no_improvement() {
        let mut n = node(0, 1);
        n.pattern.local_step_size = 1.5;
        n.pattern.per_type_strategies[0] = vec![1.0, 0.0];
        let raw = n.generate_signal(task(0, vec![0.0, 0.0], 0.0), 0).unwrap();
        assert!(matches!(
            n.validate_signal(&raw),
            Validation::Reject(RejectReason::NoImprovement { .. })
        ));
    }

    #[test]
    fn own_artifact_is_excluded() {
        let n = node(0, 1);
        let s = snap(4, vec![artifact_from(&n, 4, vec![1.0, 1.0], 0)]);
        let view = n.project_ccf(&s, &[1.0]).unwrap();
        assert!(view.is_empty());
        assert_eq!(view.source_round, 4);
    }

    #[test]
    fn symmetric_mean_of_two_foreign_artifacts() {
        let n = node(0, 1);
        let s = snap(0, vec![foreign(1, 0, vec![1.0, 3.0], 1), foreign(2, 0, vec![3.0, -1.0], 1)]);
        let view = n.project_ccf(&s, &[0.75, 0.75]).unwrap();
        assert_eq!(view.centroid(1).unwrap(), &[2.0, 1.0]);
        assert_eq!(view.support_counts, vec![0, 2]);
        assert!(view.centroid(0).is_none());
    }

    #[test]
    fn weighted_centroid_matches_hand_arithmetic() {
        let n = node(0, 1);
        let ps = [vec![1.0, 0.0], vec![0.0, 2.0], vec![4.0, 4.0]];
        let s = snap(0, ps.iter().enumerate().map(|(i, p)| foreign(10 + i as u64, 0, p.clone(), 0)).collect());
        let view = n.project_ccf(&s, &[1.0, 2.0, 1.0]).unwrap();
        // (1·(1,0) + 2·(0,2) + 1·(4,4)) / 4
        assert_eq!(view.centroid(0).unwrap(), &[1.25, 2.0]);
        assert!(n.project_ccf(&s, &[1.0]).is_err());
    }

    #[test]
    fn zero_weights_give_no_support() {
        let n = node(0, 1);
        let s = snap(0, vec![foreign(1, 0, vec![1.0, 1.0], 0)]);
        assert!(n.project_ccf(&s, &[0.0]).unwrap().is_empty());
    }

    #[test]
    fn blend_off_only_local_step() {
        let mut n = node(0, 1);
        n.pattern.blend_rate = 0.0;
        let t = task(0, vec![1.0, 1.0], 0.0);
        n.generate_signal(t.clone(), 3).unwrap();
        let mut view = CollectiveView::empty(2, 2, 3);
        view.per_type_centroids[0] = vec![9.0, 9.0];
        view.support_counts[0] = 5;
        let next = n.update_pattern(&view);
        let expected = task::gradient_step(&[0.0, 0.0], &t.target, n.pattern.local_step_size);
        assert_eq!(next.per_type_strategies[0], expected);
        assert_eq!(next.per_type_strategies[1], vec![0.0, 0.0]);
        assert_eq!(next, n.update_pattern(&CollectiveView::empty(2, 2, 3)));
    }

    #[test]
    fn blend_only_reaches_centroid() {
        let mut n = node(0, 1);
        n.pattern.blend_rate = 1.0;
        n.pattern.per_type_strategies[0] = vec![-3.0, 0.5];
        let mut view = CollectiveView::empty(2, 2, 0);
        view.per_type_centroids[0] = vec![0.3, 0.7];
        view.support_counts[0] = 1;
        assert_eq!(n.update_pattern(&view).per_type_strategies[0], vec![0.3, 0.7]);
    }

    #[test]
    fn half_blend_is_convex_combination() {
        let mut n = node(0, 1);
        n.pattern.blend_rate = 0.5;
        let mut view = CollectiveView::empty(2, 2, 0);
        view.per_type_centroids[1] = vec![2.0, 2.0];
        view.support_counts[1] = 2;
        let next = n.update_pattern(&view);
        assert_eq!(next.per_type_strategies[1], vec![1.0, 1.0]);
        assert_eq!(n.pattern.per_type_strategies[1], vec![0.0, 0.0], "P^t left unmodified");
    }

    #[test]
    fn stale_log_entries_do_not_step() {
        let mut n = node(0, 1);
        n.generate_signal(task(0, vec![1.0, 1.0], 0.0), 2).unwrap();
        let next = n.update_pattern(&CollectiveView::empty(2, 2, 3));
        assert_eq!(next, n.pattern);
    }

    #[test]
    fn view_merge_averages_present_rows() {
        let mut a = CollectiveView::empty(3, 1, 0);
        let mut b = CollectiveView::empty(3, 1, 0);
        a.per_type_centroids[0] = vec![1.0];
        a.support_counts[0] = 1;
        b.per_type_centroids[0] = vec![3.0];
        b.support_counts[0] = 1;
        b.per_type_centroids[2] = vec![5.0];
        b.support_counts[2] = 1;
        let m = a.merge(&b);
        assert_eq!(m.centroid(0).unwrap(), &[2.0]);
        assert!(m.centroid(1).is_none());
        assert_eq!(m.centroid(2).unwrap(), &[5.0]);
    }

    #[test]
    fn tags_are_round_scoped() {
        let n = node(1, 7);
        assert_ne!(n.tag(0), n.tag(1));
        assert_eq!(n.tag(5), node(1, 7).tag(5));
        assert_ne!(n.tag(5), node(2, 7).tag(5));
    }

    #[test]
    fn export_decodes_to_the_task_type() {
        let fam = TaskFamily::new(TaskFamilyConfig { k_types: 2, ..Default::default() }, 2, 1).unwrap();
        let mut n = node(0, 9);
        let mut rng = rng::stream(&[1]);
        let t = fam.sample_task(&mut rng, 0).unwrap();
        let raw = n.generate_signal(t.clone(), 0).unwrap();
        let a = n.export(&raw, 0.9).unwrap();
        assert_eq!(a.decoded_task_type(2), t.task_type);
        assert_eq!(a.node_tag, n.tag(0));
        assert_eq!(a.confidence, 0.9);
    }

    #[test]
    fn log_is_bounded() {
        let mut n = node(0, 1);
        for r in 0..(cfg().log_capacity as u64 + 10) {
            n.generate_signal(task(0, vec![0.0, 0.0], 0.0), r).unwrap();
        }
        assert_eq!(n.private.interaction_log.len(), cfg().log_capacity);
    }
}
