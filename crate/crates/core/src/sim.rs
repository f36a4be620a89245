//! Deterministic round engine.
//!
//! Per round: churn, Bernoulli participation, local solve, adversarial
//! tampering, replay validation, projection, pairwise-masked aggregation,
//! field formation, Improve, reputation, dissemination, pattern update, and
//! every K-th SYNC round a consolidation. Everything that crosses a node
//! boundary is appended to the transcript as it happens.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ccf::{self, ImprovementSignal, ReputationLedger};
use crate::config::{MetricsGranularity, RunConfig};
use crate::eame::{self, ActivityPlan, EnergyTrace, JobKind, Mode, Policy};
use crate::error::{Error, Result};
use crate::node::{CollectiveView, Node, PatternObject, RawSignal, RejectReason, Validation};
use crate::privacy::{self, AggregateSum, MaskedShare, PairwiseSeeds};
use crate::rng::{self, domain};
use crate::space::{self, ActivityWeight, Artifact, NodeId};
use crate::task::TaskFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Behavior {
    NoiseInjector,
    LossLiar,
    ColludingBooster,
}

impl Behavior {
    pub fn label(self) -> &'static str {
        match self {
            Behavior::NoiseInjector => "NOISE_INJECTOR",
            Behavior::LossLiar => "LOSS_LIAR",
            Behavior::ColludingBooster => "COLLUDING_BOOSTER",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySpec {
    pub node: u32,
    pub behavior: Behavior,
    #[serde(default)]
    pub onset_round: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChurnKind {
    Join,
    Leave,
}

/// A node whose first event is a join starts offline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnEvent {
    pub round: u64,
    pub node: u32,
    pub event: ChurnKind,
}

/// One node starts with its row for `task_type` at the type's cluster centre.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Planted {
    pub node: u32,
    pub task_type: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub n_nodes: u32,
    pub rounds: u64,
    pub participation_prob: f64,
    /// Round r is a SYNC round iff (r + 1) is a multiple of this; other
    /// rounds are LEARN rounds.
    pub sync_every: u64,
    /// K: consolidate on every K-th SYNC round.
    pub consolidate_every: u64,
    /// SYNC rounds of history consolidated; 0 means K.
    pub consolidation_window: usize,
    pub gamma_cons: f64,
    /// Rounds excluded from the non-degeneracy check.
    pub warmup_rounds: u64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted: Option<Planted>,
    pub churn: Vec<ChurnEvent>,
    pub adversaries: Vec<AdversarySpec>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            n_nodes: 20,
            rounds: 150,
            participation_prob: 0.8,
            sync_every: 1,
            consolidate_every: 10,
            consolidation_window: 0,
            gamma_cons: 0.5,
            warmup_rounds: 5,
            seed: 7,
            planted: None,
            churn: Vec::new(),
            adversaries: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(Error::config("scenario.n_nodes", "must be positive"));
        }
        if !(self.participation_prob > 0.0 && self.participation_prob <= 1.0) {
            return Err(Error::config("scenario.participation_prob", "must lie in (0, 1]"));
        }
        if self.sync_every == 0 {
            return Err(Error::config("scenario.sync_every", "must be positive"));
        }
        if self.consolidate_every == 0 {
            return Err(Error::config("scenario.consolidate_every", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma_cons) {
            return Err(Error::config("scenario.gamma_cons", "must lie in [0, 1]"));
        }
        let mut seen = BTreeSet::new();
        for a in &self.adversaries {
            if a.node >= self.n_nodes {
                return Err(Error::config("scenario.adversaries", format!("node {} out of range", a.node)));
            }
            if !seen.insert(a.node) {
                return Err(Error::config("scenario.adversaries", format!("node {} listed twice", a.node)));
            }
        }
        if let Some(c) = self.churn.iter().find(|c| c.node >= self.n_nodes) {
            return Err(Error::config("scenario.churn", format!("node {} out of range", c.node)));
        }
        if let Some(p) = &self.planted {
            if p.node >= self.n_nodes {
                return Err(Error::config("scenario.planted.node", "out of range"));
            }
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        if self.consolidation_window == 0 {
            self.consolidate_every as usize
        } else {
            self.consolidation_window
        }
    }

    /// Job kind of every round, in protocol order.
    pub fn round_kinds(&self) -> Vec<JobKind> {
        let mut syncs = 0;
        (0..self.rounds)
            .map(|r| {
                if (r + 1) % self.sync_every != 0 {
                    return JobKind::Learn;
                }
                syncs += 1;
                if syncs % self.consolidate_every == 0 {
                    JobKind::Consolidate
                } else {
                    JobKind::Sync
                }
            })
            .collect()
    }

    pub fn behavior_of(&self, node: NodeId, round: u64) -> Option<Behavior> {
        self.adversaries
            .iter()
            .find(|a| a.node == node.0 && round >= a.onset_round)
            .map(|a| a.behavior)
    }

    pub fn adversary_ids(&self) -> BTreeSet<NodeId> {
        self.adversaries.iter().map(|a| NodeId(a.node)).collect()
    }

    /// `count` nodes with the highest ids turned into `behavior` from round 0.
    pub fn with_adversaries(mut self, behavior: Behavior, count: u32) -> Self {
        self.adversaries = (self.n_nodes - count.min(self.n_nodes)..self.n_nodes)
            .map(|node| AdversarySpec {
                node,
                behavior,
                onset_round: 0,
            })
            .collect();
        self
    }
}

/// Per-run material the adversaries draw on.
#[derive(Debug, Clone)]
pub struct AdversaryContext {
    pub clip_radius: f64,
    /// Shared per-type vectors the colluders all report.
    pub colluder_vectors: Vec<Vec<f64>>,
}

impl AdversaryContext {
    pub fn new(seed: u64, k_types: usize, d_pattern: usize, clip_radius: f64, center_scale: f64) -> Self {
        let mut r = rng::stream(&[seed, domain::COLLUDER]);
        let bound = 3.0 * center_scale;
        let colluder_vectors = (0..k_types)
            .map(|_| (0..d_pattern).map(|_| r.random_range(-bound..=bound)).collect())
            .collect();
        Self {
            clip_radius,
            colluder_vectors,
        }
    }
}

/// Tampering applied between local solve and the validation gate.
pub fn apply_adversary(
    behavior: Option<Behavior>,
    raw: &RawSignal,
    rng: &mut impl Rng,
    ctx: &AdversaryContext,
) -> RawSignal {
    let mut out = raw.clone();
    match behavior {
        None => {}
        Some(Behavior::NoiseInjector) => {
            let b = 10.0 * ctx.clip_radius;
            for x in out.pattern_snapshot.iter_mut() {
                *x = rng.random_range(-b..=b);
            }
        }
        Some(Behavior::LossLiar) => out.outcome.achieved_loss = 0.0,
        Some(Behavior::ColludingBooster) => {
            out.pattern_snapshot = ctx.colluder_vectors[raw.task.task_type].clone();
        }
    }
    out
}

/// Inverse-dispersion weight of one window entry.
pub fn window_weight(disp: Option<f64>) -> f64 {
    1.0 / (1.0 + disp.unwrap_or(0.0))
}

/// New base rows: weighted mean of the present priors in `window`; rows with
/// no prior in the window keep `base`. `None` for an empty window.
pub fn consolidate(window: &[(ImprovementSignal, f64)], base: &PatternObject) -> Option<PatternObject> {
    if window.is_empty() {
        return None;
    }
    let mut next = base.clone();
    for (k, row) in next.per_type_strategies.iter_mut().enumerate() {
        let mut acc = vec![0.0; row.len()];
        let mut total = 0.0;
        for (u, w) in window {
            if let Some(p) = u.prior(k) {
                for (a, x) in acc.iter_mut().zip(p) {
                    *a += w * x;
                }
                total += w;
            }
        }
        if total > 0.0 {
            *row = acc.into_iter().map(|a| a / total).collect();
        }
    }
    Some(next)
}

/// Fault injection for audit tests.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Nodes also broadcast their raw pattern snapshot.
    LeakRawPatterns,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MessageBody {
    MaskedShare { share: MaskedShare },
    Artifact { artifact: Artifact },
    Aggregate { values: Vec<f64>, contributors: usize },
    Weights { weights: Vec<f64> },
    Priors { per_type_priors: Vec<Vec<f64>>, present: Vec<bool> },
    RawPattern { pattern: Vec<f64> },
}

#[derive(Debug, Clone, Serialize)]
pub struct Message {
    pub round: u64,
    pub from: String,
    pub to: String,
    pub body: MessageBody,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Header {
        version: u32,
        seed: u64,
        n_nodes: u32,
        rounds: u64,
        config_hash: String,
    },
    Round {
        round: u64,
        job: JobKind,
        slot: Option<usize>,
        mode: Mode,
        participants: Vec<NodeId>,
    },
    Message(Message),
    Field {
        round: u64,
        disp: Option<f64>,
        n_artifacts: usize,
        n_flagged: usize,
        n_rejected: usize,
        n_suppressed: usize,
        learning_activity: f64,
        priors_hash: String,
        mean_reputation: Option<f64>,
        aggregate_ok: bool,
    },
    Losses {
        round: u64,
        per_type: Vec<f64>,
        per_node: Vec<f64>,
    },
    Consolidation {
        round: u64,
        window: usize,
        skipped: bool,
    },
    Abort {
        round: u64,
        reason: String,
    },
}

/// JSON-lines record of a run. The content hash is SHA-256 over every record
/// line, each terminated by a newline; the file ends with a hash line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub lines: Vec<String>,
}

impl Transcript {
    pub fn push(&mut self, rec: &Record) {
        self.lines.push(serde_json::to_string(rec).expect("record serializes"));
    }

    pub fn content_hash(&self) -> String {
        hash_lines(&self.lines)
    }

    pub fn hash_line(&self) -> String {
        serde_json::json!({"kind": "hash", "content_hash": self.content_hash()}).to_string()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s.push_str(&self.hash_line());
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

pub fn hash_lines<S: AsRef<str>>(lines: &[S]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_ref().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Private floats held by one node at the end of one round. Stays outside
/// the transcript; used only to audit it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivateRecord {
    pub round: u64,
    pub node: NodeId,
    pub floats: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationCounts {
    pub signals: u64,
    pub accepted: u64,
    pub inconsistent: u64,
    pub no_improvement: u64,
}

impl ValidationCounts {
    pub fn rejected(&self) -> u64 {
        self.inconsistent + self.no_improvement
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub job: JobKind,
    pub slot: Option<usize>,
    pub mode: Mode,
    pub n_participants: usize,
    pub n_artifacts: usize,
    pub n_flagged: usize,
    pub n_rejected: usize,
    pub n_suppressed: usize,
    pub disp: Option<f64>,
    pub learning_activity: f64,
    pub priors_hash: String,
    pub mean_reputation: Option<f64>,
    pub mean_loss: f64,
    pub per_type_loss: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub kind: &'static str,
    pub rounds: u64,
    pub n_nodes: u32,
    pub seed: u64,
    pub content_hash: String,
    pub final_mean_loss: Option<f64>,
    pub final_per_type_loss: Vec<f64>,
    pub min_post_warmup_disp: Option<f64>,
    pub mean_participants: f64,
    pub carbon_g: Option<f64>,
    pub baseline_carbon_g: Option<f64>,
    pub deadline_violations: usize,
    pub rejected: u64,
    pub suppressed: u64,
    pub flagged: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub transcript: Transcript,
    pub private_ledger: Vec<PrivateRecord>,
    pub metrics: Vec<RoundMetrics>,
    pub summary: Summary,
    pub nodes: Vec<Node>,
    pub reputation: ReputationLedger,
    pub priors: ImprovementSignal,
    pub family: TaskFamily,
    pub plan: Option<ActivityPlan>,
    pub baseline_plan: Option<ActivityPlan>,
    /// Keyed by behaviour label, `HONEST` for honest nodes.
    pub validation: BTreeMap<String, ValidationCounts>,
    /// Per round, mean expected loss per task type over honest nodes.
    pub loss_trajectory: Vec<Vec<f64>>,
}

impl RunOutput {
    pub fn content_hash(&self) -> String {
        self.transcript.content_hash()
    }

    pub fn metrics_jsonl(&self, granularity: MetricsGranularity) -> String {
        let mut s = String::new();
        if granularity == MetricsGranularity::PerRound {
            for m in &self.metrics {
                s.push_str(&serde_json::to_string(m).expect("metrics serialize"));
                s.push('\n');
            }
        }
        s.push_str(&serde_json::to_string(&self.summary).expect("summary serializes"));
        s.push('\n');
        s
    }

    pub fn private_ledger_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.private_ledger {
            s.push_str(&serde_json::to_string(r).expect("ledger serializes"));
            s.push('\n');
        }
        s
    }

    /// Writes `transcript.jsonl`, `private_ledger.jsonl` and `metrics.jsonl`.
    pub fn write_to(&self, dir: &Path, granularity: MetricsGranularity) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.transcript.write(&dir.join(TRANSCRIPT_FILE))?;
        let p = dir.join(PRIVATE_LEDGER_FILE);
        std::fs::write(&p, self.private_ledger_jsonl()).map_err(|e| Error::io(&p, e))?;
        let p = dir.join(METRICS_FILE);
        std::fs::write(&p, self.metrics_jsonl(granularity)).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }
}

pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const PRIVATE_LEDGER_FILE: &str = "private_ledger.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Messages of one round phase. Nothing may be read before the phase is
/// sealed, and nothing may be posted after.
struct Mailbox<T> {
    round: u64,
    sealed: bool,
    items: Vec<T>,
}

impl<T> Mailbox<T> {
    fn open(round: u64) -> Self {
        Self {
            round,
            sealed: false,
            items: Vec::new(),
        }
    }

    fn post(&mut self, round: u64, item: T) {
        assert!(!self.sealed, "post to sealed mailbox of round {}", self.round);
        assert_eq!(round, self.round, "message from round {round} posted to round {}", self.round);
        self.items.push(item);
    }

    fn seal(&mut self) {
        self.sealed = true;
    }

    fn read(&self) -> &[T] {
        assert!(self.sealed, "read before barrier of round {}", self.round);
        &self.items
    }
}

fn participates(seed: u64, round: u64, id: NodeId, p: f64) -> bool {
    if p >= 1.0 {
        return true;
    }
    let u = (rng::derive(&[seed, domain::PARTICIPATION, round, id.0 as u64]) >> 11) as f64 / (1u64 << 53) as f64;
    u < p
}

fn priors_view(u: &ImprovementSignal) -> CollectiveView {
    CollectiveView {
        per_type_centroids: u.per_type_priors.clone(),
        support_counts: u.present.iter().map(|&p| p as usize).collect(),
        source_round: u.round,
    }
}

/// Hash of the settings that shape the run; where output goes and where the
/// trace file lives do not.
fn config_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.output = Default::default();
    c.scheduler.trace = None;
    let mut h = Sha256::new();
    h.update(c.to_toml_string().as_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Runs the configured scenario, loading the trace when the scheduler is on.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutput> {
    let trace = cfg.load_trace()?;
    run_with_trace(cfg, trace.as_ref(), opts)
}

pub fn run_with_trace(cfg: &RunConfig, trace: Option<&EnergyTrace>, opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let sc = &cfg.scenario;
    let seed = sc.seed;
    let n = sc.n_nodes;
    let k = cfg.task.k_types;
    let d = cfg.space.d_pattern;
    let clip = cfg.space.clip_radius;
    let space_cfg = cfg.shared_space()?;
    let dim = space_cfg.artifact_dim();
    let family = TaskFamily::new(cfg.task.clone(), d, seed)?;
    let dp = cfg.dp_params()?;
    let rho = cfg.ccf.effective_rho(clip);
    let adv_ctx = AdversaryContext::new(seed, k, d, clip, cfg.task.center_scale);
    let adversaries = sc.adversary_ids();

    let ids: Vec<NodeId> = (0..n).map(NodeId).collect();
    let mut nodes: Vec<Node> = ids
        .iter()
        .map(|&id| Node::new(id, seed, k, d, &cfg.node, dp.clone()))
        .collect();
    if let Some(p) = sc.planted {
        nodes[p.node as usize].pattern.per_type_strategies[p.task_type] = family.centers[p.task_type].clone();
    }
    let seeds = PairwiseSeeds::derive(seed, &ids);

    let mut online: BTreeSet<NodeId> = ids.iter().copied().collect();
    for id in &ids {
        let first = sc.churn.iter().filter(|c| c.node == id.0).min_by_key(|c| c.round);
        if matches!(first, Some(c) if c.event == ChurnKind::Join) {
            online.remove(id);
        }
    }

    let kinds = sc.round_kinds();
    let (plan, baseline_plan) = match (cfg.scheduler.enabled, trace) {
        (true, Some(trace)) => {
            let w = cfg.scheduler.slots_per_round;
            let tiled = trace.tiled(kinds.len() * w);
            let jobs = eame::round_jobs(&kinds, w);
            let th = cfg.scheduler.thresholds();
            let cost = cfg.scheduler.energy_cost;
            let g = eame::schedule_with(Policy::Greedy, &tiled, &jobs, &th, cost)?;
            let b = eame::schedule_with(Policy::Earliest, &tiled, &jobs, &th, cost)?;
            let carbon = (eame::plan_carbon(&g, &tiled, n as usize), eame::plan_carbon(&b, &tiled, n as usize));
            (Some((g, carbon.0)), Some((b, carbon.1)))
        }
        (true, None) => return Err(Error::config("scheduler.trace", "scheduler enabled but no trace supplied")),
        _ => (None, None),
    };

    let mut transcript = Transcript { lines: Vec::new() };
    transcript.push(&Record::Header {
        version: 1,
        seed,
        n_nodes: n,
        rounds: sc.rounds,
        config_hash: config_hash(cfg),
    });

    let mut ledger = ReputationLedger::from_config(&cfg.ccf);
    let mut priors = ImprovementSignal::initial(k, d);
    let mut base = PatternObject::zeros(k, d, cfg.node.local_step_size, cfg.node.blend_rate);
    let mut history: Vec<(ImprovementSignal, f64)> = Vec::new();
    let mut private_ledger = Vec::new();
    let mut metrics = Vec::new();
    let mut validation: BTreeMap<String, ValidationCounts> = BTreeMap::new();
    let mut loss_trajectory = Vec::new();
    let mut total_participants = 0usize;
    let (mut tot_rejected, mut tot_suppressed, mut tot_flagged) = (0u64, 0u64, 0u64);
    let mut min_disp: Option<f64> = None;

    for r in 0..sc.rounds {
        for c in sc.churn.iter().filter(|c| c.round == r) {
            match c.event {
                ChurnKind::Join => online.insert(NodeId(c.node)),
                ChurnKind::Leave => online.remove(&NodeId(c.node)),
            };
        }
        let kind = kinds[r as usize];
        let slot = plan.as_ref().and_then(|(p, _)| p.slot_of(r));
        let mode = match (&plan, slot) {
            (Some((p, _)), Some(s)) => p.modes[s],
            _ => kind.mode(),
        };
        let participants: Vec<NodeId> = online
            .iter()
            .copied()
            .filter(|&id| participates(seed, r, id, sc.participation_prob))
            .collect();
        total_participants += participants.len();
        transcript.push(&Record::Round {
            round: r,
            job: kind,
            slot,
            mode,
            participants: participants.clone(),
        });

        let mut uplink: Mailbox<(NodeId, Message)> = Mailbox::open(r);
        let mut exports: Vec<(NodeId, Artifact)> = Vec::new();
        let mut n_rejected = 0usize;
        let mut n_suppressed = 0usize;
        for &id in &participants {
            let node = &mut nodes[id.0 as usize];
            let mut task_rng = rng::stream(&[seed, domain::TASK, r, id.0 as u64]);
            let task_id = node.next_task_id();
            let task = family.sample_task(&mut task_rng, task_id)?;
            let honest = node.generate_signal(task, r)?;
            let behavior = sc.behavior_of(id, r);
            let mut adv_rng = rng::stream(&[seed, domain::ADVERSARY, r, id.0 as u64]);
            let raw = apply_adversary(behavior, &honest, &mut adv_rng, &adv_ctx);
            let verdict = node.validate_signal(&raw);
            let counts = validation
                .entry(behavior.map_or("HONEST", Behavior::label).to_owned())
                .or_default();
            counts.signals += 1;
            match &verdict {
                Validation::Accept { .. } => counts.accepted += 1,
                Validation::Reject(RejectReason::InconsistentOutcome { .. }) => counts.inconsistent += 1,
                Validation::Reject(RejectReason::NoImprovement { .. }) => counts.no_improvement += 1,
            }
            let Some(confidence) = verdict.confidence() else {
                n_rejected += 1;
                continue;
            };
            if kind == JobKind::Learn {
                continue;
            }
            match node.export(&raw, confidence) {
                Ok(a) => {
                    let tag = a.node_tag.to_string();
                    if opts.fault == Some(Fault::LeakRawPatterns) {
                        uplink.post(
                            r,
                            (
                                id,
                                Message {
                                    round: r,
                                    from: tag.clone(),
                                    to: "broadcast".into(),
                                    body: MessageBody::RawPattern {
                                        pattern: raw.pattern_snapshot.clone(),
                                    },
                                },
                            ),
                        );
                    }
                    uplink.post(
                        r,
                        (
                            id,
                            Message {
                                round: r,
                                from: tag,
                                to: "broadcast".into(),
                                body: MessageBody::Artifact { artifact: a.clone() },
                            },
                        ),
                    );
                    exports.push((id, a));
                }
                Err(_) => n_suppressed += 1,
            }
        }

        let mut aggregate: Option<AggregateSum> = None;
        let mut aggregate_ok = true;
        if kind != JobKind::Learn && !participants.is_empty() {
            let masks = privacy::make_masks(r, &participants, &seeds, dim)?;
            for (id, a) in &exports {
                let share = privacy::mask_share(*id, r, &a.to_vector(), &masks[id])?;
                uplink.post(
                    r,
                    (
                        *id,
                        Message {
                            round: r,
                            from: format!("node:{}", id.0),
                            to: "aggregator".into(),
                            body: MessageBody::MaskedShare { share },
                        },
                    ),
                );
            }
        }
        uplink.seal();
        for (_, m) in uplink.read() {
            transcript.push(&Record::Message(m.clone()));
        }

        let mut downlink: Mailbox<Message> = Mailbox::open(r);
        let mut n_flagged = 0;
        let mut disp = None;
        let mut field = ccf::form_field(r, Vec::new())?;
        let mut weights = Vec::new();
        if kind != JobKind::Learn {
            let shares: Vec<MaskedShare> = uplink
                .read()
                .iter()
                .filter_map(|(_, m)| match &m.body {
                    MessageBody::MaskedShare { share } => Some(share.clone()),
                    _ => None,
                })
                .collect();
            let exported: BTreeSet<NodeId> = exports.iter().map(|(id, _)| *id).collect();
            let dropouts: BTreeSet<NodeId> = participants.iter().copied().filter(|id| !exported.contains(id)).collect();
            match privacy::aggregate_masked(&shares, &dropouts, &seeds) {
                Ok(sum) => aggregate = Some(sum),
                Err(Error::EmptyAggregate) => {}
                Err(e @ Error::AbortRound { .. }) => {
                    transcript.push(&Record::Abort {
                        round: r,
                        reason: e.to_string(),
                    });
                    aggregate_ok = false;
                }
                Err(e) => return Err(e),
            }

            field = ccf::form_field(r, exports.clone())?;
            if let Some(sum) = &aggregate {
                let mut plain = vec![0.0; dim];
                for a in &field.snapshot.artifacts {
                    for (p, x) in plain.iter_mut().zip(a.coords()) {
                        *p += x;
                    }
                }
                aggregate_ok = sum
                    .values
                    .iter()
                    .zip(&plain)
                    .all(|(a, b)| (a - b).abs() <= 1e-6 * (1.0 + b.abs()));
                debug_assert!(aggregate_ok, "masked aggregate diverged from the field sum in round {r}");
                downlink.post(
                    r,
                    Message {
                        round: r,
                        from: "aggregator".into(),
                        to: "broadcast".into(),
                        body: MessageBody::Aggregate {
                            values: sum.values.clone(),
                            contributors: sum.contributors,
                        },
                    },
                );
            }

            if aggregate_ok && !field.is_empty() {
                let w = ccf::weigh_field(&field, &ledger, k, &cfg.ccf);
                n_flagged = w.flagged.len();
                priors = ccf::improve(&field.snapshot, &w.weights, &priors, cfg.ccf.beta)?;
                ledger = ccf::update_reputation(&ledger, &field, &priors, rho);
                weights = w.weights;
            }
            if field.len() >= 2 {
                disp = Some(space::dispersion(&field.snapshot)?);
            }
            downlink.post(
                r,
                Message {
                    round: r,
                    from: "aggregator".into(),
                    to: "broadcast".into(),
                    body: MessageBody::Weights {
                        weights: weights.clone(),
                    },
                },
            );
            downlink.post(
                r,
                Message {
                    round: r,
                    from: "aggregator".into(),
                    to: "broadcast".into(),
                    body: MessageBody::Priors {
                        per_type_priors: priors.per_type_priors.clone(),
                        present: priors.present.clone(),
                    },
                },
            );
        }
        downlink.seal();
        for m in downlink.read() {
            transcript.push(&Record::Message(m.clone()));
        }
        if field.is_empty() {
            weights.clear();
        }

        let sync = kind != JobKind::Learn;
        for &id in &online {
            let node = &mut nodes[id.0 as usize];
            let mut view = CollectiveView::empty(k, d, r);
            if sync && aggregate_ok {
                if cfg.ccf.node_views && !field.is_empty() {
                    view = node.project_ccf(&field.snapshot, &weights)?;
                }
                if cfg.ccf.broadcast_priors {
                    let mut pv = priors_view(&priors);
                    pv.source_round = r;
                    view = view.merge(&pv);
                }
            }
            node.pattern = node.update_pattern(&view);
        }

        if sync && aggregate_ok && !field.is_empty() {
            history.push((priors.clone(), window_weight(disp)));
            let excess = history.len().saturating_sub(sc.window());
            history.drain(..excess);
        }
        if kind == JobKind::Consolidate {
            match consolidate(&history, &base) {
                Some(new_base) => {
                    base = new_base;
                    for &id in &online {
                        let node = &mut nodes[id.0 as usize];
                        node.pattern = node.pattern.blend_toward(&base.per_type_strategies, sc.gamma_cons);
                    }
                    transcript.push(&Record::Consolidation {
                        round: r,
                        window: history.len(),
                        skipped: false,
                    });
                }
                None => transcript.push(&Record::Consolidation {
                    round: r,
                    window: 0,
                    skipped: true,
                }),
            }
        }

        for node in &nodes {
            private_ledger.push(PrivateRecord {
                round: r,
                node: node.id,
                floats: node.private_floats(),
            });
        }

        let per_node: Vec<f64> = nodes
            .iter()
            .map(|nd| {
                (0..k).map(|t| family.expected_loss(t, nd.pattern.row(t))).sum::<f64>() / k as f64
            })
            .collect();
        let honest: Vec<&Node> = nodes.iter().filter(|nd| !adversaries.contains(&nd.id)).collect();
        let per_type: Vec<f64> = (0..k)
            .map(|t| {
                honest.iter().map(|nd| family.expected_loss(t, nd.pattern.row(t))).sum::<f64>()
                    / honest.len().max(1) as f64
            })
            .collect();
        let mean_loss = per_type.iter().sum::<f64>() / k as f64;
        transcript.push(&Record::Losses {
            round: r,
            per_type: per_type.clone(),
            per_node,
        });

        let learning_activity = space::learning_activity(&field.snapshot, |a| ActivityWeight::Count.weigh(a));
        let mean_reputation = ledger.mean_score(field.owners.iter());
        transcript.push(&Record::Field {
            round: r,
            disp,
            n_artifacts: field.len(),
            n_flagged,
            n_rejected,
            n_suppressed,
            learning_activity,
            priors_hash: priors.priors_hash(),
            mean_reputation,
            aggregate_ok,
        });
        if r >= sc.warmup_rounds && sync {
            let v = disp.unwrap_or(0.0);
            min_disp = Some(min_disp.map_or(v, |m: f64| m.min(v)));
        }
        tot_rejected += n_rejected as u64;
        tot_suppressed += n_suppressed as u64;
        tot_flagged += n_flagged as u64;
        metrics.push(RoundMetrics {
            round: r,
            job: kind,
            slot,
            mode,
            n_participants: participants.len(),
            n_artifacts: field.len(),
            n_flagged,
            n_rejected,
            n_suppressed,
            disp,
            learning_activity,
            priors_hash: priors.priors_hash(),
            mean_reputation,
            mean_loss,
            per_type_loss: per_type.clone(),
        });
        loss_trajectory.push(per_type);
    }

    let summary = Summary {
        kind: "summary",
        rounds: sc.rounds,
        n_nodes: n,
        seed,
        content_hash: transcript.content_hash(),
        final_mean_loss: metrics.last().map(|m| m.mean_loss),
        final_per_type_loss: loss_trajectory.last().cloned().unwrap_or_default(),
        min_post_warmup_disp: min_disp,
        mean_participants: if sc.rounds == 0 {
            0.0
        } else {
            total_participants as f64 / sc.rounds as f64
        },
        carbon_g: plan.as_ref().map(|(_, c)| *c),
        baseline_carbon_g: baseline_plan.as_ref().map(|(_, c)| *c),
        deadline_violations: plan.as_ref().map_or(0, |(p, _)| p.n_violations()),
        rejected: tot_rejected,
        suppressed: tot_suppressed,
        flagged: tot_flagged,
    };

    Ok(RunOutput {
        transcript,
        private_ledger,
        metrics,
        summary,
        nodes,
        reputation: ledger,
        priors,
        family,
        plan: plan.map(|(p, _)| p),
        baseline_plan: baseline_plan.map(|(p, _)| p),
        validation,
        loss_trajectory,
    })
}
