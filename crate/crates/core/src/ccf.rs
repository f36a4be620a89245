//! Field formation and the aggregator's improvement signal.
//!
//! The aggregator collects one artifact per participating node into a
//! snapshot, flags MAD outliers per task type, weights the rest by
//! confidence times reputation, folds the weighted per-type means into an
//! exponentially smoothed prior, and scores each contributor by how close its
//! artifact sits to the new prior.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::space::{self, Artifact, CcfSnapshot, NodeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcfConfig {
    /// θ_conf: artifacts below this confidence get weight 0.
    pub theta_conf: f64,
    /// β: EMA rate of the prior.
    pub beta: f64,
    /// α: EMA rate of reputation.
    pub alpha: f64,
    /// ρ: agreement length scale. `None` means clip_radius / 4.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// r₀: reputation of a node never seen before.
    pub r0: f64,
    pub k_mad: f64,
    pub history_window: usize,
    /// Disseminate U^t to nodes.
    pub broadcast_priors: bool,
    /// Let nodes form self-excluding views of the noised tuple.
    pub node_views: bool,
}

impl Default for CcfConfig {
    fn default() -> Self {
        Self {
            theta_conf: 0.3,
            beta: 0.5,
            alpha: 0.1,
            rho: None,
            r0: 0.5,
            k_mad: 5.0,
            history_window: 16,
            broadcast_priors: true,
            node_views: true,
        }
    }
}

impl CcfConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(key, "must lie in [0, 1]"))
            }
        };
        unit("ccf.theta_conf", self.theta_conf)?;
        unit("ccf.beta", self.beta)?;
        unit("ccf.r0", self.r0)?;
        if !(self.alpha >= 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("ccf.alpha", "must lie in [0, 1]"));
        }
        if let Some(rho) = self.rho {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(Error::config("ccf.rho", "must be positive"));
            }
        }
        if !(self.k_mad > 0.0 && self.k_mad.is_finite()) {
            return Err(Error::config("ccf.k_mad", "must be positive"));
        }
        if self.history_window == 0 {
            return Err(Error::config("ccf.history_window", "must be positive"));
        }
        Ok(())
    }

    pub fn effective_rho(&self, clip_radius: f64) -> f64 {
        self.rho.unwrap_or(clip_radius / 4.0)
    }
}

/// A snapshot plus the aggregator-local pseudonym resolution: `owners[i]`
/// produced `snapshot.artifacts[i]`. Owners never leave the aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub snapshot: CcfSnapshot,
    pub owners: Vec<NodeId>,
}

impl Field {
    pub fn len(&self) -> usize {
        self.snapshot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshot.is_empty()
    }
}

/// Builds C^col,t from the artifacts that survived validation and the privacy
/// budget. The result is ordered by node tag.
pub fn form_field(round: u64, entries: Vec<(NodeId, Artifact)>) -> Result<Field> {
    let mut entries = entries;
    entries.sort_by_key(|(_, a)| a.node_tag);
    let mut participant_set = BTreeSet::new();
    for w in entries.windows(2) {
        if w[0].1.node_tag == w[1].1.node_tag {
            return Err(Error::DuplicateNodeTag(w[0].1.node_tag.to_string()));
        }
    }
    for (id, a) in &entries {
        if a.round != round {
            return Err(Error::Transcript(format!(
                "artifact from round {} submitted to round {round}",
                a.round
            )));
        }
        if !participant_set.insert(*id) {
            return Err(Error::DuplicateNodeTag(a.node_tag.to_string()));
        }
    }
    let (owners, artifacts) = entries.into_iter().unzip();
    Ok(Field {
        snapshot: CcfSnapshot {
            round,
            artifacts,
            participant_set,
        },
        owners,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub const MIN_SNAPSHOT_FOR_ANOMALIES: usize = 4;
pub const MIN_GROUP_FOR_ANOMALIES: usize = 3;

/// Indices whose pattern part lies further than `k_mad` · MAD from the
/// coordinate-wise median of its task-type group.
pub fn detect_anomalies(snapshot: &CcfSnapshot, k_types: usize, k_mad: f64) -> BTreeSet<usize> {
    let mut flagged = BTreeSet::new();
    if snapshot.len() < MIN_SNAPSHOT_FOR_ANOMALIES {
        return flagged;
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k_types];
    for (i, a) in snapshot.artifacts.iter().enumerate() {
        groups[a.decoded_task_type(k_types)].push(i);
    }
    for group in groups.iter().filter(|g| g.len() >= MIN_GROUP_FOR_ANOMALIES) {
        let d = snapshot.artifacts[group[0]].pattern.len();
        let centre: Vec<f64> = (0..d)
            .map(|c| {
                let mut col: Vec<f64> = group.iter().map(|&i| snapshot.artifacts[i].pattern[c]).collect();
                median(&mut col)
            })
            .collect();
        let dev: Vec<f64> = group
            .iter()
            .map(|&i| space::euclidean(&snapshot.artifacts[i].pattern, &centre))
            .collect();
        let mad = median(&mut dev.clone());
        for (&i, &di) in group.iter().zip(&dev) {
            if di > k_mad * mad {
                flagged.insert(i);
            }
        }
    }
    flagged
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReputationLedger {
    score: BTreeMap<NodeId, f64>,
    history: BTreeMap<NodeId, VecDeque<f64>>,
    pub ema_alpha: f64,
    pub history_window: usize,
    pub r0: f64,
}

impl ReputationLedger {
    pub fn new(ema_alpha: f64, history_window: usize, r0: f64) -> Self {
        Self {
            score: BTreeMap::new(),
            history: BTreeMap::new(),
            ema_alpha,
            history_window,
            r0: r0.clamp(0.0, 1.0),
        }
    }

    pub fn from_config(cfg: &CcfConfig) -> Self {
        Self::new(cfg.alpha, cfg.history_window, cfg.r0)
    }

    pub fn score(&self, id: NodeId) -> f64 {
        self.score.get(&id).copied().unwrap_or(self.r0)
    }

    pub fn set_score(&mut self, id: NodeId, s: f64) {
        self.score.insert(id, s.clamp(0.0, 1.0));
    }

    /// Most recent agreements of `id`, oldest first.
    pub fn history(&self, id: NodeId) -> impl Iterator<Item = f64> + '_ {
        self.history.get(&id).into_iter().flatten().copied()
    }

    pub fn known(&self) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        self.score.iter().map(|(k, v)| (*k, *v))
    }

    pub fn mean_score<'a>(&self, ids: impl IntoIterator<Item = &'a NodeId>) -> Option<f64> {
        let (sum, n) = ids
            .into_iter()
            .fold((0.0, 0usize), |(s, n), id| (s + self.score(*id), n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub weights: Vec<f64>,
    pub flagged: BTreeSet<usize>,
}

/// weight_i = confidence · reputation, or 0 when below θ_conf or flagged.
pub fn filter_and_weight(
    field: &Field,
    ledger: &ReputationLedger,
    flagged: &BTreeSet<usize>,
    theta_conf: f64,
) -> Vec<f64> {
    field
        .snapshot
        .artifacts
        .iter()
        .zip(&field.owners)
        .enumerate()
        .map(|(i, (a, id))| {
            if a.confidence < theta_conf || flagged.contains(&i) {
                0.0
            } else {
                a.confidence * ledger.score(*id)
            }
        })
        .collect()
}

/// Anomaly detection followed by [`filter_and_weight`].
pub fn weigh_field(field: &Field, ledger: &ReputationLedger, k_types: usize, cfg: &CcfConfig) -> Weights {
    let flagged = detect_anomalies(&field.snapshot, k_types, cfg.k_mad);
    let weights = filter_and_weight(field, ledger, &flagged, cfg.theta_conf);
    Weights { weights, flagged }
}

/// U^t: per-type priors with presence flags. Rows with `present[k] == false`
/// carry no information and must not be consumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementSignal {
    pub round: u64,
    pub per_type_priors: Vec<Vec<f64>>,
    pub present: Vec<bool>,
    /// The priors this signal was smoothed from.
    pub smoothing_state: Vec<Vec<f64>>,
}

impl ImprovementSignal {
    pub fn initial(k_types: usize, d_pattern: usize) -> Self {
        Self {
            round: 0,
            per_type_priors: vec![vec![0.0; d_pattern]; k_types],
            present: vec![false; k_types],
            smoothing_state: vec![vec![0.0; d_pattern]; k_types],
        }
    }

    pub fn prior(&self, k: usize) -> Option<&[f64]> {
        self.present[k].then(|| self.per_type_priors[k].as_slice())
    }

    /// Short digest over presence flags and prior bits.
    pub fn priors_hash(&self) -> String {
        let mut h = Sha256::new();
        for (row, &p) in self.per_type_priors.iter().zip(&self.present) {
            h.update([p as u8]);
            if p {
                for x in row {
                    h.update(x.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn is_finite(&self) -> bool {
        self.per_type_priors.iter().flatten().all(|x| x.is_finite())
    }
}

/// Filtered weighted mean per type, smoothed as (1−β)·previous + β·raw.
/// A type seen for the first time is seeded with its raw mean; a type with no
/// surviving weight keeps the previous row.
pub fn improve(
    snapshot: &CcfSnapshot,
    weights: &[f64],
    previous: &ImprovementSignal,
    beta: f64,
) -> Result<ImprovementSignal> {
    if weights.len() != snapshot.len() {
        return Err(Error::DimensionMismatch {
            expected: snapshot.len(),
            got: weights.len(),
        });
    }
    let k = previous.present.len();
    let d = previous.per_type_priors.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; k];
    let mut totals = vec![0.0; k];
    for (a, &w) in snapshot.artifacts.iter().zip(weights) {
        if !(w > 0.0) {
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
    }
    let mut next = ImprovementSignal {
        round: snapshot.round,
        per_type_priors: previous.per_type_priors.clone(),
        present: previous.present.clone(),
        smoothing_state: previous.per_type_priors.clone(),
    };
    for t in 0..k {
        if !(totals[t] > 0.0) {
            continue;
        }
        let raw = sums[t].iter().map(|s| s / totals[t]);
        let row = &mut next.per_type_priors[t];
        if !previous.present[t] {
            *row = raw.collect();
            next.present[t] = true;
        } else if beta > 0.0 {
            for (p, r) in row.iter_mut().zip(raw) {
                *p = (1.0 - beta) * *p + beta * r;
            }
        }
    }
    Ok(next)
}

/// Scores every contributor by agreement exp(−d/ρ) with the prior of its
/// decoded type, then blends with rate α. Contributors whose type has no
/// prior are left unchanged, as are non-contributors.
pub fn update_reputation(
    ledger: &ReputationLedger,
    field: &Field,
    improvement: &ImprovementSignal,
    rho: f64,
) -> ReputationLedger {
    let mut next = ledger.clone();
    let k = improvement.present.len();
    let alpha = ledger.ema_alpha;
    for (a, &id) in field.snapshot.artifacts.iter().zip(&field.owners) {
        let Some(prior) = improvement.prior(a.decoded_task_type(k)) else {
            continue;
        };
        let agreement = (-space::euclidean(&a.pattern, prior) / rho).exp();
        let hist = next.history.entry(id).or_default();
        hist.push_back(agreement);
        while hist.len() > ledger.history_window {
            hist.pop_front();
        }
        if alpha > 0.0 {
            let s = ledger.score(id);
            next.set_score(id, (1.0 - alpha) * s + alpha * agreement);
        }
    }
    next
}
