//! The shared artifact space and network-level measures over it.
//!
//! An [`Artifact`] is the only object that crosses a node boundary. It lives
//! in a fixed-dimension Euclidean space split into a pattern part (the image
//! of a node's strategy row) and an outcome part (task-type one-hot followed by
//! an encoded achieved loss).

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Round-scoped pseudonym attached to an artifact. Serialized as 16 hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeTag(pub u64);

impl fmt::Display for NodeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl Serialize for NodeTag {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NodeTag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16)
            .map(NodeTag)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedSpaceConfig {
    pub d_pattern: usize,
    pub d_outcome: usize,
    pub clip_radius: f64,
    pub dp_sigma: f64,
    #[serde(default)]
    pub metric: Metric,
}

impl SharedSpaceConfig {
    pub fn new(d_pattern: usize, d_outcome: usize, clip_radius: f64, dp_sigma: f64) -> Result<Self> {
        let cfg = Self {
            d_pattern,
            d_outcome,
            clip_radius,
            dp_sigma,
            metric: Metric::Euclidean,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_pattern == 0 {
            return Err(Error::config("space.d_pattern", "must be positive"));
        }
        if self.d_outcome == 0 {
            return Err(Error::config("space.d_outcome", "must be positive"));
        }
        if !(self.clip_radius > 0.0 && self.clip_radius.is_finite()) {
            return Err(Error::config("space.clip_radius", "must be a positive finite real"));
        }
        if !(self.dp_sigma >= 0.0 && self.dp_sigma.is_finite()) {
            return Err(Error::config("space.dp_sigma", "must be a non-negative finite real"));
        }
        Ok(())
    }

    pub fn artifact_dim(&self) -> usize {
        self.d_pattern + self.d_outcome
    }

    /// Post-projection norm bound `C + 6σ`.
    pub fn norm_bound(&self) -> f64 {
        self.clip_radius + 6.0 * self.dp_sigma
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub round: u64,
    pub node_tag: NodeTag,
    pub pattern: Vec<f64>,
    pub outcome: Vec<f64>,
    pub confidence: f64,
}

impl Artifact {
    pub fn new(
        round: u64,
        node_tag: NodeTag,
        pattern: Vec<f64>,
        outcome: Vec<f64>,
        confidence: f64,
    ) -> Result<Self> {
        if !pattern.iter().chain(&outcome).all(|x| x.is_finite()) {
            return Err(Error::config("artifact", "non-finite entry"));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::config("artifact.confidence", "must lie in [0, 1]"));
        }
        Ok(Self {
            round,
            node_tag,
            pattern,
            outcome,
            confidence,
        })
    }

    pub fn dim(&self) -> usize {
        self.pattern.len() + self.outcome.len()
    }

    /// Concatenated `pattern ⧺ outcome` view.
    pub fn coords(&self) -> impl Iterator<Item = f64> + '_ {
        self.pattern.iter().chain(&self.outcome).copied()
    }

    pub fn to_vector(&self) -> Vec<f64> {
        self.coords().collect()
    }

    pub fn norm(&self) -> f64 {
        self.coords().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Task type read back from the one-hot block of the outcome part.
    pub fn decoded_task_type(&self, k_types: usize) -> usize {
        let block = &self.outcome[..k_types.min(self.outcome.len())];
        block
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    pub fn conforms_to(&self, space: &SharedSpaceConfig) -> Result<()> {
        if self.pattern.len() != space.d_pattern {
            return Err(Error::DimensionMismatch {
                expected: space.d_pattern,
                got: self.pattern.len(),
            });
        }
        if self.outcome.len() != space.d_outcome {
            return Err(Error::DimensionMismatch {
                expected: space.d_outcome,
                got: self.outcome.len(),
            });
        }
        Ok(())
    }
}

/// The round-`t` field: the tuple of participating artifacts, ordered by tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcfSnapshot {
    pub round: u64,
    pub artifacts: Vec<Artifact>,
    pub participant_set: BTreeSet<NodeId>,
}

impl CcfSnapshot {
    pub fn empty(round: u64) -> Self {
        Self {
            round,
            artifacts: Vec::new(),
            participant_set: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.artifacts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.artifacts.is_empty()
    }
}

fn check_same_shape(a: &Artifact, b: &Artifact) -> Result<()> {
    if a.pattern.len() != b.pattern.len() {
        return Err(Error::DimensionMismatch {
            expected: a.pattern.len(),
            got: b.pattern.len(),
        });
    }
    if a.outcome.len() != b.outcome.len() {
        return Err(Error::DimensionMismatch {
            expected: a.outcome.len(),
            got: b.outcome.len(),
        });
    }
    Ok(())
}

/// Euclidean distance over the concatenated vectors.
pub fn distance(a: &Artifact, b: &Artifact) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(a
        .coords()
        .zip(b.coords())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Euclidean distance between plain slices of equal length.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Average squared distance over ordered pairs, `1/(n(n−1)) Σ_{i≠j} d(S_i,S_j)²`.
///
/// Evaluated through the centred identity `Σ_{i≠j} ‖x_i−x_j‖² = 2n Σ_i ‖x_i−x̄‖²`,
/// with the mean taken relative to the first artifact so that `n` copies of
/// a point give exactly zero.
pub fn dispersion(snapshot: &CcfSnapshot) -> Result<f64> {
    let n = snapshot.artifacts.len();
    if n < 2 {
        return Err(Error::UndefinedDispersion { n });
    }
    let first = &snapshot.artifacts[0];
    for a in &snapshot.artifacts[1..] {
        check_same_shape(first, a)?;
    }
    let origin = first.to_vector();
    let dim = origin.len();
    let mut shift = vec![0.0; dim];
    for a in &snapshot.artifacts {
        for (s, (x, o)) in shift.iter_mut().zip(a.coords().zip(&origin)) {
            *s += x - o;
        }
    }
    let mean: Vec<f64> = origin
        .iter()
        .zip(&shift)
        .map(|(o, s)| o + s / n as f64)
        .collect();
    let scatter: f64 = snapshot
        .artifacts
        .iter()
        .map(|a| {
            a.coords()
                .zip(&mean)
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>()
        })
        .sum();
    Ok(2.0 * scatter / (n as f64 - 1.0))
}

/// Per-artifact weight `ℓ` used by [`learning_activity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivityWeight {
    /// `ℓ ≡ 1`: artifact count.
    #[default]
    Count,
    Confidence,
}

impl ActivityWeight {
    pub fn weigh(self, artifact: &Artifact) -> f64 {
        match self {
            ActivityWeight::Count => 1.0,
            ActivityWeight::Confidence => artifact.confidence,
        }
    }
}

/// `L(t) = Σ_{i∈I^t} ℓ(S_i^t)`.
pub fn learning_activity<F>(snapshot: &CcfSnapshot, weight_fn: F) -> f64
where
    F: Fn(&Artifact) -> f64,
{
    snapshot.artifacts.iter().map(weight_fn).sum()
}
