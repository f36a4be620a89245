//! Privacy-preserving projection and pairwise-mask secure aggregation.
//!
//! `proj` clips the concatenated pattern/outcome images to the clip radius and
//! adds Gaussian noise calibrated to an (ε, δ) target. Secure aggregation runs
//! on a fixed-point lattice (scale 2⁴⁰, arithmetic mod 2⁶⁴) so that pairwise
//! masks cancel bit for bit.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::rng::{derive, domain, mix64};
use crate::space::{Artifact, NodeId, NodeTag};

/// `sqrt(2 ln(1.25/δ))`, the Gaussian-mechanism multiplier.
pub fn gaussian_multiplier(delta: f64) -> f64 {
    (2.0 * (1.25 / delta).ln()).sqrt()
}

/// Smallest admissible noise std for sensitivity `clip_radius`.
pub fn min_sigma(epsilon: f64, delta: f64, clip_radius: f64) -> f64 {
    clip_radius * gaussian_multiplier(delta) / epsilon
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpParams {
    epsilon: f64,
    delta: f64,
    clip_radius: f64,
    sigma: f64,
    rounds_budget: u64,
    spent_rounds: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("privacy budget of {budget} rounds exhausted")]
pub struct BudgetExhausted {
    pub budget: u64,
}

impl DpParams {
    /// Noise set to the calibrated minimum. `epsilon = ∞` yields σ = 0.
    pub fn calibrated(epsilon: f64, delta: f64, clip_radius: f64, rounds_budget: u64) -> Result<Self> {
        Self::check_inputs(epsilon, delta, clip_radius, rounds_budget)?;
        let sigma = min_sigma(epsilon, delta, clip_radius);
        Self::with_sigma(epsilon, delta, clip_radius, sigma, rounds_budget)
    }

    pub fn with_sigma(
        epsilon: f64,
        delta: f64,
        clip_radius: f64,
        sigma: f64,
        rounds_budget: u64,
    ) -> Result<Self> {
        Self::check_inputs(epsilon, delta, clip_radius, rounds_budget)?;
        let floor = min_sigma(epsilon, delta, clip_radius);
        if !(sigma.is_finite() && sigma >= floor) {
            return Err(Error::config(
                "dp.sigma",
                format!("sigma {sigma} below Gaussian-mechanism calibration {floor}"),
            ));
        }
        let params = Self {
            epsilon,
            delta,
            clip_radius,
            sigma,
            rounds_budget,
            spent_rounds: 0,
        };
        assert!(params.is_calibrated());
        Ok(params)
    }

    /// No privacy: ε = ∞, σ = 0.
    pub fn non_private(clip_radius: f64, rounds_budget: u64) -> Result<Self> {
        Self::calibrated(f64::INFINITY, 0.5, clip_radius, rounds_budget)
    }

    fn check_inputs(epsilon: f64, delta: f64, clip_radius: f64, rounds_budget: u64) -> Result<()> {
        if !(epsilon > 0.0) {
            return Err(Error::config("dp.epsilon", "must be positive"));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::config("dp.delta", "must lie in (0, 1)"));
        }
        if !(clip_radius > 0.0 && clip_radius.is_finite()) {
            return Err(Error::config("space.clip_radius", "must be a positive finite real"));
        }
        if rounds_budget == 0 {
            return Err(Error::config("dp.rounds_budget", "must be positive"));
        }
        Ok(())
    }

    pub fn is_calibrated(&self) -> bool {
        self.sigma >= min_sigma(self.epsilon, self.delta, self.clip_radius)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn clip_radius(&self) -> f64 {
        self.clip_radius
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn rounds_budget(&self) -> u64 {
        self.rounds_budget
    }
    pub fn spent_rounds(&self) -> u64 {
        self.spent_rounds
    }

    /// Composed ε spent so far under simple composition.
    pub fn spent_epsilon(&self) -> f64 {
        self.epsilon * self.spent_rounds as f64
    }
}

/// Scales `v` onto the ball of radius `radius`; no-op inside the ball.
pub fn clip_to_radius(v: &mut [f64], radius: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > radius {
        let s = radius / norm;
        v.iter_mut().for_each(|x| *x *= s);
    }
}

/// Builds an artifact from the pattern and outcome images: clip the
/// concatenation, add i.i.d. `N(0, σ²)` noise per coordinate, charge one round.
#[allow(clippy::too_many_arguments)]
pub fn proj(
    pattern_image: &[f64],
    outcome_image: &[f64],
    dp: &mut DpParams,
    rng: &mut impl Rng,
    round: u64,
    node_tag: NodeTag,
    confidence: f64,
) -> std::result::Result<Artifact, BudgetExhausted> {
    if dp.spent_rounds >= dp.rounds_budget {
        return Err(BudgetExhausted {
            budget: dp.rounds_budget,
        });
    }
    let mut v: Vec<f64> = pattern_image.iter().chain(outcome_image).copied().collect();
    clip_to_radius(&mut v, dp.clip_radius);
    for x in v.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x += dp.sigma * z;
    }
    dp.spent_rounds += 1;
    let outcome = v.split_off(pattern_image.len());
    Ok(Artifact {
        round,
        node_tag,
        pattern: v,
        outcome,
        confidence: confidence.clamp(0.0, 1.0),
    })
}

/// Fixed-point scale of the aggregation lattice.
pub const LATTICE_SCALE: f64 = (1u64 << 40) as f64;

/// Largest magnitude that encodes without wrapping.
pub const LATTICE_LIMIT: f64 = (1u64 << 22) as f64;

pub fn encode_lattice(x: f64) -> Result<u64> {
    if !(x.is_finite() && x.abs() < LATTICE_LIMIT) {
        return Err(Error::config("aggregation", format!("value {x} outside lattice range")));
    }
    Ok(((x * LATTICE_SCALE).round() as i64) as u64)
}

pub fn decode_lattice(u: u64) -> f64 {
    (u as i64) as f64 / LATTICE_SCALE
}

pub fn encode_vector(v: &[f64]) -> Result<Vec<u64>> {
    v.iter().map(|&x| encode_lattice(x)).collect()
}

/// Counter-mode mask generator.
///
/// The stream for `(seed, round)` is SplitMix64 started at state
/// `mix64(seed ⊕ mix64(round))`; element `index` is
/// `mix64(state + (index + 1)·0x9E3779B97F4A7C15)`.
pub fn prg(seed: u64, round: u64, index: u64) -> u64 {
    let state = mix64(seed ^ mix64(round));
    mix64(state.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// One shared seed per unordered pair of participants.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairwiseSeeds {
    seeds: BTreeMap<(NodeId, NodeId), u64>,
}

impl PairwiseSeeds {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeds derived from the run seed, as if agreed during setup.
    pub fn derive(run_seed: u64, ids: &[NodeId]) -> Self {
        let mut out = Self::new();
        for (a, &i) in ids.iter().enumerate() {
            for &j in &ids[a + 1..] {
                let (lo, hi) = if i < j { (i, j) } else { (j, i) };
                out.insert(lo, hi, derive(&[run_seed, domain::PAIR_SEED, lo.0 as u64, hi.0 as u64]));
            }
        }
        out
    }

    pub fn insert(&mut self, i: NodeId, j: NodeId, seed: u64) {
        let key = if i < j { (i, j) } else { (j, i) };
        self.seeds.insert(key, seed);
    }

    pub fn remove(&mut self, i: NodeId, j: NodeId) -> Option<u64> {
        let key = if i < j { (i, j) } else { (j, i) };
        self.seeds.remove(&key)
    }

    pub fn get(&self, i: NodeId, j: NodeId) -> Option<u64> {
        let key = if i < j { (i, j) } else { (j, i) };
        self.seeds.get(&key).copied()
    }

    fn require(&self, i: NodeId, j: NodeId) -> Result<u64> {
        self.get(i, j).ok_or(Error::MissingPairwiseSeed(i.0.min(j.0), i.0.max(j.0)))
    }
}

/// `mask_i = Σ_{j>i} PRG(s_ij) − Σ_{j<i} PRG(s_ji)` over the lattice.
pub fn make_masks(
    round: u64,
    participant_ids: &[NodeId],
    seeds: &PairwiseSeeds,
    dim: usize,
) -> Result<BTreeMap<NodeId, Vec<u64>>> {
    let ids: BTreeSet<NodeId> = participant_ids.iter().copied().collect();
    let mut masks: BTreeMap<NodeId, Vec<u64>> = ids.iter().map(|&i| (i, vec![0u64; dim])).collect();
    for &i in &ids {
        for &j in ids.range(i..).skip(1) {
            let seed = seeds.require(i, j)?;
            for k in 0..dim {
                let r = prg(seed, round, k as u64);
                let mi = &mut masks.get_mut(&i).expect("participant")[k];
                *mi = mi.wrapping_add(r);
                let mj = &mut masks.get_mut(&j).expect("participant")[k];
                *mj = mj.wrapping_sub(r);
            }
        }
    }
    Ok(masks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedShare {
    pub node_id: NodeId,
    /// Lattice-encoded artifact plus mask, mod 2⁶⁴.
    pub masked_vector: Vec<u64>,
    pub round: u64,
}

pub fn mask_share(node_id: NodeId, round: u64, vector: &[f64], mask: &[u64]) -> Result<MaskedShare> {
    if vector.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            expected: mask.len(),
            got: vector.len(),
        });
    }
    let masked_vector = encode_vector(vector)?
        .into_iter()
        .zip(mask)
        .map(|(x, m)| x.wrapping_add(*m))
        .collect();
    Ok(MaskedShare {
        node_id,
        masked_vector,
        round,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSum {
    pub lattice: Vec<u64>,
    pub values: Vec<f64>,
    pub contributors: usize,
}

/// Sums live shares and strips the residual masks shared with dropped nodes.
pub fn aggregate_masked(
    shares: &[MaskedShare],
    dropouts: &BTreeSet<NodeId>,
    seeds: &PairwiseSeeds,
) -> Result<AggregateSum> {
    let first = shares.first().ok_or(Error::EmptyAggregate)?;
    let round = first.round;
    let dim = first.masked_vector.len();
    let mut live = BTreeSet::new();
    for s in shares {
        if s.masked_vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.masked_vector.len(),
            });
        }
        if s.round != round {
            return Err(Error::config("aggregation", "shares from different rounds"));
        }
        if dropouts.contains(&s.node_id) || !live.insert(s.node_id) {
            return Err(Error::config(
                "aggregation",
                format!("node {} submitted twice or is marked dropped", s.node_id),
            ));
        }
    }
    let mut sum = vec![0u64; dim];
    for s in shares {
        for (acc, x) in sum.iter_mut().zip(&s.masked_vector) {
            *acc = acc.wrapping_add(*x);
        }
    }
    for &i in &live {
        for &j in dropouts {
            let seed = seeds
                .get(i, j)
                .ok_or(Error::AbortRound { round, node: j.0 })?;
            for (k, acc) in sum.iter_mut().enumerate() {
                let r = prg(seed, round, k as u64);
                *acc = if j > i { acc.wrapping_sub(r) } else { acc.wrapping_add(r) };
            }
        }
    }
    let values = sum.iter().map(|&u| decode_lattice(u)).collect();
    Ok(AggregateSum {
        lattice: sum,
        values,
        contributors: live.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(n: u32) -> Vec<NodeId> {
        (0..n).map(NodeId).collect()
    }

    fn plain_sum(vectors: &[Vec<f64>]) -> Vec<u64> {
        let mut out = vec![0u64; vectors[0].len()];
        for v in vectors {
            for (o, x) in out.iter_mut().zip(encode_vector(v).unwrap()) {
                *o = o.wrapping_add(x);
            }
        }
        out
    }

    #[test]
    fn calibration_floor_is_enforced() {
        let dp = DpParams::calibrated(1.0, 1e-5, 2.0, 10).unwrap();
        let expected = 2.0 * (2.0 * (1.25f64 / 1e-5).ln()).sqrt();
        assert!((dp.sigma() - expected).abs() < 1e-12);
        assert!(dp.is_calibrated());
        assert!(DpParams::with_sigma(1.0, 1e-5, 2.0, expected * 0.99, 10).is_err());
        assert!(DpParams::with_sigma(1.0, 1e-5, 2.0, expected * 2.0, 10).is_ok());
        assert!(DpParams::calibrated(0.0, 1e-5, 1.0, 1).is_err());
        assert!(DpParams::calibrated(1.0, 1.0, 1.0, 1).is_err());
        assert!(DpParams::calibrated(1.0, 0.1, -1.0, 1).is_err());
        assert!(DpParams::calibrated(1.0, 0.1, 1.0, 0).is_err());
        assert_eq!(DpParams::non_private(1.0, 1).unwrap().sigma(), 0.0);
    }

    #[test]
    fn zero_noise_inside_ball_is_identity() {
        let mut dp = DpParams::non_private(10.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = proj(&[1.0, 2.0], &[0.0, 1.0, 0.5], &mut dp, &mut rng, 4, NodeTag(9), 0.7).unwrap();
        assert_eq!(a.pattern, vec![1.0, 2.0]);
        assert_eq!(a.outcome, vec![0.0, 1.0, 0.5]);
        assert_eq!(a.confidence, 0.7);
        assert_eq!(a.round, 4);
        assert_eq!(dp.spent_rounds(), 1);
    }

    #[test]
    fn zero_noise_outside_ball_scales_radially() {
        let mut dp = DpParams::non_private(2.5, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // norm 5 = 2 · clip radius
        let a = proj(&[3.0], &[4.0], &mut dp, &mut rng, 0, NodeTag(0), 1.0).unwrap();
        assert_eq!(a.pattern, vec![1.5]);
        assert_eq!(a.outcome, vec![2.0]);
    }

    #[test]
    fn budget_exhaustion_suppresses() {
        let mut dp = DpParams::non_private(1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(proj(&[0.1], &[0.1], &mut dp, &mut rng, 0, NodeTag(0), 1.0).is_ok());
        assert!(proj(&[0.1], &[0.1], &mut dp, &mut rng, 1, NodeTag(0), 1.0).is_ok());
        assert_eq!(
            proj(&[0.1], &[0.1], &mut dp, &mut rng, 2, NodeTag(0), 1.0),
            Err(BudgetExhausted { budget: 2 })
        );
        assert_eq!(dp.spent_rounds(), 2);
    }

    #[test]
    fn noise_std_matches_sigma() {
        let mut dp = DpParams::calibrated(4.0, 1e-5, 1.0, 100_000).unwrap();
        let sigma = dp.sigma();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let input = [0.2, -0.1, 0.3, 0.0, 0.4];
        let n = 10_000;
        let mut sums = [0.0; 5];
        let mut sq = [0.0; 5];
        for _ in 0..n {
            let a = proj(&input[..2], &input[2..], &mut dp, &mut rng, 0, NodeTag(0), 1.0).unwrap();
            for (k, x) in a.coords().enumerate() {
                sums[k] += x;
                sq[k] += x * x;
            }
        }
        for k in 0..5 {
            let mean = sums[k] / n as f64;
            let sd = (sq[k] / n as f64 - mean * mean).sqrt();
            assert!((sd / sigma - 1.0).abs() <= 0.05, "coord {k}: {sd} vs {sigma}");
        }
    }

    #[test]
    fn adjacent_inputs_are_statistically_close() {
        // Sanity check only: a 1-D projection of the noisy outputs for two
        // adjacent inputs should sit within the (ε, δ) total-variation bound.
        let eps = 1.0;
        let delta = 1e-5;
        let clip = 1.0;
        let mut dp = DpParams::calibrated(eps, delta, clip, u64::MAX).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let x = [0.1, 0.2, 0.0, 0.1];
        let mut y = x;
        y[0] += 0.9;
        let n = 100_000;
        let bins = 60;
        let half_width = 6.0 * dp.sigma();
        let bin_of = |v: f64| (((v + half_width) / (2.0 * half_width) * bins as f64).floor() as i64).clamp(0, bins as i64 - 1) as usize;
        let mut hx = vec![0usize; bins];
        let mut hy = vec![0usize; bins];
        for _ in 0..n {
            let a = proj(&x[..2], &x[2..], &mut dp, &mut rng, 0, NodeTag(0), 1.0).unwrap();
            let b = proj(&y[..2], &y[2..], &mut dp, &mut rng, 0, NodeTag(0), 1.0).unwrap();
            hx[bin_of(a.pattern[0])] += 1;
            hy[bin_of(b.pattern[0])] += 1;
        }
        let tv: f64 = hx
            .iter()
            .zip(&hy)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum::<f64>()
            / (2.0 * n as f64);
        let bound = (eps.exp() - 1.0 + 2.0 * delta) / (eps.exp() + 1.0);
        assert!(tv <= bound, "tv {tv} > bound {bound}");
    }

    #[test]
    fn lattice_round_trip_is_close() {
        for x in [0.0, 1.0, -1.0, 3.25, -1234.5678, 1e-9] {
            let back = decode_lattice(encode_lattice(x).unwrap());
            assert!((back - x).abs() <= 0.5 / LATTICE_SCALE);
        }
        assert!(encode_lattice(f64::NAN).is_err());
        assert!(encode_lattice(1e9).is_err());
    }

    #[test]
    fn two_party_masks_are_antisymmetric() {
        let seeds = PairwiseSeeds::derive(5, &ids(2));
        let masks = make_masks(3, &ids(2), &seeds, 6).unwrap();
        let m0 = &masks[&NodeId(0)];
        let m1 = &masks[&NodeId(1)];
        for k in 0..6 {
            assert_eq!(m0[k], m1[k].wrapping_neg());
            assert_ne!(m0[k], 0);
        }
    }

    #[test]
    fn masks_sum_to_zero_bitwise() {
        for n in 2..10 {
            let seeds = PairwiseSeeds::derive(n as u64 * 31, &ids(n));
            let masks = make_masks(7, &ids(n), &seeds, 5).unwrap();
            for k in 0..5 {
                let total = masks.values().fold(0u64, |acc, m| acc.wrapping_add(m[k]));
                assert_eq!(total, 0);
            }
        }
    }

    #[test]
    fn missing_seed_is_a_setup_error() {
        let mut seeds = PairwiseSeeds::derive(1, &ids(3));
        seeds.remove(NodeId(0), NodeId(2));
        assert!(matches!(
            make_masks(0, &ids(3), &seeds, 2),
            Err(Error::MissingPairwiseSeed(0, 2))
        ));
    }

    #[test]
    fn five_node_masked_aggregate_equals_plaintext() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let participants = ids(5);
        let seeds = PairwiseSeeds::derive(rng.random(), &participants);
        let vectors: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect();
        let masks = make_masks(2, &participants, &seeds, 4).unwrap();
        let shares: Vec<MaskedShare> = participants
            .iter()
            .zip(&vectors)
            .map(|(id, v)| mask_share(*id, 2, v, &masks[id]).unwrap())
            .collect();
        let agg = aggregate_masked(&shares, &BTreeSet::new(), &seeds).unwrap();
        assert_eq!(agg.lattice, plain_sum(&vectors));
        assert_eq!(agg.contributors, 5);
        for k in 0..4 {
            let direct: f64 = vectors.iter().map(|v| v[k]).sum();
            assert!((agg.values[k] - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_is_reconstructed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let participants = ids(5);
        let seeds = PairwiseSeeds::derive(99, &participants);
        let vectors: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let masks = make_masks(0, &participants, &seeds, 3).unwrap();
        let dropped = NodeId(2);
        let shares: Vec<MaskedShare> = participants
            .iter()
            .filter(|id| **id != dropped)
            .map(|id| mask_share(*id, 0, &vectors[id.0 as usize], &masks[id]).unwrap())
            .collect();
        let live: Vec<Vec<f64>> = (0..5).filter(|&i| i != 2).map(|i| vectors[i].clone()).collect();
        let agg = aggregate_masked(&shares, &BTreeSet::from([dropped]), &seeds).unwrap();
        assert_eq!(agg.lattice, plain_sum(&live));
    }

    #[test]
    fn unrecoverable_dropout_aborts_and_empty_round_errors() {
        let participants = ids(3);
        let mut seeds = PairwiseSeeds::derive(1, &participants);
        let masks = make_masks(5, &participants, &seeds, 2).unwrap();
        let shares = vec![
            mask_share(NodeId(0), 5, &[0.0, 1.0], &masks[&NodeId(0)]).unwrap(),
            mask_share(NodeId(1), 5, &[1.0, 0.0], &masks[&NodeId(1)]).unwrap(),
        ];
        seeds.remove(NodeId(1), NodeId(2));
        assert!(matches!(
            aggregate_masked(&shares, &BTreeSet::from([NodeId(2)]), &seeds),
            Err(Error::AbortRound { round: 5, node: 2 })
        ));
        assert!(matches!(
            aggregate_masked(&[], &BTreeSet::from([NodeId(0), NodeId(1)]), &seeds),
            Err(Error::EmptyAggregate)
        ));
    }

    #[test]
    fn masked_shares_look_uniform() {
        // top-nibble histogram of masked coordinates against a uniform law
        let participants = ids(8);
        let seeds = PairwiseSeeds::derive(2718, &participants);
        let mut counts = [0usize; 16];
        let mut total = 0usize;
        for round in 0..200 {
            let masks = make_masks(round, &participants, &seeds, 8).unwrap();
            for id in &participants {
                let share = mask_share(*id, round, &[0.0; 8], &masks[id]).unwrap();
                for x in share.masked_vector {
                    counts[(x >> 60) as usize] += 1;
                    total += 1;
                }
            }
        }
        let expected = total as f64 / 16.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 15 degrees of freedom; 99.9th percentile ≈ 37.7
        assert!(chi2 < 37.7, "chi2 = {chi2}");
    }

    #[test]
    fn prg_is_a_pure_function_of_its_inputs() {
        assert_eq!(prg(1, 2, 3), prg(1, 2, 3));
        assert_ne!(prg(1, 2, 3), prg(1, 2, 4));
        assert_ne!(prg(1, 2, 3), prg(1, 3, 3));
        assert_ne!(prg(1, 2, 3), prg(2, 2, 3));
    }
}
