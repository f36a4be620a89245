//! Quadratic tracking tasks.
//!
//! A task of type `k` asks for a strategy vector close to a hidden target drawn
//! around a per-type cluster centre. `solve` takes one gradient step on
//! `‖p − target‖²` and reports the resulting loss through additive Gaussian
//! observation noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::space::euclidean;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_type: usize,
    pub target: Vec<f64>,
    pub noise_std: f64,
    pub task_id: u64,
}

impl Task {
    /// Task-space metric: Euclidean distance between targets.
    pub fn distance(&self, other: &Task) -> f64 {
        euclidean(&self.target, &other.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub task_id: u64,
    pub achieved_loss: f64,
    pub loss_before: f64,
    pub strategy_used: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskFamilyConfig {
    pub k_types: usize,
    /// Std of each coordinate of a cluster centre around the origin.
    pub center_scale: f64,
    /// Std of each target coordinate around its cluster centre.
    pub target_spread: f64,
    /// Std of the observation noise on reported loss.
    pub noise_std: f64,
    /// Task-type probabilities; empty means uniform.
    pub type_mix: Vec<f64>,
}

impl Default for TaskFamilyConfig {
    fn default() -> Self {
        Self {
            k_types: 3,
            center_scale: 1.0,
            target_spread: 1.0,
            noise_std: 0.03,
            type_mix: Vec::new(),
        }
    }
}

impl TaskFamilyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_types == 0 {
            return Err(Error::config("task.k_types", "must be positive"));
        }
        for (key, v) in [
            ("task.center_scale", self.center_scale),
            ("task.target_spread", self.target_spread),
            ("task.noise_std", self.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a non-negative finite real"));
            }
        }
        if !self.type_mix.is_empty() {
            if self.type_mix.len() != self.k_types {
                return Err(Error::config("task.type_mix", "length must equal task.k_types"));
            }
            check_probability_vector(&self.type_mix)?;
        }
        Ok(())
    }

    pub fn effective_mix(&self) -> Vec<f64> {
        if self.type_mix.is_empty() {
            vec![1.0 / self.k_types as f64; self.k_types]
        } else {
            self.type_mix.clone()
        }
    }
}

pub fn check_probability_vector(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::config("task.type_mix", "entries must be non-negative reals"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "task.type_mix",
            format!("probabilities sum to {total}, expected 1"),
        ));
    }
    Ok(())
}

/// Draws an index from a probability vector.
pub fn sample_type(rng: &mut impl Rng, type_mix: &[f64]) -> Result<usize> {
    check_probability_vector(type_mix)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in type_mix.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // u landed in the rounding slack above the last cumulative sum
    Ok(type_mix
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(type_mix.len() - 1))
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Cluster centres fixed by the run seed, plus the sampling parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskFamily {
    pub config: TaskFamilyConfig,
    pub d_pattern: usize,
    pub centers: Vec<Vec<f64>>,
    mix: Vec<f64>,
}

impl TaskFamily {
    pub fn new(config: TaskFamilyConfig, d_pattern: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(&[seed, domain::TASK_CENTERS]);
        let centers = (0..config.k_types)
            .map(|_| {
                (0..d_pattern)
                    .map(|_| config.center_scale * gaussian(&mut rng))
                    .collect()
            })
            .collect();
        let mix = config.effective_mix();
        Ok(Self {
            config,
            d_pattern,
            centers,
            mix,
        })
    }

    pub fn k_types(&self) -> usize {
        self.config.k_types
    }

    pub fn type_mix(&self) -> &[f64] {
        &self.mix
    }

    pub fn sample_task(&self, rng: &mut impl Rng, task_id: u64) -> Result<Task> {
        let task_type = sample_type(rng, &self.mix)?;
        let spread = self.config.target_spread;
        let target = self.centers[task_type]
            .iter()
            .map(|c| c + spread * gaussian(rng))
            .collect();
        Ok(Task {
            task_type,
            target,
            noise_std: self.config.noise_std,
            task_id,
        })
    }

    /// Expected loss of `row` on a fresh task of `task_type`:
    /// `‖row − centre‖² + d·spread²`.
    pub fn expected_loss(&self, task_type: usize, row: &[f64]) -> f64 {
        let c = &self.centers[task_type];
        let bias: f64 = row.iter().zip(c).map(|(p, q)| (p - q) * (p - q)).sum();
        bias + self.d_pattern as f64 * self.config.target_spread.powi(2)
    }
}

pub fn quadratic_loss(strategy: &[f64], target: &[f64]) -> f64 {
    strategy
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}

/// `p − a·2(p − target)`.
pub fn gradient_step(strategy: &[f64], target: &[f64], step_size: f64) -> Vec<f64> {
    strategy
        .iter()
        .zip(target)
        .map(|(p, t)| p - step_size * 2.0 * (p - t))
        .collect()
}

/// One gradient step from `strategy` on `task`, with noisy loss reporting.
///
/// Exactly one standard-normal draw is consumed from `rng` per call regardless
/// of `noise_std`.
pub fn solve(task: &Task, strategy: &[f64], step_size: f64, rng: &mut impl Rng) -> Result<Outcome> {
    if strategy.len() != task.target.len() {
        return Err(Error::DimensionMismatch {
            expected: task.target.len(),
            got: strategy.len(),
        });
    }
    let loss_before = quadratic_loss(strategy, &task.target);
    let stepped = gradient_step(strategy, &task.target, step_size);
    let noise = gaussian(rng);
    let achieved_loss = (quadratic_loss(&stepped, &task.target) + task.noise_std * noise).max(0.0);
    Ok(Outcome {
        task_id: task.task_id,
        achieved_loss,
        loss_before,
        strategy_used: strategy.to_vec(),
    })
}
