//! Energy-adaptive scheduling of protocol rounds against a carbon trace.
//!
//! Each slot is classified by its carbon intensity. Each protocol round is a
//! deferrable job with a release/deadline window; the greedy planner puts it
//! on the cleanest slot in its window whose mode admits the job's kind.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const TRACE_HEADER: [&str; 3] = ["timestamp_h", "carbon_gco2_per_kwh", "renewable_fraction"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergySlot {
    #[serde(rename = "timestamp_h")]
    pub timestamp_h: i64,
    #[serde(rename = "carbon_gco2_per_kwh")]
    pub carbon_intensity: f64,
    pub renewable_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTrace {
    pub slots: Vec<EnergySlot>,
    pub resolution_h: i64,
}

impl EnergyTrace {
    pub fn new(slots: Vec<EnergySlot>) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::Trace("trace has no slots".into()));
        }
        let resolution_h = if slots.len() > 1 {
            slots[1].timestamp_h - slots[0].timestamp_h
        } else {
            1
        };
        if resolution_h <= 0 {
            return Err(Error::Trace("timestamps must be strictly increasing".into()));
        }
        for (i, w) in slots.windows(2).enumerate() {
            if w[1].timestamp_h - w[0].timestamp_h != resolution_h {
                return Err(Error::Trace(format!("non-uniform spacing at row {}", i + 2)));
            }
        }
        for (i, s) in slots.iter().enumerate() {
            if !(s.carbon_intensity >= 0.0 && s.carbon_intensity.is_finite()) {
                return Err(Error::Trace(format!("row {}: intensity must be finite and >= 0", i + 1)));
            }
            if !(0.0..=1.0).contains(&s.renewable_fraction) {
                return Err(Error::Trace(format!("row {}: renewable_fraction outside [0, 1]", i + 1)));
            }
        }
        Ok(Self { slots, resolution_h })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn intensity(&self, slot: usize) -> f64 {
        self.slots[slot].carbon_intensity
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Trace(e.to_string()))?;
        if header.iter().map(str::trim).ne(TRACE_HEADER) {
            return Err(Error::Trace(format!(
                "expected header `{}`",
                TRACE_HEADER.join(",")
            )));
        }
        let slots = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<EnergySlot>, _>>()
            .map_err(|e| Error::Trace(e.to_string()))?;
        Self::new(slots)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn write(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for s in &self.slots {
            w.serialize(s).map_err(|e| Error::Trace(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Trace(e.to_string()))?;
        Ok(())
    }

    /// Repeats the trace until it has at least `len` slots, continuing the
    /// timestamp sequence.
    pub fn tiled(&self, len: usize) -> EnergyTrace {
        let n = self.slots.len();
        let t0 = self.slots[0].timestamp_h;
        let slots = (0..len.max(n))
            .map(|i| EnergySlot {
                timestamp_h: t0 + i as i64 * self.resolution_h,
                ..self.slots[i % n]
            })
            .collect();
        EnergyTrace {
            slots,
            resolution_h: self.resolution_h,
        }
    }

    pub fn scaled(&self, factor: f64) -> EnergyTrace {
        let mut t = self.clone();
        for s in &mut t.slots {
            s.carbon_intensity *= factor;
        }
        t
    }

    /// Daily sinusoid with Gaussian jitter, hourly slots.
    pub fn sinusoidal(spec: &SinusoidSpec, seed: u64) -> EnergyTrace {
        let mut r = rng::stream(&[seed, 0xEA3E]);
        let peak = spec.mean + spec.amplitude;
        let slots = (0..spec.slots)
            .map(|i| {
                let phase = std::f64::consts::TAU * (i as f64 + spec.phase_h) / spec.period_h;
                let jitter: f64 = r.sample(StandardNormal);
                let c = (spec.mean + spec.amplitude * phase.sin() + spec.jitter * jitter).max(0.0);
                EnergySlot {
                    timestamp_h: i as i64,
                    carbon_intensity: c,
                    renewable_fraction: (1.0 - c / peak.max(1e-12)).clamp(0.0, 1.0),
                }
            })
            .collect();
        EnergyTrace {
            slots,
            resolution_h: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinusoidSpec {
    pub slots: usize,
    pub mean: f64,
    pub amplitude: f64,
    pub period_h: f64,
    pub phase_h: f64,
    pub jitter: f64,
}

impl Default for SinusoidSpec {
    fn default() -> Self {
        Self {
            slots: 24,
            mean: 300.0,
            amplitude: 150.0,
            period_h: 24.0,
            phase_h: 0.0,
            jitter: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    InferOnly,
    Learn,
    Sync,
    Consolidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobKind {
    Learn,
    Sync,
    Consolidate,
}

impl JobKind {
    pub fn mode(self) -> Mode {
        match self {
            JobKind::Learn => Mode::Learn,
            JobKind::Sync => Mode::Sync,
            JobKind::Consolidate => Mode::Consolidate,
        }
    }

    /// Whether a slot classified as `slot_mode` may host this job.
    pub fn admitted_by(self, slot_mode: Mode) -> bool {
        match self {
            JobKind::Learn => slot_mode >= Mode::Learn,
            JobKind::Sync | JobKind::Consolidate => slot_mode >= Mode::Sync,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub intensity_learn: f64,
    pub intensity_sync: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            intensity_learn: 400.0,
            intensity_sync: 250.0,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("scheduler.intensity_sync", self.intensity_sync),
            ("scheduler.intensity_learn", self.intensity_learn),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be finite and >= 0"));
            }
        }
        if !(self.intensity_learn >= self.intensity_sync) {
            return Err(Error::config(
                "scheduler.intensity_learn",
                "must be >= scheduler.intensity_sync",
            ));
        }
        Ok(())
    }
}

/// SYNC when intensity ≤ the sync threshold, LEARN when ≤ the learn
/// threshold, INFER_ONLY otherwise.
pub fn classify_slot(slot: &EnergySlot, th: &Thresholds) -> Mode {
    if slot.carbon_intensity <= th.intensity_sync {
        Mode::Sync
    } else if slot.carbon_intensity <= th.intensity_learn {
        Mode::Learn
    } else {
        Mode::InferOnly
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyCost {
    pub infer_only: f64,
    pub learn: f64,
    pub sync: f64,
    pub consolidate: f64,
}

impl Default for EnergyCost {
    fn default() -> Self {
        Self {
            infer_only: 0.0,
            learn: 0.02,
            sync: 0.05,
            consolidate: 0.2,
        }
    }
}

impl EnergyCost {
    pub fn of(&self, mode: Mode) -> f64 {
        match mode {
            Mode::InferOnly => self.infer_only,
            Mode::Learn => self.learn,
            Mode::Sync => self.sync,
            Mode::Consolidate => self.consolidate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("infer_only", self.infer_only),
            ("learn", self.learn),
            ("sync", self.sync),
            ("consolidate", self.consolidate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("scheduler.energy_cost.{k}"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub id: u64,
    pub kind: JobKind,
    pub release_slot: usize,
    pub deadline_slot: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub job: Job,
    pub slot: usize,
    /// No admissible slot existed in the window; the job runs at its deadline.
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityPlan {
    pub modes: Vec<Mode>,
    pub assignments: Vec<Assignment>,
    pub energy_cost: EnergyCost,
}

impl ActivityPlan {
    pub fn violations(&self) -> impl Iterator<Item = &Assignment> {
        self.assignments.iter().filter(|a| a.violation)
    }

    pub fn n_violations(&self) -> usize {
        self.violations().count()
    }

    pub fn slot_of(&self, job_id: u64) -> Option<usize> {
        self.assignments.iter().find(|a| a.job.id == job_id).map(|a| a.slot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Cleanest admissible slot, ties to the earliest.
    Greedy,
    /// Earliest admissible slot.
    Earliest,
}

pub fn eligible_slots<'a>(
    trace: &'a EnergyTrace,
    job: &'a Job,
    th: &'a Thresholds,
) -> impl Iterator<Item = usize> + 'a {
    (job.release_slot..=job.deadline_slot.min(trace.len().saturating_sub(1)))
        .filter(move |&s| job.kind.admitted_by(classify_slot(&trace.slots[s], th)))
}

pub fn schedule_with(
    policy: Policy,
    trace: &EnergyTrace,
    jobs: &[Job],
    th: &Thresholds,
    energy_cost: EnergyCost,
) -> Result<ActivityPlan> {
    let mut modes = vec![Mode::InferOnly; trace.len()];
    let mut assignments = Vec::with_capacity(jobs.len());
    for job in jobs {
        if job.deadline_slot >= trace.len() || job.release_slot > job.deadline_slot {
            return Err(Error::Trace(format!(
                "job {} window [{}, {}] outside trace horizon of {} slots",
                job.id,
                job.release_slot,
                job.deadline_slot,
                trace.len()
            )));
        }
        let chosen = match policy {
            Policy::Greedy => eligible_slots(trace, job, th)
                .min_by(|&a, &b| trace.intensity(a).total_cmp(&trace.intensity(b)).then(a.cmp(&b))),
            Policy::Earliest => eligible_slots(trace, job, th).next(),
        };
        let (slot, violation) = match chosen {
            Some(s) => (s, false),
            None => (job.deadline_slot, true),
        };
        modes[slot] = modes[slot].max(job.kind.mode());
        assignments.push(Assignment {
            job: *job,
            slot,
            violation,
        });
    }
    Ok(ActivityPlan {
        modes,
        assignments,
        energy_cost,
    })
}

pub fn schedule(trace: &EnergyTrace, jobs: &[Job], th: &Thresholds, energy_cost: EnergyCost) -> Result<ActivityPlan> {
    schedule_with(Policy::Greedy, trace, jobs, th, energy_cost)
}

/// Every slot pays the inference baseline; each job adds its own mode's cost
/// in the slot it runs. Σ_slots [cost(INFER_ONLY) + Σ_jobs cost(kind)] · I · n.
pub fn plan_carbon(plan: &ActivityPlan, trace: &EnergyTrace, active_nodes: usize) -> f64 {
    let n = active_nodes as f64;
    let base: f64 = (0..plan.modes.len())
        .map(|s| plan.energy_cost.infer_only * trace.intensity(s))
        .sum();
    let jobs: f64 = plan
        .assignments
        .iter()
        .map(|a| plan.energy_cost.of(a.job.kind.mode()) * trace.intensity(a.slot))
        .sum();
    (base + jobs) * n
}

/// One job per protocol round, round r owning slots [r·w, (r+1)·w − 1].
pub fn round_jobs(kinds: &[JobKind], window: usize) -> Vec<Job> {
    kinds
        .iter()
        .enumerate()
        .map(|(r, &kind)| Job {
            id: r as u64,
            kind,
            release_slot: r * window,
            deadline_slot: (r + 1) * window - 1,
        })
        .collect()
}
