//! Acceptance suite. Runs every criterion at its pinned tolerance, prints one
//! PASS/FAIL line each and exits nonzero if any fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccf_sim::config::{RunConfig, BUNDLED};
use ccf_sim::eame::{ActivityPlan, EnergyTrace};
use ccf_sim::experiments::{self, FROZEN_PROPAGATION_GAP};
use ccf_sim::privacy::{self, DpParams, PairwiseSeeds};
use ccf_sim::sim::{self, AdversarySpec, Behavior, RunOptions};
use ccf_sim::space::{self, Artifact, CcfSnapshot, NodeId, NodeTag};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bundled(name: &str) -> RunConfig {
    experiments::load_bundled(name).expect("bundled config loads")
}

fn run(cfg: &RunConfig) -> sim::RunOutput {
    sim::run(cfg, &RunOptions::default()).expect("run succeeds")
}

fn secure_aggregation() -> Outcome {
    let mut fails = Vec::new();
    let mut cases = 0;
    for n in 2u32..=16 {
        for seeding in 0..100u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seeding * 131 + n as u64);
            let ids: Vec<NodeId> = (0..n).map(NodeId).collect();
            let dim = r.random_range(1..12usize);
            let round = r.random::<u32>() as u64;
            let seeds = PairwiseSeeds::derive(r.random(), &ids);
            let vectors: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| r.random_range(-20.0..20.0)).collect())
                .collect();
            let masks = privacy::make_masks(round, &ids, &seeds, dim).unwrap();
            let shares: Vec<_> = ids
                .iter()
                .zip(&vectors)
                .map(|(id, v)| privacy::mask_share(*id, round, v, &masks[id]).unwrap())
                .collect();
            let plain = |live: &dyn Fn(u32) -> bool| -> Vec<u64> {
                let mut acc = vec![0u64; dim];
                for (i, v) in vectors.iter().enumerate() {
                    if live(i as u32) {
                        for (a, x) in acc.iter_mut().zip(privacy::encode_vector(v).unwrap()) {
                            *a = a.wrapping_add(x);
                        }
                    }
                }
                acc
            };
            cases += 1;
            let full = privacy::aggregate_masked(&shares, &BTreeSet::new(), &seeds).unwrap();
            if full.lattice != plain(&|_| true) {
                fails.push(format!("n={n} seeding={seeding} full"));
            }
            for drop in 0..n {
                cases += 1;
                let live: Vec<_> = shares.iter().filter(|s| s.node_id.0 != drop).cloned().collect();
                let agg = privacy::aggregate_masked(&live, &[NodeId(drop)].into(), &seeds).unwrap();
                if agg.lattice != plain(&|i| i != drop) {
                    fails.push(format!("n={n} seeding={seeding} drop={drop}"));
                }
            }
        }
    }
    check(fails.is_empty(), format!("{cases} aggregates bitwise exact, {} mismatches", fails.len()))
}

fn brute_dispersion(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
    }
    s / (n * (n - 1)) as f64
}

fn snapshot(points: &[Vec<f64>], split: usize) -> CcfSnapshot {
    let mut s = CcfSnapshot::empty(0);
    for (i, p) in points.iter().enumerate() {
        s.artifacts.push(Artifact::new(0, NodeTag(i as u64), p[..split].to_vec(), p[split..].to_vec(), 1.0).unwrap());
    }
    s
}

fn dispersion_oracle() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.random_range(2..25usize);
        let d = r.random_range(2..12usize);
        let scale = r.random_range(0.1..10.0);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| r.random_range(-scale..scale)).collect())
            .collect();
        let got = space::dispersion(&snapshot(&pts, d / 2)).unwrap();
        worst = worst.max((got - brute_dispersion(&pts)).abs());
    }
    let hand = space::dispersion(&snapshot(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], 1)).unwrap();
    let hand_err = (hand - 4.0 / 3.0).abs();
    check(
        worst <= 1e-10 && hand_err <= 1e-10,
        format!("max |err| {worst:.2e} over 1000 snapshots, hand case {hand}"),
    )
}

fn dp_calibration() -> Outcome {
    let mut problems = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let eps = r.random_range(0.1..1000.0);
        let delta = 10f64.powf(r.random_range(-9.0..-2.0));
        let c = r.random_range(0.1..20.0);
        let floor = c * (2.0 * (1.25 / delta).ln()).sqrt() / eps;
        let dp = DpParams::calibrated(eps, delta, c, 10).unwrap();
        if dp.sigma() < floor * (1.0 - 1e-12) {
            problems.push(format!("calibrated sigma {} below floor {floor}", dp.sigma()));
        }
        if DpParams::with_sigma(eps, delta, c, floor * 0.99, 10).is_ok() {
            problems.push(format!("sigma below floor accepted at eps={eps}"));
        }
    }
    let mut worst = 0.0f64;
    for name in BUNDLED {
        let cfg = bundled(name);
        let dp = cfg.dp_params().unwrap();
        let dim = cfg.shared_space().unwrap().artifact_dim();
        let stds = experiments::noise_std_estimate(&dp, dim, 10_000, cfg.scenario.seed).unwrap();
        for s in stds {
            worst = worst.max((s / dp.sigma() - 1.0).abs());
        }
        let out = run(&cfg);
        let report = ccf_sim::audit::audit_lines(&out.transcript.lines, &out.private_ledger).unwrap();
        if !report.clean() || report.floats_scanned == 0 {
            problems.push(format!("{name}: {} leaks in {} floats", report.leaks.len(), report.floats_scanned));
        }
    }
    if worst > 0.05 {
        problems.push(format!("noise std off by {worst:.4}"));
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("floor holds, worst std rel error {worst:.4}, audits clean on {} scenarios", BUNDLED.len())
        } else {
            problems.join("; ")
        },
    )
}

fn propagation() -> Outcome {
    let cfg = bundled("planted_expert");
    let m = experiments::propagation_measure(&cfg).unwrap();
    let drift = (m.gap - FROZEN_PROPAGATION_GAP).abs();
    check(
        m.gap > 0.0 && drift <= 1e-9,
        format!(
            "type-{} loss {:.6} vs control {:.6}, gap {:.6} (frozen {FROZEN_PROPAGATION_GAP})",
            m.task_type, m.planted_loss, m.control_loss, m.gap
        ),
    )
}

fn noise_suppression() -> Outcome {
    let m = experiments::robustness_measure(&bundled("adversarial"), 0.2).unwrap();
    check(
        experiments::robustness_passes(&m),
        format!(
            "deviation {:.4} <= {}, adversary rep max {:.4}, honest rep mean {:.4}",
            m.prior_deviation,
            m.bound,
            m.adversary_reputation_max.unwrap_or(f64::NAN),
            m.honest_reputation_mean.unwrap_or(f64::NAN)
        ),
    )
}

fn validation_gate() -> Outcome {
    let mut liars = bundled("default");
    liars.task.noise_std = 0.0;
    liars.scenario.adversaries = (16..20)
        .map(|node| AdversarySpec {
            node,
            behavior: Behavior::LossLiar,
            onset_round: 0,
        })
        .collect();
    let out = run(&liars);
    let l = out.validation.get(Behavior::LossLiar.label()).cloned().unwrap_or_default();
    let honest = run(&bundled("default")).validation.get("HONEST").cloned().unwrap_or_default();
    let frr = honest.rejected() as f64 / honest.signals.max(1) as f64;
    check(
        l.signals > 0 && l.rejected() == l.signals && honest.signals > 0 && frr <= 0.01,
        format!(
            "LOSS_LIAR rejected {}/{}, honest false rejections {}/{} ({:.3}%)",
            l.rejected(),
            l.signals,
            honest.rejected(),
            honest.signals,
            100.0 * frr
        ),
    )
}

fn non_degeneracy() -> Outcome {
    let out = run(&bundled("default"));
    let min = out.summary.min_post_warmup_disp;
    check(min.is_some_and(|d| d > 0.0), format!("min post-warmup Disp {min:?}"))
}

fn eame_dominance() -> Outcome {
    let cfg = bundled("energy");
    let sample = cfg.load_trace().unwrap().expect("energy config has a trace");
    let cases = experiments::energy_cases(&sample, &cfg.scheduler.thresholds(), cfg.scheduler.energy_cost).unwrap();
    let bad: Vec<&str> = cases
        .iter()
        .filter(|c| !experiments::energy_case_passes(c) || c.oracle_g.is_none())
        .map(|c| c.trace.as_str())
        .collect();
    let feasible = cases.iter().filter(|c| c.feasible).count();
    check(
        cases.len() == 11 && bad.is_empty(),
        format!("{} traces, {feasible} feasible, failing: {bad:?}", cases.len()),
    )
}

fn determinism() -> Outcome {
    let mut problems = Vec::new();
    for name in BUNDLED {
        let cfg = bundled(name);
        let a = run(&cfg).content_hash();
        let b = run(&cfg).content_hash();
        let mut other = cfg.clone();
        other.scenario.seed = cfg.scenario.seed.wrapping_add(1);
        let c = run(&other).content_hash();
        if a != b {
            problems.push(format!("{name}: same seed differs"));
        }
        if a == c {
            problems.push(format!("{name}: different seed collides"));
        }
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{} scenarios reproducible and seed-sensitive", BUNDLED.len())
        } else {
            problems.join("; ")
        },
    )
}

fn schedule_independence() -> Outcome {
    let cfg = bundled("energy");
    let trace = cfg.load_trace().unwrap().expect("energy config has a trace");
    let mut rotated = trace.slots.clone();
    let shift = 5;
    for (i, s) in rotated.iter_mut().enumerate() {
        s.carbon_intensity = trace.slots[(i + shift) % trace.len()].carbon_intensity;
    }
    let other = EnergyTrace::new(rotated).unwrap();
    let a = sim::run_with_trace(&cfg, Some(&trace), &RunOptions::default()).unwrap();
    let b = sim::run_with_trace(&cfg, Some(&other), &RunOptions::default()).unwrap();
    let (pa, pb) = (a.plan.as_ref().unwrap(), b.plan.as_ref().unwrap());
    let slots = |p: &ActivityPlan| p.assignments.iter().map(|x| x.slot).collect::<Vec<_>>();
    let differ = slots(pa) != slots(pb);
    let clean = pa.n_violations() == 0 && pb.n_violations() == 0;
    let same = a.loss_trajectory == b.loss_trajectory;
    check(
        differ && clean && same && !a.loss_trajectory.is_empty(),
        format!(
            "plans differ: {differ}, violation-free: {clean}, {} rounds of per-type loss identical: {same}",
            a.loss_trajectory.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("secure aggregation exactness", secure_aggregation),
        ("dispersion oracle", dispersion_oracle),
        ("DP calibration and privacy boundary", dp_calibration),
        ("knowledge propagation", propagation),
        ("noise suppression", noise_suppression),
        ("validation gate", validation_gate),
        ("non-degeneracy", non_degeneracy),
        ("EAME dominance", eame_dominance),
        ("determinism", determinism),
        ("schedule independence", schedule_independence),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{:>2}] {name}: {detail} ({:.1}s)", i + 1, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
