use ccf_sim::config::RunConfig;
use ccf_sim::experiments;
use ccf_sim::sim::{self, RunOptions};

fn default_cfg() -> RunConfig {
    experiments::load_bundled("default").unwrap()
}

#[test]
fn participation_rate_matches_probability() {
    let mut cfg = default_cfg();
    cfg.scenario.participation_prob = 0.5;
    cfg.scenario.n_nodes = 20;
    cfg.scenario.rounds = 200;
    let out = sim::run(&cfg, &RunOptions::default()).unwrap();
    let mean = out.metrics.iter().map(|m| m.n_participants as f64).sum::<f64>() / 200.0;
    let sigma = (20.0f64 * 0.25).sqrt() / 200f64.sqrt();
    assert!((mean - 10.0).abs() <= 3.0 * sigma, "mean {mean}, sigma {sigma}");
    assert!((out.summary.mean_participants - mean).abs() < 1e-12);
}

#[test]
fn honest_loss_decreases_over_the_run() {
    let out = sim::run(&default_cfg(), &RunOptions::default()).unwrap();
    let first = out.metrics.first().unwrap().mean_loss;
    let last = out.metrics.last().unwrap().mean_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let mut cfg = default_cfg();
    cfg.scenario.rounds = 40;
    let a = sim::run(&cfg, &RunOptions::default()).unwrap();
    let b = sim::run(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(a.transcript.to_jsonl(), b.transcript.to_jsonl());
    assert_eq!(a.loss_trajectory, b.loss_trajectory);
}

#[test]
fn toml_round_trip_reproduces_the_run() {
    let cfg = experiments::load_bundled("energy").unwrap();
    let text = cfg.to_toml_string();
    let mut back = RunConfig::from_toml_str(&text, &[]).unwrap();
    back.scheduler.trace = cfg.scheduler.trace.clone();
    assert_eq!(back, cfg);
}
