//! Run configuration: TOML files, dotted-path overrides, validation.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ccf::CcfConfig;
use crate::eame::{EnergyCost, EnergyTrace, Thresholds};
use crate::error::{Error, Result};
use crate::node::NodeConfig;
use crate::privacy::DpParams;
use crate::sim::Scenario;
use crate::space::{Metric, SharedSpaceConfig};
use crate::task::TaskFamilyConfig;

/// Environment variable naming the directory searched for bundled configs.
pub const CONFIG_DIR_ENV: &str = "CCFSIM_CONFIG_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceSection {
    pub d_pattern: usize,
    pub clip_radius: f64,
    pub metric: Metric,
}

impl Default for SpaceSection {
    fn default() -> Self {
        Self {
            d_pattern: 8,
            clip_radius: 10.0,
            metric: Metric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpSection {
    pub epsilon: f64,
    pub delta: f64,
    pub rounds_budget: u64,
    /// Explicit noise level; must not fall below the calibrated minimum.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl Default for DpSection {
    fn default() -> Self {
        Self {
            epsilon: 500.0,
            delta: 1e-5,
            rounds_budget: 10_000,
            sigma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    pub enabled: bool,
    /// CSV trace; relative paths resolve against the config file's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    pub slots_per_round: usize,
    pub intensity_learn: f64,
    pub intensity_sync: f64,
    pub energy_cost: EnergyCost,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        let th = Thresholds::default();
        Self {
            enabled: false,
            trace: None,
            slots_per_round: 24,
            intensity_learn: th.intensity_learn,
            intensity_sync: th.intensity_sync,
            energy_cost: EnergyCost::default(),
        }
    }
}

impl SchedulerSection {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            intensity_learn: self.intensity_learn,
            intensity_sync: self.intensity_sync,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricsGranularity {
    #[default]
    PerRound,
    Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub path: String,
    pub metrics_granularity: MetricsGranularity,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            path: "ccf-out".into(),
            metrics_granularity: MetricsGranularity::PerRound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub space: SpaceSection,
    pub task: TaskFamilyConfig,
    pub node: NodeConfig,
    pub ccf: CcfConfig,
    pub dp: DpSection,
    pub scheduler: SchedulerSection,
    pub scenario: Scenario,
    pub output: OutputSection,
}

/// One `section.key=value` assignment. The value is read as a TOML literal,
/// falling back to a bare string.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: toml::Value,
}

impl std::str::FromStr for Override {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::config(s, "override must have the form section.key=value"))?;
        let key = key.trim();
        let path: Vec<String> = key.split('.').map(str::to_owned).collect();
        if path.len() < 2 || path.iter().any(String::is_empty) {
            return Err(Error::config(key, "override key must be a dotted path section.key"));
        }
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
        Ok(Override { path, value })
    }
}

fn apply_override(table: &mut toml::Table, ov: &Override) -> Result<()> {
    let key = ov.path.join(".");
    let (last, parents) = ov.path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(&key, format!("`{p}` is not a section")))?;
    }
    cur.insert(last.clone(), ov.value.clone());
    Ok(())
}

fn first_line(msg: &str) -> String {
    msg.lines().find(|l| !l.trim().is_empty()).unwrap_or(msg).trim().to_owned()
}

/// Deserializes one section, naming the first offending key on failure.
fn section<T: DeserializeOwned + Default>(name: &str, value: Option<toml::Value>) -> Result<T> {
    let Some(value) = value else {
        return Ok(T::default());
    };
    let toml::Value::Table(table) = value else {
        return Err(Error::config(name, "expected a table"));
    };
    match toml::Value::Table(table.clone()).try_into::<T>() {
        Ok(v) => Ok(v),
        Err(whole) => {
            for (k, v) in table {
                let mut one = toml::Table::new();
                one.insert(k.clone(), v);
                if let Err(e) = toml::Value::Table(one).try_into::<T>() {
                    return Err(Error::config(format!("{name}.{k}"), first_line(&e.to_string())));
                }
            }
            Err(Error::config(name, first_line(&whole.to_string())))
        }
    }
}

impl RunConfig {
    pub fn from_table(mut table: toml::Table, overrides: &[Override]) -> Result<Self> {
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        const SECTIONS: [&str; 8] = ["space", "task", "node", "ccf", "dp", "scheduler", "scenario", "output"];
        if let Some(k) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(Error::config(k.as_str(), "unknown section"));
        }
        let cfg = RunConfig {
            space: section("space", table.remove("space"))?,
            task: section("task", table.remove("task"))?,
            node: section("node", table.remove("node"))?,
            ccf: section("ccf", table.remove("ccf"))?,
            dp: section("dp", table.remove("dp"))?,
            scheduler: section("scheduler", table.remove("scheduler"))?,
            scenario: section("scenario", table.remove("scenario"))?,
            output: section("output", table.remove("output"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str, overrides: &[Override]) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", first_line(&e.to_string())))?;
        Self::from_table(table, overrides)
    }

    /// Reads a TOML file, applies overrides, resolves the trace path against
    /// the file's directory and validates.
    pub fn load(path: &Path, overrides: &[Override]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(trace) = &cfg.scheduler.trace {
            let p = Path::new(trace);
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.scheduler.trace = Some(base.join(p).to_string_lossy().into_owned());
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.space.d_pattern == 0 {
            return Err(Error::config("space.d_pattern", "must be positive"));
        }
        if !(self.space.clip_radius > 0.0 && self.space.clip_radius.is_finite()) {
            return Err(Error::config("space.clip_radius", "must be a positive finite real"));
        }
        self.task.validate()?;
        self.node.validate()?;
        self.ccf.validate()?;
        self.dp_params()?;
        self.scenario.validate()?;
        if self.scheduler.slots_per_round == 0 {
            return Err(Error::config("scheduler.slots_per_round", "must be positive"));
        }
        self.scheduler.thresholds().validate()?;
        self.scheduler.energy_cost.validate()?;
        if self.scheduler.enabled && self.scheduler.trace.is_none() {
            return Err(Error::config("scheduler.trace", "required when scheduler.enabled = true"));
        }
        if let Some(p) = &self.scenario.planted {
            if p.task_type >= self.task.k_types {
                return Err(Error::config("scenario.planted.task_type", "must be below task.k_types"));
            }
        }
        Ok(())
    }

    pub fn dp_params(&self) -> Result<DpParams> {
        let d = &self.dp;
        match d.sigma {
            Some(s) => DpParams::with_sigma(d.epsilon, d.delta, self.space.clip_radius, s, d.rounds_budget),
            None => DpParams::calibrated(d.epsilon, d.delta, self.space.clip_radius, d.rounds_budget),
        }
    }

    pub fn shared_space(&self) -> Result<SharedSpaceConfig> {
        let mut s = SharedSpaceConfig::new(
            self.space.d_pattern,
            self.task.k_types + 1,
            self.space.clip_radius,
            self.dp_params()?.sigma(),
        )?;
        s.metric = self.space.metric;
        Ok(s)
    }

    /// The trace named by the scheduler section, if it is enabled.
    pub fn load_trace(&self) -> Result<Option<EnergyTrace>> {
        if !self.scheduler.enabled {
            return Ok(None);
        }
        let path = self.scheduler.trace.as_deref().expect("validated");
        EnergyTrace::load(Path::new(path)).map(Some)
    }
}

/// Directory holding bundled configs: `$CCFSIM_CONFIG_DIR` if set, else the
/// crate's `configs/` directory.
pub fn config_dir() -> PathBuf {
    std::env::var_os(CONFIG_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/configs")))
}

/// Resolves `name` as a path, or as `<config_dir>/<name>.toml`.
pub fn resolve_config(name: &str) -> PathBuf {
    let p = PathBuf::from(name);
    if p.exists() {
        return p;
    }
    let bundled = config_dir().join(format!("{name}.toml"));
    if bundled.exists() {
        bundled
    } else {
        p
    }
}

pub const BUNDLED: [&str; 4] = ["default", "adversarial", "planted_expert", "energy"];

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(s: &str) -> Override {
        s.parse().unwrap()
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml_str("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip_preserves_parameters() {
        let mut cfg = RunConfig::default();
        cfg.ccf.rho = Some(2.25);
        cfg.dp.sigma = Some(1.0);
        cfg.task.type_mix = vec![0.2, 0.3, 0.5];
        cfg.scenario.seed = 0xDEAD_BEEF_1234;
        let text = cfg.to_toml_string();
        let again = RunConfig::from_toml_str(&text, &[]).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml_string(), text);
    }

    #[test]
    fn overrides_apply_after_load() {
        let cfg = RunConfig::from_toml_str("[ccf]\nbeta = 0.9\n", &[ov("ccf.beta=0"), ov("scheduler.energy_cost.learn=1.5")])
            .unwrap();
        assert_eq!(cfg.ccf.beta, 0.0);
        assert_eq!(cfg.scheduler.energy_cost.learn, 1.5);
        let cfg = RunConfig::from_toml_str("", &[ov("output.metrics_granularity=summary")]).unwrap();
        assert_eq!(cfg.output.metrics_granularity, MetricsGranularity::Summary);
    }

    #[test]
    fn errors_name_the_key() {
        let key = |r: Result<RunConfig>| match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(key(RunConfig::from_toml_str("[ccf]\nbeta = \"x\"\n", &[])), "ccf.beta");
        assert_eq!(key(RunConfig::from_toml_str("[ccf]\nbogus = 1\n", &[])), "ccf.bogus");
        assert_eq!(key(RunConfig::from_toml_str("[nope]\n", &[])), "nope");
        assert_eq!(key(RunConfig::from_toml_str("[space]\nclip_radius = -1.0\n", &[])), "space.clip_radius");
        assert_eq!(
            key(RunConfig::from_toml_str("", &[ov("scheduler.intensity_learn=10.0")])),
            "scheduler.intensity_learn"
        );
        assert_eq!(key(RunConfig::from_toml_str("", &[ov("dp.sigma=0.0001")])), "dp.sigma");
        assert_eq!(key(RunConfig::from_toml_str("", &[ov("scheduler.enabled=true")])), "scheduler.trace");
        assert!("novalue".parse::<Override>().is_err());
        assert!("flat=1".parse::<Override>().is_err());
    }

    #[test]
    fn bundled_configs_load() {
        for name in BUNDLED {
            let cfg = RunConfig::load(&resolve_config(name), &[]).unwrap();
            if cfg.scheduler.enabled {
                assert!(cfg.load_trace().unwrap().is_some());
            }
            let text = cfg.to_toml_string();
            assert_eq!(RunConfig::from_toml_str(&text, &[]).unwrap(), cfg);
        }
    }
}
