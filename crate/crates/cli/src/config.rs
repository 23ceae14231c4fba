//! Run configuration files.
//!
//! A config is a TOML document whose tables mirror [`RunConfig`]. Only `mode`
//! and `[env]` are required; every other key has a default. Frame size and
//! action count of the network come from the environment; giving them is
//! allowed only when they agree with it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use varbranch::envs::{EnvConfig, NoiseSpec};
use varbranch::losses::{LossWeights, ValueLoss};
use varbranch::model::NetworkConfig;
use varbranch::trainer::{TrainSetup, TrainerConfig};

use crate::error::{CliError, Result};

/// Which model a training cell uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Variance branch on, Gaussian negative log-likelihood value loss.
    Variance,
    /// No variance branch, squared-error value loss.
    Baseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Variance => "variance",
            Mode::Baseline => "baseline",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The modes a run trains. `both` trains every seed once per mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSelection {
    Variance,
    Baseline,
    Both,
}

impl ModeSelection {
    pub fn modes(self) -> Vec<Mode> {
        match self {
            ModeSelection::Variance => vec![Mode::Variance],
            ModeSelection::Baseline => vec![Mode::Baseline],
            ModeSelection::Both => vec![Mode::Variance, Mode::Baseline],
        }
    }
}

impl std::str::FromStr for ModeSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "variance" => Ok(Self::Variance),
            "baseline" => Ok(Self::Baseline),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown mode `{other}`; expected variance, baseline or both")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Score that counts as converged; defaults per environment.
    pub threshold: Option<f64>,
    /// Trailing evaluation points averaged into a seed's final score.
    pub final_window: usize,
    /// Dump feature maps at every n-th evaluation; 0 disables dumps.
    pub feature_map_every: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { threshold: None, final_window: 5, feature_map_every: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: ModeSelection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub report: ReportConfig,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Keys of `[network]` that are derived from the environment.
const ENV_DERIVED: [&str; 4] = ["frames", "height", "width", "actions"];

impl RunConfig {
    /// A config with every default for the given environment and mode.
    pub fn new(env: EnvConfig, mode: ModeSelection) -> Self {
        let mut cfg = Self {
            mode,
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            env,
            noise: NoiseSpec::default(),
            network: NetworkConfig::default(),
            trainer: TrainerConfig::default(),
            loss: LossWeights::default(),
            report: ReportConfig::default(),
        };
        cfg.fit_network_to_env().expect("default environments build");
        cfg
    }

    /// Copies frame size and action count from the environment into `network`.
    pub fn fit_network_to_env(&mut self) -> Result<()> {
        self.network = self.setup(Mode::Baseline, 0)?.network;
        self.network.variance_branch = NetworkConfig::default().variance_branch;
        Ok(())
    }

    fn env_derived(&self) -> Result<[usize; 4]> {
        let n = self.setup(Mode::Baseline, 0)?.network;
        Ok([n.frames, n.height, n.width, n.actions])
    }

    /// Convergence threshold, falling back to 0.8 of the best achievable
    /// return for environments where that is known up front.
    pub fn threshold(&self) -> f64 {
        self.report.threshold.unwrap_or(match &self.env {
            EnvConfig::Bandit(b) => 0.8 * b.mean,
            EnvConfig::Chain(c) => 0.8 * c.reward,
            EnvConfig::Catch(_) | EnvConfig::GridCollect(_) => 0.8,
        })
    }

    /// Canonical TOML text; the config hash is taken over this. Fields fixed
    /// per cell (the trainer seed and whether the variance branch exists)
    /// are left out.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("run configs always serialize");
        for (section, key) in [("trainer", "seed"), ("network", "variance_branch")] {
            if let Some(t) = table.get_mut(section).and_then(toml::Value::as_table_mut) {
                t.remove(key);
            }
        }
        toml::to_string(&table).expect("tables always serialize")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The training setup of one cell, with the network fitted to the environment.
    pub fn setup(&self, mode: Mode, seed: u64) -> Result<TrainSetup> {
        let mut network = self.network.clone();
        network.variance_branch = mode == Mode::Variance;
        let value_loss = match mode {
            Mode::Variance => ValueLoss::GaussianNll,
            Mode::Baseline => ValueLoss::SquaredError,
        };
        let trainer = TrainerConfig { seed, ..self.trainer.clone() };
        let mut setup = TrainSetup { env: self.env.clone(), noise: self.noise, network, trainer, loss: self.loss, value_loss };
        setup.fit_network_to_env()?;
        Ok(setup)
    }

    /// Checks every invariant that does not depend on how the config was written.
    pub fn validate(&self) -> Result<()> {
        self.validate_keyed().map_err(|(_, m)| CliError::config(m))
    }

    fn validate_keyed(&self) -> Result<(), (&'static str, String)> {
        self.noise.validate().map_err(|e| ("noise.sigma2", e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(("seeds", "seed list must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(("seeds", format!("seed list {:?} repeats a seed", self.seeds)));
        }
        if let Some(t) = self.report.threshold {
            if !t.is_finite() {
                return Err(("report.threshold", format!("threshold must be finite, got {t}")));
            }
        }
        if self.report.final_window == 0 {
            return Err(("report.final_window", "final_window must be at least 1".into()));
        }
        self.trainer.validate().map_err(|e| ("trainer", e.to_string()))?;
        for mode in self.mode.modes() {
            let setup = self.setup(mode, self.seeds[0]).map_err(|e| ("env", e.to_string()))?;
            setup.validate().map_err(|e| ("network", e.to_string()))?;
        }
        Ok(())
    }
}

/// 1-based line of `key` inside table `section` (dotted), if it can be found.
fn locate(src: &str, path: &str) -> Option<usize> {
    let (section, key) = path.rsplit_once('.').unwrap_or(("", path));
    let mut current = String::new();
    let mut header = None;
    for (i, line) in src.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == path {
                header = Some(i + 1);
            }
            continue;
        }
        let Some((lhs, _)) = t.split_once('=') else { continue };
        let lhs = lhs.trim();
        let full = if current.is_empty() { lhs.to_string() } else { format!("{current}.{lhs}") };
        if full == path || (current == section && lhs == key) {
            return Some(i + 1);
        }
    }
    header
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

fn explicit<'a>(table: &'a toml::Table, section: &str, key: &str) -> Option<&'a toml::Value> {
    table.get(section)?.as_table()?.get(key)
}

/// Parses and validates config text. `origin` is used only in messages.
pub fn parse_config_str(src: &str, origin: Option<&Path>) -> Result<RunConfig> {
    let err = |line: Option<usize>, message: String| CliError::Config { path: origin.map(Path::to_path_buf), line, message };
    let mut cfg: RunConfig = toml::from_str(src).map_err(|e| err(e.span().map(|s| line_of_offset(src, s.start)), e.message().to_string()))?;
    let raw: toml::Table = toml::from_str(src).map_err(|e| err(None, e.message().to_string()))?;

    let derived = cfg.env_derived().map_err(|e| err(locate(src, "env"), e.to_string()))?;
    for (key, want) in ENV_DERIVED.into_iter().zip(derived) {
        if let Some(v) = explicit(&raw, "network", key) {
            if v.as_integer() != Some(want as i64) {
                return Err(err(
                    locate(src, &format!("network.{key}")),
                    format!("network.{key} = {v} disagrees with the environment, which gives {want}; leave it out"),
                ));
            }
        }
    }
    cfg.fit_network_to_env()?;
    if explicit(&raw, "trainer", "seed").is_some() {
        return Err(err(locate(src, "trainer.seed"), "trainer.seed is set per run from `seeds`".into()));
    }
    if let Some(v) = explicit(&raw, "network", "variance_branch").and_then(toml::Value::as_bool) {
        let conflict = match cfg.mode {
            ModeSelection::Baseline => v,
            ModeSelection::Variance => !v,
            ModeSelection::Both => true,
        };
        if conflict {
            let mode = toml::Value::try_from(cfg.mode).map(|m| m.to_string()).unwrap_or_default();
            return Err(err(
                locate(src, "network.variance_branch"),
                format!("mode = {mode} conflicts with network.variance_branch = {v}; the mode decides whether the variance branch exists"),
            ));
        }
    }
    cfg.validate_keyed().map_err(|(key, m)| err(locate(src, key), m))?;
    Ok(cfg)
}

/// Reads, parses and validates a config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config_str(&src, Some(path))
}
