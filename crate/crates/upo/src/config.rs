//! Experiment configuration, `--key value` overrides and seed resolution.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use upo_core::denoiser::DenoiserSpec;
use upo_core::tasks::FamilySpec;
use upo_core::unmask::{BlockSchedule, Decoding, Heuristic};
use upo_core::upo::TrainConfig;

pub const SEED_ENV: &str = "UPO_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Train,
    Eval,
    Verify,
    Passn,
    Compare,
}

/// A heuristic scheduler or a trained checkpoint, written `learned:<path>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SchedulerName {
    Heuristic(Heuristic),
    Learned(PathBuf),
}

impl fmt::Display for SchedulerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulerName::Heuristic(h) => write!(f, "{h}"),
            SchedulerName::Learned(p) => write!(f, "learned:{}", p.display()),
        }
    }
}

impl FromStr for SchedulerName {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s.strip_prefix("learned:") {
            Some("") => bail!("learned scheduler needs a checkpoint path"),
            Some(p) => Ok(SchedulerName::Learned(PathBuf::from(p))),
            None => s.parse::<Heuristic>().map(SchedulerName::Heuristic).map_err(|e| anyhow!("{e}")),
        }
    }
}

impl TryFrom<String> for SchedulerName {
    type Error = anyhow::Error;
    fn try_from(s: String) -> anyhow::Result<Self> {
        s.parse()
    }
}

impl From<SchedulerName> for String {
    fn from(s: SchedulerName) -> String {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PassnConfig {
    pub instances: usize,
    pub n_max: usize,
}

impl Default for PassnConfig {
    fn default() -> Self {
        Self { instances: 200, n_max: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Instances drawn from the evaluation stream.
    pub instances: usize,
    /// Random scorer draws per gradient check.
    pub draws: usize,
    pub hidden: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { instances: 3, draws: 5, hidden: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub command: Option<Command>,
    /// Falls back to the `UPO_SEED` environment variable.
    #[serde(default)]
    pub seed: Option<u64>,
    pub family: FamilySpec,
    /// Seed of the training prompt stream.
    #[serde(default)]
    pub instance_seed: u64,
    /// Seed of the held-out evaluation stream.
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
    #[serde(default = "default_denoiser")]
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub schedulers: Vec<SchedulerName>,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default)]
    pub block: Option<BlockSchedule>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub passn: PassnConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Record wall-clock times; off keeps outputs byte-identical across runs.
    #[serde(default)]
    pub timing: bool,
}

fn default_eval_seed() -> u64 {
    1_000_003
}

fn default_denoiser() -> DenoiserSpec {
    DenoiserSpec::Exact
}

fn default_trials() -> usize {
    1000
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        self.family.validate()?;
        self.train.validate()?;
        if self.trials == 0 {
            bail!("trials must be >= 1");
        }
        if self.passn.n_max == 0 || self.passn.instances == 0 {
            bail!("passn needs instances >= 1 and n_max >= 1");
        }
        for h in self.schedulers.iter().filter_map(|s| match s {
            SchedulerName::Heuristic(h) => Some(h),
            _ => None,
        }) {
            h.validate()?;
        }
        Ok(())
    }

    /// The configured seed, else `UPO_SEED`.
    pub fn resolve_seed(&self) -> anyhow::Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not a u64")),
            Err(_) => bail!("no seed: set \"seed\" in the config or {SEED_ENV}"),
        }
    }
}

/// Set `path` (dot separated) in `root` to `raw`, parsed as JSON when it parses.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> anyhow::Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("bad override key {path:?}");
    }
    for key in &keys[..keys.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| anyhow!("override {path:?} descends into a non-object"))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| anyhow!("override {path:?} descends into a non-object"))?
        .insert(keys[keys.len() - 1].to_owned(), value);
    Ok(())
}

/// Split `--key value` pairs.
pub fn parse_overrides(args: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag.strip_prefix("--").ok_or_else(|| anyhow!("expected --key, got {flag:?}"))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_owned(), v.to_owned()));
            continue;
        }
        let v = it.next().ok_or_else(|| anyhow!("override --{key} needs a value"))?;
        out.push((key.to_owned(), v.clone()));
    }
    Ok(out)
}

/// Read `path`, apply overrides in order (each logged to stderr) and validate.
pub fn load(path: &Path, overrides: &[(String, String)]) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut json: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    for (k, v) in overrides {
        apply_override(&mut json, k, v)?;
        eprintln!("override {k} = {v}");
    }
    let cfg: ExperimentConfig = serde_json::from_value(json).context("config schema")?;
    cfg.validate()?;
    Ok(cfg)
}
