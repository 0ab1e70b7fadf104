//! Experiment runners: evaluation, scheduler comparison, Pass@N and training.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::Serialize;
use upo_core::denoiser::{DenoiserSpec, PosteriorTable, TaskDenoiser};
use upo_core::oracle::terminal_dist_with;
use upo_core::policy::LearnedPolicy;
use upo_core::seq::{lattice_size, MaskedSeq};
use upo_core::tasks::{reward, RewardKind, TaskFamily};
use upo_core::unmask::{rollout, BlockSchedule, Decoding, Heuristic, IndexDistribution, UnmaskPolicy};
use upo_core::upo::{pretrain_ce, train_from, HistoryRecord, Realization};
use upo_core::{derive_seed, stream_rng};

use crate::checkpoint;
use crate::config::{ExperimentConfig, SchedulerName};

/// Largest lattice for which `eval` also reports the exact expectation.
pub const EXACT_EVAL_STATES: u128 = 100_000;

/// A resolved scheduler.
#[derive(Clone, Debug, PartialEq)]
pub enum Scheduler {
    Heuristic(Heuristic),
    Learned(LearnedPolicy),
}

impl UnmaskPolicy for Scheduler {
    fn distribution(&self, x: &MaskedSeq, table: &PosteriorTable) -> upo_core::Result<IndexDistribution> {
        match self {
            Scheduler::Heuristic(h) => h.distribution(x, table),
            Scheduler::Learned(p) => p.distribution(x, table),
        }
    }
}

pub fn resolve(name: &SchedulerName) -> anyhow::Result<Scheduler> {
    Ok(match name {
        SchedulerName::Heuristic(h) => Scheduler::Heuristic(*h),
        SchedulerName::Learned(path) => Scheduler::Learned(checkpoint::load(path)?),
    })
}

/// Short denoiser label such as `windowed:1`.
pub fn denoiser_label(spec: DenoiserSpec) -> String {
    match spec {
        DenoiserSpec::Exact => "exact".into(),
        DenoiserSpec::Tempered { gamma } => format!("tempered:{gamma}"),
        DenoiserSpec::Windowed { window } => format!("windowed:{window}"),
    }
}

/// Evaluation protocol shared by the runners.
#[derive(Clone, Copy, Debug)]
pub struct EvalSetup<'a> {
    pub family: &'a TaskFamily,
    pub denoiser: DenoiserSpec,
    pub block: Option<&'a BlockSchedule>,
    pub decoding: Decoding,
}

impl<'a> EvalSetup<'a> {
    pub fn new(cfg: &'a ExperimentConfig, family: &'a TaskFamily) -> Self {
        Self { family, denoiser: cfg.denoiser, block: cfg.block.as_ref(), decoding: cfg.decoding }
    }
}

/// Mean reward and standard error `popstd/√T`; trial `i` runs on instance `i`
/// with generator `stream_rng(seed, i)`.
pub fn eval_accuracy<P: UnmaskPolicy + Sync + ?Sized>(
    setup: EvalSetup<'_>,
    scheduler: &P,
    trials: usize,
    seed: u64,
) -> anyhow::Result<(f64, f64)> {
    let rewards = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let inst = setup.family.instance(i)?;
            let den = TaskDenoiser::new(&inst, setup.denoiser)?;
            let t = rollout(&inst, scheduler, &den, setup.block, setup.decoding, &mut stream_rng(seed, i))?;
            Ok(t.reward)
        })
        .collect::<upo_core::Result<Vec<f64>>>()?;
    Ok(mean_stderr(&rewards))
}

pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    (mean, (var / n).sqrt())
}

/// Mean over instances `0..trials` of the exact expected reward, when every
/// instance is small enough to enumerate.
pub fn exact_mean_reward<P: UnmaskPolicy + Sync + ?Sized>(
    setup: EvalSetup<'_>,
    scheduler: &P,
    trials: usize,
) -> anyhow::Result<Option<f64>> {
    let first = setup.family.instance(0)?;
    if lattice_size(first.len(), first.vocab()) > EXACT_EVAL_STATES {
        return Ok(None);
    }
    let values = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let inst = setup.family.instance(i)?;
            let den = TaskDenoiser::new(&inst, setup.denoiser)?;
            let p = terminal_dist_with(&inst, scheduler, &den, setup.block, setup.decoding)?;
            let mut e = 0.0;
            for (x, q) in p.atoms() {
                e += q * reward(&inst, x)?;
            }
            Ok(e)
        })
        .collect::<upo_core::Result<Vec<f64>>>()?;
    Ok(Some(values.iter().sum::<f64>() / values.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub scheduler: String,
    pub denoiser: String,
    pub mean_reward: f64,
    pub std_error: f64,
    pub trials: usize,
    pub wall_ms: u64,
}

fn elapsed_ms(t: Instant, timing: bool) -> u64 {
    if timing {
        t.elapsed().as_millis() as u64
    } else {
        0
    }
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(dir: &Path, name: &str, body: &str) -> anyhow::Result<()> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
}

fn jsonl<T: Serialize>(rows: &[T]) -> anyhow::Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

fn eval_family(cfg: &ExperimentConfig) -> TaskFamily {
    TaskFamily::new(cfg.family.clone(), cfg.eval_seed)
}

/// `instances.jsonl` for instances `0..count` of `family`.
pub fn write_instances(dir: &Path, family: &TaskFamily, count: usize) -> anyhow::Result<()> {
    let records = (0..count as u64)
        .into_par_iter()
        .map(|i| family.instance(i).map(|inst| inst.export_record()))
        .collect::<upo_core::Result<Vec<_>>>()?;
    write(dir, "instances.jsonl", &jsonl(&records)?)
}

fn schedulers(cfg: &ExperimentConfig) -> anyhow::Result<Vec<(String, Scheduler)>> {
    if cfg.schedulers.is_empty() {
        bail!("no schedulers configured");
    }
    cfg.schedulers.iter().map(|n| Ok((n.to_string(), resolve(n)?))).collect()
}

/// Every scheduler on the held-out stream; writes `results.csv`.
pub fn run_compare(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<Vec<ResultRow>> {
    let family = eval_family(cfg);
    let setup = EvalSetup::new(cfg, &family);
    let mut rows = Vec::new();
    for (name, s) in schedulers(cfg)? {
        let t = Instant::now();
        let (mean, se) = eval_accuracy(setup, &s, cfg.trials, seed)?;
        rows.push(ResultRow {
            scheduler: name,
            denoiser: denoiser_label(cfg.denoiser),
            mean_reward: mean,
            std_error: se,
            trials: cfg.trials,
            wall_ms: elapsed_ms(t, cfg.timing),
        });
    }
    let mut csv = String::from("scheduler,denoiser,mean_reward,std_error,trials,wall_ms\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{},{}", r.scheduler, r.denoiser, r.mean_reward, r.std_error, r.trials, r.wall_ms)?;
    }
    write(&cfg.output, "results.csv", &csv)?;
    write_instances(&cfg.output, &family, cfg.trials)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub scheduler: String,
    pub mean_reward: f64,
    pub std_error: f64,
    /// Exact expectation over the same instances, when enumerable.
    pub exact_mean: Option<f64>,
    pub trials: usize,
}

/// Monte Carlo accuracy next to the exact expectation; writes `eval.csv`.
pub fn run_eval(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<Vec<EvalRow>> {
    let family = eval_family(cfg);
    let setup = EvalSetup::new(cfg, &family);
    let mut rows = Vec::new();
    for (name, s) in schedulers(cfg)? {
        let (mean, se) = eval_accuracy(setup, &s, cfg.trials, seed)?;
        let exact = exact_mean_reward(setup, &s, cfg.trials)?;
        rows.push(EvalRow { scheduler: name, mean_reward: mean, std_error: se, exact_mean: exact, trials: cfg.trials });
    }
    let mut csv = String::from("scheduler,mean_reward,std_error,exact_mean,trials\n");
    for r in &rows {
        let exact = r.exact_mean.map(|e| e.to_string()).unwrap_or_default();
        writeln!(csv, "{},{},{},{},{}", r.scheduler, r.mean_reward, r.std_error, exact, r.trials)?;
    }
    write(&cfg.output, "eval.csv", &csv)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PassRow {
    pub scheduler: String,
    pub n: usize,
    pub pass_rate: f64,
}

/// Pass@N for `N = 1..=n_max`: trajectory `j` of instance `i` uses
/// `stream_rng(derive_seed(seed, i), j)`. Writes `passn.csv`.
pub fn run_passn(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<Vec<PassRow>> {
    let family = eval_family(cfg);
    let setup = EvalSetup::new(cfg, &family);
    let (count, n_max) = (cfg.passn.instances, cfg.passn.n_max);
    let mut rows = Vec::new();
    for (name, s) in schedulers(cfg)? {
        let first_hit = (0..count as u64)
            .into_par_iter()
            .map(|i| -> anyhow::Result<Option<usize>> {
                let inst = family.instance(i)?;
                if inst.reward_kind() != RewardKind::BinaryExact {
                    bail!("pass@N needs a binary reward");
                }
                let den = TaskDenoiser::new(&inst, setup.denoiser)?;
                for j in 0..n_max {
                    let mut rng = stream_rng(derive_seed(seed, i), j as u64);
                    if rollout(&inst, &s, &den, setup.block, setup.decoding, &mut rng)?.reward == 1.0 {
                        return Ok(Some(j));
                    }
                }
                Ok(None)
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        for n in 1..=n_max {
            let hits = first_hit.iter().filter(|h| h.is_some_and(|j| j < n)).count();
            rows.push(PassRow { scheduler: name.clone(), n, pass_rate: hits as f64 / count as f64 });
        }
    }
    let mut csv = String::from("scheduler,n,pass_rate\n");
    for r in &rows {
        writeln!(csv, "{},{},{}", r.scheduler, r.n, r.pass_rate)?;
    }
    write(&cfg.output, "passn.csv", &csv)?;
    write_instances(&cfg.output, &family, count)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryLine {
    #[serde(flatten)]
    pub record: HistoryRecord,
    pub wall_ms: u64,
}

/// Pretrain when asked, train on the training stream, write
/// `checkpoint.txt` and `history.jsonl`.
pub fn run_train_with_logging(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<(LearnedPolicy, Vec<HistoryLine>)> {
    let tc = &cfg.train;
    let family = TaskFamily::new(cfg.family.clone(), cfg.instance_seed);
    let mut rng = stream_rng(seed, 0);
    let mut params = tc.init_params(&mut rng);
    if tc.realization == Realization::MaxConfCe {
        let (p, ce) = pretrain_ce(&params, &family, cfg.denoiser, tc, &mut rng)?;
        if let (Some(a), Some(b)) = (ce.first(), ce.last()) {
            eprintln!("pretrain cross-entropy {a:.4} -> {b:.4}");
        }
        params = p;
    }
    let start = Instant::now();
    let mut history = Vec::with_capacity(tc.iterations);
    let params = train_from(params, &family, cfg.denoiser, tc, &mut rng, |h, _| {
        history.push(HistoryLine { record: h.clone(), wall_ms: elapsed_ms(start, cfg.timing) });
    })?;
    let policy = LearnedPolicy::new(params, tc.policy_mode(), tc.feature_k)?;
    ensure_dir(&cfg.output)?;
    checkpoint::save(&cfg.output.join("checkpoint.txt"), &policy)?;
    write(&cfg.output, "history.jsonl", &jsonl(&history)?)?;
    Ok((policy, history))
}
