//! Experiment harness around [`upo_core`]: JSON configs with command-line
//! overrides, scorer checkpoints, the evaluation, comparison, Pass@N and
//! training runners, and the oracle `verify` suite.
//!
//! Output files, all under the configured `output` directory:
//!
//! | file | written by | contents |
//! |------|------------|----------|
//! | `results.csv` | `compare` | `scheduler,denoiser,mean_reward,std_error,trials,wall_ms` |
//! | `eval.csv` | `eval` | `scheduler,mean_reward,std_error,exact_mean,trials` |
//! | `passn.csv` | `passn` | `scheduler,n,pass_rate` |
//! | `history.jsonl` | `train` | `{iter, mean_reward, reward_std, loss, divergence, wall_ms}` |
//! | `checkpoint.txt` | `train` | scorer weights, see [`checkpoint`] |
//! | `verify.jsonl` | `verify` | `{check_id, instance, value, bound, pass}` |
//! | `instances.jsonl` | `compare`, `passn` | `{family, seed, clues, L, m, support_size}` |

pub mod checkpoint;
pub mod config;
pub mod run;
pub mod verify;

use std::path::Path;

pub use config::{Command, ExperimentConfig};

/// Process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    VerifyFailed,
}

/// Run `command`, writing its files and a short summary to stdout.
pub fn execute(command: Command, cfg: &ExperimentConfig) -> anyhow::Result<Outcome> {
    let seed = cfg.resolve_seed()?;
    match command {
        Command::Compare => {
            for r in run::run_compare(cfg, seed)? {
                println!("{:<16} {:.4} ± {:.4}  ({} trials)", r.scheduler, r.mean_reward, r.std_error, r.trials);
            }
        }
        Command::Eval => {
            for r in run::run_eval(cfg, seed)? {
                let exact = r.exact_mean.map(|e| format!("{e:.4}")).unwrap_or_else(|| "n/a".into());
                println!("{:<16} {:.4} ± {:.4}  exact {exact}", r.scheduler, r.mean_reward, r.std_error);
            }
        }
        Command::Passn => {
            for r in run::run_passn(cfg, seed)? {
                println!("{:<16} N={:<3} {:.4}", r.scheduler, r.n, r.pass_rate);
            }
        }
        Command::Train => {
            let (_, history) = run::run_train_with_logging(cfg, seed)?;
            if let Some(h) = history.last() {
                println!("iter {} mean_reward {:.4} loss {:.4}", h.record.iter, h.record.mean_reward, h.record.loss);
            }
            println!("checkpoint {}", cfg.output.join("checkpoint.txt").display());
        }
        Command::Verify => {
            let records = verify::run_verify(cfg, seed)?;
            write_verify(&cfg.output, &records)?;
            let failed = records.iter().filter(|r| !r.pass).count();
            for r in records.iter().filter(|r| !r.pass) {
                println!("FAIL {} instance {:?}: {} > {}", r.check_id, r.instance, r.value, r.bound);
            }
            println!("{} checks, {failed} failed", records.len());
            if failed > 0 {
                return Ok(Outcome::VerifyFailed);
            }
        }
    }
    Ok(Outcome::Ok)
}

fn write_verify(dir: &Path, records: &[verify::VerifyRecord]) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    std::fs::write(dir.join("verify.jsonl"), s)?;
    Ok(())
}
