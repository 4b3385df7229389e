use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

use super::{
    load_checkpoint, read_metric_column, run_evaluation, run_explanation, run_training, write_report, HarnessError,
    RunConfig,
};
use crate::explainers::{ExplainerConfig, ExplainerKind};
use crate::stats::{bonferroni_adjust, mann_whitney_u, summarize, Alternative, SampleSet};
use crate::theory::verify_bounds;

#[derive(Debug, Parser)]
#[command(name = "xmexp", version, about = "Attention-regularized multi-agent policies and their explanations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy from a key=value config file
    Train {
        #[arg(long)]
        config: PathBuf,
        /// extra key=value overrides applied after the file
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a checkpoint deterministically and report task metrics
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        /// team size; defaults to the training size
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Explain every timestep of several rollouts and write CSV and JSON reports
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        explainer: ExplainerKind,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Mann-Whitney U test on one metric column of two explanation CSVs
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        metric: String,
        /// Bonferroni family size
        #[arg(long)]
        m: usize,
        #[arg(long, default_value = "two-sided")]
        alternative: Alternative,
    },
    /// Check the attention-spread bounds on random matrices
    TheoryCheck {
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        min_n: usize,
        #[arg(long, default_value_t = 8)]
        max_n: usize,
    },
}

enum Failure {
    Usage(String),
    Runtime(HarnessError),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Runtime(e)
    }
}

fn split_override(kv: &str) -> Result<(&str, &str), Failure> {
    kv.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))
}

fn configure_threads() {
    if let Some(n) = std::env::var("XMEXP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // a second call in the same process keeps the first pool
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Runs one subcommand. Returns 0 on success, 1 on a usage error and 2 when
/// the command itself fails.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match run(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("{}", json!({"error": e.to_string(), "kind": kind_of(&e)}));
            2
        }
    }
}

fn kind_of(e: &HarnessError) -> &'static str {
    match e {
        HarnessError::Io { .. } => "io",
        HarnessError::Config(_) => "config",
        HarnessError::Version { .. } => "checkpoint-version",
        HarnessError::Checksum { .. } => "checkpoint-checksum",
        HarnessError::Format(_) => "format",
        HarnessError::Nn(crate::nn::NnError::ParamShape { .. }) => "checkpoint-shape",
        _ => "runtime",
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { config, overrides, out } => {
            let text = std::fs::read_to_string(&config).map_err(|e| HarnessError::io(&config, e))?;
            let mut cfg = RunConfig::parse(&text).map_err(|e| Failure::Usage(e.to_string()))?;
            for kv in &overrides {
                let (k, v) = split_override(kv)?;
                if matches!(k, "task" | "n_agents" | "profile") {
                    return Err(Failure::Usage(format!("'{k}' can only be set in the config file")));
                }
                if k == "seed" {
                    cfg.seed = v.parse().map_err(|_| Failure::Usage(format!("cannot parse seed '{v}'")))?;
                    continue;
                }
                cfg.apply(k, v).map_err(|e| Failure::Usage(e.to_string()))?;
            }
            cfg.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let started = std::time::Instant::now();
            let total = cfg.train.collector_iterations;
            let trained = run_training(&cfg, &out, |l| {
                eprintln!(
                    "iter {}/{total} reward {:.4} success {} ppo {:.4} critic {:.4} attn_H {:.3} grad {:.2} t {:.0}s",
                    l.iteration,
                    l.reward_mean,
                    l.success_mean.map_or("-".to_string(), |s| format!("{s:.2}")),
                    l.ppo_loss,
                    l.critic_loss,
                    l.attn_entropy_mean,
                    l.grad_norm,
                    started.elapsed().as_secs_f64()
                )
            })?;
            let last = trained.losses.last();
            println!(
                "{}",
                json!({
                    "out": out.display().to_string(),
                    "iterations": trained.losses.len(),
                    "final_reward_mean": last.map(|l| l.reward_mean),
                    "final_attn_entropy_mean": last.map(|l| l.attn_entropy_mean),
                    "checkpoints": trained.checkpoints.iter().map(|c| c.iteration).collect::<Vec<_>>(),
                })
            );
        }
        Command::Eval { ckpt, episodes, agents, seed } => {
            let c = load_checkpoint(&ckpt)?;
            let n = agents.unwrap_or(c.train_agents);
            let s = run_evaluation(&c, n, episodes, seed)?;
            println!(
                "{}",
                json!({
                    "task": c.task.to_string(),
                    "train_agents": c.train_agents,
                    "n_agents": n,
                    "zero_shot": n != c.train_agents,
                    "episodes": episodes,
                    "success_rate": s.success_rate,
                    "reward": s.reward,
                    "no_agent_coll": s.no_agent_coll,
                    "per_episode": s.episodes,
                })
            );
        }
        Command::Explain {
            ckpt,
            explainer,
            episodes,
            agents,
            seed,
            out,
            overrides,
        } => {
            let mut ecfg = ExplainerConfig::default();
            for kv in &overrides {
                let (k, v) = split_override(kv)?;
                match ecfg.set(k, v) {
                    Ok(true) => {}
                    Ok(false) => return Err(Failure::Usage(format!("unknown explainer key '{k}'"))),
                    Err(e) => return Err(Failure::Usage(e.to_string())),
                }
            }
            ecfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let c = load_checkpoint(&ckpt)?;
            let n = agents.unwrap_or(c.train_agents);
            let eval = run_explanation(&c, explainer, &ecfg, n, episodes, seed)?;
            let mut manifest = format!(
                "checkpoint={}\ntask={}\ntrain_agents={}\nn_agents={n}\niteration={}\ntrain_seed={}\nlambda_attn={}\nexplainer={explainer}\nepisodes={episodes}\nseed={seed}\n",
                ckpt.display(),
                c.task,
                c.train_agents,
                c.iteration,
                c.seed,
                c.train_config.attention_entropy_weight,
            );
            for (k, v) in ecfg.entries() {
                manifest.push_str(&format!("{k}={v}\n"));
            }
            let paths = write_report(
                &eval.records,
                std::slice::from_ref(&eval.aggregate),
                &eval.failures,
                &manifest,
                &out,
                explainer.as_str(),
            )?;
            println!(
                "{}",
                json!({
                    "csv": paths.csv.display().to_string(),
                    "json": paths.json.display().to_string(),
                    "records": eval.records.len(),
                    "failures": eval.failures.len(),
                })
            );
        }
        Command::Compare {
            a,
            b,
            metric,
            m,
            alternative,
        } => {
            let xs = read_metric_column(&a, &metric).map_err(|e| match e {
                HarnessError::Config(msg) => Failure::Usage(msg),
                other => Failure::Runtime(other),
            })?;
            let ys = read_metric_column(&b, &metric)?;
            let x = SampleSet::new(a.display().to_string(), xs.clone()).map_err(HarnessError::from)?;
            let y = SampleSet::new(b.display().to_string(), ys.clone()).map_err(HarnessError::from)?;
            let test = mann_whitney_u(&x, &y, alternative).map_err(HarnessError::from)?;
            let adjusted = bonferroni_adjust(test.p, m).map_err(|e| Failure::Usage(e.to_string()))?;
            println!(
                "{}",
                json!({
                    "metric": metric,
                    "alternative": alternative.to_string(),
                    "u": test.u,
                    "p": test.p,
                    "m": m,
                    "p_adjusted": adjusted,
                    "a": summarize(&xs),
                    "b": summarize(&ys),
                })
            );
        }
        Command::TheoryCheck {
            samples,
            seed,
            min_n,
            max_n,
        } => {
            if min_n < 1 || min_n > max_n {
                return Err(Failure::Usage(format!("bad size range {min_n}..={max_n}")));
            }
            let report = verify_bounds(samples, min_n..=max_n, seed).map_err(HarnessError::from)?;
            for s in &report.sizes {
                println!(
                    "N={} samples={} flatness_checks={} path_checks={} min_gap={:e}",
                    s.n, s.samples, s.flatness_checks, s.path_checks, s.min_gap
                );
            }
            for v in report.violations.iter().take(10) {
                println!("violation N={} {:?}: {}", v.n, v.check, v.detail);
            }
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            println!(
                "{verdict}: {} samples, {} violations",
                report.total_samples(),
                report.violations.len()
            );
            if !report.passed() {
                return Err(Failure::Runtime(HarnessError::Format(format!(
                    "{} bound violations",
                    report.violations.len()
                ))));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(cli_dispatch(["xmexp"]), 1);
        assert_eq!(cli_dispatch(["xmexp", "bogus"]), 1);
        assert_eq!(cli_dispatch(["xmexp", "explain", "--ckpt", "x", "--explainer", "nope", "--out", "y"]), 1);
        assert_eq!(cli_dispatch(["xmexp", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_two() {
        assert_eq!(cli_dispatch(["xmexp", "eval", "--ckpt", "/nonexistent/ckpt"]), 2);
    }

    #[test]
    fn theory_check_small() {
        assert_eq!(cli_dispatch(["xmexp", "theory-check", "--samples", "50", "--max-n", "4"]), 0);
        assert_eq!(cli_dispatch(["xmexp", "theory-check", "--min-n", "5", "--max-n", "4"]), 1);
    }
}
