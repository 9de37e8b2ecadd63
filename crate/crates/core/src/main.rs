use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shakedrop::config::ExperimentConfig;
use shakedrop::experiment::{
    cmd_eval, cmd_expectation_test, cmd_gradcheck, cmd_sweep, cmd_train, SWEEP_FILE,
};
use shakedrop::Error;

#[derive(Parser)]
#[command(name = "shakedrop", version, about = "Train and probe residual networks with stochastic branch scaling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes config.resolved, metrics.csv and params.bin.
    Train(Common),
    /// Evaluate params.bin from the output directory on the eval split.
    Eval(Common),
    /// Finite-difference checks of ops and regularized blocks.
    Gradcheck(Common),
    /// Train every (p_L, depth) cell of the configured grid.
    Sweep(Common),
    /// Monte-Carlo check of the evaluation-phase expectation of one block.
    ExpectationTest(Common),
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replicas that share each minibatch.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("run.seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("run.out={}", out.display()));
        }
        if let Some(w) = self.workers {
            overrides.push(format!("run.workers={w}"));
        }
        match &self.config {
            Some(path) => ExperimentConfig::from_file(path, &overrides),
            None => ExperimentConfig::from_text("", &overrides),
        }
    }
}

fn init_logging() {
    let level = match std::env::var("SHAKEDROP_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.load()?;
            let report = cmd_train(&cfg, &cfg.out)?;
            if let Some(last) = report.records.last() {
                println!(
                    "epochs={} steps={} train_top1={} eval_top1={} out={}",
                    report.records.len(),
                    report.steps,
                    last.train_top1_error,
                    last.eval_top1_error,
                    cfg.out.display()
                );
            }
            Ok(true)
        }
        Command::Eval(c) => {
            let cfg = c.load()?;
            let (loss, top1) = cmd_eval(&cfg, &cfg.out)?;
            println!("eval_loss={loss} eval_top1={top1}");
            Ok(true)
        }
        Command::Gradcheck(c) => {
            let cfg = c.load()?;
            let summary = cmd_gradcheck(&cfg)?;
            for line in &summary.lines {
                println!(
                    "{} {} max_rel_error={:.3e} checked={} kinks={}",
                    if line.passed { "PASS" } else { "FAIL" },
                    line.name,
                    line.report.max_rel_error,
                    line.report.checked,
                    line.report.kinks.len()
                );
            }
            println!(
                "{} branch-gradient ratio beta/alpha={} deviation={:.3e} (intentional mismatch)",
                if summary.ratio_deviation <= 1e-9 { "PASS" } else { "FAIL" },
                summary.ratio,
                summary.ratio_deviation
            );
            Ok(summary.passed())
        }
        Command::Sweep(c) => {
            let cfg = c.load()?;
            let rows = cmd_sweep(&cfg, &cfg.out)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!(
                "cells={} failed={failed} summary={}",
                rows.len(),
                cfg.out.join(SWEEP_FILE).display()
            );
            Ok(true)
        }
        Command::ExpectationTest(c) => {
            let cfg = c.load()?;
            let s = cmd_expectation_test(&cfg)?;
            println!(
                "{} block={} p={} eval_coefficient={} draws={} max_z={:.3}",
                if s.passed() { "PASS" } else { "FAIL" },
                s.block,
                s.survival,
                s.eval_coefficient,
                s.draws,
                s.max_z
            );
            Ok(s.passed())
        }
    }
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error[check]: tolerance exceeded");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
