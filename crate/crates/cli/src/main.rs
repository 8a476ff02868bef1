use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use rfgps::driver::{self, TrainingReport};
use rfgps::sphase::GlobalPolicy;
use rfgps::RunConfig;

#[derive(Parser)]
#[command(name = "rfgps", about = "Reset-free guided policy search trainer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured algorithm; writes report.csv, a config echo, and
    /// per-iteration checkpoints into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the master seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a saved policy with deterministic-mean rollouts; prints
    /// metrics and writes eval.csv.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        episodes: usize,
        /// Directory for eval.csv (defaults to the current directory).
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run two configurations and write a merged learning-curve CSV.
    Compare {
        #[arg(long)]
        config_a: PathBuf,
        #[arg(long)]
        config_b: PathBuf,
        /// Output directory for the merged CSV and both run directories.
        #[arg(long, default_value = "compare_out")]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, out, seed } => train(config, out, seed),
        Command::Eval {
            policy,
            config,
            episodes,
            out,
        } => eval(policy, config, episodes, out),
        Command::Compare {
            config_a,
            config_b,
            out,
        } => compare(config_a, config_b, out),
    }
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn train(config: PathBuf, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(&config)?.with_out_dir(out.clone());
    if let Some(seed) = seed {
        cfg = cfg.with_seed(seed);
    }
    let (report, _policy) = rfgps::run(&cfg)?;
    print_training_summary(&report);
    println!("artifacts written to {}", out.display());
    Ok(())
}

fn print_training_summary(report: &TrainingReport) {
    println!("iter  mean_cost    final_dist  success  epsilon");
    for r in &report.records {
        println!(
            "{:>4}  {:>11.4}  {:>10.4}  {:>7.2}  {:>7.4}",
            r.iteration, r.mean_cost, r.mean_final_dist, r.success_rate, r.epsilon
        );
    }
}

fn eval(policy: PathBuf, config: PathBuf, episodes: usize, out: PathBuf) -> Result<()> {
    let cfg = load_config(&config)?;
    let spec = cfg.env_spec()?;
    let pol = GlobalPolicy::load(&policy)
        .with_context(|| format!("loading policy {}", policy.display()))?;
    let metrics = driver::evaluate_policy(
        &pol,
        &spec,
        episodes,
        cfg.eval.success_threshold,
        rfgps::rng::child_seed(cfg.run.seed, "cli_eval", 0),
    )?;

    println!("episodes:        {}", metrics.episodes);
    println!("mean final dist: {:.6}", metrics.mean_final_dist);
    println!("std final dist:  {:.6}", metrics.std_final_dist);
    println!("success rate:    {:.4}", metrics.success_rate);
    println!("mean total cost: {:.6}", metrics.mean_cost);

    std::fs::create_dir_all(&out)?;
    let path = out.join("eval.csv");
    let mut csv = String::from("episode,final_dist,success,total_cost\n");
    for (i, (d, c)) in metrics
        .final_dists
        .iter()
        .zip(&metrics.total_costs)
        .enumerate()
    {
        let success = if *d < cfg.eval.success_threshold { 1 } else { 0 };
        csv.push_str(&format!("{i},{d},{success},{c}\n"));
    }
    std::fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn compare(config_a: PathBuf, config_b: PathBuf, out: PathBuf) -> Result<()> {
    let cfg_a = load_config(&config_a)?.with_out_dir(out.join("a"));
    let cfg_b = load_config(&config_b)?.with_out_dir(out.join("b"));

    println!("running configuration A ({})", config_a.display());
    let (report_a, _) = rfgps::run(&cfg_a)?;
    println!("running configuration B ({})", config_b.display());
    let (report_b, _) = rfgps::run(&cfg_b)?;

    let episodes_a = episodes_per_iteration(&cfg_a);
    let episodes_b = episodes_per_iteration(&cfg_b);

    std::fs::create_dir_all(&out)?;
    let path = out.join("compare.csv");
    let mut csv = String::from(
        "iteration,episodes_a,mean_cost_a,success_rate_a,episodes_b,mean_cost_b,success_rate_b\n",
    );
    let rows = report_a.records.len().max(report_b.records.len());
    for i in 0..rows {
        let a = report_a.records.get(i);
        let b = report_b.records.get(i);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i + 1,
            a.map_or(String::new(), |_| ((i + 1) * episodes_a).to_string()),
            a.map_or(String::new(), |r| r.mean_cost.to_string()),
            a.map_or(String::new(), |r| r.success_rate.to_string()),
            b.map_or(String::new(), |_| ((i + 1) * episodes_b).to_string()),
            b.map_or(String::new(), |r| r.mean_cost.to_string()),
            b.map_or(String::new(), |r| r.success_rate.to_string()),
        ));
    }
    std::fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn episodes_per_iteration(cfg: &RunConfig) -> usize {
    match cfg.run.algorithm {
        rfgps::config::Algorithm::ResetFree => cfg.sampling.samples_per_iteration,
        rfgps::config::Algorithm::ClassicMdgps => {
            cfg.sampling.init_states.len() * cfg.sampling.samples_per_condition
        }
    }
}
