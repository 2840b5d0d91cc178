use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mbdqn::harness::config::{ConfigMap, RunConfig};
use mbdqn::harness::metrics::VisitationMap;
use mbdqn::harness::run::{run_comparison, run_paired, run_training};
use mbdqn::harness::{run_checks, HarnessError};

#[derive(Parser)]
#[command(name = "mbdqn", about = "Mixture bootstrapped DQN experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Replace the configured seed list.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Replace the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ad-hoc `key=value` overrides applied after the file is read.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent per seed and write metrics and heatmaps.
    Train(ConfigArgs),
    /// Train a generator/learner pair over one shared replay buffer.
    Paired(ConfigArgs),
    /// Run several configs on one environment and rank them.
    Compare {
        /// Config files to compare; all must share env, budget, and seeds.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        /// Replace the configured seed list for every config.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Return threshold for the steps-to-threshold column
        /// (default: 90% of the best final mean return).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Convert a visitation-count CSV into a 16-bit PGM heatmap.
    Heatmap {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the built-in oracle and statistical self-checks.
    Check,
}

fn load_map(
    path: &PathBuf,
    seed: &[u64],
    out: &Option<PathBuf>,
    overrides: &[String],
) -> Result<ConfigMap, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut map = ConfigMap::parse(&text)?;
    for entry in overrides {
        let (key, value) = entry
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("bad --set {entry:?}")))?;
        map.set(key.trim(), value.trim());
    }
    if !seed.is_empty() {
        let list: Vec<String> = seed.iter().map(|s| s.to_string()).collect();
        map.set("run.seeds", &list.join(","));
    }
    if let Some(dir) = out {
        map.set("run.out_dir", &dir.display().to_string());
    }
    Ok(map)
}

fn cmd_train(args: &ConfigArgs) -> Result<(), HarnessError> {
    let map = load_map(&args.config, &args.seed, &args.out, &args.overrides)?;
    let cfg = RunConfig::from_map(&map)?;
    let outcomes = run_training(&cfg)?;
    for outcome in &outcomes {
        let last = outcome.metrics.rows.last().expect("at least the step-0 row");
        println!(
            "seed {}: final majority return {:.4} (stderr {:.4}), {} unique states",
            outcome.seed, last.majority_return, last.return_stderr, last.unique_states
        );
    }
    println!("wrote results to {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_paired(args: &ConfigArgs) -> Result<(), HarnessError> {
    let map = load_map(&args.config, &args.seed, &args.out, &args.overrides)?;
    let cfg = RunConfig::from_map(&map)?;
    let learner = RunConfig::learner_agent(&map, cfg.total_env_steps)?;
    let (gen_outcomes, learn_outcomes) = run_paired(&cfg, &learner)?;
    for (g, l) in gen_outcomes.iter().zip(&learn_outcomes) {
        let gf = g.metrics.rows.last().expect("rows").majority_return;
        let lf = l.metrics.rows.last().expect("rows").majority_return;
        println!(
            "seed {}: generator final return {:.4}, learner final return {:.4}",
            g.seed, gf, lf
        );
    }
    println!("wrote results to {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_compare(
    configs: &[PathBuf],
    seed: &[u64],
    out: &PathBuf,
    threshold: Option<f64>,
    overrides: &[String],
) -> Result<(), HarnessError> {
    let mut run_cfgs = Vec::with_capacity(configs.len());
    for path in configs {
        let map = load_map(path, seed, &None, overrides)?;
        run_cfgs.push(RunConfig::from_map(&map)?);
    }
    let summary = run_comparison(&run_cfgs, threshold, out)?;
    println!("threshold: {:.4}", summary.threshold);
    for row in &summary.rows {
        println!(
            "{}: final {:.4}, auc {:.2}, steps-to-threshold {}",
            row.config,
            row.final_mean_return,
            row.auc,
            row.steps_to_threshold
                .map(|s| s.to_string())
                .unwrap_or_else(|| "-".into())
        );
    }
    println!("wrote comparison files to {}", out.display());
    Ok(())
}

fn cmd_heatmap(input: &PathBuf, output: &PathBuf) -> Result<(), HarnessError> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", input.display())))?;
    let map = VisitationMap::from_csv(&text)?;
    map.write_pgm(output)?;
    println!("wrote {}", output.display());
    Ok(())
}

fn cmd_check() -> Result<bool, HarnessError> {
    let mut all_passed = true;
    for check in run_checks() {
        let tag = if check.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", check.name, check.detail);
        all_passed &= check.passed;
    }
    Ok(all_passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(args) => cmd_train(args).map(|()| true),
        Command::Paired(args) => cmd_paired(args).map(|()| true),
        Command::Compare {
            config,
            seed,
            out,
            threshold,
            overrides,
        } => cmd_compare(config, seed, out, *threshold, overrides).map(|()| true),
        Command::Heatmap { input, output } => cmd_heatmap(input, output).map(|()| true),
        Command::Check => cmd_check(),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
