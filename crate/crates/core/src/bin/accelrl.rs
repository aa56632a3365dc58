use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use accelrl::algos::AlgoKind;
use accelrl::learner::{run_experiment, Trainer};
use accelrl::telemetry::metrics::{plot_svg, read_summary};
use accelrl::telemetry::{read_metrics, report, sample_bench, write_metrics, EvalRecord, RunSummary, ScoreRecord};
use accelrl::{Error, ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "accelrl", version, about = "Parallel sampling and learner topologies for small deep RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics and artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total environment steps.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train with the config's topology and write metrics.
    Train(RunArgs),
    /// Sampler throughput sweep; prints one CSV row per geometry.
    SampleBench(RunArgs),
    /// A2C training with the full/half-batch gradient cosine probe on.
    ProbeCosine(RunArgs),
    /// DQN training beside a secondary learner that only reads the replay buffer.
    Secondary(RunArgs),
    /// Summary table recomputed from a run directory's CSV files.
    Report {
        run_dir: PathBuf,
        /// Also write SVG line plots of scores and evaluations.
        #[arg(long)]
        plot: bool,
    },
    /// Print a default catch config for an algorithm.
    Init {
        #[arg(value_parser = ["a2c", "ppo", "dqn", "catdqn"])]
        algo: String,
    },
}

fn load(args: &RunArgs) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&args.config).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read {}: {io}", args.config.display())),
        e => e,
    })?;
    let cfg = cfg.with_overrides(args.seed, args.out.clone(), args.steps);
    cfg.validate()?;
    Ok(cfg)
}

fn with_default_out(mut cfg: ExperimentConfig, kind: &str) -> ExperimentConfig {
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from(format!("runs/{kind}-{}-seed{}", cfg.algo.algo.name(), cfg.seed)));
    }
    cfg
}

fn print_summary(s: &RunSummary) {
    let f = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    println!("steps              {}", s.steps);
    println!("updates            {}", s.updates);
    println!("episodes           {}", s.episodes);
    println!("final score        {}", f(s.final_score));
    println!("best score         {}", f(s.best_score));
    println!("final eval         {}", f(s.final_eval));
    println!("best eval          {}", f(s.best_eval));
    println!("measured intensity {}", f(s.measured_intensity));
    println!("mean cosine        {}", f(s.mean_cosine));
}

fn plots(dir: &Path) -> Result<()> {
    let scores: Vec<ScoreRecord> = read_metrics(&dir.join("scores.csv"))?;
    let pts = |xs: &mut dyn Iterator<Item = (u64, Option<f64>)>| xs.filter_map(|(s, v)| v.map(|v| (s as f64, v))).collect::<Vec<_>>();
    plot_svg(
        &dir.join("scores.svg"),
        "online score",
        &[("score".to_string(), pts(&mut scores.iter().map(|r| (r.step, r.score))))],
    )?;
    let mut series = Vec::new();
    for (file, name) in [("eval.csv", "primary"), ("secondary_eval.csv", "secondary")] {
        let p = dir.join(file);
        if p.exists() {
            let evals: Vec<EvalRecord> = read_metrics(&p)?;
            series.push((name.to_string(), pts(&mut evals.iter().map(|r| (r.step, r.score)))));
        }
    }
    if !series.is_empty() {
        plot_svg(&dir.join("eval.svg"), "evaluation score", &series)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = with_default_out(load(&args)?, "train");
            let out = run_experiment(&cfg)?;
            print_summary(&out.summary);
            eprintln!("wrote {}", cfg.out_dir.as_deref().unwrap_or(Path::new(".")).display());
        }
        Command::SampleBench(args) => {
            let cfg = load(&args)?;
            let rows = sample_bench(&cfg)?;
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            if let Some(dir) = &cfg.out_dir {
                std::fs::create_dir_all(dir)?;
                write_metrics(&dir.join("bench.csv"), &rows)?;
            }
        }
        Command::ProbeCosine(args) => {
            let mut cfg = with_default_out(load(&args)?, "cosine");
            cfg.telemetry.cosine_probe = true;
            cfg.validate()?;
            let out = Trainer::new(&cfg)?.run()?;
            let batch = cfg.sims_per_learner() * cfg.algo.horizon;
            match out.records.cosine.last() {
                Some(r) => println!("batch {batch}: running mean cos(full, half) = {:.4} over {} updates", r.running_mean, r.update),
                None => println!("batch {batch}: no updates ran"),
            }
        }
        Command::Secondary(args) => {
            let mut cfg = with_default_out(load(&args)?, "secondary");
            if cfg.secondary.is_none() {
                return Err(Error::Config("config has no [secondary] section".into()));
            }
            cfg.telemetry.norm_every_updates.get_or_insert(50);
            let out = Trainer::new(&cfg)?.run()?;
            print_summary(&out.summary);
            let f = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            println!("secondary eval     {}", f(out.records.secondary_evals.last().and_then(|r| r.score)));
        }
        Command::Report { run_dir, plot } => {
            let s = report(&run_dir)?;
            print_summary(&s);
            let stored = run_dir.join("summary.toml");
            if stored.exists() && read_summary(&stored)? != s {
                eprintln!("warning: {} differs from the recomputed summary", stored.display());
            }
            if plot {
                plots(&run_dir)?;
            }
        }
        Command::Init { algo } => {
            let kind = match algo.as_str() {
                "a2c" => AlgoKind::A2c,
                "ppo" => AlgoKind::Ppo,
                "dqn" => AlgoKind::Dqn,
                _ => AlgoKind::CatDqn,
            };
            print!("{}", ExperimentConfig::catch_default(kind).to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
