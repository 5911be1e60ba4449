use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use nmvq_cli::{MetricRow, Run, RunConfig, Seeds, Stage};
use nmvq_core::kv::KvMap;

#[derive(Parser)]
#[command(name = "nmvq", version, about = "VQ time series generation refined by a neural mapper")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sets the data, model, sampling and ROCKET seeds at once.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
    /// Start from the reduced acceptance-run profile instead of the full defaults.
    #[arg(long, global = true)]
    desk_scale: bool,
    /// Config override, `key=value`; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load or synthesize data, re-split it stratified and write train/test TSVs.
    PrepareData {
        /// UCR-format file; overrides `data.source`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train (or resume) one stage: 1, 2, 3 or fcn.
    Train {
        #[arg(long)]
        stage: Stage,
        /// Stage-3 temperature, instead of the τ-search result.
        #[arg(long)]
        tau: Option<f64>,
        /// Stop after this many total steps; a later `train` resumes.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Pick the stage-3 temperature by ROCKET-feature FID.
    SearchTau,
    /// Sample series from the prior and decode them.
    Generate {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        class: Option<usize>,
        /// Also write the mapper-refined series.
        #[arg(long)]
        refine: bool,
    },
    /// Refine a TSV of generated series with the stage-3 mapper.
    Refine {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// FID, cFID and IS of generated and refined samples against the test split.
    Evaluate {
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        refined: Option<PathBuf>,
    },
    /// Overlay and PCA figures (SVG plus CSV data).
    Visualize,
    /// Every step from data preparation to evaluation.
    Pipeline,
    /// Print the effective configuration.
    ShowConfig,
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = if cli.desk_scale { RunConfig::desk_scale() } else { RunConfig::default() };
    if let Some(path) = &cli.config {
        cfg = RunConfig::load_file(&cfg, path)?;
    }
    if !cli.overrides.is_empty() {
        let text = cli.overrides.join("\n");
        cfg = cfg.with_overrides(&KvMap::parse(&text)?)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = Seeds::all(seed);
    }
    Ok(cfg)
}

fn print_metrics(rows: &[MetricRow]) {
    println!("{:<22} {:<8} {:>8} {:>14}", "metric", "source", "seed", "value");
    for r in rows {
        println!("{:<22} {:<8} {:>8} {:>14.6}", r.metric, r.feature_source, r.seed, r.value);
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = build_config(&cli).context("building the run configuration")?;
    let run = Run::new(config, &cli.out_dir);
    match &cli.command {
        Command::PrepareData { input } => {
            let s = run.prepare_data(input.as_deref())?;
            println!("{} train / {} test series of length {}", s.train, s.test, s.length);
            println!("class  train  test");
            for (c, (tr, te)) in s.histogram.iter().enumerate() {
                println!("{c:>5}  {tr:>5}  {te:>4}");
            }
        }
        Command::Train { stage, tau, until } => {
            let s = run.train_until(*stage, *tau, *until)?;
            let loss = s.final_loss.map_or("n/a".into(), |l| format!("{l:.6}"));
            println!("{}: steps {} -> {}, last loss {loss}", stage.name(), s.resumed_from, s.steps);
        }
        Command::SearchTau => {
            let r = run.search_tau()?;
            for (t, f) in r.candidates.iter().zip(&r.fid_per_tau) {
                println!("tau {t:<6} FID {f:.6}");
            }
            println!("tau* = {}", r.tau_star);
        }
        Command::Generate { n, class, refine } => {
            let s = run.generate(*n, *class, *refine)?;
            println!("{} series -> {}", s.rows, s.generated.display());
            if let Some(p) = s.refined {
                println!("refined -> {}", p.display());
            }
        }
        Command::Refine { input, output } => {
            let p = run.refine(input.as_deref(), output.as_deref())?;
            println!("refined -> {}", p.display());
        }
        Command::Evaluate { generated, refined } => {
            let rows = run.evaluate(generated.as_deref(), refined.as_deref())?;
            print_metrics(&rows);
            println!("metrics -> {}", run.metrics_csv().display());
        }
        Command::Visualize => {
            let s = run.visualize()?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            for f in &s.files {
                println!("{}", f.display());
            }
        }
        Command::Pipeline => {
            let rows = run.run_all()?;
            print_metrics(&rows);
        }
        Command::ShowConfig => {
            print!("{}", run.config.to_kv().to_text());
            println!("# config_hash = {}", run.config.hash());
        }
    }
    Ok(())
}
