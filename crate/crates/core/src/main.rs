use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bayesbench::bench::{read_task, write_task, TaskSpec};
use bayesbench::harness::{
    collect_records, compare_to_reference, emit_report, run_experiment_in, ExperimentConfig,
    RunOptions,
};
use bayesbench::Result;

#[derive(Parser)]
#[command(
    name = "bayesbench",
    version,
    about = "Posterior approximations under distribution shift"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task and write its splits as CSV.
    GenTask {
        /// Task generator as JSON, e.g. {"generator":"two-moons","n":500}.
        #[arg(long, conflicts_with = "spec_file")]
        spec: Option<String>,
        /// File holding the generator JSON.
        #[arg(long)]
        spec_file: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment grid and write its report.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Grid cells trained in parallel.
        #[arg(long)]
        jobs: Option<usize>,
        /// Retrain cells that already have matching records.
        #[arg(long)]
        force: bool,
    },
    /// Compare predictions (files or cell directories) against a reference.
    Compare {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Aggregate every record under a directory into summaries and figures.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn gen_task(spec: Option<String>, spec_file: Option<PathBuf>, seed: u64, out: &Path) -> Result<()> {
    let text = match (spec, spec_file) {
        (Some(s), _) => s,
        (None, Some(f)) => {
            std::fs::read_to_string(&f).map_err(|e| bayesbench::Error::Io { path: f, source: e })?
        }
        (None, None) => r#"{"generator":"two-moons","n":500}"#.to_string(),
    };
    let spec: TaskSpec = serde_json::from_str(&text)?;
    let task = spec.generate(seed)?;
    write_task(&task, out)?;
    read_task(out)?;
    println!("wrote {} to {}", task.name, out.display());
    Ok(())
}

fn run(config: &Path, seed: Option<u64>, jobs: Option<usize>, force: bool) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    let root = cfg.output_root();
    let records = run_experiment_in(&cfg, &root, &RunOptions { jobs, force })?;
    let failed: Vec<_> = records.iter().filter(|r| !r.is_ok()).collect();
    for r in &failed {
        eprintln!(
            "failed: {} seed {}: {}",
            r.algorithm,
            r.seed,
            r.error.as_deref().unwrap_or("unknown error")
        );
    }
    let all = collect_records(&root)?;
    let bundle = emit_report(&all, &root)?;
    println!(
        "{} cells, {} failed; {} summary rows and {} figures in {}",
        records.len(),
        failed.len(),
        bundle.rows.len(),
        bundle.figures.len(),
        root.display()
    );
    Ok(failed.is_empty())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenTask {
            spec,
            spec_file,
            seed,
            out,
        } => gen_task(spec, spec_file, seed, &out).map(|()| true),
        Command::Run {
            config,
            seed,
            jobs,
            force,
        } => run(&config, seed, jobs, force),
        Command::Compare { model, reference } => {
            compare_to_reference(&model, &reference).and_then(|rep| {
                println!("{}", serde_json::to_string_pretty(&rep)?);
                Ok(true)
            })
        }
        Command::Report { dir } => collect_records(&dir).and_then(|recs| {
            let b = emit_report(&recs, &dir)?;
            println!("{} summary rows, {} figures", b.rows.len(), b.figures.len());
            Ok(recs.iter().all(|r| r.is_ok()))
        }),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
