//! `agesel` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 every run diverged,
//! 4 I/O error, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agesel::experiment::{self, ExperimentConfig, ExperimentOutput, SweepParam, DEFAULT_S_SWEEP};
use agesel::theory::{self, TheoryInput};
use agesel::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "agesel",
    version,
    about = "Parameter-server local SGD with age-based worker selection"
)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file; defaults apply to anything left out
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base seed (run r uses seed + r)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Number of Monte Carlo runs
    #[arg(long, global = true)]
    runs: Option<usize>,

    /// Only print errors
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the configured experiment and write traces, summary and report
    Run,
    /// Run the configured experiment and print the strategy comparison table
    Compare,
    /// Repeat the experiment over several values of one parameter
    Sweep {
        /// Parameter to vary: S or tau_max
        #[arg(long, default_value = "S")]
        param: String,

        /// Values to try (comma or space separated)
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        values: Vec<usize>,
    },
    /// Evaluate the convergence bound constants
    Theory {
        /// Trace CSV; its traversal window replaces `traversal_rounds` and its
        /// gradient norms are compared against the bound
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Print shard sizes and label counts for one run's partition
    InspectPartition {
        /// Run index whose seed is used
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Idx(_) | Error::Csv(_) | Error::Trace(_) => 4,
        Error::Json(_) => 4,
        Error::Divergence { .. } => 3,
        Error::Config(_)
        | Error::TomlDe(_)
        | Error::TomlSer(_)
        | Error::Selection { .. }
        | Error::PartitionMismatch { .. }
        | Error::InvalidC { .. }
        | Error::InvalidLabel { .. }
        | Error::DimensionMismatch { .. }
        | Error::EmptyShard(_) => 2,
        _ => 1,
    }
}

fn load_experiment(common: &Common) -> agesel::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::parse_toml(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.base_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(runs) = common.runs {
        cfg.num_runs = runs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_runs(out: &ExperimentOutput, quiet: bool) {
    if quiet {
        return;
    }
    for s in &out.summaries {
        println!(
            "{:<7} run {:>3}  {:<16} rounds {:>5}  cost {:>7}  accuracy {}",
            s.strategy.name(),
            s.run,
            s.status.name(),
            s.rounds,
            s.total_comm_cost,
            s.final_accuracy.map_or("-".to_string(), |a| format!("{a:.4}")),
        );
    }
}

fn divergence_check(out: &ExperimentOutput) -> Option<ExitCode> {
    if out.all_diverged() {
        eprintln!("error: every run diverged");
        return Some(ExitCode::from(3));
    }
    None
}

fn cmd_run(common: &Common, table: bool) -> agesel::Result<ExitCode> {
    let cfg = load_experiment(common)?;
    let out = experiment::run_experiment(&cfg)?;
    if table {
        if !common.quiet {
            print!("{}", experiment::compare_report(&out.summaries)?.to_table());
        }
    } else {
        report_runs(&out, common.quiet);
    }
    if !common.quiet {
        println!("wrote {}", cfg.output_dir.display());
    }
    Ok(divergence_check(&out).unwrap_or(ExitCode::SUCCESS))
}

fn cmd_sweep(common: &Common, param: &str, values: &[usize]) -> agesel::Result<ExitCode> {
    let cfg = load_experiment(common)?;
    let param: SweepParam = param.parse()?;
    let values = if values.is_empty() {
        if param != SweepParam::S {
            return Err(Error::Config("--values is required for this parameter".into()));
        }
        DEFAULT_S_SWEEP.to_vec()
    } else {
        values.to_vec()
    };
    let results = experiment::sweep(&cfg, param, &values)?;
    if !common.quiet {
        for (v, out) in &results {
            println!("{} = {v}", param.name());
            print!("{}", experiment::compare_report(&out.summaries)?.to_table());
        }
        println!("wrote {}", cfg.output_dir.display());
    }
    if results.iter().all(|(_, o)| o.all_diverged()) {
        eprintln!("error: every run diverged");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_theory(common: &Common, trace: Option<&Path>) -> agesel::Result<ExitCode> {
    let input = match &common.config {
        Some(path) => TheoryInput::from_toml_str(&std::fs::read_to_string(path)?)?,
        None => TheoryInput::default(),
    };
    let mut constants = input.constants();
    let mut json = serde_json::Map::new();
    let records = trace.map(experiment::read_trace_csv).transpose()?;
    if let Some(records) = &records {
        let cover = theory::measure_r(records, constants.num_workers);
        let a: Vec<usize> = records.iter().map(|r| r.num_age_selected).collect();
        let age_sum = theory::measure_age_sum_window(&a, constants.num_workers);
        json.insert("measured_r".into(), serde_json::to_value(cover)?);
        json.insert("age_sum_r".into(), serde_json::to_value(age_sum)?);
        if cover.complete {
            constants.traversal_rounds = cover.rounds;
        }
    }
    let report = theory::bound_report(&constants, input.c)?;
    json.insert("report".into(), serde_json::to_value(report)?);
    if let Some(records) = &records {
        if let Some(aligned) = report.aligned_rounds(records.len()) {
            json.insert("rounds_used".into(), aligned.into());
            if report.v.is_some() {
                let rows: Vec<_> = theory::empirical_vs_bound(records, &constants, report.c_used)?
                    .into_iter()
                    .filter(|c| c.multiple_of_r && c.rounds <= aligned)
                    .collect();
                json.insert("empirical_vs_bound".into(), serde_json::to_value(rows)?);
            }
        }
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(json))? + "\n";
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir)?;
        experiment::write_atomic(&dir.join("theory_report.json"), text.as_bytes())?;
    }
    if !common.quiet {
        print!("{text}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(common: &Common, run: usize) -> agesel::Result<ExitCode> {
    let cfg = load_experiment(common)?;
    let data = experiment::build_run_data(&cfg, run)?;
    let csv = experiment::partition_histogram_csv(&data.shards, data.spec.num_classes)?;
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir)?;
        experiment::write_atomic(&dir.join("partition.csv"), &csv)?;
    }
    if !common.quiet {
        print!("{}", String::from_utf8_lossy(&csv));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = &cli.common;
    let result = match &cli.command {
        Command::Run => cmd_run(common, false),
        Command::Compare => cmd_run(common, true),
        Command::Sweep { param, values } => cmd_sweep(common, param, values),
        Command::Theory { trace } => cmd_theory(common, trace.as_deref()),
        Command::InspectPartition { run } => cmd_inspect(common, *run),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
