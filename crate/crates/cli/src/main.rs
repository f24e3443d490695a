use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dwellopt::experiment::{read_results, run_experiment, write_plot_data, write_results, ExperimentSpec, Method};
use dwellopt::model::{make_benchmark, BENCHMARK_NAMES};
use dwellopt::segments::{build_activation_inequalities, enumerate_segments, mdt_rows_for};

/// Environment variable holding the log filter, e.g. `info` or `dwellopt::isto=debug`.
const LOG_ENV: &str = "DWELLOPT_LOG";

#[derive(Parser)]
#[command(name = "dwellopt", version, about = "Switched system optimal control under minimum dwell time")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a benchmark with each method over a sweep of node counts.
    Run {
        #[arg(long, value_parser = BENCHMARK_NAMES)]
        problem: String,
        /// Comma-separated methods: minlp, isto, cia, relaxed.
        #[arg(long, value_delimiter = ',', required = true)]
        method: Vec<Method>,
        /// Comma-separated, nondecreasing node counts.
        #[arg(long, value_delimiter = ',', required = true)]
        nodes: Vec<usize>,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
        reps: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a results CSV into gnuplot data (objective and time against N).
    Plotdata {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the segment family and constraint rows of a benchmark.
    InspectSegments {
        #[arg(long, value_parser = BENCHMARK_NAMES)]
        problem: String,
    },
}

fn run(problem: String, method: Vec<Method>, nodes: Vec<usize>, reps: u32, out: PathBuf) -> Result<ExitCode> {
    let mut spec = ExperimentSpec::new(&problem, method, nodes);
    spec.repetitions = reps as usize;
    if let Err(e) = spec.validate() {
        eprintln!("error: {e}");
        return Ok(ExitCode::from(2));
    }
    let reports = run_experiment(&spec)?;
    let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    write_results(&reports, BufWriter::new(file))?;
    let failed = reports.iter().filter(|r| !r.success).count();
    println!("wrote {} rows to {} ({failed} unsuccessful)", reports.len(), out.display());
    Ok(if failed == reports.len() { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

fn plotdata(input: PathBuf, out: PathBuf) -> Result<ExitCode> {
    let file = File::open(&input).with_context(|| format!("opening {}", input.display()))?;
    let rows = read_results(BufReader::new(file))?;
    let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(file);
    write_plot_data(&rows, &mut w)?;
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn inspect_segments(problem: String) -> Result<ExitCode> {
    let bench = make_benchmark(&problem)?;
    let values: Vec<String> = bench.master.iter().map(|&v| bench.problem.value(v)[0].to_string()).collect();
    let family = enumerate_segments(&bench.master, &bench.mdt);
    let activation = build_activation_inequalities(&family);
    let mdt = mdt_rows_for(&family, &bench.mdt);
    let mut out = std::io::stdout().lock();
    writeln!(out, "master sequence: {}", values.join(" "))?;
    writeln!(out, "{} segments", family.len())?;
    write!(out, "{}", family.describe())?;
    writeln!(out, "{} activation inequalities, {} dwell time rows", activation.len(), mdt.len())?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { problem, method, nodes, reps, out } => run(problem, method, nodes, reps, out),
        Command::Plotdata { input, out } => plotdata(input, out),
        Command::InspectSegments { problem } => inspect_segments(problem),
    };
    match result {
        Ok(code) => code,
        // a closed pipe (e.g. `| head`) is not a failure
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
