use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use codamed::coda::{basis_from_sbp, ilr_counts_matrix, pivotal_sbp, default_part_labels, DEFAULT_ZERO_REPLACEMENT};
use codamed::experiment::{
    run_plan, write_diagnostics_csv, write_replicates_csv, write_summary_csv, write_truth_json, StudyPlan,
};
use codamed::io::{
    join_cohort, parse_counts_csv, parse_metadata_csv, parse_sbp_csv, parse_weights_csv, write_counts_csv,
    write_effects_csv, write_effects_json, write_ilr_csv, write_metadata_csv, write_sbp_csv, CountTable,
};
use codamed::mediation::{mediate, MediationOptions, Pooling, DEFAULT_CI_LEVEL};
use codamed::simgen::{calibrate_truth, preset, simulate_cohort, GenerativeConfig, DEFAULT_MC_REPS};
use codamed::SbpMatrix;

const THREADS_ENV: &str = "CODAMED_THREADS";

#[derive(Parser)]
#[command(name = "codamed", version, about = "Mediation analysis for compositional count data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition matrix utilities
    #[command(subcommand)]
    Sbp(SbpCommand),
    /// ilr coordinates of a count table
    Transform(TransformArgs),
    /// Estimate total, direct and indirect effects
    Mediate(MediateArgs),
    /// Draw one cohort from a generating config
    Simulate(SimulateArgs),
    /// Run a replicated simulation study
    Experiment(ExperimentArgs),
}

#[derive(Subcommand)]
enum SbpCommand {
    /// Check a partition matrix CSV
    Validate { matrix: PathBuf },
    /// Print the pivotal partition for the given part order
    Pivotal {
        /// Comma-separated part labels, first one is isolated first
        #[arg(long, value_delimiter = ',')]
        parts: Option<Vec<String>>,
        #[arg(long, default_value_t = 5)]
        num_parts: usize,
    },
}

#[derive(Args)]
struct TransformArgs {
    #[arg(long)]
    counts: PathBuf,
    #[arg(long)]
    sbp: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ZERO_REPLACEMENT)]
    zero_replacement: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct MediateArgs {
    #[arg(long)]
    counts: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    #[arg(long)]
    sbp: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CI_LEVEL)]
    ci: f64,
    /// Pool per-stratum exposure effects against one shared response fit
    #[arg(long)]
    shared_gamma: bool,
    /// Stratum weights CSV (stratum,weight); empirical proportions otherwise
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ZERO_REPLACEMENT)]
    zero_replacement: f64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario: scenario1, scenario2 or scenario3
    #[arg(long)]
    preset: Option<String>,
    /// Count table destination
    #[arg(long)]
    out: PathBuf,
    /// Metadata destination; defaults to <out stem>.meta.csv
    #[arg(long)]
    meta_out: Option<PathBuf>,
    /// Also write the generating partition here
    #[arg(long)]
    sbp_out: Option<PathBuf>,
    /// Also write the calibrated path coefficients here (JSON)
    #[arg(long)]
    truth_out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MC_REPS)]
    mc_reps: usize,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; falls back to CODAMED_THREADS, then all cores
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    mc_reps: Option<usize>,
    /// Also write per-replicate estimates
    #[arg(long)]
    write_replicates: bool,
}

struct Failure {
    kind: &'static str,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, err: impl ToString) -> Self {
        Failure { kind, message: err.to_string() }
    }
}

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_sbp(path: &Path) -> Result<SbpMatrix, Failure> {
    parse_sbp_csv(&read(path)?).map_err(|e| Failure::new("sbp", e))
}

fn load_counts(path: &Path) -> Result<CountTable, Failure> {
    parse_counts_csv(&read(path)?).map_err(|e| Failure::new("counts", e))
}

// Reorders count columns to follow the partition's part order.
fn align(mut table: CountTable, sbp: &SbpMatrix) -> Result<CountTable, Failure> {
    let want = sbp.part_labels();
    if table.part_labels == want {
        return Ok(table);
    }
    let idx: Option<Vec<usize>> = want.iter().map(|l| table.part_labels.iter().position(|p| p == l)).collect();
    match idx {
        Some(idx) if idx.len() == table.part_labels.len() => {
            table.counts = table.counts.select_columns(&idx);
            table.part_labels = want.to_vec();
            Ok(table)
        }
        _ => Err(Failure::new(
            "layout",
            format!("count columns {:?} do not match partition parts {:?}", table.part_labels, want),
        )),
    }
}

fn sbp_cmd(cmd: SbpCommand) -> Outcome {
    match cmd {
        SbpCommand::Validate { matrix } => {
            let sbp = load_sbp(&matrix)?;
            println!("valid: {} parts, {} balances", sbp.num_parts(), sbp.num_balances());
        }
        SbpCommand::Pivotal { parts, num_parts } => {
            let labels = parts.unwrap_or_else(|| default_part_labels(num_parts));
            let order: Vec<usize> = (0..labels.len()).collect();
            let sbp = pivotal_sbp(labels.len(), &order, labels).map_err(|e| Failure::new("sbp", e))?;
            print!("{}", write_sbp_csv(&sbp));
        }
    }
    Ok(())
}

fn transform(args: TransformArgs) -> Outcome {
    let sbp = load_sbp(&args.sbp)?;
    let table = align(load_counts(&args.counts)?, &sbp)?;
    let basis = basis_from_sbp(&sbp);
    let ilr = ilr_counts_matrix(&table.counts, &basis, args.zero_replacement).map_err(|e| Failure::new("coda", e))?;
    emit(args.out.as_deref(), &write_ilr_csv(&table.sample_ids, sbp.balance_labels(), &ilr))
}

fn mediate_cmd(args: MediateArgs) -> Outcome {
    if !(args.ci > 0.0 && args.ci < 1.0) {
        return Err(Failure::new("arguments", format!("--ci must lie in (0, 1), got {}", args.ci)));
    }
    let sbp = load_sbp(&args.sbp)?;
    let counts = align(load_counts(&args.counts)?, &sbp)?;
    let meta = parse_metadata_csv(&read(&args.meta)?).map_err(|e| Failure::new("metadata", e))?;
    let data = join_cohort(&counts, &meta).map_err(|e| Failure::new("layout", e))?;
    let weights = match &args.weights {
        Some(p) => Some(parse_weights_csv(&read(p)?).map_err(|e| Failure::new("weights", e))?),
        None => None,
    };
    let options = MediationOptions {
        zero_replacement: args.zero_replacement,
        ci_level: args.ci,
        pooling: if args.shared_gamma { Pooling::SharedGamma } else { Pooling::StratumProducts },
        weights,
    };
    let est = mediate(&data, &sbp, &options).map_err(|e| Failure::new("mediation", e))?;
    let text = match args.format {
        Format::Csv => write_effects_csv(&est),
        Format::Json => write_effects_json(&est),
    };
    emit(args.out.as_deref(), &text)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn simulate(args: SimulateArgs) -> Outcome {
    let mut config: GenerativeConfig = match (&args.config, &args.preset) {
        (Some(p), _) => GenerativeConfig::from_json(&read(p)?).map_err(|e| Failure::new("config", e))?,
        (None, Some(name)) => preset(name).map_err(|e| Failure::new("config", e))?,
        (None, None) => unreachable!("clap requires one of --config/--preset"),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.n {
        config.n = n;
    }
    config.validate().map_err(|e| Failure::new("config", e))?;
    let truth = calibrate_truth(&config, args.mc_reps, config.seed).map_err(|e| Failure::new("simulation", e))?;
    let sim = simulate_cohort(&config, &truth).map_err(|e| Failure::new("simulation", e))?;
    let names: Vec<String> = config.confounders.iter().map(|c| c.name.clone()).collect();

    write(&args.out, &write_counts_csv(&sim.data))?;
    let meta_out = args.meta_out.unwrap_or_else(|| sibling(&args.out, ".meta.csv"));
    write(&meta_out, &write_metadata_csv(&sim.data, &names, &sim.confounders))?;
    if let Some(p) = &args.sbp_out {
        let sbp = config.sbp.to_sbp().map_err(|e| Failure::new("sbp", e))?;
        write(p, &write_sbp_csv(&sbp))?;
    }
    if let Some(p) = &args.truth_out {
        let text = serde_json::to_string_pretty(&truth).map_err(|e| Failure::new("json", e))?;
        write(p, &format!("{text}\n"))?;
    }
    eprintln!("simulated {} samples into {} and {}", sim.data.len(), args.out.display(), meta_out.display());
    Ok(())
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Failure::new("arguments", format!("{THREADS_ENV}={v:?} is not a thread count"))),
        _ => Ok(None),
    }
}

fn experiment(args: ExperimentArgs) -> Outcome {
    let mut plan = StudyPlan::from_json(&read(&args.plan)?).map_err(|e| Failure::new("plan", e))?;
    if let Some(r) = args.replicates {
        plan.replicates = r;
    }
    if let Some(s) = args.seed {
        plan.master_seed = s;
    }
    if let Some(m) = args.mc_reps {
        plan.mc_reps = m;
    }
    plan.write_replicates |= args.write_replicates;
    plan.validate().map_err(|e| Failure::new("plan", e))?;
    let threads = thread_count(args.threads)?;

    let results = run_plan(&plan, threads).map_err(|e| Failure::new("experiment", e))?;
    let summaries: Vec<_> = results.iter().map(|r| r.summary.clone()).collect();
    fs::create_dir_all(&args.out).map_err(|e| Failure::new("io", format!("{}: {e}", args.out.display())))?;
    write(&args.out.join("summary.csv"), &write_summary_csv(&summaries))?;
    write(&args.out.join("diagnostics.csv"), &write_diagnostics_csv(&summaries))?;
    write(&args.out.join("truth.json"), &write_truth_json(&summaries))?;
    if plan.write_replicates {
        write(&args.out.join("replicates.csv"), &write_replicates_csv(&results))?;
    }
    for s in &summaries {
        if s.replicates_failed > 0 {
            eprintln!("{}: {} of {} replicates failed", s.cell.scenario, s.replicates_failed, plan.replicates);
        }
    }
    eprintln!("wrote {} cells to {}", summaries.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Sbp(cmd) => sbp_cmd(cmd),
        Command::Transform(a) => transform(a),
        Command::Mediate(a) => mediate_cmd(a),
        Command::Simulate(a) => simulate(a),
        Command::Experiment(a) => experiment(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = if f.kind == "arguments" { 2 } else { 1 };
            eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
            ExitCode::from(code)
        }
    }
}
