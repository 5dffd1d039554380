use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geoerm::har::{load_har, run_har, standardize_per_subject, write_har_report, HarMethod, HarSpec};
use geoerm::harness::{
    aggregate, emit_csv, emit_plot, emit_summary_csv, run_sweep, self_check, Axis, Method, RunManifest, SweepSpec,
};
use geoerm::objective::LossKind;
use geoerm::synthdata::{gen_suite, write_suite, ExperimentConfig};
use geoerm::{GeoErmError, Result};

#[derive(Parser)]
#[command(name = "geoerm", version, about = "Multi-task representation learning on the Stiefel manifold")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep one data-generation parameter and compare methods.
    Simulate(SimulateArgs),
    /// Per-subject activity classification on the UCI HAR files.
    Har(HarArgs),
    /// Run the invariant self-check suite.
    Check,
    /// Write one synthetic suite to disk.
    Gen(GenArgs),
}

/// Overrides for the fixed experiment settings.
#[derive(Args, Default)]
struct ExperimentFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eps: Option<f64>,
    /// linear or logistic
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long = "tasks", alias = "T")]
    tasks: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

impl ExperimentFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.eps {
            cfg.eps = v;
        }
        if let Some(v) = self.loss {
            cfg.loss = v;
        }
        if let Some(v) = self.tasks {
            cfg.tasks = v;
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.p {
            cfg.p = v;
        }
        if let Some(v) = self.r {
            cfg.r = v;
        }
        if let Some(v) = self.h {
            cfg.h = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Sweep specification (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// h, n, T or p
    #[arg(long, value_parser = |s: &str| s.parse::<Axis>().map_err(|e| e.to_string()))]
    axis: Option<Axis>,
    /// Comma-separated, strictly increasing.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long)]
    reps: Option<usize>,
    /// Comma-separated subset of GeoERM, SingleTask, Pooled, PlainERM, NaiveOrtho.
    #[arg(long, value_delimiter = ',', value_parser = |s: &str| s.parse::<Method>().map_err(|e| e.to_string()))]
    methods: Option<Vec<Method>>,
    #[command(flatten)]
    experiment: ExperimentFlags,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, overrides_with = "no_plot")]
    plot: bool,
    #[arg(long)]
    no_plot: bool,
    /// Run the self-check first and stop if it fails.
    #[arg(long)]
    check: bool,
    /// Record per-fit wall time (makes the CSV non-reproducible).
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct HarArgs {
    /// Directory holding train/ and test/ from the UCI HAR release.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Comma-separated; also accepts AlwaysDynamic.
    #[arg(long, value_delimiter = ',', value_parser = |s: &str| s.parse::<HarMethod>().map_err(|e| e.to_string()))]
    methods: Option<Vec<HarMethod>>,
    #[arg(long, value_delimiter = ',')]
    r: Option<Vec<usize>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    /// Experiment configuration (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    experiment: ExperimentFlags,
    #[arg(long, default_value = "suite")]
    out_dir: PathBuf,
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown loss '{s}' (expected linear or logistic)"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| GeoErmError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GeoErmError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn simulate(args: SimulateArgs) -> Result<bool> {
    let mut spec: SweepSpec = match &args.config {
        Some(path) => read_json(path)?,
        None => SweepSpec::default(),
    };
    if let Some(axis) = args.axis {
        spec.axis = axis;
    }
    if let Some(values) = args.values {
        spec.values = values;
    }
    if let Some(reps) = args.reps {
        spec.replications = reps;
    }
    if let Some(methods) = args.methods {
        spec.methods = methods;
    }
    args.experiment.apply(&mut spec.fixed);
    spec.validate()?;

    if args.check {
        let report = self_check();
        println!("{report}");
        if !report.all_passed() {
            return Ok(false);
        }
    }

    create_dir(&args.out_dir)?;
    let rows = run_sweep(&spec, args.timings)?;
    let summary = aggregate(&rows);
    let mut outputs = vec!["results.csv".to_string(), "summary.csv".to_string()];
    emit_csv(&rows, &args.out_dir.join("results.csv"))?;
    emit_summary_csv(&summary, &args.out_dir.join("summary.csv"))?;
    if !args.no_plot {
        emit_plot(&summary, &args.out_dir.join("plot.svg"))?;
        outputs.push("plot.svg".into());
    }
    let mut resolved = Vec::new();
    for &value in &spec.values {
        let hp = spec.axis.apply(&spec.fixed, value)?.hyperparams();
        resolved.push(serde_json::json!({ "value": value, "lambda": hp.lambda, "gamma": hp.gamma }));
    }
    let config = serde_json::json!({ "spec": spec, "resolved_hyperparams": resolved });
    RunManifest::new("simulate", config, outputs).write(&args.out_dir)?;

    for s in &summary {
        println!(
            "{:<11} {}={:<8} mean {:.4}  sd {:.4}  n {}{}",
            s.method,
            s.axis,
            s.value,
            s.mean,
            s.sd,
            s.count,
            if s.failed > 0 { format!("  failed {}", s.failed) } else { String::new() }
        );
    }
    println!("wrote {}", args.out_dir.display());
    Ok(true)
}

fn har(args: HarArgs) -> Result<bool> {
    let dir = args.data_dir.ok_or_else(|| GeoErmError::MissingData {
        path: PathBuf::from("<no --data-dir given>"),
    })?;
    let mut spec = HarSpec::default();
    if let Some(methods) = args.methods {
        spec.methods = methods;
    }
    if let Some(r) = args.r {
        spec.r_values = r;
    }
    if let Some(reps) = args.reps {
        spec.replications = reps;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(it) = args.iterations {
        spec.iterations = it;
    }
    if let Some(alpha) = args.alpha {
        spec.alpha = alpha;
    }
    let ds = standardize_per_subject(&load_har(&dir)?);
    println!("loaded {} subjects, {} rows, {} features", ds.subjects.len(), ds.total_rows(), ds.features());
    let report = run_har(&ds, &spec)?;
    create_dir(&args.out_dir)?;
    write_har_report(&report, &args.out_dir)?;
    let config = serde_json::json!({ "data_dir": dir, "spec": spec });
    RunManifest::new("har", config, vec!["har_report.csv".into(), "har_table.csv".into()]).write(&args.out_dir)?;
    for row in &report.rows {
        println!(
            "{:<13} r={:<3} error {:.2}% (sd {:.2}){}",
            row.method,
            row.r,
            row.mean_error_pct,
            row.sd_error_pct,
            if row.failed > 0 { format!("  failed {}", row.failed) } else { String::new() }
        );
    }
    Ok(true)
}

fn gen(args: GenArgs) -> Result<bool> {
    let mut cfg: ExperimentConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => ExperimentConfig::default(),
    };
    args.experiment.apply(&mut cfg);
    let (data, truth) = gen_suite(&cfg)?;
    write_suite(&args.out_dir, &data, &truth)?;
    println!(
        "wrote {} tasks ({} outliers) to {}",
        data.len(),
        truth.outliers.len(),
        args.out_dir.display()
    );
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Har(args) => har(args),
        Command::Check => {
            let report = self_check();
            println!("{report}");
            Ok(report.all_passed())
        }
        Command::Gen(args) => gen(args),
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
