//! `panova` command line: decompositions, ratio tests, stacking, studies and
//! model-list selection.
//!
//! Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or
//! configuration error.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use panova::experiments::{run_and_write, ScenarioSpec, StudyKind};
use panova::intervals::{choose_model_list, CandidateSummary};
use panova::report::{decomposition_csv, model_list_csv, tau_sweep_csv, to_json, write_text};
use panova::vartest::{asl_test_with, read_z_samples, NullForm, DEFAULT_J, REJECT_LEVEL};
use panova::{Error, FactorTree};

#[derive(Parser)]
#[command(
    name = "panova",
    version,
    about = "Predictive analysis of variance for model averages"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "PANOVA_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose a stored factor tree (JSON) into its variance terms.
    Decompose {
        /// Tree file: factors, levels, nested weights, leaves.
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the JSON report instead of the CSV table.
        #[arg(long)]
        json: bool,
    },
    /// Test H0: E[ratio] >= tau on stored ratio samples.
    Test {
        /// One ratio per line.
        #[arg(long)]
        z: PathBuf,
        #[command(flatten)]
        test: TestArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the outcomes as JSON instead of one verdict line per tau.
        #[arg(long)]
        json: bool,
    },
    /// Stack externally fitted models from their out-of-fold predictions.
    Stack {
        /// model, fold, row, prediction
        #[arg(long)]
        oof: PathBuf,
        /// CSV holding the response column.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        response: String,
        /// model, mean, variance at the new point.
        #[arg(long)]
        heldout: PathBuf,
        /// model, row, mean, variance, outcome for coverage.
        #[arg(long)]
        test_predictions: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        test: TestArgs,
        /// Outer bootstrap replicates.
        #[arg(long = "B")]
        b: Option<usize>,
        #[arg(long, default_value = "panova-out")]
        out: PathBuf,
    },
    /// Run a study from a scenario file.
    Study {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        tau: Option<Vec<f64>>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[command(flatten)]
        sizes: SizeArgs,
        #[arg(long, default_value = "panova-out")]
        out: PathBuf,
    },
    /// Pick the smallest-variance model list with near-nominal coverage.
    Select {
        /// JSON array of {candidate, coverage, variance}.
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0.02)]
        delta: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TestArgs {
    /// Comma-separated thresholds.
    #[arg(long, value_delimiter = ',')]
    tau: Option<Vec<f64>>,
    /// Inner resamples.
    #[arg(long = "J")]
    j: Option<usize>,
    /// Rejection threshold for the ASL.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    null_form: Option<NullFormArg>,
}

#[derive(Args)]
struct SizeArgs {
    /// Outer bootstrap replicates.
    #[arg(long = "B")]
    b: Option<usize>,
    /// Inner resamples.
    #[arg(long = "J")]
    j: Option<usize>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum NullFormArg {
    Shift,
    Literal,
}

impl From<NullFormArg> for NullForm {
    fn from(a: NullFormArg) -> Self {
        match a {
            NullFormArg::Shift => NullForm::Shift,
            NullFormArg::Literal => NullForm::Literal,
        }
    }
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_input_error() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Decompose { tree, out, json } => decompose(&tree, out.as_deref(), json),
        Command::Test {
            z,
            test,
            seed,
            out,
            json,
        } => ratio_test(&z, &test, seed, out.as_deref(), json),
        Command::Stack {
            oof,
            data,
            response,
            heldout,
            test_predictions,
            seed,
            test,
            b,
            out,
        } => {
            let seed = seed.ok_or_else(|| Failure::usage("stack needs --seed"))?;
            let mut spec = ScenarioSpec::new(StudyKind::ExternalStacking, seed);
            for p in [&oof, &data, &heldout]
                .into_iter()
                .chain(test_predictions.as_ref())
            {
                existing(p)?;
            }
            spec.inputs.oof_predictions = Some(oof);
            spec.inputs.data = Some(data);
            spec.inputs.response = Some(response);
            spec.inputs.heldout = Some(heldout);
            spec.inputs.test_predictions = test_predictions;
            if let Some(t) = test.tau {
                spec.pipeline.taus = Some(t);
            }
            if let Some(a) = test.alpha {
                spec.pipeline.alpha = a;
            }
            if let Some(f) = test.null_form {
                spec.pipeline.null_form = f.into();
            }
            apply_sizes(&mut spec, &SizeArgs { b, j: test.j });
            study_run(&spec, &out)
        }
        Command::Study {
            config,
            seed,
            tau,
            alpha,
            delta,
            sizes,
            out,
        } => {
            existing(&config)?;
            let mut spec = ScenarioSpec::from_file(&config)?;
            if seed.is_some() {
                spec.seed = seed;
            }
            if tau.is_some() {
                spec.pipeline.taus = tau;
            }
            if let Some(a) = alpha {
                spec.pipeline.alpha = a;
            }
            if let Some(d) = delta {
                spec.pipeline.delta = d;
            }
            apply_sizes(&mut spec, &sizes);
            study_run(&spec, &out)
        }
        Command::Select {
            candidates,
            alpha,
            delta,
            out,
        } => select(&candidates, alpha, delta, out.as_deref()),
    }
}

fn existing(path: &Path) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("no such file: {}", path.display())))
    }
}

fn open(path: &Path) -> std::result::Result<BufReader<File>, Failure> {
    existing(path)?;
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::usage(format!("cannot open {}: {e}", path.display())))
}

fn write_both<T: Serialize>(out: &Path, stem: &str, csv: &str, value: &T) -> Outcome {
    write_text(&out.join(format!("{stem}.csv")), csv)?;
    write_text(&out.join(format!("{stem}.json")), &to_json(value)?)?;
    Ok(())
}

fn decompose(path: &Path, out: Option<&Path>, json: bool) -> Outcome {
    let tree: FactorTree = serde_json::from_reader(open(path)?)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let report = tree.decompose();
    let csv = decomposition_csv(&report)?;
    if let Some(dir) = out {
        write_both(dir, "decomposition", &csv, &report)?;
    }
    if json {
        println!("{}", to_json(&report)?);
    } else {
        print!("{csv}");
    }
    Ok(())
}

fn ratio_test(
    path: &Path,
    args: &TestArgs,
    seed: Option<u64>,
    out: Option<&Path>,
    json: bool,
) -> Outcome {
    let seed = seed.ok_or_else(|| Failure::usage("test needs --seed"))?;
    let taus = args
        .tau
        .clone()
        .ok_or_else(|| Failure::usage("test needs --tau"))?;
    let level = args.alpha.unwrap_or(REJECT_LEVEL);
    if !(level > 0.0 && level < 1.0) {
        return Err(Failure::usage(format!("--alpha {level} outside (0, 1)")));
    }
    let z = read_z_samples(open(path)?)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let form = args.null_form.map(NullForm::from).unwrap_or_default();
    let outcomes = taus
        .iter()
        .map(|&tau| asl_test_with(&z, tau, args.j.unwrap_or(DEFAULT_J), seed, form))
        .collect::<panova::Result<Vec<_>>>()?;
    if let Some(dir) = out {
        write_both(dir, "tests", &tau_sweep_csv(&outcomes)?, &outcomes)?;
    }
    if json {
        println!("{}", to_json(&outcomes)?);
    } else {
        for o in &outcomes {
            let verdict = if o.asl < level {
                "reject H0"
            } else {
                "retain H0"
            };
            println!(
                "tau {}: z_bar {:.4}, ASL {:.4}: {verdict}",
                o.tau, o.z_bar, o.asl
            );
        }
    }
    Ok(())
}

fn apply_sizes(spec: &mut ScenarioSpec, sizes: &SizeArgs) {
    if let Some(b) = sizes.b {
        spec.pipeline.b = b;
    }
    if let Some(j) = sizes.j {
        spec.pipeline.j = j;
    }
}

fn study_run(spec: &ScenarioSpec, out: &Path) -> Outcome {
    spec.validate()?;
    let manifest = run_and_write(spec, out)?;
    println!(
        "{} (seed {}) wrote {} files to {} in {:.1}s",
        manifest.study,
        manifest.seed,
        manifest.outputs.len(),
        out.display(),
        manifest.timing.runtime_seconds
    );
    Ok(())
}

fn select(path: &Path, alpha: f64, delta: f64, out: Option<&Path>) -> Outcome {
    let rows: Vec<CandidateSummary> = serde_json::from_reader(open(path)?)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let report =
        choose_model_list(&rows, alpha, delta).map_err(|e| Failure::usage(e.to_string()))?;
    let csv = model_list_csv(&report)?;
    if let Some(dir) = out {
        write_both(dir, "model_list", &csv, &report)?;
    }
    print!("{csv}");
    if let Some(flag) = report.flag() {
        eprintln!("note: {flag}");
    }
    Ok(())
}
