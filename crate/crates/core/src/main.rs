use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use layertrace::estimator::{frobenius_norm_sq, single_pass_traces, ProbeBatch};
use layertrace::harness::{
    load_run, phase1_calibrate, phase2_detect, run_ensemble, sensitivity_sweep,
    train_with_monitoring, write_json, DetectOptions, EnsembleSpec, MonitorLayer, Phase1Artifact,
    Phase1Options, RunConfig, RunRecord,
};
use layertrace::model::{Batch, BatchFile, ModelObjective, ModelSpec};
use layertrace::oracle::{self, AssemblyMethod, BlockStats};
use layertrace::variance::VarianceReport;
use layertrace::{Error, Result};

const CALIBRATION_FILE: &str = "calibration.json";

#[derive(Parser)]
#[command(name = "layertrace", version, about = "Layer-wise Hessian trace estimation and CUSUM monitoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run (or an ensemble) with trace snapshots.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the clean baseline and calibrate the CUSUM threshold.
    Calibrate {
        /// Glob matching clean run directories.
        #[arg(long)]
        runs: String,
        #[arg(long, default_value_t = 1000.0)]
        arl0: f64,
        #[arg(long, default_value_t = 0.5)]
        k: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "head")]
        layer: MonitorLayer,
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
        #[arg(long, default_value_t = 2000)]
        sequences: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the calibrated detector over a set of runs.
    Detect {
        /// Directory written by `calibrate`.
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        runs: String,
        #[arg(long)]
        out: PathBuf,
        /// Epoch window for effect sizes, `first:last`.
        #[arg(long, value_parser = parse_window)]
        window: Option<(usize, usize)>,
        #[arg(long, default_value_t = 10_000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Single-pass trace estimates (and Frobenius estimates) for one batch.
    Estimate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        batch: PathBuf,
        #[arg(long = "K", default_value_t = 10)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dense Hessian reference values for one batch.
    Oracle {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        batch: PathBuf,
        /// Also assemble by finite differences and compare with probe estimates.
        #[arg(long)]
        compare: bool,
        #[arg(long = "K", default_value_t = 1000)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the dense matrix to a binary file.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long, default_value_t = oracle::DEFAULT_CAP)]
        cap: usize,
    },
    /// Re-calibrate and re-detect over a grid of (k, ARL0).
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write initial parameters for a model.
    InitParams {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_window(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected `first:last`")?;
    let a = a.parse().map_err(|_| "bad first epoch")?;
    let b = b.parse().map_err(|_| "bad last epoch")?;
    if a == 0 || b < a {
        return Err("window must satisfy 1 ≤ first ≤ last".into());
    }
    Ok((a, b))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TrainFile {
    Ensemble(EnsembleSpec),
    Single(RunConfig),
}

#[derive(Deserialize)]
struct SweepGrid {
    clean: String,
    runs: String,
    k: Vec<f64>,
    arl0: Vec<f64>,
    #[serde(default)]
    layer: MonitorLayer,
    #[serde(default = "default_tolerance")]
    tolerance: f64,
    #[serde(default = "default_sequences")]
    sequences: usize,
    #[serde(default)]
    seed: u64,
}

fn default_tolerance() -> f64 {
    0.05
}

fn default_sequences() -> usize {
    2000
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ParamsFile {
    Plain(Vec<f64>),
    Wrapped { params: Vec<f64> },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        context: "stdout".into(),
        source: e,
    })?;
    println!("{text}");
    Ok(())
}

fn load_problem(model: &Path, params: &Path, batch: &Path) -> Result<(ModelSpec, Vec<f64>, Batch)> {
    let spec = ModelSpec::parse(&read_text(model)?)?;
    let params = match read_json::<ParamsFile>(params)? {
        ParamsFile::Plain(p) | ParamsFile::Wrapped { params: p } => p,
    };
    if params.len() != spec.param_count() {
        return Err(Error::LengthMismatch {
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    let batch = Batch::from_file(&read_json::<BatchFile>(batch)?)?;
    Ok((spec, params, batch))
}

/// Run directories matched by `pattern`, sorted; files select their parent.
fn run_dirs(pattern: &str) -> Result<Vec<PathBuf>> {
    let paths = glob::glob(pattern).map_err(|e| Error::InvalidArgument(format!("bad glob `{pattern}`: {e}")))?;
    let mut dirs: Vec<PathBuf> = paths
        .filter_map(|p| p.ok())
        .map(|p| if p.is_file() { p.parent().map(Path::to_path_buf).unwrap_or(p) } else { p })
        .filter(|p| p.join(layertrace::harness::SNAPSHOT_FILE).exists())
        .collect();
    dirs.sort();
    dirs.dedup();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!("no run directories match `{pattern}`")));
    }
    Ok(dirs)
}

fn load_runs(pattern: &str) -> Result<Vec<RunRecord>> {
    run_dirs(pattern)?.iter().map(|d| load_run(d)).collect()
}

fn clean_only(runs: Vec<RunRecord>) -> Vec<RunRecord> {
    runs.into_iter()
        .filter(|r| {
            let clean = r.eta() == 0.0;
            if !clean {
                log::warn!("ignoring noisy run {} for calibration", r.run_id());
            }
            clean
        })
        .collect()
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let file: TrainFile = read_json(config)?;
    let (records, single) = match file {
        TrainFile::Single(c) => (vec![train_with_monitoring(&c, Some(out))], true),
        TrainFile::Ensemble(e) => (run_ensemble(&e.expand(), Some(out)), false),
    };
    let mut summary = Vec::new();
    let mut first_err = None;
    for r in records {
        match r {
            Ok(rec) => summary.push(json!({
                "run_id": rec.run_id(),
                "status": rec.summary.status,
                "snapshots": rec.snapshots.len(),
                "dir": if single { out.to_path_buf() } else { out.join(rec.run_id()) },
            })),
            Err(e) => {
                summary.push(json!({ "error": e.to_string() }));
                first_err.get_or_insert(e);
            }
        }
    }
    print_json(&summary)?;
    first_err.map_or(Ok(()), Err)
}

fn estimate(model: &Path, params: &Path, batch: &Path, k: usize, seed: u64) -> Result<()> {
    let (spec, params, batch) = load_problem(model, params, batch)?;
    let mut graph = spec.forward(&params, &batch)?;
    graph.gradient(true)?;
    let partition = spec.partition();
    let traces = single_pass_traces(&graph, &ProbeBatch::rademacher(seed, k))?;
    let mut frob = Vec::with_capacity(partition.layers());
    for l in 0..partition.layers() {
        let probes = ProbeBatch::rademacher(seed, k).with_stream(1 + l as u64);
        frob.push(frobenius_norm_sq(&graph, l, &probes)?.estimate);
    }
    let names: Vec<String> = partition.groups().iter().map(|g| g.name.clone()).collect();
    let sizes: Vec<usize> = partition.groups().iter().map(|g| g.len).collect();
    let report = VarianceReport::from_estimates(&names, &sizes, &traces.estimates, &frob, k)?;
    eprint!("{report}");
    let layers: Vec<_> = (0..partition.layers())
        .map(|l| {
            let s = &traces.samples[l];
            json!({
                "layer": l,
                "name": names[l],
                "params": sizes[l],
                "trace_est": traces.estimates[l],
                "std_error": if s.len() > 1 { Some(layertrace::stats::std_error(s)) } else { None },
                "frobenius_sq_est": frob[l],
                "probe_vals": s,
            })
        })
        .collect();
    print_json(&json!({
        "loss": graph.loss(),
        "K": k,
        "seed": seed,
        "layers": layers,
        "variance": report,
    }))
}

#[allow(clippy::too_many_arguments)]
fn oracle_cmd(
    model: &Path,
    params: &Path,
    batch: &Path,
    compare: bool,
    k: usize,
    seed: u64,
    dump: Option<&Path>,
    cap: usize,
) -> Result<()> {
    let (spec, params, batch) = load_problem(model, params, batch)?;
    let objective = ModelObjective::new(&spec, &batch);
    let dense = oracle::assemble(&objective, &params, AssemblyMethod::BasisHvp, cap)?;
    if let Some(path) = dump {
        dense.write_binary(path)?;
    }
    let partition = spec.partition();
    let mut layers = Vec::with_capacity(partition.layers());
    for (l, g) in partition.groups().iter().enumerate() {
        let s: BlockStats = dense.exact_block_stats(l)?;
        let (lo, hi) = s
            .eigenvalues
            .as_ref()
            .map_or((None, None), |ev| (ev.first().copied(), ev.last().copied()));
        layers.push(json!({
            "layer": l,
            "name": g.name,
            "params": g.len,
            "trace": s.trace,
            "frobenius_sq": s.frobenius_sq,
            "diag_sq_sum": s.diag_sq_sum,
            "eigen_min": lo,
            "eigen_max": hi,
        }));
    }
    let mut out = json!({
        "dim": dense.dim(),
        "trace": dense.trace(),
        "asymmetry": dense.asymmetry(),
        "layers": layers,
        "variance": VarianceReport::from_oracle(&dense, k)?,
    });
    if compare {
        let fd = oracle::assemble(&objective, &params, AssemblyMethod::FiniteDifference, cap)?;
        let max_scaled = dense
            .matrix()
            .iter()
            .zip(fd.matrix().iter())
            .map(|(a, b)| (a - b).abs() / (1.0 + a.abs()))
            .fold(0.0, f64::max);
        let mut graph = spec.forward(&params, &batch)?;
        graph.gradient(true)?;
        let est = single_pass_traces(&graph, &ProbeBatch::rademacher(seed, k))?;
        let rows: Vec<_> = (0..partition.layers())
            .map(|l| {
                let exact = dense.block(l).map(|b| b.trace()).unwrap_or(f64::NAN);
                let se = if k > 1 { layertrace::stats::std_error(&est.samples[l]) } else { f64::NAN };
                json!({
                    "layer": l,
                    "oracle_trace": exact,
                    "estimate": est.estimates[l],
                    "std_error": se,
                    "z": (est.estimates[l] - exact) / se,
                })
            })
            .collect();
        out["compare"] = json!({
            "finite_difference_max_scaled_diff": max_scaled,
            "methods_agree": max_scaled <= 1e-4,
            "K": k,
            "seed": seed,
            "estimates": rows,
        });
    }
    print_json(&out)
}

fn calibrate(runs: &str, opts: Phase1Options, out: &Path) -> Result<()> {
    let records = clean_only(load_runs(runs)?);
    let art = phase1_calibrate(&records, &opts)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_json(&out.join(CALIBRATION_FILE), &art)?;
    print_json(&json!({
        "k": art.calibration.k,
        "h": art.calibration.h,
        "arl0_target": art.calibration.arl0_target,
        "arl0_achieved": art.calibration.arl0_achieved,
        "converged": art.calibration.converged,
        "members": art.members.len(),
        "excluded": art.excluded,
        "rho1": art.autocorrelation.rho1,
    }))
}

fn detect(baseline: &Path, runs: &str, out: &Path, opts: DetectOptions) -> Result<()> {
    let art: Phase1Artifact = read_json(&baseline.join(CALIBRATION_FILE))?;
    let records = load_runs(runs)?;
    let table = phase2_detect(&art, &records, &opts)?;
    write_json(out, &table)?;
    print!("{table}");
    Ok(())
}

fn sweep(grid: &Path, out: Option<&Path>) -> Result<()> {
    let g: SweepGrid = read_json(grid)?;
    let clean = clean_only(load_runs(&g.clean)?);
    let runs = load_runs(&g.runs)?;
    let base = Phase1Options {
        layer: g.layer,
        tolerance: g.tolerance,
        sequences: g.sequences,
        seed: g.seed,
        ..Phase1Options::default()
    };
    let report = sensitivity_sweep(&clean, &runs, &g.k, &g.arl0, &base)?;
    match out {
        Some(p) => write_json(p, &report)?,
        None => print_json(&report)?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => train(&config, &out),
        Command::Calibrate {
            runs,
            arl0,
            k,
            out,
            layer,
            tolerance,
            sequences,
            seed,
        } => calibrate(
            &runs,
            Phase1Options {
                k,
                arl0,
                tolerance,
                sequences,
                seed,
                layer,
                sigma_floor: None,
            },
            &out,
        ),
        Command::Detect {
            baseline,
            runs,
            out,
            window,
            bootstrap,
            seed,
        } => detect(&baseline, &runs, &out, DetectOptions { window, bootstrap, seed }),
        Command::Estimate {
            model,
            params,
            batch,
            probes,
            seed,
        } => estimate(&model, &params, &batch, probes, seed),
        Command::Oracle {
            model,
            params,
            batch,
            compare,
            probes,
            seed,
            dump,
            cap,
        } => oracle_cmd(&model, &params, &batch, compare, probes, seed, dump.as_deref(), cap),
        Command::Sweep { grid, out } => sweep(&grid, out.as_deref()),
        Command::InitParams { model, seed, out } => {
            let spec = ModelSpec::parse(&read_text(&model)?)?;
            write_json(&out, &spec.init_params(seed))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
