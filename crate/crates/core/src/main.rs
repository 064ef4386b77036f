use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gnmf::admm::{ao_admm, nndsvd_init, SolverConfig};
use gnmf::data::{self, SyntheticBlock, SyntheticSpec};
use gnmf::eval::{self, EvalModel};
use gnmf::factormer::{ModelConfig, ModelKind, ModelParams};
use gnmf::gradcheck;
use gnmf::models::{learned_accel, learned_init, Trajectory};
use gnmf::training::{self, ExperimentConfig, Sample};
use gnmf::{DenseMatrix, Error};

#[derive(Parser)]
#[command(name = "gnmf", version, about = "Graph-network accelerated nonnegative matrix factorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// "count,rmin,rmax,cmin,cmax"; may be repeated.
        #[arg(long = "block", required = true)]
        blocks: Vec<SyntheticBlock>,
        #[arg(long)]
        rank: usize,
        #[arg(long, default_value_t = 0.01)]
        sigma: f64,
        /// Mean of the exponential factor entries (default 1/sqrt(rank)).
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print entry statistics of a dataset and write a histogram CSV.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        hist: Option<PathBuf>,
    },
    /// Train a learned-initialization or learned-acceleration model.
    Train {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// JSON file with optional "model" and "train" sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step training log (default: <out>.log.csv).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Scale attention logits by 1/sqrt(d) instead of 1/sqrt(d/heads).
        #[arg(long)]
        paper_scale: bool,
    },
    /// Factorize one matrix and write its per-iteration RMSE.
    Run {
        /// FMAT1 file, or CSV when the extension is .csv.
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long, value_enum, default_value_t = Method::Baseline)]
        method: Method,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, default_value_t = 5)]
        inner: usize,
        /// Acceleration steps for --method accel (default min(5, iters)).
        #[arg(long)]
        nbr_acc: Option<usize>,
        #[arg(long)]
        csv: PathBuf,
        /// Writes the final factors to <prefix>_W.fmat and <prefix>_H.fmat.
        #[arg(long)]
        factors_out: Option<PathBuf>,
        /// Scale the matrix to mean one before solving.
        #[arg(long)]
        normalize: bool,
    },
    /// Compare the baseline with trained models over a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// The baseline is always evaluated; accepted for explicitness.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        accel: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, default_value_t = 5)]
        inner: usize,
        #[arg(long, default_value_t = 5)]
        nbr_acc: usize,
        /// Factorization rank (default: the dataset manifest's rank).
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the model gradients.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Write each column of W as a PGM image.
    ExportBasis {
        #[arg(long)]
        factors: PathBuf,
        /// "HxW", e.g. 32x32.
        #[arg(long)]
        image_shape: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Init,
    Accel,
}

impl From<Kind> for ModelKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Init => ModelKind::Init,
            Kind::Accel => ModelKind::Accel,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Baseline,
    Init,
    Accel,
}

enum Failure {
    Usage(String),
    Numerical(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Gen {
            out,
            blocks,
            rank,
            sigma,
            lambda,
            seed,
        } => {
            let spec = SyntheticSpec {
                blocks,
                rank,
                lambda,
                sigma,
                seed,
            };
            let manifest = data::gen_synthetic(&spec, &out)?;
            println!("wrote {} matrices to {}", manifest.files.len(), out.display());
            Ok(())
        }
        Command::Stats { data: dir, hist } => {
            let mats = data::load_dataset(&dir)?;
            let stats = data::dataset_stats(mats.iter().map(|(_, m)| m))?;
            println!(
                "matrices {} entries {} mean {} variance {} max {}",
                stats.matrices, stats.entries, stats.mean, stats.variance, stats.max
            );
            if let Some(p) = hist {
                data::write_histogram_csv(&p, &stats)?;
            }
            Ok(())
        }
        Command::Train {
            kind,
            data: dir,
            val,
            config,
            out,
            log,
            epochs,
            seed,
            paper_scale,
        } => {
            let opts = TrainOverrides {
                epochs,
                seed,
                paper_scale,
            };
            train(kind.into(), &dir, val.as_deref(), config.as_deref(), &out, log, opts)
        }
        Command::Run {
            matrix,
            rank,
            method,
            model,
            iters,
            inner,
            nbr_acc,
            csv,
            factors_out,
            normalize,
        } => run(RunArgs {
            matrix,
            rank,
            method,
            model,
            iters,
            inner,
            nbr_acc,
            csv,
            factors_out,
            normalize,
        }),
        Command::Eval {
            data: dir,
            baseline: _,
            init,
            accel,
            iters,
            inner,
            nbr_acc,
            rank,
            out,
        } => evaluate(&dir, init, accel, iters, inner, nbr_acc, rank, &out),
        Command::GradCheck { seed, tol } => grad_check(seed, tol),
        Command::ExportBasis {
            factors,
            image_shape,
            out,
        } => export_basis(&factors, &image_shape, &out),
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

struct TrainOverrides {
    epochs: Option<usize>,
    seed: Option<u64>,
    paper_scale: bool,
}

fn train(
    kind: ModelKind,
    dir: &Path,
    val: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    log: Option<PathBuf>,
    opts: TrainOverrides,
) -> CliResult {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.train.model_kind = kind;
    if let Some(e) = opts.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = opts.seed {
        cfg.train.seed = s;
    }
    cfg.model.paper_scale |= opts.paper_scale;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let rank = cfg.model.rank;
    let train_set = training::prepare_samples(data::load_dataset(dir)?, rank)?;
    let val_set = match val {
        Some(v) => training::prepare_samples(data::load_dataset(v)?, rank)?,
        None => Vec::new(),
    };
    let params = ModelParams::init(&cfg.model, kind, cfg.train.seed)?;
    let outcome = training::train(&train_set, &val_set, params, &cfg.model, &cfg.train, |summary, p| {
        data::save_model(&suffixed(out, &format!(".epoch{}", summary.epoch)), p, &cfg.model, kind)?;
        match summary.val_rmse {
            Some(v) => println!(
                "epoch {} nbr_acc {} mean_loss {} val_rmse {v}",
                summary.epoch, summary.nbr_acc, summary.mean_loss
            ),
            None => println!(
                "epoch {} nbr_acc {} mean_loss {}",
                summary.epoch, summary.nbr_acc, summary.mean_loss
            ),
        }
        Ok(())
    })?;
    data::save_model(out, &outcome.params, &cfg.model, kind)?;
    training::write_csv(&log.unwrap_or_else(|| suffixed(out, ".log.csv")), &outcome.log)?;
    training::write_csv(&suffixed(out, ".epochs.csv"), &outcome.epochs)?;
    Ok(())
}

struct RunArgs {
    matrix: PathBuf,
    rank: usize,
    method: Method,
    model: Option<PathBuf>,
    iters: usize,
    inner: usize,
    nbr_acc: Option<usize>,
    csv: PathBuf,
    factors_out: Option<PathBuf>,
    normalize: bool,
}

#[derive(Serialize)]
struct RunRow {
    iteration: usize,
    rmse: f64,
    seconds: f64,
}

fn load_any_matrix(path: &Path) -> Result<DenseMatrix, Error> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        data::load_csv_matrix(path)
    } else {
        data::load_matrix(path)
    }
}

fn load_model_for(path: &Path, kind: ModelKind, rank: usize) -> Result<(ModelParams, ModelConfig), Failure> {
    let (params, meta) = data::load_model(path)?;
    if meta.kind != kind {
        return Err(Failure::Usage(format!(
            "{} holds a {:?} model, expected {kind:?}",
            path.display(),
            meta.kind
        )));
    }
    if meta.model.rank != rank {
        return Err(Failure::Usage(format!(
            "{} was trained for rank {}, requested rank {rank}",
            path.display(),
            meta.model.rank
        )));
    }
    Ok((params, meta.model))
}

fn run(a: RunArgs) -> CliResult {
    if a.method != Method::Baseline && a.model.is_none() {
        return Err(Failure::Usage("--model is required for --method init and accel".into()));
    }
    let mut v = load_any_matrix(&a.matrix)?;
    if a.normalize {
        v = data::normalize_mean_one(&v)?;
    }
    let (w0, h0) = nndsvd_init(&v, a.rank)?;
    let traj: Trajectory = match a.method {
        Method::Baseline => {
            let cfg = SolverConfig {
                rho: 1.0,
                inner_iters: a.inner,
                outer_iters: a.iters,
            };
            ao_admm(&v, &w0, &h0, &cfg)?
        }
        Method::Init | Method::Accel => {
            let kind = if a.method == Method::Init {
                ModelKind::Init
            } else {
                ModelKind::Accel
            };
            let path = a.model.as_deref().expect("checked above");
            let (params, model) = load_model_for(path, kind, a.rank)?;
            let cfg = ModelConfig {
                outer_iters: a.iters,
                inner_iters: a.inner,
                ..model
            };
            match kind {
                ModelKind::Init => learned_init(&w0, &h0, &v, &params, &cfg)?,
                ModelKind::Accel => {
                    let nbr_acc = a.nbr_acc.unwrap_or(a.iters.min(5));
                    learned_accel(&w0, &h0, &v, &params, &cfg, nbr_acc)?
                }
            }
        }
    };
    if traj.rmse.iter().any(|e| !e.is_finite()) {
        return Err(Failure::Numerical("non-finite RMSE in trajectory".into()));
    }
    let rows: Vec<RunRow> = traj
        .rmse
        .iter()
        .zip(&traj.seconds)
        .enumerate()
        .map(|(iteration, (&rmse, &seconds))| RunRow {
            iteration,
            rmse,
            seconds,
        })
        .collect();
    training::write_csv(&a.csv, &rows)?;
    if let Some(prefix) = a.factors_out {
        let (w, h) = traj.last().expect("trajectory is never empty");
        data::save_matrix(&suffixed(&prefix, "_W.fmat"), w)?;
        data::save_matrix(&suffixed(&prefix, "_H.fmat"), h)?;
    }
    println!("final rmse {}", traj.rmse.last().expect("trajectory is never empty"));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    dir: &Path,
    init: Option<PathBuf>,
    accel: Option<PathBuf>,
    iters: usize,
    inner: usize,
    nbr_acc: usize,
    rank: Option<usize>,
    out: &Path,
) -> CliResult {
    let manifest = data::load_manifest(dir)?;
    let rank = rank.unwrap_or(manifest.rank);
    let samples: Vec<Sample> = training::prepare_samples(data::load_dataset(dir)?, rank)?;
    let mut models = Vec::new();
    for (name, path, kind) in [("init", init, ModelKind::Init), ("accel", accel, ModelKind::Accel)] {
        if let Some(p) = path {
            let (params, config) = load_model_for(&p, kind, rank)?;
            models.push(EvalModel {
                name: name.into(),
                kind,
                params,
                config: ModelConfig {
                    inner_iters: inner,
                    ..config
                },
                nbr_acc,
            });
        }
    }
    let solver = SolverConfig {
        rho: 1.0,
        inner_iters: inner,
        outer_iters: iters,
    };
    let report = eval::evaluate(&samples, &solver, iters, &models)?;
    eval::write_report(&report, out)?;
    for row in report.ratios.iter().filter(|r| r.iteration == iters) {
        println!(
            "{} iteration {}: ratio q1 {} median {} q3 {}",
            row.method, row.iteration, row.q1, row.median, row.q3
        );
    }
    Ok(())
}

fn grad_check(seed: u64, tol: f64) -> CliResult {
    let results = gradcheck::run_suite(seed)?;
    let mut ok = true;
    for r in &results {
        let pass = r.passes(tol);
        ok &= pass;
        println!(
            "{:<13} max_rel_error {:.3e} tolerance {:.1e} {}",
            r.component,
            r.max_rel_error,
            tol * r.tolerance_factor,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("gradient check failed at tolerance {tol:e}")))
    }
}

fn parse_shape(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X'])?;
    let (h, w) = (h.trim().parse().ok()?, w.trim().parse().ok()?);
    (h > 0 && w > 0).then_some((h, w))
}

/// Min-max scales `column` to `0..=255`; a constant column maps to zeros.
fn to_gray(column: &[f64]) -> Vec<u8> {
    let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0; column.len()];
    }
    column
        .iter()
        .map(|&x| ((x - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

fn export_basis(factors: &Path, shape: &str, out: &Path) -> CliResult {
    let (h, w) = parse_shape(shape).ok_or_else(|| Failure::Usage(format!("invalid --image-shape {shape:?}")))?;
    let basis = data::load_matrix(factors)?;
    if h * w != basis.rows() {
        return Err(Failure::Lib(Error::Format(format!(
            "image shape {h}x{w} has {} pixels but columns have length {}",
            h * w,
            basis.rows()
        ))));
    }
    std::fs::create_dir_all(out)?;
    for k in 0..basis.cols() {
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend(to_gray(&basis.column(k)));
        std::fs::write(out.join(format!("basis_{k:02}.pgm")), bytes)?;
    }
    println!("wrote {} images to {}", basis.cols(), out.display());
    Ok(())
}
