use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use selective_ad::error::{Error, Result};
use selective_ad::experiment::{run_experiment, write_csv, write_csv_file, CovKind, ExperimentKind, ExperimentSpec};
use selective_ad::graph::assemble_detector;
use selective_ad::inference::{run_test, Verdict};
use selective_ad::noise::Family;
use selective_ad::tensor::{CovMatrix, Image};
use selective_ad::vae::{self, DetectorConfig, TrainConfig, VaeModel};

const EXIT_UNDEFINED: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_INPUT: u8 = 4;

/// Selective p-values for anomaly regions found by a piecewise-linear VAE.
#[derive(Parser, Debug)]
#[command(name = "selective-ad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a VAE on N(0, I) images and write the weight file.
    Train(TrainArgs),
    /// Test the region detected in one image.
    Test(TestArgs),
    /// Run a Monte-Carlo study and write a CSV of rejection rates.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug, Clone)]
struct TrainOpts {
    /// Training epochs.
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Number of N(0, I) training images.
    #[arg(long, default_value_t = 1000)]
    train_size: usize,
    /// Use the convolutional architecture (square images only).
    #[arg(long)]
    conv: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.2)]
    lambda: f64,
    #[arg(long, default_value_t = 3)]
    filter_window: usize,
    /// Output weight file.
    #[arg(long, default_value = "weights.json")]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct TestArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Image as a CSV grid of reals.
    #[arg(long)]
    image: PathBuf,
    /// Noise covariance: `indep` or `ar`.
    #[arg(long, default_value = "indep")]
    cov: String,
    /// Explicit n×n covariance as CSV; overrides `--cov`.
    #[arg(long)]
    cov_file: Option<PathBuf>,
    /// Overrides the threshold stored with the weights.
    #[arg(long)]
    lambda: Option<f64>,
    /// Overrides the filter window stored with the weights.
    #[arg(long)]
    filter_window: Option<usize>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// `type1`, `power`, `robustness` or `single-test`.
    #[arg(long, default_value = "type1")]
    kind: String,
    /// Image sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![64usize, 256])]
    n: Vec<usize>,
    /// Also run n = 1024 and 4096 and allow sizes above 256.
    #[arg(long)]
    large: bool,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Signal strengths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.0, 3.0, 4.0])]
    delta: Vec<f64>,
    /// `indep` or `ar`.
    #[arg(long, default_value = "indep")]
    cov: String,
    /// Significance levels, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.05])]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 1.2)]
    lambda: f64,
    #[arg(long, default_value_t = 3)]
    filter_window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pixels in the planted square patch.
    #[arg(long, default_value_t = 16)]
    region_size: usize,
    /// Noise families for the robustness study, comma separated.
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<String>>,
    /// W1 targets for the robustness study, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.02, 0.03, 0.04])]
    w1: Vec<f64>,
    /// Pre-trained weights; a model is trained per size when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::UndefinedHypothesis { .. } => EXIT_UNDEFINED,
        Error::Io { .. } | Error::Parse { .. } | Error::Shape { .. } | Error::Graph(_) | Error::Domain(_) => {
            EXIT_INPUT
        }
        _ => EXIT_NUMERICAL,
    }
}

fn train_model(n: usize, seed: u64, opts: &TrainOpts, verbose: bool) -> Result<VaeModel> {
    let model = if opts.conv {
        let (h, w) = selective_ad::tensor::image_shape(n);
        if h != w {
            return Err(Error::Domain(format!("--conv needs a square image, n = {n}")));
        }
        VaeModel::conv(h, 4, 32, vae::DEFAULT_LATENT, seed)?
    } else {
        VaeModel::reference(n, seed)?
    };
    let data = vae::normal_training_set(n, opts.train_size, seed.wrapping_add(1));
    let cfg = TrainConfig {
        epochs: opts.epochs,
        batch_size: opts.batch_size,
        learning_rate: opts.learning_rate,
        seed,
        ..TrainConfig::default()
    };
    let trained = vae::train(model, &data, &cfg)?;
    if verbose {
        for (epoch, loss) in trained.loss_trace.iter().enumerate() {
            println!("epoch {:>4} loss {loss:.6}", epoch + 1);
        }
    }
    Ok(trained.model)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let model = train_model(args.n, args.seed, &args.opts, true)?;
    let detector = DetectorConfig {
        lambda: args.lambda,
        filter_window: args.filter_window,
    };
    assemble_detector(&model, detector.lambda, detector.filter_window)?;
    vae::save_weights(&model, Some(detector), &args.out)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn read_grid(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            location: format!("{}: line {}", path.display(), line + 1),
            message: e.to_string(),
        })?;
        let row = record
            .iter()
            .enumerate()
            .map(|(col, field)| {
                field.parse::<f64>().map_err(|e| Error::Parse {
                    location: format!("{}: line {} column {}", path.display(), line + 1, col + 1),
                    message: format!("{field:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 {
        return Err(Error::Parse {
            location: path.display().to_string(),
            message: "empty grid".into(),
        });
    }
    let flat: Vec<f64> = rows.concat();
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })
}

fn cmd_test(args: &TestArgs) -> Result<u8> {
    let (model, stored) = vae::load_weights(&args.weights)?;
    let lambda = args.lambda.or(stored.map(|d| d.lambda)).unwrap_or(1.2);
    let window = args.filter_window.or(stored.map(|d| d.filter_window)).unwrap_or(3);
    let grid = read_grid(&args.image)?;
    let (h, w) = grid.dim();
    if h * w != model.n() {
        return Err(Error::shape(model.n(), h * w));
    }
    let image = Image::new(grid.into_shape_with_order(h * w).expect("contiguous"), h, w)?;
    let cov = match &args.cov_file {
        Some(path) => CovMatrix::new(read_grid(path)?)?,
        None => CovKind::parse(&args.cov)?.matrix(model.n())?,
    };
    let graph = assemble_detector(&model, lambda, window)?;
    let outcome = run_test(&graph, &image, &cov)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&outcome).map_err(|e| Error::Numerical(e.to_string()))?
    );
    match outcome.verdict {
        Verdict::UndefinedHypothesis => {
            eprintln!("no testable region ({} of {} pixels flagged)", outcome.region.len(), outcome.n);
            Ok(EXIT_UNDEFINED)
        }
        Verdict::Tested(t) => {
            eprintln!(
                "region {} pixels, T = {:.6}, var = {:.6}, {} interval(s); p_selective = {:.6e}, p_naive = {:.6e}, p_bonf = {:.6e}, p_oc = {:.6e}",
                outcome.region.len(),
                t.observed,
                t.variance,
                t.truncation.len(),
                t.p_selective,
                t.p_naive,
                t.p_bonferroni,
                t.p_over_conditioning
            );
            Ok(0)
        }
    }
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let kind = ExperimentKind::parse(&args.kind)?;
    let cov = CovKind::parse(&args.cov)?;
    let families = match &args.families {
        Some(names) => names.iter().map(|s| Family::parse(s)).collect::<Result<Vec<_>>>()?,
        None => Family::ALL.to_vec(),
    };
    let mut sizes = args.n.clone();
    if args.large {
        for extra in [1024, 4096] {
            if !sizes.contains(&extra) {
                sizes.push(extra);
            }
        }
    } else if let Some(&big) = sizes.iter().find(|&&n| n > 256) {
        return Err(Error::Domain(format!("n = {big} needs --large")));
    }
    let loaded = match &args.weights {
        Some(path) => Some(vae::load_weights(path)?.0),
        None => None,
    };
    let mut rows = Vec::new();
    for &n in &sizes {
        let model = match &loaded {
            Some(m) if m.n() == n => m.clone(),
            Some(m) => {
                return Err(Error::Domain(format!("weights are for n = {}, experiment asks for n = {n}", m.n())))
            }
            None => train_model(n, args.seed, &args.opts, false)?,
        };
        let spec = ExperimentSpec {
            trials: args.trials,
            deltas: args.delta.clone(),
            cov,
            alphas: args.alpha.clone(),
            lambda: args.lambda,
            filter_window: args.filter_window,
            seed: args.seed,
            region_size: args.region_size,
            families: families.clone(),
            w1_targets: args.w1.clone(),
            ..ExperimentSpec::new(kind, n)
        };
        rows.extend(run_experiment(&spec, &model)?);
    }
    match &args.out {
        Some(path) => write_csv_file(&rows, path),
        None => write_csv(&rows, std::io::stdout().lock()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| 0),
        Command::Test(a) => cmd_test(a),
        Command::Experiment(a) => cmd_experiment(a).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Training { loss_trace, .. } = &e {
                for (epoch, loss) in loss_trace.iter().enumerate() {
                    eprintln!("epoch {:>4} loss {loss:.6}", epoch + 1);
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
