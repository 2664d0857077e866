//! Command-line front end: `train`, `eval`, `predict` and `inspect`.
//!
//! Exit codes: 0 success, 1 usage error, 2 bad input data, 3 model-file or
//! numeric failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::data::{load_csv, DataError};
use crate::metrics::{confusion_matrix, format_percent, metrics_csv_row, METRICS_HEADER};
use crate::model::{load_model, save_model, ModelError, NetworkModel, SplitRecord};
use crate::tensor::ShapeDisplay;
use crate::training::{evaluate, fit_with_progress, split_for, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const THREADS_ENV: &str = "DIGIT_CNN_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "digit-cnn",
    version,
    about = "Train and run a CNN digit classifier on pixel CSV files"
)]
struct Cli {
    /// Worker threads (falls back to DIGIT_CNN_THREADS, then 1).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a labeled CSV.
    Train(TrainArgs),
    /// Re-split the data and evaluate the validation slice.
    Eval(EvalArgs),
    /// Write Kaggle-style predictions for an unlabeled CSV.
    Predict(PredictArgs),
    /// Print the layer/shape table of a model file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long = "batch-size", default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.3)]
    dropout: f64,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "train-count", default_value_t = 33_600)]
    train_count: usize,
    #[arg(long = "val-count", default_value_t = 8_400)]
    val_count: usize,
    /// Split in file order instead of a seeded shuffle.
    #[arg(long = "sequential-split")]
    sequential_split: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split seed; defaults to the seed stored in the model file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    confusion: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure {
            code: EXIT_DATA,
            message: e.to_string(),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(e) => e.into(),
            TrainError::InvalidConfig(_) => Failure {
                code: EXIT_USAGE,
                message: e.to_string(),
            },
            other => Failure {
                code: EXIT_RUNTIME,
                message: other.to_string(),
            },
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: format!("i/o error: {e}"),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

/// Runs the CLI with explicit argument list and output streams; returns the
/// process exit code.
pub fn run<I, S>(args: I, stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{rendered}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{rendered}");
                    EXIT_USAGE
                }
            };
        }
    };

    let threads = match resolve_threads(cli.threads) {
        Ok(t) => t,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            return f.code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            let _ = writeln!(stderr, "error: cannot start thread pool: {e}");
            return EXIT_RUNTIME;
        }
    };

    let result = pool.install(|| match cli.command {
        Command::Train(a) => train(a, stdout),
        Command::Eval(a) => eval(a, stdout),
        Command::Predict(a) => predict(a, stdout),
        Command::Inspect(a) => inspect(a, stdout),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<usize, Failure> {
    let threads = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
            Err(_) => 1,
        },
    };
    if threads == 0 {
        return Err(usage("thread count must be at least 1"));
    }
    Ok(threads)
}

fn create(path: &PathBuf) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("cannot create {}: {e}", path.display()),
    })
}

fn train(a: TrainArgs, stdout: &mut (dyn Write + Send)) -> Result<(), Failure> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        dropout_rate: a.dropout,
        seed: a.seed,
        train_count: a.train_count,
        val_count: a.val_count,
        sequential_split: a.sequential_split,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let mut model = NetworkModel::<f32>::build(a.seed, a.kernel, a.dropout).map_err(|e| usage(e.to_string()))?;
    let data = load_csv(&a.data, true)?.normalize()?;

    let mut metrics_out = create(&a.metrics)?;
    writeln!(metrics_out, "{METRICS_HEADER}")?;
    let mut write_err = None;
    let history = fit_with_progress(&mut model, &data, &cfg, |m| {
        let _ = writeln!(
            stdout,
            "epoch {:>2}/{}: loss {:.4} acc {:.4} | val_loss {:.4} val_acc {:.4}",
            m.epoch, cfg.epochs, m.train_loss, m.train_accuracy, m.val_loss, m.val_accuracy
        );
        if let Err(e) = writeln!(metrics_out, "{}", metrics_csv_row(m)).and_then(|_| metrics_out.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    metrics_out.flush()?;
    // Untrained models still record the split they would use.
    model.set_split(cfg.split_record());
    save_model(&model, &a.out)?;

    if let Some(last) = history.last() {
        writeln!(
            stdout,
            "final validation accuracy: {:.6} ({})",
            last.val_accuracy,
            format_percent(last.val_accuracy)
        )?;
    }
    Ok(())
}

fn eval(a: EvalArgs, stdout: &mut (dyn Write + Send)) -> Result<(), Failure> {
    let model = load_model(&a.model)?;
    let seed = a.seed.unwrap_or(model.metadata().seed);
    let split = model
        .metadata()
        .split
        .unwrap_or_else(|| TrainConfig::default().split_record());
    let data = load_csv(&a.data, true)?.normalize()?;
    let parts = split_for(&data, split, seed)?;
    let result = evaluate(&model, &parts.val)?;
    let truth = parts.val.require_labels()?;
    let cm = confusion_matrix(&result.predictions, truth).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    })?;
    writeln!(
        stdout,
        "validation accuracy: {:.6} ({}) on {} images, loss {:.6}",
        result.accuracy,
        format_percent(result.accuracy),
        truth.len(),
        result.loss
    )?;
    describe_split(stdout, split, seed)?;
    if let Some(path) = &a.confusion {
        let mut out = create(path)?;
        out.write_all(cm.to_csv().as_bytes())?;
        out.flush()?;
    }
    Ok(())
}

fn describe_split(stdout: &mut (dyn Write + Send), split: SplitRecord, seed: u64) -> std::io::Result<()> {
    writeln!(
        stdout,
        "split: {} train / {} validation ({}, seed {seed})",
        split.train_count,
        split.val_count,
        if split.sequential { "sequential" } else { "shuffled" }
    )
}

fn predict(a: PredictArgs, stdout: &mut (dyn Write + Send)) -> Result<(), Failure> {
    let model = load_model(&a.model)?;
    let data = load_csv(&a.data, false)?.normalize()?;
    let labels = model.predict(data.images())?;
    let mut out = create(&a.out)?;
    writeln!(out, "ImageId,Label")?;
    for (i, label) in labels.iter().enumerate() {
        writeln!(out, "{},{label}", i + 1)?;
    }
    out.flush()?;
    writeln!(stdout, "wrote {} predictions to {}", labels.len(), a.out.display())?;
    Ok(())
}

/// The layer/shape table plus the parameter total.
pub fn inspect_table(model: &NetworkModel<f32>) -> Result<String, ModelError> {
    let mut s = format!("{:<16}{}\n", "Layers", "Output Shape");
    for (kind, shape) in model.shape_table()? {
        s.push_str(&format!("{:<16}{}\n", kind.name(), ShapeDisplay(&shape)));
    }
    s.push_str(&format!("Total params: {}\n", model.parameter_count()));
    Ok(s)
}

fn inspect(a: InspectArgs, stdout: &mut (dyn Write + Send)) -> Result<(), Failure> {
    let model = load_model(&a.model)?;
    write!(stdout, "{}", inspect_table(&model)?)?;
    let meta = model.metadata();
    writeln!(
        stdout,
        "kernel size {}, dropout rate {}, seed {}",
        meta.kernel_size, meta.dropout_rate, meta.seed
    )?;
    Ok(())
}
