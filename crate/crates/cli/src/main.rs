use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use djpeg_core::dataset::{
    build_dataset, default_q_pool, load_q_pool, synth_corpus, CorpusConfig, DatasetConfig, DatasetManifest, PatchMode,
    Split, StorageFormat,
};
use djpeg_core::features::{extract_histograms, FeatureRecord, FeatureSet, FreqOrder};
use djpeg_core::jpeg::{freq_1d_to_2d, parse_jpeg};
use djpeg_core::model::{load_checkpoint, save_checkpoint, Model, ModelConfig, Pooling, Projector};
use djpeg_core::quant_model::{pmf_double, pmf_single, DensitySpec};
use djpeg_core::train::{
    evaluate, predict_records, run_experiment, split_features, train, write_roc_csv, EvalReport, TrainConfig,
    DEFAULT_THRESHOLD,
};

const CHECKPOINT_FILE: &str = "checkpoint.djpm";
const TRAIN_LOG_FILE: &str = "train_log.jsonl";

/// Failure printed as one JSON object on stderr.
#[derive(Debug)]
struct Failure {
    code: &'static str,
    message: String,
}

impl From<djpeg_core::Error> for Failure {
    fn from(e: djpeg_core::Error) -> Self {
        Failure {
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        djpeg_core::Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        djpeg_core::Error::from(e).into()
    }
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: "UsageError",
            message: message.into(),
        }
    }

    fn in_file(path: &Path) -> impl FnOnce(djpeg_core::Error) -> Failure + '_ {
        move |e| Failure {
            code: e.code(),
            message: format!("{}: {e}", path.display()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "djpeg", version, about = "Double JPEG compression detection toolkit")]
struct Cli {
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON file with optional "corpus", "dataset", "model" and "train" sections.
    /// Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic uncompressed grayscale PGM images.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build a labeled single/double compressed patch dataset.
    GenDataset {
        /// Directory of raw PGM/PPM images.
        #[arg(long)]
        raw: PathBuf,
        /// Q-matrix pool file: one matrix per line, 64 raster-order steps.
        /// Defaults to the built-in pool.
        #[arg(long)]
        q_pool: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        patch_size: Option<usize>,
        /// subgrid or native.
        #[arg(long)]
        mode: Option<PatchMode>,
        /// Reserve the rest of the pool for a test_unseen split.
        #[arg(long)]
        seen_fraction: Option<f64>,
        /// Train, val and test fractions, comma separated.
        #[arg(long, value_delimiter = ',')]
        splits: Option<Vec<f64>>,
        #[arg(long)]
        max_patches: Option<usize>,
        /// packed or jpeg.
        #[arg(long)]
        storage: Option<StorageFormat>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract histogram features for one split into a feature file.
    ExtractFeatures {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bin_range: Option<usize>,
        #[arg(long)]
        order: Option<FreqOrder>,
    },
    /// Train on a dataset and write the best checkpoint and an epoch log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Train, then evaluate on the seen-Q and unseen-Q test splits.
    Experiment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score JPEG files with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Analytic PMF of a quantized (q2 omitted) or requantized coefficient.
    Pmf {
        q1: u32,
        q2: Option<u32>,
        /// uniform, gaussian or laplacian.
        #[arg(long, default_value = "uniform")]
        density: String,
        /// Location of the density.
        #[arg(long, default_value_t = 0.0)]
        center: f64,
        /// Half-width (uniform), standard deviation (gaussian) or scale
        /// (laplacian). Defaults to 100, 20 and 10.
        #[arg(long)]
        spread: Option<f64>,
        /// Largest |d| in the output.
        #[arg(long, default_value_t = 200)]
        support: i32,
        /// CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print frame info, Q-matrices and AC coefficient summaries of a JPEG.
    Inspect {
        file: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    #[arg(long)]
    bin_range: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    filters: Option<usize>,
    /// Number of stacked BiLSTM layers; 0 is the flat logistic baseline.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    residual: Option<bool>,
    /// raster or zigzag.
    #[arg(long)]
    order: Option<FreqOrder>,
    /// wam, last, first, add or concat.
    #[arg(long)]
    pooling: Option<Pooling>,
    /// hq, single_conv or none.
    #[arg(long)]
    projector: Option<Projector>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    corpus: CorpusConfig,
    dataset: DatasetConfig,
    model: ModelConfig,
    train: TrainConfig,
}

fn load_file_config(path: Option<&Path>) -> CliResult<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(djpeg_core::Error::at_path(p))?;
            serde_json::from_str(&text).map_err(|e| Failure {
                code: "ConfigError",
                message: format!("{}: {e}", p.display()),
            })
        }
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl ModelArgs {
    fn apply(&self, cfg: &mut ModelConfig) {
        set(&mut cfg.b, self.bin_range);
        set(&mut cfg.n, self.hidden);
        set(&mut cfg.filters, self.filters);
        set(&mut cfg.depth, self.depth);
        set(&mut cfg.residual, self.residual);
        set(&mut cfg.order, self.order);
        set(&mut cfg.pooling, self.pooling);
        set(&mut cfg.projector, self.projector);
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut TrainConfig) {
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.seed, self.seed);
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(djpeg_core::Error::at_path(path))?;
    Ok(())
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    let f = File::create(path).map_err(djpeg_core::Error::at_path(path))?;
    Ok(BufWriter::new(f))
}

fn print_json(value: &impl Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn load_manifest(dir: &Path) -> CliResult<DatasetManifest> {
    let manifest = DatasetManifest::load(dir)?;
    manifest.verify()?;
    Ok(manifest)
}

fn write_report(out: &Path, report: &EvalReport) -> CliResult<()> {
    let mut w = create_file(&out.join(format!("roc_{}.csv", report.split)))?;
    write_roc_csv(&report.roc, &mut w)?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    let file = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::SynthCorpus {
            out,
            count,
            width,
            height,
            seed,
        } => {
            let mut cfg = file.corpus;
            set(&mut cfg.count, count);
            set(&mut cfg.width, width);
            set(&mut cfg.height, height);
            set(&mut cfg.seed, seed);
            let files = synth_corpus(&out, &cfg)?;
            print_json(&serde_json::json!({ "images": files.len(), "out": out }))
        }
        Command::GenDataset {
            raw,
            q_pool,
            out,
            patch_size,
            mode,
            seen_fraction,
            splits,
            max_patches,
            storage,
            seed,
        } => {
            let mut cfg = file.dataset;
            set(&mut cfg.patch_size, patch_size);
            set(&mut cfg.mode, mode);
            set(&mut cfg.seed, seed);
            set(&mut cfg.storage, storage);
            if let Some(f) = seen_fraction {
                cfg.unseen_eval = true;
                cfg.seen_fraction = f;
            }
            if let Some(s) = splits {
                cfg.splits = s
                    .try_into()
                    .map_err(|_| Failure::usage("--splits takes three comma-separated fractions"))?;
            }
            if max_patches.is_some() {
                cfg.max_patches_per_image = max_patches;
            }
            let pool = match q_pool {
                Some(p) => load_q_pool(&p)?,
                None => default_q_pool(),
            };
            let manifest = build_dataset(&raw, &out, &pool, &cfg)?;
            print_json(&serde_json::json!({
                "records": manifest.records.len(),
                "digest": manifest.digest()?,
                "out": out,
            }))
        }
        Command::ExtractFeatures {
            data,
            split,
            out,
            bin_range,
            order,
        } => {
            let mut model = file.model;
            set(&mut model.b, bin_range);
            set(&mut model.order, order);
            let manifest = load_manifest(&data)?;
            let records = split_features(&manifest, &data, split, model.b)?;
            let set = FeatureSet {
                b: model.b,
                order: model.order,
                records,
            };
            set.save(&out)?;
            print_json(&serde_json::json!({ "records": set.records.len(), "out": out }))
        }
        Command::Train {
            data,
            out,
            model,
            train: targs,
        } => {
            let mut model_cfg = file.model;
            model.apply(&mut model_cfg);
            let mut train_cfg = file.train;
            targs.apply(&mut train_cfg);
            model_cfg.validate()?;
            train_cfg.validate()?;
            let manifest = load_manifest(&data)?;
            let train_set = split_features(&manifest, &data, Split::Train, model_cfg.b)?;
            let val_set = split_features(&manifest, &data, Split::Val, model_cfg.b)?;
            create_dir(&out)?;
            let (outcome, best_epoch) = train_with_log(&out, &train_set, &val_set, &model_cfg, &train_cfg)?;
            save_checkpoint(&outcome, &out.join(CHECKPOINT_FILE))?;
            print_json(&serde_json::json!({
                "best_epoch": best_epoch,
                "checkpoint": out.join(CHECKPOINT_FILE),
            }))
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            threshold,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let manifest = load_manifest(&data)?;
            let records = split_features(&manifest, &data, split, model.config.b)?;
            let name = serde_json::to_value(split)?.as_str().unwrap_or("split").to_owned();
            let report = evaluate(&model, &records, &name, threshold)?;
            create_dir(&out)?;
            let mut w = create_file(&out.join("report.jsonl"))?;
            writeln!(w, "{}", serde_json::to_string(&report)?)?;
            w.flush()?;
            write_report(&out, &report)?;
            print_json(&report)
        }
        Command::Experiment {
            data,
            out,
            model,
            train: targs,
        } => {
            let mut model_cfg = file.model;
            model.apply(&mut model_cfg);
            let mut train_cfg = file.train;
            targs.apply(&mut train_cfg);
            let (trained, report) = run_experiment(&data, &model_cfg, &train_cfg)?;
            create_dir(&out)?;
            save_checkpoint(&trained, &out.join(CHECKPOINT_FILE))?;
            let mut w = create_file(&out.join(TRAIN_LOG_FILE))?;
            for line in &report.log {
                writeln!(w, "{}", serde_json::to_string(line)?)?;
            }
            w.flush()?;
            write_report(&out, &report.seen)?;
            if let Some(u) = &report.unseen {
                write_report(&out, u)?;
            }
            let mut w = create_file(&out.join("report.json"))?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            w.flush()?;
            print_json(&serde_json::json!({
                "best_epoch": report.best_epoch,
                "seen_accuracy": report.seen.accuracy,
                "unseen_accuracy": report.unseen.as_ref().map(|u| u.accuracy),
                "unseen_delta": report.unseen_delta,
            }))
        }
        Command::Predict {
            checkpoint,
            files,
            threshold,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            for path in &files {
                let bytes = fs::read(path).map_err(djpeg_core::Error::at_path(path))?;
                let decoded = parse_jpeg(&bytes).map_err(Failure::in_file(path))?;
                let (plane, q) = decoded.luma();
                let record = FeatureRecord {
                    label: 0,
                    hist: extract_histograms(plane, model.config.b)?,
                    q: *q,
                };
                let p = predict_records(&model, &[record], 1)?[0];
                print_json(&serde_json::json!({
                    "file": path,
                    "probability": p,
                    "verdict": if p >= threshold { "double" } else { "single" },
                }))?;
            }
            Ok(())
        }
        Command::Pmf {
            q1,
            q2,
            density,
            center,
            spread,
            support,
            out,
        } => {
            let density = match density.as_str() {
                "uniform" => {
                    let s = spread.unwrap_or(100.0);
                    DensitySpec::uniform(center - s, center + s)?
                }
                "gaussian" => DensitySpec::gaussian(center, spread.unwrap_or(20.0))?,
                "laplacian" => DensitySpec::laplacian(center, spread.unwrap_or(10.0))?,
                other => {
                    return Err(Failure::usage(format!(
                        "density must be uniform, gaussian or laplacian; got {other:?}"
                    )))
                }
            };
            if support < 0 {
                return Err(djpeg_core::Error::Domain(format!("support {support} is negative")).into());
            }
            let pmf = match q2 {
                None => pmf_single(q1, &density, -support..=support)?,
                Some(q2) => pmf_double(q1, q2, &density, -support..=support)?,
            };
            match out {
                Some(path) => {
                    let mut w = create_file(&path)?;
                    w.write_all(pmf.to_csv().as_bytes())?;
                    w.flush()?;
                }
                None => print!("{}", pmf.to_csv()),
            }
            Ok(())
        }
        Command::Inspect { file } => {
            let bytes = fs::read(&file).map_err(djpeg_core::Error::at_path(&file))?;
            let decoded = parse_jpeg(&bytes).map_err(Failure::in_file(&file))?;
            print!("{}", inspect_text(&decoded)?);
            Ok(())
        }
    }
}

/// Train while appending one JSON line per epoch to the log file.
fn train_with_log(
    out: &Path,
    train_set: &[FeatureRecord],
    val_set: &[FeatureRecord],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> CliResult<(Model, u32)> {
    let mut log = create_file(&out.join(TRAIN_LOG_FILE))?;
    let mut write_err = None;
    let outcome = train(train_set, val_set, model_cfg, train_cfg, |e| {
        info!(
            "epoch {} lr {} loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4}",
            e.epoch, e.lr, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
        );
        let line = serde_json::to_string(e).map_err(Failure::from);
        let res = line.and_then(|l| writeln!(log, "{l}").map_err(Failure::from));
        if let Err(err) = res {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(err);
    }
    log.flush()?;
    Ok((outcome.model, outcome.best_epoch))
}

fn inspect_text(decoded: &djpeg_core::jpeg::DecodedJpeg) -> CliResult<String> {
    use std::fmt::Write as _;
    let mut s = String::new();
    let f = &decoded.frame;
    let _ = writeln!(s, "frame {}x{}, {} component(s)", f.width, f.height, f.components.len());
    for c in &f.components {
        let _ = writeln!(
            s,
            "  component {}: sampling {}x{}, quant table {}",
            c.id, c.h_sampling, c.v_sampling, c.quant_table
        );
    }
    if decoded.restart_interval > 0 {
        let _ = writeln!(s, "restart interval {}", decoded.restart_interval);
    }
    for (i, q) in decoded.qmatrices.iter().enumerate() {
        let _ = writeln!(s, "quantization table {i}:");
        for row in q.steps().chunks(8) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:4}")).collect();
            let _ = writeln!(s, "{}", line.join(""));
        }
    }
    let (plane, q) = decoded.luma();
    let _ = writeln!(
        s,
        "luma AC coefficients over {} blocks ({}x{}):",
        plane.blocks.len(),
        plane.width_blocks,
        plane.height_blocks
    );
    let _ = writeln!(s, "   k  (k1,k2)   q    zeros  nonzero    min    max  mean|v|");
    for k in 2..=64usize {
        let (k1, k2) = freq_1d_to_2d(k)?;
        let idx = k - 1;
        let values = plane.blocks.iter().map(|b| b[idx]);
        let zeros = values.clone().filter(|&v| v == 0).count();
        let min = values.clone().min().unwrap_or(0);
        let max = values.clone().max().unwrap_or(0);
        let mean_abs = if plane.blocks.is_empty() {
            0.0
        } else {
            values.map(|v| f64::from(v.unsigned_abs())).sum::<f64>() / plane.blocks.len() as f64
        };
        let _ = writeln!(
            s,
            "{k:4}  ({k1},{k2}) {:5} {zeros:8} {:8} {min:6} {max:6} {mean_abs:8.3}",
            q.steps()[idx],
            plane.blocks.len() - zeros
        );
    }
    Ok(s)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DJPEG_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let failure = Failure::usage(e.to_string().trim().to_owned());
            eprintln!("{}", serde_json::json!({ "error": failure.code, "message": failure.message }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", serde_json::json!({ "error": f.code, "message": f.message }));
            ExitCode::FAILURE
        }
    }
}
