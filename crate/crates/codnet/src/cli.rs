//! Command-line surface: `train`, `eval`, `predict`, `ablate`, `synth`,
//! and `metrics`, all driven by one TOML run configuration plus typed
//! flag overrides.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, bad config, invalid
//! values), 2 runtime failure (I/O, undecodable data, training aborts).
//! Commands are pure functions of flags, config file, filesystem inputs
//! and seed: wherever determinism is contracted (synthetic data,
//! predictions, checkpoints), repeated invocations reproduce outputs
//! bitwise.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Array3, ArrayD, Axis, Ix2};

use crate::config::{DataConfig, RunConfig};
use crate::data;
use crate::error::Error;
use crate::metrics::{self, MetricsReport};
use crate::network::{Network, Variant};
use crate::scalar::{Dtype, Scalar};
use crate::tape::resize_bilinear_2d;
use crate::trainer::{
    self, network_from_checkpoint, peek_dtype, run_ablation, Checkpoint, SampleProvider,
};

#[derive(Parser, Debug)]
#[command(
    name = "codnet",
    version,
    about = "Boundary-guided camouflaged object detection: train, evaluate, predict, and generate synthetic data"
)]
pub struct Cli {
    /// TOML run configuration; command-line flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Base RNG seed (weight init, shuffling, synthetic data).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes checkpoints and a JSON-line epoch log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset with the four standard metrics.
    Eval(EvalArgs),
    /// Export primary probability maps (optionally edges and overlay panels) as PNGs.
    Predict(PredictArgs),
    /// Train several variants on a shared dataset and consolidate one table.
    Ablate(AblateArgs),
    /// Materialize synthetic camouflage samples into root/{Imgs,GT,Edge}.
    Synth(SynthArgs),
    /// Score a folder of prediction maps against ground-truth masks.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Ablation variant (M1–M5).
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Square input side (multiple of 32).
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Numeric precision: f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// Output directory for checkpoints, logs, and reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train from root/{Imgs,GT} on disk instead of synthetic samples.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Held-out root/{Imgs,GT} when training from disk.
    #[arg(long)]
    pub test_root: Option<PathBuf>,
    /// Synthetic training sample count.
    #[arg(long)]
    pub synth_count: Option<usize>,
    /// Synthetic held-out sample count.
    #[arg(long)]
    pub synth_test_count: Option<usize>,
    /// Synthetic camouflage difficulty in [0,1].
    #[arg(long)]
    pub difficulty: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Score on root/{Imgs,GT} instead of the config's held-out set.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Report directory (default: the checkpoint's output directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One image file, or a directory of PNG/JPEG images.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory the prediction maps are written into.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the edge probability map per image.
    #[arg(long)]
    pub save_edges: bool,
    /// Also write a side-by-side panel: input | prediction | GT when available.
    #[arg(long)]
    pub overlay: bool,
    /// Ground-truth mask directory consulted for the overlay panel.
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Comma-separated variants to train.
    #[arg(long, default_value = "M1,M2,M3,M4,M5")]
    pub variants: String,
    /// Comma-separated seeds; each (variant, seed) pair is one job.
    #[arg(long, default_value = "1,2,3")]
    pub seeds: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Numeric precision: f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub synth_count: Option<usize>,
    #[arg(long)]
    pub synth_test_count: Option<usize>,
    #[arg(long)]
    pub difficulty: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Dataset root to create (gets Imgs/, GT/, Edge/).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Square image side (multiple of 32).
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Camouflage difficulty in [0,1].
    #[arg(long, default_value_t = 0.5)]
    pub difficulty: f64,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Directory of prediction maps (grayscale images).
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks.
    #[arg(long)]
    pub gt: PathBuf,
    /// CSV report path; a JSON twin is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

/// Why a command did not succeed; decides the process exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure::Usage(message.into())
}

type CommandResult = std::result::Result<(), Failure>;

/// Parse `argv`, execute, and map the outcome to an exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(message)) => {
            eprintln!("usage error: {message}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn execute(cli: Cli) -> CommandResult {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_toml_path(path).map_err(|e| usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match &cli.command {
        Command::Train(args) => execute_train(config, args),
        Command::Eval(args) => execute_eval(cli.seed, args),
        Command::Predict(args) => execute_predict(args),
        Command::Ablate(args) => execute_ablate(config, args),
        Command::Synth(args) => execute_synth(&config, args),
        Command::Metrics(args) => execute_metrics(args),
    }
}

// ---------------------------------------------------------------- train

fn parse_precision(text: &str) -> std::result::Result<Dtype, Failure> {
    match text.trim().to_ascii_lowercase().as_str() {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(usage(format!("unknown precision '{other}' (expected f32 or f64)"))),
    }
}

/// Fold shared training flags into the config, then re-validate.
fn apply_train_overrides(
    config: &mut RunConfig,
    variant: &Option<String>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    input_size: Option<usize>,
    precision: &Option<String>,
    out: &Option<PathBuf>,
    data_root: &Option<PathBuf>,
    test_root: &Option<PathBuf>,
    synth_count: Option<usize>,
    synth_test_count: Option<usize>,
    difficulty: Option<f64>,
) -> std::result::Result<(), Failure> {
    if let Some(v) = variant {
        config.network.variant = v.parse().map_err(|e: Error| usage(e.to_string()))?;
    }
    if let Some(e) = epochs {
        config.train.epochs = e;
    }
    if let Some(b) = batch_size {
        config.train.batch_size = b;
    }
    if let Some(lr) = lr {
        config.train.lr = lr;
    }
    if let Some(wd) = weight_decay {
        config.train.weight_decay = wd;
    }
    if let Some(s) = input_size {
        config.train.input_size = s;
    }
    if let Some(p) = precision {
        config.precision = parse_precision(p)?;
    }
    if let Some(out) = out {
        config.paths.out_dir = out.clone();
    }
    if let Some(root) = data_root {
        config.data = DataConfig::Folder {
            train_root: root.clone(),
            test_root: test_root.clone(),
        };
    } else if synth_count.is_some() || synth_test_count.is_some() || difficulty.is_some() {
        let (mut count, mut tc, mut d) = match &config.data {
            DataConfig::Synthetic {
                count,
                test_count,
                difficulty,
            } => (*count, *test_count, *difficulty),
            DataConfig::Folder { .. } => (512, 128, 0.7),
        };
        if let Some(c) = synth_count {
            count = c;
        }
        if let Some(t) = synth_test_count {
            tc = t;
        }
        if let Some(x) = difficulty {
            d = x;
        }
        config.data = DataConfig::Synthetic {
            count,
            test_count: tc,
            difficulty: d,
        };
    }
    config.validate().map_err(|e| usage(e.to_string()))
}

fn execute_train(mut config: RunConfig, args: &TrainArgs) -> CommandResult {
    apply_train_overrides(
        &mut config,
        &args.variant,
        args.epochs,
        args.batch_size,
        args.lr,
        args.weight_decay,
        args.input_size,
        &args.precision,
        &args.out,
        &args.data_root,
        &args.test_root,
        args.synth_count,
        args.synth_test_count,
        args.difficulty,
    )?;
    match config.precision {
        Dtype::F32 => train_with::<f32>(&config),
        Dtype::F64 => train_with::<f64>(&config),
    }
}

fn train_with<T: Scalar>(config: &RunConfig) -> CommandResult {
    let outcome = trainer::train::<T>(config)?;
    let last = outcome.epochs.last();
    println!(
        "trained {} epoch(s) of variant {} ({} parameters, {})",
        outcome.epochs.len(),
        config.network.variant,
        outcome.state.network.param_count(),
        T::DTYPE,
    );
    if let Some(log) = last {
        println!("final mean train loss {:.6}", log.total);
    }
    match outcome.best_val_mae {
        Some(mae) => println!("best validation MAE {mae:.6}"),
        None => println!("no validation split (too few items hashed into it)"),
    }
    println!("last checkpoint: {}", outcome.last_checkpoint.display());
    if let Some(best) = &outcome.best_checkpoint {
        println!("best checkpoint: {}", best.display());
    }
    println!("epoch log: {}", config.paths.train_log().display());
    Ok(())
}

// ----------------------------------------------------------------- eval

fn execute_eval(seed_override: Option<u64>, args: &EvalArgs) -> CommandResult {
    match peek_dtype(&args.checkpoint)? {
        Dtype::F32 => eval_with::<f32>(seed_override, args),
        Dtype::F64 => eval_with::<f64>(seed_override, args),
    }
}

fn eval_with<T: Scalar>(seed_override: Option<u64>, args: &EvalArgs) -> CommandResult {
    let ckpt = Checkpoint::<T>::load(&args.checkpoint)?;
    let network = network_from_checkpoint(&ckpt)?;
    let mut config = ckpt.config.clone();
    if let Some(seed) = seed_override {
        config.seed = seed;
    }

    let (provider, dataset) = match &args.data_root {
        Some(root) => {
            let provider = SampleProvider::Folder {
                manifest: data::load_manifest(root, data::Split::Test)?,
                input_size: config.train.input_size,
            };
            let name = root
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".to_string());
            (provider, name)
        }
        None => {
            let provider = SampleProvider::held_out(&config)?.ok_or_else(|| {
                usage("the checkpoint's config defines no held-out dataset; pass --data-root")
            })?;
            (provider, "synthetic-heldout".to_string())
        }
    };
    if provider.is_empty() {
        return Err(Failure::Runtime(Error::InvalidInput(format!(
            "dataset '{dataset}' is empty"
        ))));
    }

    let report = trainer::evaluate(&network, &provider, &dataset, &config.normalization)?;
    let out_dir = args.out.clone().unwrap_or_else(|| config.paths.out_dir.clone());
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let csv_path = out_dir.join(format!("eval-{dataset}.csv"));
    report.write_csv(&csv_path)?;
    let json_path = out_dir.join(format!("eval-{dataset}.json"));
    std::fs::write(&json_path, report.to_json()?).map_err(|e| Error::io(&json_path, e))?;

    print_aggregate(&report);
    println!("report: {} (+ .json)", csv_path.display());
    Ok(())
}

fn print_aggregate(report: &MetricsReport) {
    match &report.aggregate {
        Some(a) => println!(
            "{}: S {:.4}  E {:.4}  Fw {:.4}  MAE {:.4} over {} image(s)",
            report.dataset, a.s_measure, a.e_measure, a.weighted_f, a.mae, report.count
        ),
        None => println!("{}: no scored images", report.dataset),
    }
    for error in &report.errors {
        eprintln!("note: {error}");
    }
}

// -------------------------------------------------------------- predict

fn execute_predict(args: &PredictArgs) -> CommandResult {
    match peek_dtype(&args.checkpoint)? {
        Dtype::F32 => predict_with::<f32>(args),
        Dtype::F64 => predict_with::<f64>(args),
    }
}

/// Image files under `input` (or `input` itself), sorted by name.
fn collect_inputs(input: &Path) -> std::result::Result<Vec<PathBuf>, Failure> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Failure::Runtime(Error::InvalidInput(format!(
            "input {} is neither a file nor a directory",
            input.display()
        ))));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| {
                        matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg")
                    })
        })
        .collect();
    files.sort();
    Ok(files)
}

fn save_gray(path: &Path, map: &Array2<f64>) -> crate::error::Result<()> {
    let (h, w) = map.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (map[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path).map_err(|e| Error::image(path, e))
}

/// `input | prediction | optional GT` side-by-side, 2-pixel gutters.
fn save_overlay(
    path: &Path,
    input: &Array3<f64>,
    prediction: &Array2<f64>,
    gt: Option<&Array2<f64>>,
) -> crate::error::Result<()> {
    const GUTTER: usize = 2;
    let (_, h, w) = input.dim();
    let panels = 2 + usize::from(gt.is_some());
    let total_w = panels * w + (panels - 1) * GUTTER;
    let mut img = image::RgbImage::from_pixel(
        total_w as u32,
        h as u32,
        image::Rgb([255, 255, 255]),
    );
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..h {
        for x in 0..w {
            let rgb = image::Rgb([
                to_u8(input[[0, y, x]]),
                to_u8(input[[1, y, x]]),
                to_u8(input[[2, y, x]]),
            ]);
            img.put_pixel(x as u32, y as u32, rgb);
            let p = to_u8(prediction[[y, x]]);
            img.put_pixel((w + GUTTER + x) as u32, y as u32, image::Rgb([p, p, p]));
            if let Some(gt) = gt {
                let g = to_u8(gt[[y, x]]);
                img.put_pixel(
                    (2 * (w + GUTTER) + x) as u32,
                    y as u32,
                    image::Rgb([g, g, g]),
                );
            }
        }
    }
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Ground-truth mask for `stem` in `dir`, at the prediction's size.
fn overlay_gt(dir: &Path, stem: &str, hw: (usize, usize)) -> Option<Array2<f64>> {
    for ext in ["png", "jpg", "jpeg"] {
        let candidate = dir.join(format!("{stem}.{ext}"));
        if candidate.is_file() {
            if let Ok(mask) = metrics::load_gray01(&candidate) {
                if mask.dim() == hw {
                    return Some(mask);
                }
                return Some(resize_bilinear_2d(&mask, hw));
            }
        }
    }
    None
}

fn predict_with<T: Scalar>(args: &PredictArgs) -> CommandResult {
    let ckpt = Checkpoint::<T>::load(&args.checkpoint)?;
    let network: Network<T> = network_from_checkpoint(&ckpt)?;
    let variant = ckpt.config.network.variant;
    if args.save_edges && variant.edge_outputs() == 0 {
        return Err(usage(format!(
            "--save-edges: variant {variant} has no edge outputs"
        )));
    }

    let inputs = collect_inputs(&args.input)?;
    if inputs.is_empty() {
        return Err(Failure::Runtime(Error::InvalidInput("no inputs".into())));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let input_size = ckpt.config.train.input_size;
    let mut written = 0usize;
    let mut skipped = 0usize;
    for path in &inputs {
        let native = match data::load_rgb01(path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "input".to_string());
        let (_, h, w) = native.dim();

        let resized = data::resize_image_channels(&native, (input_size, input_size));
        let batch: ArrayD<T> =
            trainer::normalize_images(&[resized], &ckpt.config.normalization)?;
        let (mask_prob, edge_prob) = trainer::predict_maps(&network, &batch)?;

        let plane = |maps: &ArrayD<f64>| -> Array2<f64> {
            let p = maps
                .index_axis(Axis(0), 0)
                .index_axis(Axis(0), 0)
                .to_owned()
                .into_dimensionality::<Ix2>()
                .expect("probability plane is 2-d");
            resize_bilinear_2d(&p, (h, w))
        };

        let prediction = plane(&mask_prob);
        save_gray(&args.out.join(format!("{stem}.png")), &prediction)?;
        if args.save_edges {
            let edge = plane(edge_prob.as_ref().expect("validated before the loop"));
            save_gray(&args.out.join(format!("{stem}_edge.png")), &edge)?;
        }
        if args.overlay {
            let gt = args
                .gt
                .as_deref()
                .and_then(|dir| overlay_gt(dir, &stem, (h, w)));
            save_overlay(
                &args.out.join(format!("{stem}_overlay.png")),
                &native,
                &prediction,
                gt.as_ref(),
            )?;
        }
        written += 1;
    }

    if written == 0 {
        return Err(Failure::Runtime(Error::InvalidInput(format!(
            "no inputs could be decoded ({skipped} failed)"
        ))));
    }
    println!(
        "wrote {written} prediction map(s) to {} ({skipped} skipped)",
        args.out.display()
    );
    Ok(())
}

// --------------------------------------------------------------- ablate

fn parse_variants(text: &str) -> std::result::Result<Vec<Variant>, Failure> {
    let variants: Vec<Variant> = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse().map_err(|e: Error| usage(e.to_string())))
        .collect::<std::result::Result<_, _>>()?;
    if variants.is_empty() {
        return Err(usage("--variants must name at least one of M1–M5"));
    }
    Ok(variants)
}

fn parse_seeds(text: &str) -> std::result::Result<Vec<u64>, Failure> {
    let seeds: Vec<u64> = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| usage(format!("--seeds: '{}' is not an unsigned integer", s.trim())))
        })
        .collect::<std::result::Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(usage("--seeds must contain at least one seed"));
    }
    Ok(seeds)
}

fn execute_ablate(mut config: RunConfig, args: &AblateArgs) -> CommandResult {
    let variants = parse_variants(&args.variants)?;
    let seeds = parse_seeds(&args.seeds)?;
    apply_train_overrides(
        &mut config,
        &None,
        args.epochs,
        args.batch_size,
        args.lr,
        args.weight_decay,
        args.input_size,
        &args.precision,
        &args.out,
        &None,
        &None,
        args.synth_count,
        args.synth_test_count,
        args.difficulty,
    )?;

    let outcome = run_ablation(&config, &variants, &seeds)?;
    for cell in &outcome.cells {
        match &cell.result {
            Ok(scores) => println!(
                "{} seed {}: S {:.4}  E {:.4}  Fw {:.4}  MAE {:.4} ({} images)",
                cell.variant,
                cell.seed,
                scores.aggregate.s_measure,
                scores.aggregate.e_measure,
                scores.aggregate.weighted_f,
                scores.aggregate.mae,
                scores.images
            ),
            Err(message) => eprintln!("{} seed {}: failed: {message}", cell.variant, cell.seed),
        }
    }
    println!("table: {}", outcome.csv_path.display());
    Ok(())
}

// ---------------------------------------------------------------- synth

fn execute_synth(config: &RunConfig, args: &SynthArgs) -> CommandResult {
    if args.size == 0 || args.size % 32 != 0 {
        return Err(usage(format!(
            "--size must be a positive multiple of 32, got {}",
            args.size
        )));
    }
    if args.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    if !(0.0..=1.0).contains(&args.difficulty) {
        return Err(usage(format!(
            "--difficulty must lie in [0,1], got {}",
            args.difficulty
        )));
    }
    for i in 0..args.count {
        let seed = data::sample_seed(config.seed, i as u64);
        let sample = data::synth_sample(seed, args.size, args.difficulty)?;
        data::write_sample(&args.out, &sample)?;
    }
    println!(
        "wrote {} sample(s) ({}×{} px at difficulty {}) to {}",
        args.count,
        args.size,
        args.size,
        args.difficulty,
        args.out.display()
    );
    Ok(())
}

// -------------------------------------------------------------- metrics

fn execute_metrics(args: &MetricsArgs) -> CommandResult {
    let dataset = args
        .pred
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "predictions".to_string());
    let report = metrics::evaluate_folder(&args.pred, &args.gt, &dataset)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    report.write_csv(&args.out)?;
    let json_path = args.out.with_extension("json");
    std::fs::write(&json_path, report.to_json()?).map_err(|e| Error::io(&json_path, e))?;
    print_aggregate(&report);
    println!("report: {} (+ {})", args.out.display(), json_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_into_typed_commands() {
        let cli = Cli::try_parse_from([
            "codnet", "train", "--variant", "M2", "--epochs", "3", "--seed", "9",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(9));
        match cli.command {
            Command::Train(args) => {
                assert_eq!(args.variant.as_deref(), Some("M2"));
                assert_eq!(args.epochs, Some(3));
            }
            other => panic!("unexpected command {other:?}"),
        }
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["codnet", "synth", "--out", "x", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["codnet", "frobnicate"]).is_err());
    }

    #[test]
    fn help_and_usage_exit_codes() {
        assert_eq!(run(["codnet", "--help"]), 0);
        assert_eq!(run(["codnet", "train", "--help"]), 0);
        assert_eq!(run(["codnet", "--version"]), 0);
        assert_eq!(run(["codnet"]), 1, "missing subcommand is a usage error");
        assert_eq!(run(["codnet", "nonsense"]), 1);
        assert_eq!(run(["codnet", "synth", "--out", "/tmp/x", "--size", "33"]), 1);
    }

    #[test]
    fn variant_and_seed_lists_parse_or_reject() {
        assert_eq!(
            parse_variants("M1, m5").unwrap(),
            vec![Variant::M1, Variant::M5]
        );
        assert!(parse_variants("M7").is_err());
        assert!(parse_variants(" ,").is_err());
        assert_eq!(parse_seeds("3,1,2").unwrap(), vec![3, 1, 2]);
        assert!(parse_seeds("one").is_err());
    }

    #[test]
    fn precision_strings_parse_or_reject() {
        assert_eq!(parse_precision("f32").unwrap(), Dtype::F32);
        assert_eq!(parse_precision("F64").unwrap(), Dtype::F64);
        assert!(parse_precision("f16").is_err());
    }

    #[test]
    fn train_overrides_replace_the_data_source() {
        let mut config = RunConfig::default();
        apply_train_overrides(
            &mut config,
            &Some("M3".into()),
            Some(2),
            None,
            None,
            None,
            None,
            &None,
            &None,
            &None,
            &None,
            Some(16),
            Some(4),
            Some(0.25),
        )
        .unwrap();
        assert_eq!(config.network.variant, Variant::M3);
        assert_eq!(config.train.epochs, 2);
        match config.data {
            DataConfig::Synthetic {
                count,
                test_count,
                difficulty,
            } => {
                assert_eq!((count, test_count), (16, 4));
                assert_eq!(difficulty, 0.25);
            }
            other => panic!("unexpected data config {other:?}"),
        }

        let mut config = RunConfig::default();
        let err = apply_train_overrides(
            &mut config,
            &None,
            None,
            None,
            None,
            None,
            Some(100),
            &None,
            &None,
            &None,
            &None,
            None,
            None,
            None,
        );
        assert!(matches!(err, Err(Failure::Usage(m)) if m.contains("input_size")));
    }
}
