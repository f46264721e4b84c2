//! Training loop, checkpointing, evaluation, and the ablation driver.
//!
//! One training process owns the weights (single writer). Runs are
//! deterministic: sample synthesis is a pure function of `(seed, index)`,
//! shuffling uses a dedicated ChaCha stream whose state is checkpointed,
//! and the engine underneath is single-threaded — so a fixed config
//! reproduces per-epoch losses bitwise. The ablation driver trains
//! several `(variant, seed)` jobs, each an isolated single-writer run;
//! jobs may execute on parallel threads without affecting any result.

pub mod adam;
pub mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, IxDyn};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

pub use adam::Adam;
pub use checkpoint::{peek_dtype, Checkpoint, RngState};

use crate::config::{DataConfig, Normalization, RunConfig};
use crate::data::{self, load_sample, DatasetManifest, Sample, Split};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics::{self, load_binary_mask, Aggregate, MetricsReport, ReportRow};
use crate::network::{Network, Variant};
use crate::nn::{Mode, ParamVisit};
use crate::scalar::{Dtype, Scalar};
use crate::tape::{resize_bilinear_2d, Tape};

/// Images evaluated per forward pass during validation/evaluation.
const EVAL_BATCH: usize = 8;

/// Stream id for the epoch-shuffling generator; far away from the
/// module-initialization streams used by the network.
const SHUFFLE_STREAM: u64 = 1_000;

/// FNV-1a over the id bytes: the deterministic hash behind the
/// validation split, stable across platforms and runs.
pub fn fnv1a64(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Roughly 10% of ids land in the validation fold.
pub fn is_validation_id(id: &str) -> bool {
    fnv1a64(id) % 10 == 0
}

/// Partition `0..ids.len()` into (train, validation) index lists.
pub fn split_train_val(ids: &[String]) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        if is_validation_id(id) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

/// An image ready for evaluation: the network sees `image` (already at
/// input size, unnormalized `[0,1]`), scoring happens against the mask
/// at its native resolution.
pub struct EvalItem {
    pub id: String,
    pub image: Array3<f64>,
    pub native_mask: Array2<f64>,
}

/// Deterministic, random-access source of samples. Synthetic samples
/// are pure functions of the seed; once rendered they are kept in an
/// in-memory cache while the whole set fits a fixed byte budget, since
/// multi-epoch training revisits every sample many times. Folder
/// samples are read from disk and resized to the input size.
pub enum SampleProvider {
    Synthetic {
        base_seed: u64,
        first_index: u64,
        count: usize,
        size: usize,
        difficulty: f64,
        /// One lazily-filled slot per sample; empty when the set would
        /// exceed the cache budget, which turns caching off.
        cache: Vec<OnceLock<Sample>>,
    },
    Folder {
        manifest: DatasetManifest,
        input_size: usize,
    },
}

/// Cache slots for a synthetic set, or none if the fully-rendered set
/// would not comfortably fit in memory (5 `f64` planes per sample).
fn synth_cache_slots(count: usize, size: usize) -> Vec<OnceLock<Sample>> {
    const CACHE_BUDGET_BYTES: usize = 768 << 20;
    if count.saturating_mul(5 * size * size * 8) <= CACHE_BUDGET_BYTES {
        (0..count).map(|_| OnceLock::new()).collect()
    } else {
        Vec::new()
    }
}

impl SampleProvider {
    /// The training-side source described by the config.
    pub fn training(config: &RunConfig) -> Result<Self> {
        match &config.data {
            DataConfig::Synthetic {
                count, difficulty, ..
            } => Ok(SampleProvider::Synthetic {
                base_seed: config.seed,
                first_index: 0,
                count: *count,
                size: config.train.input_size,
                difficulty: *difficulty,
                cache: synth_cache_slots(*count, config.train.input_size),
            }),
            DataConfig::Folder { train_root, .. } => Ok(SampleProvider::Folder {
                manifest: data::load_manifest(train_root, Split::Train)?,
                input_size: config.train.input_size,
            }),
        }
    }

    /// The held-out source, if the config defines one. Synthetic runs
    /// hold out the index range `count..count+test_count`, which never
    /// overlaps training.
    pub fn held_out(config: &RunConfig) -> Result<Option<Self>> {
        match &config.data {
            DataConfig::Synthetic {
                count,
                test_count,
                difficulty,
            } => Ok(Some(SampleProvider::Synthetic {
                base_seed: config.seed,
                first_index: *count as u64,
                count: *test_count,
                size: config.train.input_size,
                difficulty: *difficulty,
                cache: synth_cache_slots(*test_count, config.train.input_size),
            })),
            DataConfig::Folder { test_root, .. } => match test_root {
                Some(root) => Ok(Some(SampleProvider::Folder {
                    manifest: data::load_manifest(root, Split::Test)?,
                    input_size: config.train.input_size,
                })),
                None => Ok(None),
            },
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SampleProvider::Synthetic { count, .. } => *count,
            SampleProvider::Folder { manifest, .. } => manifest.items.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stable ids, used for the validation split and report rows.
    pub fn ids(&self) -> Result<Vec<String>> {
        match self {
            SampleProvider::Synthetic {
                base_seed,
                first_index,
                count,
                size,
                difficulty,
                ..
            } => Ok((0..*count)
                .map(|i| {
                    let seed = data::sample_seed(*base_seed, first_index + i as u64);
                    data::synth_id(seed, *size, *difficulty)
                })
                .collect()),
            SampleProvider::Folder { manifest, .. } => manifest
                .items
                .iter()
                .map(|(img, _)| {
                    img.file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .ok_or_else(|| {
                            Error::InvalidInput(format!("no file stem in {}", img.display()))
                        })
                })
                .collect(),
        }
    }

    /// Sample `i` with image, mask, and edge all at the input size.
    pub fn train_sample(&self, i: usize) -> Result<Sample> {
        match self {
            SampleProvider::Synthetic {
                base_seed,
                first_index,
                size,
                difficulty,
                cache,
                ..
            } => {
                if let Some(cell) = cache.get(i) {
                    if let Some(sample) = cell.get() {
                        return Ok(sample.clone());
                    }
                }
                let seed = data::sample_seed(*base_seed, first_index + i as u64);
                let sample = data::synth_sample(seed, *size, *difficulty)?;
                match cache.get(i) {
                    Some(cell) => Ok(cell.get_or_init(|| sample).clone()),
                    None => Ok(sample),
                }
            }
            SampleProvider::Folder {
                manifest,
                input_size,
            } => {
                let (img, gt) = &manifest.items[i];
                let native = load_sample(img, gt)?;
                resample_to(native, *input_size)
            }
        }
    }

    /// Sample `i` with the image at input size but the mask at its
    /// native resolution, for resolution-faithful scoring.
    pub fn eval_item(&self, i: usize) -> Result<EvalItem> {
        match self {
            SampleProvider::Synthetic { .. } => {
                let s = self.train_sample(i)?;
                Ok(EvalItem {
                    id: s.id,
                    image: s.image,
                    native_mask: s.mask,
                })
            }
            SampleProvider::Folder {
                manifest,
                input_size,
            } => {
                let (img, gt) = &manifest.items[i];
                let native = load_sample(img, gt)?;
                let native_mask = load_binary_mask(gt)?;
                let resized = resample_to(native, *input_size)?;
                Ok(EvalItem {
                    id: resized.id,
                    image: resized.image,
                    native_mask,
                })
            }
        }
    }
}

/// Bilinearly resize a sample to `size`×`size`; the mask is re-binarized
/// and the edge band re-derived so their invariants survive resampling.
fn resample_to(sample: Sample, size: usize) -> Result<Sample> {
    let (_, h, w) = sample.image.dim();
    if h == size && w == size {
        return Ok(sample);
    }
    let image = data::resize_image_channels(&sample.image, (size, size));
    let mask = resize_bilinear_2d(&sample.mask, (size, size))
        .mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let edge = data::derive_edge_gt(&mask)?;
    Ok(Sample {
        id: sample.id,
        image,
        mask,
        edge,
    })
}

/// `[0,1]` images → per-channel standardized network inputs.
pub fn normalize_images<T: Scalar>(
    images: &[Array3<f64>],
    norm: &Normalization,
) -> Result<ArrayD<T>> {
    let n = images.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty image batch".into()));
    }
    let (c, h, w) = images[0].dim();
    if c != 3 {
        return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
    }
    let mut out = ArrayD::<T>::zeros(IxDyn(&[n, 3, h, w]));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::InvalidInput(format!(
                "ragged batch: image {i} is {:?}, expected {:?}",
                img.dim(),
                (c, h, w)
            )));
        }
        for ch in 0..3 {
            let mean = norm.mean[ch];
            let std = norm.std[ch];
            for y in 0..h {
                for x in 0..w {
                    out[[i, ch, y, x]] = T::c((img[[ch, y, x]] - mean) / std);
                }
            }
        }
    }
    Ok(out)
}

/// Stack masks and edges as `[N,1,S,S]` ground-truth tensors.
pub fn stack_targets(samples: &[Sample]) -> (ArrayD<f64>, ArrayD<f64>) {
    let n = samples.len();
    let (h, w) = samples[0].mask.dim();
    let mut masks = ArrayD::zeros(IxDyn(&[n, 1, h, w]));
    let mut edges = ArrayD::zeros(IxDyn(&[n, 1, h, w]));
    for (i, s) in samples.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                masks[[i, 0, y, x]] = s.mask[[y, x]];
                edges[[i, 0, y, x]] = s.edge[[y, x]];
            }
        }
    }
    (masks, edges)
}

/// Weights plus optimizer: the single-writer mutable core of a run.
pub struct TrainState<T: Scalar> {
    pub network: Network<T>,
    pub optimizer: Adam<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: &RunConfig) -> Result<Self> {
        Ok(TrainState {
            network: Network::new(&config.network, config.seed)?,
            optimizer: Adam::new(config.train.lr, config.train.weight_decay),
        })
    }
}

/// One optimization step on a prepared batch: forward in train mode,
/// composite loss over all mask and edge outputs, backward, Adam update,
/// batch-norm statistics refresh. Returns the loss breakdown; when the
/// total is non-finite the weights are left untouched so the caller can
/// abort with context.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    images: &ArrayD<T>,
    gt_masks: &ArrayD<f64>,
    gt_edges: &ArrayD<f64>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let input = tape.constant(images.clone());
    let outputs = state.network.forward(&mut tape, input, Mode::Train)?;
    let (total, breakdown) = total_loss(
        &mut tape,
        &outputs.masks,
        &outputs.edges,
        gt_masks,
        gt_edges,
    )?;
    if !breakdown.total.is_finite() {
        return Ok(breakdown);
    }
    tape.backward(total);

    let mut grads: BTreeMap<String, ArrayD<T>> = BTreeMap::new();
    let names: Vec<String> = tape.param_names().map(str::to_string).collect();
    for name in names {
        // A parameter with no path to the loss gets an explicit zero
        // gradient, so Adam applies only weight decay to it. This is
        // the normal state of M1's level-4 trunk, whose features feed
        // nothing in that variant; every other variant supervises all
        // of its parameters.
        let grad = match tape.param_grad(&name) {
            Some(g) => g.clone(),
            None => {
                let id = tape
                    .param_id(&name)
                    .expect("name came from the tape's own registry");
                ArrayD::zeros(tape.value(id).raw_dim())
            }
        };
        grads.insert(name, grad);
    }
    let updates = tape.take_stat_updates();
    state.network.apply_stat_updates(updates);
    state.optimizer.step(&mut state.network, &grads)?;
    Ok(breakdown)
}

/// Per-epoch record, one JSON line each in the training log. The loss
/// fields are means over the epoch's steps; the vectors hold one entry
/// per mask/edge output, matching the loss breakdown's layout.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mask_bce: Vec<f64>,
    pub mask_iou: Vec<f64>,
    pub edge_dice: Vec<f64>,
    pub total: f64,
    pub val_mae: Option<f64>,
    pub seconds: f64,
}

/// A finished (or checkpoint-resumable) training run.
pub struct TrainOutcome<T: Scalar> {
    pub state: TrainState<T>,
    pub epochs: Vec<EpochLog>,
    pub best_val_mae: Option<f64>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

fn mean_of(acc: &[Vec<f64>]) -> Vec<f64> {
    if acc.is_empty() {
        return Vec::new();
    }
    let n = acc.len() as f64;
    let width = acc[0].len();
    let mut out = vec![0.0; width];
    for row in acc {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v / n;
        }
    }
    out
}

/// Mean absolute error of eval-mode predictions over `items`, at input
/// resolution — the cheap per-epoch validation signal.
fn validation_mae<T: Scalar>(
    network: &Network<T>,
    provider: &SampleProvider,
    indices: &[usize],
    norm: &Normalization,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let samples: Vec<Sample> = chunk
            .iter()
            .map(|&i| provider.train_sample(i))
            .collect::<Result<_>>()?;
        let images: Vec<Array3<f64>> = samples.iter().map(|s| s.image.clone()).collect();
        let batch = normalize_images::<T>(&images, norm)?;
        let probs = network.predict_primary(&batch)?;
        for (n, sample) in samples.iter().enumerate() {
            let pred = probs
                .index_axis(Axis(0), n)
                .index_axis(Axis(0), 0)
                .to_owned()
                .into_dimensionality::<Ix2>()
                .expect("prediction plane is 2-d");
            sum += metrics::mae(&pred, &sample.mask)?;
            count += 1;
        }
    }
    Ok(sum / count.max(1) as f64)
}

/// Snapshot the run into a single-file checkpoint: weights, batch-norm
/// buffers, optimizer moments, shuffle-RNG state, and the config.
pub fn checkpoint_from_state<T: Scalar>(
    config: &RunConfig,
    epoch: u64,
    state: &TrainState<T>,
    shuffle_rng: &ChaCha20Rng,
) -> Checkpoint<T> {
    let mut tensors: BTreeMap<String, ArrayD<T>> = BTreeMap::new();
    state.network.visit_params("", &mut |name, p| {
        tensors.insert(name.to_string(), p.clone());
    });
    state.network.visit_buffers("", &mut |name, b| {
        tensors.insert(name.to_string(), b.clone());
    });
    for (name, tensor) in state.optimizer.state_tensors() {
        tensors.insert(name, tensor.clone());
    }
    Checkpoint {
        config: config.clone(),
        epoch,
        rng: RngState::capture(shuffle_rng),
        optimizer_steps: state.optimizer.step_count(),
        tensors,
    }
}

/// Rebuild just the network from a checkpoint (evaluation/prediction
/// path; optimizer moments are ignored). Strict: every parameter and
/// buffer must be present with the right shape.
pub fn network_from_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Network<T>> {
    let mut network: Network<T> = Network::new(&ckpt.config.network, ckpt.config.seed)?;
    let mut problems: Vec<String> = Vec::new();
    let mut install = |name: &str, dst: &mut ArrayD<T>| match ckpt.tensors.get(name) {
        Some(src) if src.shape() == dst.shape() => dst.assign(src),
        Some(src) => problems.push(format!(
            "{name}: stored shape {:?} vs expected {:?}",
            src.shape(),
            dst.shape()
        )),
        None => problems.push(format!("{name}: missing")),
    };
    network.visit_params_mut("", &mut |name, p| install(name, p));
    network.visit_buffers_mut("", &mut |name, b| install(name, b));
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint does not match the configured network: {}",
            problems.join("; ")
        )));
    }
    Ok(network)
}

/// Rebuild the full training state plus shuffle RNG from a checkpoint.
pub fn state_from_checkpoint<T: Scalar>(
    ckpt: &Checkpoint<T>,
) -> Result<(TrainState<T>, ChaCha20Rng)> {
    let network = network_from_checkpoint(ckpt)?;
    let mut known: BTreeSet<String> = BTreeSet::new();
    network.visit_params("", &mut |name, _| {
        known.insert(name.to_string());
    });
    network.visit_buffers("", &mut |name, _| {
        known.insert(name.to_string());
    });

    let mut optimizer = Adam::new(ckpt.config.train.lr, ckpt.config.train.weight_decay);
    optimizer.set_step_count(ckpt.optimizer_steps);
    for (name, tensor) in &ckpt.tensors {
        if let Some(param) = name.strip_prefix("adam.m.") {
            let v_name = format!("adam.v.{param}");
            let v = ckpt.tensors.get(&v_name).ok_or_else(|| {
                Error::Checkpoint(format!("optimizer moment {v_name} is missing"))
            })?;
            if !known.contains(param) {
                return Err(Error::Checkpoint(format!(
                    "optimizer state for unknown parameter {param}"
                )));
            }
            optimizer.restore_slot(param, tensor.clone(), v.clone());
        } else if !name.starts_with("adam.v.") && !known.contains(name) {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
    }
    Ok((
        TrainState { network, optimizer },
        ckpt.rng.restore(),
    ))
}

/// Run the full optimization loop described by `config`: shuffled
/// mini-batches, Adam on the composite loss, per-epoch JSON-line logs,
/// a checkpoint after every epoch, and a `best.ckpt` whenever the
/// validation MAE improves. Aborts with the offending batch ids if the
/// loss ever turns non-finite.
pub fn train<T: Scalar>(config: &RunConfig) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let out_dir = &config.paths.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let provider = SampleProvider::training(config)?;
    if provider.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    let ids = provider.ids()?;
    let (train_idx, val_idx) = split_train_val(&ids);
    if train_idx.is_empty() {
        return Err(Error::InvalidInput(
            "training split is empty after holding out validation items".into(),
        ));
    }

    let mut state = TrainState::<T>::new(config)?;
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);

    let log_path = config.paths.train_log();
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let mut epochs: Vec<EpochLog> = Vec::with_capacity(config.train.epochs);
    let mut best_val_mae: Option<f64> = None;
    let mut best_checkpoint: Option<PathBuf> = None;
    let last_checkpoint = config.paths.last_checkpoint();

    for epoch in 1..=config.train.epochs {
        let started = Instant::now();
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);

        let mut bce_acc: Vec<Vec<f64>> = Vec::new();
        let mut iou_acc: Vec<Vec<f64>> = Vec::new();
        let mut dice_acc: Vec<Vec<f64>> = Vec::new();
        let mut total_acc: Vec<f64> = Vec::new();

        for (step, chunk) in order.chunks(config.train.batch_size).enumerate() {
            let samples: Vec<Sample> = chunk
                .iter()
                .map(|&i| provider.train_sample(i))
                .collect::<Result<_>>()?;
            let images: Vec<Array3<f64>> = samples.iter().map(|s| s.image.clone()).collect();
            let batch = normalize_images::<T>(&images, &config.normalization)?;
            let (gt_masks, gt_edges) = stack_targets(&samples);
            let breakdown = train_step(&mut state, &batch, &gt_masks, &gt_edges)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    batch_ids: samples.into_iter().map(|s| s.id).collect(),
                });
            }
            bce_acc.push(breakdown.mask_bce);
            iou_acc.push(breakdown.mask_iou);
            dice_acc.push(breakdown.edge_dice);
            total_acc.push(breakdown.total);
        }

        let val_mae = if val_idx.is_empty() {
            None
        } else {
            Some(validation_mae(
                &state.network,
                &provider,
                &val_idx,
                &config.normalization,
            )?)
        };

        let log = EpochLog {
            epoch,
            steps: total_acc.len(),
            mask_bce: mean_of(&bce_acc),
            mask_iou: mean_of(&iou_acc),
            edge_dice: mean_of(&dice_acc),
            total: total_acc.iter().sum::<f64>() / total_acc.len().max(1) as f64,
            val_mae,
            seconds: started.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&log)?;
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        epochs.push(log);

        let ckpt = checkpoint_from_state(config, epoch as u64, &state, &shuffle_rng);
        ckpt.save(&last_checkpoint)?;
        if let Some(mae) = val_mae {
            if best_val_mae.is_none_or(|best| mae < best) {
                best_val_mae = Some(mae);
                let path = config.paths.best_checkpoint();
                ckpt.save(&path)?;
                best_checkpoint = Some(path);
            }
        }
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;

    Ok(TrainOutcome {
        state,
        epochs,
        best_val_mae,
        last_checkpoint,
        best_checkpoint,
    })
}

/// Eval-mode probability maps for prediction export: the primary mask
/// `σ(M₁)` and, when the variant has an edge branch, the last edge map
/// `σ(e₂)`. Both are `[N,1,S,S]` in `f64`.
pub fn predict_maps<T: Scalar>(
    network: &Network<T>,
    images: &ArrayD<T>,
) -> Result<(ArrayD<f64>, Option<ArrayD<f64>>)> {
    let mut tape = Tape::new();
    let input = tape.constant(images.clone());
    let outputs = network.forward(&mut tape, input, Mode::Eval)?;
    let mask = tape.sigmoid(outputs.masks[0]);
    let mask_prob = tape.value(mask).mapv(Scalar::to_f64);
    let edge_prob = match outputs.edges.last() {
        Some(&edge) => {
            let prob = tape.sigmoid(edge);
            Some(tape.value(prob).mapv(Scalar::to_f64))
        }
        None => None,
    };
    Ok((mask_prob, edge_prob))
}

/// Score eval-mode primary predictions against ground truth at each
/// mask's native resolution. Rows are sorted by id.
pub fn evaluate<T: Scalar>(
    network: &Network<T>,
    provider: &SampleProvider,
    dataset: &str,
    norm: &Normalization,
) -> Result<MetricsReport> {
    let mut rows: Vec<ReportRow> = Vec::with_capacity(provider.len());
    let indices: Vec<usize> = (0..provider.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let items: Vec<EvalItem> = chunk
            .iter()
            .map(|&i| provider.eval_item(i))
            .collect::<Result<_>>()?;
        let images: Vec<Array3<f64>> = items.iter().map(|it| it.image.clone()).collect();
        let batch = normalize_images::<T>(&images, norm)?;
        let probs = network.predict_primary(&batch)?;
        for (n, item) in items.iter().enumerate() {
            let pred = probs
                .index_axis(Axis(0), n)
                .index_axis(Axis(0), 0)
                .to_owned()
                .into_dimensionality::<Ix2>()
                .expect("prediction plane is 2-d");
            let scores = metrics::score_pair_resized(&pred, &item.native_mask)?;
            rows.push(ReportRow {
                id: item.id.clone(),
                scores,
            });
        }
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(MetricsReport::from_rows(dataset, rows, Vec::new()))
}

/// Published full-scale results of the five variants on the three
/// standard benchmarks, quoted verbatim in the ablation table footer as
/// context. They are not a reproduction target for desk-scale runs.
/// Columns: structure measure, enhanced-alignment measure, F-measure,
/// MAE.
pub const REFERENCE_RESULTS: [(&str, &str, [f64; 4]); 15] = [
    ("M1", "COD10K-Test", [0.805, 0.872, 0.711, 0.040]),
    ("M1", "Camo-Test", [0.802, 0.866, 0.745, 0.072]),
    ("M1", "NC4K-Test", [0.812, 0.872, 0.766, 0.053]),
    ("M2", "COD10K-Test", [0.839, 0.902, 0.752, 0.030]),
    ("M2", "Camo-Test", [0.831, 0.899, 0.773, 0.061]),
    ("M2", "NC4K-Test", [0.839, 0.896, 0.795, 0.044]),
    ("M3", "COD10K-Test", [0.841, 0.905, 0.751, 0.028]),
    ("M3", "Camo-Test", [0.838, 0.906, 0.779, 0.059]),
    ("M3", "NC4K-Test", [0.848, 0.913, 0.801, 0.041]),
    ("M4", "COD10K-Test", [0.857, 0.927, 0.766, 0.025]),
    ("M4", "Camo-Test", [0.853, 0.931, 0.798, 0.052]),
    ("M4", "NC4K-Test", [0.871, 0.932, 0.822, 0.035]),
    ("M5", "COD10K-Test", [0.862, 0.934, 0.772, 0.023]),
    ("M5", "Camo-Test", [0.866, 0.935, 0.808, 0.048]),
    ("M5", "NC4K-Test", [0.882, 0.945, 0.829, 0.033]),
];

/// Held-out scores of one trained `(variant, seed)` job.
#[derive(Debug, Clone)]
pub struct CellScores {
    pub aggregate: Aggregate,
    pub images: usize,
}

/// One ablation cell; failures are isolated here instead of aborting
/// the whole table.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub result: std::result::Result<CellScores, String>,
}

/// The finished ablation: every cell plus the consolidated CSV path.
pub struct AblationOutcome {
    pub cells: Vec<AblationCell>,
    pub csv_path: PathBuf,
}

impl AblationOutcome {
    /// Held-out MAE for one cell, if that job succeeded.
    pub fn mae(&self, variant: Variant, seed: u64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.seed == seed)
            .and_then(|c| c.result.as_ref().ok())
            .map(|s| s.aggregate.mae)
    }
}

fn run_ablation_job<T: Scalar>(config: &RunConfig) -> Result<CellScores> {
    let outcome = train::<T>(config)?;
    let held_out = SampleProvider::held_out(config)?.ok_or_else(|| {
        Error::Config("ablation needs a held-out dataset (test_count or test_root)".into())
    })?;
    if held_out.is_empty() {
        return Err(Error::Config("ablation held-out dataset is empty".into()));
    }
    let report = evaluate(
        &outcome.state.network,
        &held_out,
        "synthetic-heldout",
        &config.normalization,
    )?;
    let aggregate = report
        .aggregate
        .ok_or_else(|| Error::InvalidInput("held-out report has no aggregate".into()))?;
    Ok(CellScores {
        aggregate,
        images: report.count,
    })
}

fn dispatch_ablation_job(config: &RunConfig) -> std::result::Result<CellScores, String> {
    let run = || match config.precision {
        Dtype::F32 => run_ablation_job::<f32>(config),
        Dtype::F64 => run_ablation_job::<f64>(config),
    };
    run().map_err(|e| e.to_string())
}

/// Train one model per `(variant, seed)` on the shared dataset and
/// consolidate held-out scores into a CSV whose rows carry the method
/// and the four metric columns, with the published full-scale results
/// appended as reference footer rows. Jobs run in parallel threads;
/// each is its own deterministic single-writer training process, so the
/// table does not depend on scheduling.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationOutcome> {
    base.validate()?;
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    std::fs::create_dir_all(&base.paths.out_dir).map_err(|e| Error::io(&base.paths.out_dir, e))?;

    let mut jobs: Vec<(Variant, u64, RunConfig)> = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let mut config = base.clone();
            config.seed = seed;
            config.network.variant = variant;
            config.paths.out_dir = base
                .paths
                .out_dir
                .join(format!("ablate-{variant}-seed{seed}"));
            jobs.push((variant, seed, config));
        }
    }

    let parallelism = std::thread::available_parallelism()
        .map(usize::from)
        .unwrap_or(1)
        .clamp(1, jobs.len());
    let mut cells: Vec<AblationCell> = Vec::with_capacity(jobs.len());
    for wave in jobs.chunks(parallelism) {
        let wave_results: Vec<AblationCell> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|(variant, seed, config)| {
                    let (variant, seed) = (*variant, *seed);
                    scope.spawn(move || AblationCell {
                        variant,
                        seed,
                        result: dispatch_ablation_job(config),
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation job thread panicked"))
                .collect()
        });
        cells.extend(wave_results);
    }

    let csv_path = base.paths.out_dir.join("ablation.csv");
    write_ablation_csv(&csv_path, &cells)?;
    Ok(AblationOutcome { cells, csv_path })
}

/// Consolidated table: desk-run rows first, reference footer last.
fn write_ablation_csv(path: &Path, cells: &[AblationCell]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "method",
        "dataset",
        "seed",
        "source",
        "s_measure",
        "e_measure",
        "weighted_f",
        "mae",
        "note",
    ])?;
    for cell in cells {
        let method = cell.variant.to_string();
        let seed = cell.seed.to_string();
        match &cell.result {
            Ok(scores) => {
                let a = &scores.aggregate;
                writer.write_record([
                    method.as_str(),
                    "synthetic-heldout",
                    seed.as_str(),
                    "desk-run",
                    &format!("{:.6}", a.s_measure),
                    &format!("{:.6}", a.e_measure),
                    &format!("{:.6}", a.weighted_f),
                    &format!("{:.6}", a.mae),
                    &format!("{} images", scores.images),
                ])?;
            }
            Err(message) => {
                writer.write_record([
                    method.as_str(),
                    "synthetic-heldout",
                    seed.as_str(),
                    "desk-run",
                    "",
                    "",
                    "",
                    "",
                    &format!("failed: {message}"),
                ])?;
            }
        }
    }
    for (method, dataset, [s, e, f, m]) in REFERENCE_RESULTS {
        writer.write_record([
            method,
            dataset,
            "",
            "reference",
            &format!("{s}"),
            &format!("{e}"),
            &format!("{f}"),
            &format!("{m}"),
            "published full-scale result; context only, not a desk-scale target",
        ])?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
