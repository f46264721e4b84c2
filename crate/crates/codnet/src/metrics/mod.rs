//! Evaluation measures for saliency-style binary segmentation: structure
//! measure, alignment (enhanced) measure, weighted F, and mean absolute
//! error, plus folder-level report assembly.
//!
//! All four accept a prediction in `[0,1]` and a strictly binary ground
//! truth of the same shape. Out-of-range predictions are min-max
//! normalized per image first (the convention of common evaluation
//! toolchains for 8-bit maps). Predictions at a different resolution are
//! bilinearly resized to the ground-truth grid before scoring.
//!
//! Conventions pinned here (and mirrored by the naive test oracles):
//! - Structure measure: object term uses sample (N−1) standard deviation;
//!   region term splits at the rounded foreground centroid into four
//!   blocks scored by a single-window SSIM; degenerate ground truths map
//!   to `1 − mean(P)` (all background) or `mean(P)` (all foreground); the
//!   final score is clamped at 0.
//! - Alignment measure: the prediction is binarized at twice its mean
//!   (clamped to 1; an all-zero prediction binarizes to all background),
//!   the alignment matrix is formed without an epsilon (0/0 → 0), and the
//!   enhanced map is averaged over all pixels. A mean-over-256-thresholds
//!   variant is available behind [`EmeasureKind`].
//! - Weighted F: Gaussian error spreading (7×7, σ=5) renormalized over
//!   the in-bounds window so constant error fields are preserved at the
//!   border; background errors substituted from the canonical nearest
//!   foreground pixel (see [`edt`]); distance decay `2 − 0.5^(d/5)`;
//!   β² = 1. A ground truth with no foreground scores 0 and is flagged
//!   as degenerate rather than rejected.

pub mod edt;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::resize_bilinear_2d;

const EPS: f64 = f64::EPSILON;

/// Default blend between the object and region terms of the structure
/// measure.
pub const DEFAULT_S_ALPHA: f64 = 0.5;

/// Which alignment-measure variant to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EmeasureKind {
    /// Single threshold at `min(2·mean(P), 1)`.
    #[default]
    Adaptive,
    /// Mean over 256 uniform thresholds `k/255`.
    MeanThresholds,
}

fn validate_pair(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(
            "metric input pair",
            format!("{:?}", gt.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("metric input is empty".into()));
    }
    if pred.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::InvalidInput(
            "prediction must lie in [0,1] after normalization".into(),
        ));
    }
    if gt.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput(
            "ground truth must be strictly binary".into(),
        ));
    }
    Ok(())
}

/// Min-max normalize a prediction per image, but only when its values
/// leave `[0,1]`; in-range maps pass through untouched. A constant
/// out-of-range map normalizes to all zeros.
pub fn normalize_prediction(pred: &Array2<f64>) -> Array2<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in pred {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo >= 0.0 && hi <= 1.0 {
        return pred.clone();
    }
    let span = hi - lo;
    pred.mapv(|v| (v - lo) / (span + EPS))
}

/// Mean absolute error.
pub fn mae(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    validate_pair(pred, gt)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / n)
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = sample_std(values, mean);
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

/// Rounded foreground centroid (row, col); caller guarantees foreground.
fn centroid(gt: &Array2<f64>) -> (usize, usize) {
    let (h, w) = gt.dim();
    let mut total = 0.0;
    let mut sr = 0.0;
    let mut sc = 0.0;
    for ((r, c), &g) in gt.indexed_iter() {
        total += g;
        sr += r as f64 * g;
        sc += c as f64 * g;
    }
    let row = (sr / total).round() as usize;
    let col = (sc / total).round() as usize;
    (row.min(h - 1), col.min(w - 1))
}

/// Single-window SSIM used by the region term.
fn block_ssim(pred: &Array2<f64>, gt: &Array2<f64>, rows: (usize, usize), cols: (usize, usize)) -> f64 {
    let n = (rows.1 - rows.0) * (cols.1 - cols.0);
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for r in rows.0..rows.1 {
        for c in cols.0..cols.1 {
            sx += pred[[r, c]];
            sy += gt[[r, c]];
        }
    }
    let mx = sx / nf;
    let my = sy / nf;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for r in rows.0..rows.1 {
        for c in cols.0..cols.1 {
            let dx = pred[[r, c]] - mx;
            let dy = gt[[r, c]] - my;
            vx += dx * dx;
            vy += dy * dy;
            cov += dx * dy;
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    vx /= denom;
    vy /= denom;
    cov /= denom;
    let a = 4.0 * mx * my * cov;
    let b = (mx * mx + my * my) * (vx + vy);
    if a != 0.0 {
        a / (b + EPS)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_object(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let fg: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, g)| **g == 1.0)
        .map(|(p, _)| *p)
        .collect();
    let bg: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, g)| **g == 0.0)
        .map(|(p, _)| 1.0 - *p)
        .collect();
    let u = gt.iter().sum::<f64>() / gt.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

fn s_region(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let (h, w) = gt.dim();
    let (cy, cx) = centroid(gt);
    let row_splits = [(0, cy + 1), (cy + 1, h)];
    let col_splits = [(0, cx + 1), (cx + 1, w)];
    let total = (h * w) as f64;
    let mut score = 0.0;
    for rows in row_splits {
        for cols in col_splits {
            let area = ((rows.1 - rows.0) * (cols.1 - cols.0)) as f64;
            if area == 0.0 {
                continue;
            }
            score += area / total * block_ssim(pred, gt, rows, cols);
        }
    }
    score
}

/// Structure measure: `α·S_object + (1−α)·S_region`, clamped at 0.
pub fn s_measure_with(pred: &Array2<f64>, gt: &Array2<f64>, alpha: f64) -> Result<f64> {
    validate_pair(pred, gt)?;
    let gt_mean = gt.iter().sum::<f64>() / gt.len() as f64;
    let pred_mean = pred.iter().sum::<f64>() / pred.len() as f64;
    if gt_mean == 0.0 {
        return Ok(1.0 - pred_mean);
    }
    if gt_mean == 1.0 {
        return Ok(pred_mean);
    }
    let s = alpha * s_object(pred, gt) + (1.0 - alpha) * s_region(pred, gt);
    Ok(s.max(0.0))
}

/// Structure measure at the conventional α = 0.5.
pub fn s_measure(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    s_measure_with(pred, gt, DEFAULT_S_ALPHA)
}

/// Alignment score of one binarized map against a binary ground truth.
fn alignment_score(binary: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let n = gt.len() as f64;
    let gt_sum: f64 = gt.iter().sum();
    if gt_sum == 0.0 {
        return binary.iter().map(|b| 1.0 - b).sum::<f64>() / n;
    }
    if gt_sum == n {
        return binary.iter().sum::<f64>() / n;
    }
    let mb = binary.iter().sum::<f64>() / n;
    let mg = gt_sum / n;
    let mut total = 0.0;
    for (b, g) in binary.iter().zip(gt) {
        let pb = b - mb;
        let pg = g - mg;
        let num = 2.0 * pb * pg;
        let den = pb * pb + pg * pg;
        let xi = if num == 0.0 && den == 0.0 { 0.0 } else { num / den };
        let e = 1.0 + xi;
        total += e * e / 4.0;
    }
    total / n
}

/// Alignment (enhanced) measure of the requested kind.
pub fn e_measure_with(pred: &Array2<f64>, gt: &Array2<f64>, kind: EmeasureKind) -> Result<f64> {
    validate_pair(pred, gt)?;
    match kind {
        EmeasureKind::Adaptive => {
            let t = (2.0 * pred.iter().sum::<f64>() / pred.len() as f64).min(1.0);
            let binary = if t == 0.0 {
                Array2::zeros(pred.dim())
            } else {
                pred.mapv(|p| if p >= t { 1.0 } else { 0.0 })
            };
            Ok(alignment_score(&binary, gt))
        }
        EmeasureKind::MeanThresholds => {
            let mut total = 0.0;
            for k in 0..=255u32 {
                let t = k as f64 / 255.0;
                let binary = pred.mapv(|p| if p >= t { 1.0 } else { 0.0 });
                total += alignment_score(&binary, gt);
            }
            Ok(total / 256.0)
        }
    }
}

/// Alignment measure at the adaptive threshold.
pub fn e_measure(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    e_measure_with(pred, gt, EmeasureKind::Adaptive)
}

/// 7×7 Gaussian (σ=5) smoothing, renormalized over the in-bounds window
/// so constant fields stay constant at the border.
fn gaussian_smooth_renormalized(x: &Array2<f64>) -> Array2<f64> {
    const SIZE: isize = 7;
    const HALF: isize = SIZE / 2;
    const SIGMA: f64 = 5.0;
    let mut kernel = [[0.0f64; SIZE as usize]; SIZE as usize];
    let mut ksum = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let di = i as f64 - HALF as f64;
            let dj = j as f64 - HALF as f64;
            *k = (-(di * di + dj * dj) / (2.0 * SIGMA * SIGMA)).exp();
            ksum += *k;
        }
    }
    for row in kernel.iter_mut() {
        for k in row.iter_mut() {
            *k /= ksum;
        }
    }

    let (h, w) = x.dim();
    let mut out = Array2::zeros((h, w));
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0.0;
            let mut weight = 0.0;
            for i in 0..SIZE {
                let rr = r + i - HALF;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for j in 0..SIZE {
                    let cc = c + j - HALF;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    let k = kernel[i as usize][j as usize];
                    acc += k * x[[rr as usize, cc as usize]];
                    weight += k;
                }
            }
            out[[r as usize, c as usize]] = acc / weight;
        }
    }
    out
}

/// Weighted F-measure. Returns the score and whether the pair was
/// degenerate (ground truth without foreground scores 0, flagged).
pub fn weighted_f(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<(f64, bool)> {
    validate_pair(pred, gt)?;
    let foreground = gt.mapv(|g| g == 1.0);
    let fg_count = foreground.iter().filter(|&&f| f).count();
    if fg_count == 0 {
        return Ok((0.0, true));
    }

    let error = ndarray::Zip::from(pred).and(gt).map_collect(|p, g| (p - g).abs());
    let field = edt::nearest_foreground(&foreground);

    // Substitute each background error with the error at its nearest
    // foreground pixel before spreading.
    let mut substituted = error.clone();
    for ((r, c), &fg) in foreground.indexed_iter() {
        if !fg {
            substituted[[r, c]] = error[field.site[[r, c]]];
        }
    }
    let spread = gaussian_smooth_renormalized(&substituted);

    // On foreground, take the spread error when it is lower (errors in a
    // dependent neighborhood count less); weight background errors down
    // with distance from the object.
    let mut sum_fg = 0.0;
    let mut sum_bg = 0.0;
    for ((r, c), &fg) in foreground.indexed_iter() {
        if fg {
            let e = error[[r, c]];
            let ea = spread[[r, c]];
            sum_fg += if ea < e { ea } else { e };
        } else {
            let decay = 2.0 - 0.5f64.powf(field.distance[[r, c]] / 5.0);
            sum_bg += error[[r, c]] * decay;
        }
    }

    let nf = fg_count as f64;
    let recall = 1.0 - sum_fg / nf;
    let tp = nf - sum_fg;
    let precision = tp / (EPS + tp + sum_bg);
    let q = 2.0 * recall * precision / (EPS + recall + precision);
    Ok((q, false))
}

/// Every measure for one prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ImageScores {
    pub s_measure: f64,
    pub e_measure: f64,
    pub weighted_f: f64,
    pub mae: f64,
    /// Ground truth had no foreground, so `weighted_f` is a flagged zero.
    pub degenerate: bool,
}

/// Score a pair already at a common resolution; the prediction is
/// min-max normalized first if it leaves `[0,1]`.
pub fn score_pair(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<ImageScores> {
    let pred = normalize_prediction(pred);
    let (weighted_f, degenerate) = weighted_f(&pred, gt)?;
    Ok(ImageScores {
        s_measure: s_measure(&pred, gt)?,
        e_measure: e_measure(&pred, gt)?,
        weighted_f,
        mae: mae(&pred, gt)?,
        degenerate,
    })
}

/// Score a pair, bilinearly resizing the prediction to the ground-truth
/// grid first when the resolutions differ.
pub fn score_pair_resized(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<ImageScores> {
    if pred.dim() == gt.dim() {
        score_pair(pred, gt)
    } else {
        score_pair(&resize_bilinear_2d(pred, gt.dim()), gt)
    }
}

/// One scored image in a report.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub id: String,
    #[serde(flatten)]
    pub scores: ImageScores,
}

/// Arithmetic means over all rows.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Aggregate {
    pub s_measure: f64,
    pub e_measure: f64,
    pub weighted_f: f64,
    pub mae: f64,
}

/// Per-image rows plus aggregate means for one dataset.
#[derive(Debug, Serialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub count: usize,
    pub aggregate: Option<Aggregate>,
    pub rows: Vec<ReportRow>,
    /// Filenames that could not be scored and why.
    pub errors: Vec<String>,
}

impl MetricsReport {
    /// Assemble a report; the aggregate is the arithmetic mean of the
    /// per-image values (absent when there are no rows).
    pub fn from_rows(dataset: &str, rows: Vec<ReportRow>, errors: Vec<String>) -> Self {
        let aggregate = if rows.is_empty() {
            None
        } else {
            let n = rows.len() as f64;
            Some(Aggregate {
                s_measure: rows.iter().map(|r| r.scores.s_measure).sum::<f64>() / n,
                e_measure: rows.iter().map(|r| r.scores.e_measure).sum::<f64>() / n,
                weighted_f: rows.iter().map(|r| r.scores.weighted_f).sum::<f64>() / n,
                mae: rows.iter().map(|r| r.scores.mae).sum::<f64>() / n,
            })
        };
        MetricsReport {
            dataset: dataset.to_string(),
            count: rows.len(),
            aggregate,
            rows,
            errors,
        }
    }

    /// Write the per-image rows as CSV: the image id and the four
    /// measures, nothing else (degenerate flags live in the JSON form).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        writer.write_record(["id", "s_measure", "e_measure", "weighted_f", "mae"])?;
        for row in &self.rows {
            writer.write_record([
                row.id.as_str(),
                &format!("{:.6}", row.scores.s_measure),
                &format!("{:.6}", row.scores.e_measure),
                &format!("{:.6}", row.scores.weighted_f),
                &format!("{:.6}", row.scores.mae),
            ])?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// The whole report (aggregate included) as pretty JSON.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Load an 8-bit image as grayscale in `[0,1]`.
pub fn load_gray01(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0] as f64 / 255.0
    }))
}

/// Load an 8-bit mask, binarized at 128/255.
pub fn load_binary_mask(path: &Path) -> Result<Array2<f64>> {
    let gray = load_gray01(path)?;
    Ok(gray.mapv(|v| if v >= 128.0 / 255.0 { 1.0 } else { 0.0 }))
}

fn image_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.insert(name.to_string());
            }
        }
    }
    Ok(names)
}

/// Score every same-named image pair between two folders. Predictions are
/// resized to each ground truth's native size. Unpaired files are listed
/// in the report's error section and excluded from the aggregate.
pub fn evaluate_folder(pred_dir: &Path, gt_dir: &Path, dataset: &str) -> Result<MetricsReport> {
    let preds = image_names(pred_dir)?;
    let gts = image_names(gt_dir)?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for name in preds.union(&gts) {
        match (preds.contains(name), gts.contains(name)) {
            (true, true) => {
                let pred = load_gray01(&pred_dir.join(name))?;
                let gt = load_binary_mask(&gt_dir.join(name))?;
                let scores = score_pair_resized(&pred, &gt)?;
                let id = PathBuf::from(name)
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or(name)
                    .to_string();
                rows.push(ReportRow { id, scores });
            }
            (true, false) => errors.push(format!("{name}: missing ground truth")),
            (false, true) => errors.push(format!("{name}: missing prediction")),
            (false, false) => unreachable!("name came from the union"),
        }
    }
    Ok(MetricsReport::from_rows(dataset, rows, errors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn checkerboard(h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(r, c)| ((r + c) % 2) as f64)
    }

    fn random_pair(rng: &mut ChaCha20Rng, h: usize, w: usize) -> (Array2<f64>, Array2<f64>) {
        let pred = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..=1.0));
        let gt = Array2::from_shape_fn((h, w), |_| f64::from(rng.random_bool(0.4)));
        (pred, gt)
    }

    #[test]
    fn mae_matches_hand_computed_values() {
        let p = array![[0.2, 0.8], [0.5, 0.0]];
        let g = array![[0.0, 1.0], [1.0, 0.0]];
        assert!((mae(&p, &g).unwrap() - 0.225).abs() < 1e-15);
        assert_eq!(mae(&g, &g).unwrap(), 0.0);
        let complement = g.mapv(|v| 1.0 - v);
        assert_eq!(mae(&complement, &g).unwrap(), 1.0);
    }

    #[test]
    fn mae_strictly_increases_along_the_degradation_path() {
        let g = checkerboard(6, 6);
        let mut last = -1.0;
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let p = g.mapv(|v| (1.0 - t) * v + t * (1.0 - v));
            let m = mae(&p, &g).unwrap();
            assert!(m > last, "t={t}: {m} <= {last}");
            last = m;
        }
    }

    #[test]
    fn perfect_prediction_scores_are_ideal() {
        let mut g = Array2::zeros((8, 8));
        g.slice_mut(ndarray::s![2..6, 3..7]).fill(1.0);
        let scores = score_pair(&g, &g).unwrap();
        assert!((scores.s_measure - 1.0).abs() < 1e-12, "{}", scores.s_measure);
        assert_eq!(scores.e_measure, 1.0);
        assert!((scores.weighted_f - 1.0).abs() < 1e-12, "{}", scores.weighted_f);
        assert_eq!(scores.mae, 0.0);
        assert!(!scores.degenerate);
    }

    #[test]
    fn degenerate_ground_truths_follow_the_special_rules() {
        let zeros = Array2::zeros((6, 6));
        let ones = Array2::ones((6, 6));
        // All-background ground truth.
        let s = score_pair(&zeros, &zeros).unwrap();
        assert_eq!(s.s_measure, 1.0);
        assert_eq!(s.e_measure, 1.0);
        assert_eq!(s.weighted_f, 0.0);
        assert!(s.degenerate);
        assert_eq!(s.mae, 0.0);
        assert_eq!(s_measure(&ones, &zeros).unwrap(), 0.0);
        // All-foreground ground truth.
        let s = score_pair(&ones, &ones).unwrap();
        assert_eq!(s.s_measure, 1.0);
        assert_eq!(s.e_measure, 1.0);
        assert!((s.weighted_f - 1.0).abs() < 1e-12);
        assert!(!s.degenerate);
    }

    #[test]
    fn anti_correlated_prediction_pins_the_lower_ends() {
        let g = checkerboard(8, 8);
        let p = g.mapv(|v| 1.0 - v);
        // Every region block is mixed, so all four SSIM terms go negative
        // and the structure measure clamps at zero.
        assert_eq!(s_measure(&p, &g).unwrap(), 0.0);
        // The adaptive threshold lands at 1, so the binarized map is the
        // exact complement: alignment −1 everywhere.
        assert_eq!(e_measure(&p, &g).unwrap(), 0.0);
        assert_eq!(mae(&p, &g).unwrap(), 1.0);
    }

    #[test]
    fn all_zero_prediction_scores_quarter_alignment_and_zero_weighted_f() {
        let mut g = Array2::zeros((8, 8));
        g.slice_mut(ndarray::s![0..3, 0..8]).fill(1.0); // touches the border
        let p = Array2::zeros((8, 8));
        // Binarizes to all background: ξ ≡ 0, enhanced ≡ 1/4.
        assert_eq!(e_measure(&p, &g).unwrap(), 0.25);
        let (f, degenerate) = weighted_f(&p, &g).unwrap();
        assert_eq!(f, 0.0, "zero recall must zero the harmonic mean exactly");
        assert!(!degenerate);
    }

    #[test]
    fn out_of_range_predictions_are_min_max_normalized() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (pred, gt) = random_pair(&mut rng, 8, 8);
        let scaled = pred.mapv(|v| 3.0 * v - 1.0);
        let normalized = normalize_prediction(&scaled);
        assert!(normalized.iter().all(|v| (0.0..=1.0).contains(v)));
        let a = score_pair(&scaled, &gt).unwrap();
        let b = score_pair(&normalized, &gt).unwrap();
        assert_eq!(a.s_measure, b.s_measure);
        assert_eq!(a.e_measure, b.e_measure);
        assert_eq!(a.weighted_f, b.weighted_f);
        assert_eq!(a.mae, b.mae);
        // In-range maps pass through untouched.
        assert_eq!(normalize_prediction(&pred), pred);
    }

    #[test]
    fn resizing_before_scoring_equals_the_built_in_resize_path() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let pred = Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0..=1.0));
        let (_, gt) = random_pair(&mut rng, 8, 8);
        let manual = score_pair(&resize_bilinear_2d(&pred, (8, 8)), &gt).unwrap();
        let auto = score_pair_resized(&pred, &gt).unwrap();
        assert_eq!(manual.s_measure, auto.s_measure);
        assert_eq!(manual.e_measure, auto.e_measure);
        assert_eq!(manual.weighted_f, auto.weighted_f);
        assert_eq!(manual.mae, auto.mae);
    }

    #[test]
    fn scores_stay_in_range_on_random_pairs() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..50 {
            let h = rng.random_range(4..=12);
            let w = rng.random_range(4..=12);
            let (pred, gt) = random_pair(&mut rng, h, w);
            let s = score_pair(&pred, &gt).unwrap();
            for (name, v) in [
                ("s", s.s_measure),
                ("e", s.e_measure),
                ("fw", s.weighted_f),
                ("mae", s.mae),
            ] {
                assert!((0.0..=1.0).contains(&v), "{name} out of range: {v}");
            }
        }
    }

    #[test]
    fn rejects_shape_mismatch_and_non_binary_ground_truth() {
        let p = Array2::zeros((4, 4));
        let g5 = Array2::zeros((5, 4));
        assert!(mae(&p, &g5).is_err());
        let gray = Array2::from_elem((4, 4), 0.5);
        assert!(s_measure(&p, &gray).is_err());
        assert!(e_measure(&p, &gray).is_err());
        assert!(weighted_f(&p, &gray).is_err());
    }

    #[test]
    fn mean_threshold_alignment_variant_stays_in_range_and_rewards_identity() {
        let mut g = Array2::zeros((8, 8));
        g.slice_mut(ndarray::s![2..5, 2..6]).fill(1.0);
        let perfect = e_measure_with(&g, &g, EmeasureKind::MeanThresholds).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let noise = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..=1.0));
        let noisy = e_measure_with(&noise, &g, EmeasureKind::MeanThresholds).unwrap();
        assert!(perfect > noisy, "{perfect} vs {noisy}");
        assert!((0.0..=1.0).contains(&perfect) && (0.0..=1.0).contains(&noisy));
    }

    fn write_gray(path: &Path, values: &Array2<f64>) {
        let (h, w) = values.dim();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for ((r, c), &v) in values.indexed_iter() {
            img.put_pixel(c as u32, r as u32, image::Luma([(v * 255.0).round() as u8]));
        }
        img.save(path).unwrap();
    }

    #[test]
    fn folder_evaluation_matches_pairs_and_reports_strays() {
        let dir = std::env::temp_dir().join(format!("codnet-metrics-{}", std::process::id()));
        let pred_dir = dir.join("pred");
        let gt_dir = dir.join("gt");
        std::fs::create_dir_all(&pred_dir).unwrap();
        std::fs::create_dir_all(&gt_dir).unwrap();

        let mut g = Array2::zeros((8, 8));
        g.slice_mut(ndarray::s![1..5, 2..7]).fill(1.0);
        for name in ["a.png", "b.png"] {
            write_gray(&pred_dir.join(name), &g);
            write_gray(&gt_dir.join(name), &g);
        }
        write_gray(&pred_dir.join("c.png"), &g); // no ground truth
        write_gray(&gt_dir.join("d.png"), &g); // no prediction

        let report = evaluate_folder(&pred_dir, &gt_dir, "toy").unwrap();
        assert_eq!(report.count, 2);
        assert_eq!(report.rows[0].id, "a");
        assert_eq!(report.rows[1].id, "b");
        assert_eq!(report.errors.len(), 2);
        let agg = report.aggregate.unwrap();
        assert!((agg.s_measure - 1.0).abs() < 1e-9);
        assert!((agg.e_measure - 1.0).abs() < 1e-9);
        assert!((agg.weighted_f - 1.0).abs() < 1e-9);
        assert!(agg.mae.abs() < 1e-9);

        let csv_path = dir.join("report.csv");
        report.write_csv(&csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("id,s_measure,e_measure,weighted_f,mae\n"));
        assert_eq!(text.lines().count(), 3);
        assert!(report.to_json().unwrap().contains("\"aggregate\""));

        let empty = evaluate_folder(&dir.join("pred"), &dir.join("missing"), "x");
        assert!(empty.is_err(), "missing directory is an I/O error");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_folders_give_an_empty_report_with_zero_count() {
        let dir = std::env::temp_dir().join(format!("codnet-metrics-empty-{}", std::process::id()));
        std::fs::create_dir_all(dir.join("pred")).unwrap();
        std::fs::create_dir_all(dir.join("gt")).unwrap();
        let report = evaluate_folder(&dir.join("pred"), &dir.join("gt"), "none").unwrap();
        assert_eq!(report.count, 0);
        assert!(report.aggregate.is_none());
        assert!(report.rows.is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }
}
