//! Dataset ingestion and ground-truth plumbing.
//!
//! Real datasets follow the `root/{Imgs,GT}` layout (JPEG/PNG images,
//! near-binary 8-bit mask PNGs, matching file stems). Edge ground truth
//! is not shipped with such datasets, so it is derived from the mask as
//! a 3×3 morphological gradient — dilation minus erosion, with replicate
//! padding so saturated masks produce no phantom border edge.
//!
//! [`synth`] provides a procedural generator for desk-scale experiments;
//! its samples flow through the same [`Sample`] type and can be
//! materialized to the directory layout above.

pub mod synth;

pub use synth::{sample_seed, synth_id, synth_sample};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training or evaluation item: RGB image in `[0,1]` plus binary
/// mask and edge maps at the same spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`, values in `[0,1]`, not yet normalized for the network.
    pub image: Array3<f64>,
    pub mask: Array2<f64>,
    pub edge: Array2<f64>,
}

/// Which half of a dataset a manifest describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Ordered listing of image/mask pairs under one dataset root.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    /// `(image_path, mask_path)` pairs, sorted bytewise by file stem.
    pub items: Vec<(PathBuf, PathBuf)>,
    /// Stems present on only one side, reported and skipped.
    pub skipped: Vec<String>,
}

fn binary_or_reject(mask: &Array2<f64>, what: &str) -> Result<()> {
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput(format!("{what} must be binary")));
    }
    Ok(())
}

/// 3×3 morphological dilation with replicate padding: max over the
/// window, border pixels clamped into bounds.
fn dilate3(mask: &Array2<f64>) -> Array2<f64> {
    morph3(mask, f64::max)
}

/// 3×3 morphological erosion with replicate padding.
fn erode3(mask: &Array2<f64>) -> Array2<f64> {
    morph3(mask, f64::min)
}

fn morph3(mask: &Array2<f64>, fold: fn(f64, f64) -> f64) -> Array2<f64> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut acc = mask[[r, c]];
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                let cc = (c as i64 + dc).clamp(0, w as i64 - 1) as usize;
                acc = fold(acc, mask[[rr, cc]]);
            }
        }
        acc
    })
}

/// Edge ground truth as the 3×3 morphological gradient of a binary mask.
pub fn derive_edge_gt(mask: &Array2<f64>) -> Result<Array2<f64>> {
    binary_or_reject(mask, "mask for edge derivation")?;
    let dilated = dilate3(mask);
    let eroded = erode3(mask);
    Ok(&dilated - &eroded)
}

/// Horizontal flip applied consistently to image, mask, and edge.
pub fn flip_horizontal(sample: &Sample) -> Sample {
    let flip2 = |a: &Array2<f64>| {
        let (h, w) = a.dim();
        Array2::from_shape_fn((h, w), |(r, c)| a[[r, w - 1 - c]])
    };
    let (ch, h, w) = sample.image.dim();
    let image = Array3::from_shape_fn((ch, h, w), |(k, r, c)| sample.image[[k, r, w - 1 - c]]);
    Sample {
        id: sample.id.clone(),
        image,
        mask: flip2(&sample.mask),
        edge: flip2(&sample.edge),
    }
}

fn stems_by_extension(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    paths.sort();
    for path in paths {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            // First extension wins for duplicated stems (paths are sorted).
            map.entry(stem.to_string()).or_insert(path);
        }
    }
    Ok(map)
}

/// Build a manifest from `root/{Imgs,GT}`; unpaired stems are skipped
/// and reported.
pub fn load_manifest(root: &Path, split: Split) -> Result<DatasetManifest> {
    let images = stems_by_extension(&root.join("Imgs"))?;
    let masks = stems_by_extension(&root.join("GT"))?;
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for (stem, img) in &images {
        match masks.get(stem) {
            Some(mask) => items.push((img.clone(), mask.clone())),
            None => skipped.push(format!("{stem}: missing mask")),
        }
    }
    for stem in masks.keys() {
        if !images.contains_key(stem) {
            skipped.push(format!("{stem}: missing image"));
        }
    }
    skipped.sort();
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        items,
        skipped,
    })
}

/// Decode an image file as `[3,H,W]` RGB in `[0,1]`.
pub fn load_rgb01(path: &Path) -> Result<Array3<f64>> {
    let rgb = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .into_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(ch, r, c)| rgb.get_pixel(c as u32, r as u32).0[ch] as f64 / 255.0,
    ))
}

/// Bilinearly resize a `[3,H,W]` image channel by channel.
pub fn resize_image_channels(image: &Array3<f64>, out_hw: (usize, usize)) -> Array3<f64> {
    let mut out = Array3::zeros((3, out_hw.0, out_hw.1));
    for c in 0..3 {
        let channel = image.index_axis(ndarray::Axis(0), c).to_owned();
        out.index_axis_mut(ndarray::Axis(0), c)
            .assign(&crate::tape::resize_bilinear_2d(&channel, out_hw));
    }
    out
}

/// Load one manifest item: image decoded as RGB in `[0,1]`, mask
/// binarized at 128/255, edge derived from the mask.
pub fn load_sample(image_path: &Path, mask_path: &Path) -> Result<Sample> {
    let image = load_rgb01(image_path)?;
    let (_, h, w) = image.dim();
    let (h, w) = (h as u32, w as u32);
    let mask = crate::metrics::load_binary_mask(mask_path)?;
    if mask.dim() != (h as usize, w as usize) {
        return Err(Error::shape(
            format!("mask {}", mask_path.display()),
            format!("{:?}", (h, w)),
            format!("{:?}", mask.dim()),
        ));
    }
    let edge = derive_edge_gt(&mask)?;
    let id = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("sample")
        .to_string();
    Ok(Sample {
        id,
        image,
        mask,
        edge,
    })
}

/// Materialize a sample into the `root/{Imgs,GT,Edge}` layout as PNGs.
pub fn write_sample(root: &Path, sample: &Sample) -> Result<()> {
    let imgs = root.join("Imgs");
    std::fs::create_dir_all(&imgs).map_err(|e| Error::io(&imgs, e))?;

    let (_, h, w) = sample.image.dim();
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let px = [
                (sample.image[[0, r, c]] * 255.0).round() as u8,
                (sample.image[[1, r, c]] * 255.0).round() as u8,
                (sample.image[[2, r, c]] * 255.0).round() as u8,
            ];
            rgb.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    let img_path = imgs.join(format!("{}.png", sample.id));
    rgb.save(&img_path).map_err(|e| Error::image(&img_path, e))?;

    for (dir, map) in [("GT", &sample.mask), ("Edge", &sample.edge)] {
        let dir = root.join(dir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut gray = image::GrayImage::new(w as u32, h as u32);
        for ((r, c), &v) in map.indexed_iter() {
            gray.put_pixel(c as u32, r as u32, image::Luma([if v == 1.0 { 255 } else { 0 }]));
        }
        let path = dir.join(format!("{}.png", sample.id));
        gray.save(&path).map_err(|e| Error::image(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn centered_square_yields_a_32_pixel_ring() {
        let mut mask = Array2::zeros((8, 8));
        mask.slice_mut(ndarray::s![2..6, 2..6]).fill(1.0);
        let edge = derive_edge_gt(&mask).unwrap();
        // Dilation covers rows/cols 1..7 (6×6 = 36), erosion keeps the
        // 2×2 interior; the gradient ring has 36 − 4 = 32 pixels.
        assert_eq!(edge.iter().filter(|&&v| v == 1.0).count(), 32);
        for ((r, c), &v) in edge.indexed_iter() {
            let in_dilation = (1..7).contains(&r) && (1..7).contains(&c);
            let in_erosion = (3..5).contains(&r) && (3..5).contains(&c);
            assert_eq!(v == 1.0, in_dilation && !in_erosion, "pixel ({r},{c})");
        }
    }

    #[test]
    fn saturated_masks_have_no_edge() {
        let zeros = Array2::zeros((6, 6));
        assert_eq!(derive_edge_gt(&zeros).unwrap(), zeros);
        let ones = Array2::ones((6, 6));
        // Replicate padding saturates both dilation and erosion.
        assert_eq!(derive_edge_gt(&ones).unwrap(), Array2::<f64>::zeros((6, 6)));
    }

    #[test]
    fn non_binary_masks_are_rejected() {
        let gray = Array2::from_elem((4, 4), 0.5);
        assert!(derive_edge_gt(&gray).is_err());
    }

    #[test]
    fn edge_lies_inside_the_two_pixel_boundary_band() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mask = Array2::from_shape_fn((12, 12), |_| f64::from(rng.random_bool(0.4)));
            let edge = derive_edge_gt(&mask).unwrap();
            let dilated = dilate3(&mask);
            let eroded = erode3(&mask);
            for ((r, c), &e) in edge.indexed_iter() {
                if e == 1.0 {
                    assert_eq!(dilated[[r, c]], 1.0);
                    assert_eq!(eroded[[r, c]], 0.0);
                }
            }
        }
    }

    #[test]
    fn flipping_commutes_with_edge_derivation() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mask = Array2::from_shape_fn((10, 14), |_| f64::from(rng.random_bool(0.35)));
            let sample = Sample {
                id: "t".into(),
                image: Array3::zeros((3, 10, 14)),
                mask: mask.clone(),
                edge: derive_edge_gt(&mask).unwrap(),
            };
            let flipped = flip_horizontal(&sample);
            assert_eq!(flipped.edge, derive_edge_gt(&flipped.mask).unwrap());
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let sample = synth::synth_sample(3, 32, 0.4).unwrap();
        let twice = flip_horizontal(&flip_horizontal(&sample));
        assert_eq!(twice.image, sample.image);
        assert_eq!(twice.mask, sample.mask);
        assert_eq!(twice.edge, sample.edge);
    }

    fn tmp_root(tag: &str) -> PathBuf {
        std::env::temp_dir().join(format!("codnet-data-{tag}-{}", std::process::id()))
    }

    #[test]
    fn manifest_pairs_stems_and_reports_strays() {
        let root = tmp_root("manifest");
        std::fs::create_dir_all(root.join("Imgs")).unwrap();
        std::fs::create_dir_all(root.join("GT")).unwrap();
        let mut img = image::RgbImage::new(4, 4);
        img.put_pixel(0, 0, image::Rgb([200, 10, 10]));
        img.save(root.join("Imgs/b.png")).unwrap();
        img.save(root.join("Imgs/a.jpg")).unwrap();
        img.save(root.join("Imgs/stray.png")).unwrap();
        let mut mask = image::GrayImage::new(4, 4);
        mask.put_pixel(1, 1, image::Luma([200])); // near-binary gray
        mask.save(root.join("GT/a.png")).unwrap();
        mask.save(root.join("GT/b.png")).unwrap();
        mask.save(root.join("GT/orphan.png")).unwrap();

        let manifest = load_manifest(&root, Split::Train).unwrap();
        assert_eq!(manifest.items.len(), 2);
        let stems: Vec<_> = manifest
            .items
            .iter()
            .map(|(i, _)| i.file_stem().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(stems, ["a", "b"], "bytewise stem order");
        assert_eq!(manifest.skipped.len(), 2);

        let sample = load_sample(&manifest.items[0].0, &manifest.items[0].1).unwrap();
        assert_eq!(sample.id, "a");
        assert_eq!(sample.image.dim(), (3, 4, 4));
        assert_eq!(sample.mask[[1, 1]], 1.0, "gray 200 binarizes to 1");
        assert_eq!(sample.mask[[0, 0]], 0.0);
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn written_samples_reload_identically_where_lossless() {
        let root = tmp_root("roundtrip");
        let sample = synth::synth_sample(8, 32, 0.2).unwrap();
        write_sample(&root, &sample).unwrap();
        let manifest = load_manifest(&root, Split::Test).unwrap();
        assert_eq!(manifest.items.len(), 1);
        let reloaded = load_sample(&manifest.items[0].0, &manifest.items[0].1).unwrap();
        assert_eq!(reloaded.mask, sample.mask, "masks are lossless through PNG");
        assert_eq!(reloaded.edge, sample.edge);
        assert!(root.join("Edge").join(format!("{}.png", sample.id)).exists());
        let max_err = reloaded
            .image
            .iter()
            .zip(sample.image.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-12, "8-bit quantization only: {max_err}");
        std::fs::remove_dir_all(&root).ok();
    }
}
