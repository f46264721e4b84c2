//! Procedural camouflage generator.
//!
//! Each sample is a band-limited value-noise background with a smooth
//! random blob (a Fourier-perturbed ellipse covering 10–40% of the image)
//! filled by a texture from the same noise family. A difficulty knob in
//! `[0,1]` shrinks the statistical offset between object and background:
//! at 0 the object is plainly brighter (mean gap ≈ 0.45 per channel), at
//! 1 the gap nearly vanishes and only texture boundaries give it away.
//!
//! Everything is drawn from one seeded ChaCha stream, so a sample is a
//! pure function of `(seed, size, difficulty)`.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::data::{derive_edge_gt, Sample};
use crate::error::{Error, Result};

/// Splitmix64 step, used to derive per-sample seeds from a base seed.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Multi-octave value noise in `[0,1]`: random lattices, bilinearly
/// interpolated and blended with halving amplitudes.
fn value_noise(rng: &mut ChaCha20Rng, size: usize, base_cells: usize, octaves: usize) -> Array2<f64> {
    let mut acc = Array2::<f64>::zeros((size, size));
    let mut amplitude = 1.0;
    let mut total = 0.0;
    for octave in 0..octaves {
        let cells = base_cells << octave;
        let lattice =
            Array2::from_shape_fn((cells + 1, cells + 1), |_| rng.random_range(0.0..=1.0));
        for r in 0..size {
            let y = r as f64 / size as f64 * cells as f64;
            let y0 = (y.floor() as usize).min(cells - 1);
            let ty = y - y0 as f64;
            for c in 0..size {
                let x = c as f64 / size as f64 * cells as f64;
                let x0 = (x.floor() as usize).min(cells - 1);
                let tx = x - x0 as f64;
                let top = lattice[[y0, x0]] * (1.0 - tx) + lattice[[y0, x0 + 1]] * tx;
                let bottom = lattice[[y0 + 1, x0]] * (1.0 - tx) + lattice[[y0 + 1, x0 + 1]] * tx;
                acc[[r, c]] += amplitude * (top * (1.0 - ty) + bottom * ty);
            }
        }
        total += amplitude;
        amplitude *= 0.5;
    }
    acc.mapv(|v| v / total)
}

/// Radial harmonics of the blob outline: `r(φ) = 1 + Σ aₖ·cos(kφ + ψₖ)`
/// for k = 2..=5.
struct Outline {
    amplitudes: [f64; 4],
    phases: [f64; 4],
}

impl Outline {
    fn draw(rng: &mut ChaCha20Rng) -> Self {
        let mut amplitudes = [0.0; 4];
        let mut phases = [0.0; 4];
        for k in 0..4 {
            // Higher harmonics get smaller amplitudes to keep the outline smooth.
            amplitudes[k] = rng.random_range(0.0..0.12) / (k + 1) as f64;
            phases[k] = rng.random_range(0.0..std::f64::consts::TAU);
        }
        Outline { amplitudes, phases }
    }

    fn radius(&self, phi: f64) -> f64 {
        let mut r = 1.0;
        for k in 0..4 {
            r += self.amplitudes[k] * ((k + 2) as f64 * phi + self.phases[k]).cos();
        }
        r
    }

    fn max_radius(&self) -> f64 {
        1.0 + self.amplitudes.iter().sum::<f64>()
    }
}

struct Blob {
    center: (f64, f64),
    radii: (f64, f64),
    rotation: f64,
    outline: Outline,
}

impl Blob {
    fn mask(&self, size: usize) -> Array2<f64> {
        let (cy, cx) = self.center;
        let (ry, rx) = self.radii;
        let (sin, cos) = self.rotation.sin_cos();
        Array2::from_shape_fn((size, size), |(r, c)| {
            let dy = r as f64 + 0.5 - cy;
            let dx = c as f64 + 0.5 - cx;
            // Rotate into the ellipse frame, normalize by the radii.
            let u = (dx * cos + dy * sin) / rx;
            let v = (-dx * sin + dy * cos) / ry;
            let rho = (u * u + v * v).sqrt();
            let phi = v.atan2(u);
            if rho <= self.outline.radius(phi) {
                1.0
            } else {
                0.0
            }
        })
    }
}

fn area_fraction(mask: &Array2<f64>) -> f64 {
    mask.iter().sum::<f64>() / mask.len() as f64
}

/// Generate one synthetic sample. `size` must be a positive multiple
/// of 32; `difficulty` must lie in `[0,1]`.
pub fn synth_sample(seed: u64, size: usize, difficulty: f64) -> Result<Sample> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::InvalidInput(format!(
            "synthetic sample size must be a positive multiple of 32, got {size}"
        )));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::InvalidInput(format!(
            "difficulty must lie in [0,1], got {difficulty}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let s = size as f64;

    // Shape: center confined to the middle so the blob never clips the
    // border once its outer radius is capped below the center-to-border
    // distance; then one analytic rescale per iteration pins the area
    // fraction (without clipping, area scales exactly with radius²).
    let outline = Outline::draw(&mut rng);
    let center = (
        rng.random_range(0.45..0.55) * s,
        rng.random_range(0.45..0.55) * s,
    );
    let rotation = rng.random_range(0.0..std::f64::consts::TAU);
    let aspect = rng.random_range(0.6..1.0);
    let target = rng.random_range(0.15..0.35);
    let max_reach = 0.42 * s / outline.max_radius();
    let mut ry = (target * s * s / (std::f64::consts::PI * aspect)).sqrt();
    let mut mask = None;
    for _ in 0..32 {
        ry = ry.min(max_reach);
        let blob = Blob {
            center,
            radii: (ry, ry * aspect),
            rotation,
            outline: Outline {
                amplitudes: outline.amplitudes,
                phases: outline.phases,
            },
        };
        let candidate = blob.mask(size);
        let frac = area_fraction(&candidate);
        if (0.10..=0.40).contains(&frac) {
            mask = Some(candidate);
            break;
        }
        ry *= (target / frac.max(1e-6)).sqrt().clamp(0.5, 2.0);
    }
    let mask = mask.ok_or_else(|| {
        Error::InvalidInput(format!(
            "blob sizing failed to reach a 10–40% area fraction (seed {seed}, size {size})"
        ))
    })?;

    // Textures: same noise family inside and out, means pushed apart by a
    // difficulty-controlled gap. Spread 0.5 keeps both in [0,1] unclipped.
    let gap = 0.45 * (1.0 - difficulty) + 0.02 * difficulty;
    let mut image = Array3::<f64>::zeros((3, size, size));
    for ch in 0..3 {
        let bg = value_noise(&mut rng, size, 4, 4);
        let fg = value_noise(&mut rng, size, 6, 4);
        for r in 0..size {
            for c in 0..size {
                let value = if mask[[r, c]] == 1.0 {
                    0.5 + (fg[[r, c]] - 0.5) * 0.5 + gap / 2.0
                } else {
                    0.5 + (bg[[r, c]] - 0.5) * 0.5 - gap / 2.0
                };
                image[[ch, r, c]] = value;
            }
        }
    }

    let edge = derive_edge_gt(&mask)?;
    Ok(Sample {
        id: synth_id(seed, size, difficulty),
        image,
        mask,
        edge,
    })
}

/// The id a call to [`synth_sample`] with these inputs will produce,
/// without doing any of the work. Ids are pure functions of the inputs,
/// so dataset splits can be computed before anything is rendered.
pub fn synth_id(seed: u64, size: usize, difficulty: f64) -> String {
    format!("synth-{seed:016x}-{size}-{difficulty:.3}")
}
