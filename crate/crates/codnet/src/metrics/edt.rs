//! Exact Euclidean distance transform with nearest-site tracking.
//!
//! For every pixel this computes the distance to the nearest foreground
//! pixel and which pixel that is. Ties are broken canonically — smallest
//! squared distance, then smallest site row, then smallest site column —
//! so results are reproducible and independently re-derivable.
//!
//! The transform decomposes into a per-column pass (nearest foreground
//! row within each column, two linear scans) and a per-row pass that
//! combines column candidates. A pixel's nearest site always survives the
//! column pass: any closer pixel in the same column would itself be
//! closer overall, and equal-distance in-column ties keep the smaller
//! row, which the canonical order prefers anyway.

use ndarray::Array2;

/// Distance and nearest-site maps for a binary foreground mask.
pub struct DistanceField {
    /// Euclidean distance to the nearest foreground pixel (0 on foreground).
    pub distance: Array2<f64>,
    /// `(row, col)` of that pixel, under the canonical tie rule.
    pub site: Array2<(usize, usize)>,
}

/// Compute the distance field of `foreground`. Panics if the mask has no
/// foreground pixel (callers handle that degenerate case first).
pub fn nearest_foreground(foreground: &Array2<bool>) -> DistanceField {
    let (h, w) = foreground.dim();
    assert!(
        foreground.iter().any(|&f| f),
        "distance transform needs at least one foreground pixel"
    );

    // Column pass: for each pixel, the nearest foreground row in its own
    // column (row distance and source row; usize::MAX when the column is
    // empty). Downward scan first so equal distances keep the upper row.
    let mut col_dr = Array2::<usize>::from_elem((h, w), usize::MAX);
    let mut col_row = Array2::<usize>::from_elem((h, w), usize::MAX);
    for c in 0..w {
        let mut last: Option<usize> = None;
        for r in 0..h {
            if foreground[[r, c]] {
                last = Some(r);
            }
            if let Some(s) = last {
                col_dr[[r, c]] = r - s;
                col_row[[r, c]] = s;
            }
        }
        let mut next: Option<usize> = None;
        for r in (0..h).rev() {
            if foreground[[r, c]] {
                next = Some(r);
            }
            if let Some(s) = next {
                let d = s - r;
                if d < col_dr[[r, c]] {
                    col_dr[[r, c]] = d;
                    col_row[[r, c]] = s;
                }
            }
        }
    }

    // Row pass: combine column candidates under the canonical order.
    let mut distance = Array2::<f64>::zeros((h, w));
    let mut site = Array2::<(usize, usize)>::from_elem((h, w), (0, 0));
    for r in 0..h {
        for c in 0..w {
            let mut best: Option<(u64, usize, usize)> = None;
            for cc in 0..w {
                let dr = col_dr[[r, cc]];
                if dr == usize::MAX {
                    continue;
                }
                let dc = c.abs_diff(cc);
                let d2 = (dr * dr + dc * dc) as u64;
                let cand = (d2, col_row[[r, cc]], cc);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
            let (d2, sr, sc) = best.expect("some column has foreground");
            distance[[r, c]] = (d2 as f64).sqrt();
            site[[r, c]] = (sr, sc);
        }
    }
    DistanceField { distance, site }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Direct definition: scan every foreground pixel in row-major order,
    /// keep the lexicographically smallest (distance², row, col).
    fn brute_force(fg: &Array2<bool>) -> DistanceField {
        let (h, w) = fg.dim();
        let mut distance = Array2::zeros((h, w));
        let mut site = Array2::from_elem((h, w), (0, 0));
        for r in 0..h {
            for c in 0..w {
                let mut best: Option<(u64, usize, usize)> = None;
                for sr in 0..h {
                    for sc in 0..w {
                        if !fg[[sr, sc]] {
                            continue;
                        }
                        let d2 = (r.abs_diff(sr).pow(2) + c.abs_diff(sc).pow(2)) as u64;
                        let cand = (d2, sr, sc);
                        if best.is_none_or(|b| cand < b) {
                            best = Some(cand);
                        }
                    }
                }
                let (d2, sr, sc) = best.unwrap();
                distance[[r, c]] = (d2 as f64).sqrt();
                site[[r, c]] = (sr, sc);
            }
        }
        DistanceField { distance, site }
    }

    #[test]
    fn matches_the_direct_definition_on_random_masks() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for case in 0..50 {
            let h = rng.random_range(1..=16);
            let w = rng.random_range(1..=16);
            let mut fg = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.2));
            if !fg.iter().any(|&f| f) {
                fg[[h / 2, w / 2]] = true;
            }
            let fast = nearest_foreground(&fg);
            let slow = brute_force(&fg);
            assert_eq!(fast.distance, slow.distance, "case {case}: distances");
            assert_eq!(fast.site, slow.site, "case {case}: tie-broken sites");
        }
    }

    #[test]
    fn foreground_pixels_have_zero_distance_to_themselves() {
        let mut fg = Array2::from_elem((5, 7), false);
        fg[[2, 3]] = true;
        fg[[4, 0]] = true;
        let field = nearest_foreground(&fg);
        assert_eq!(field.distance[[2, 3]], 0.0);
        assert_eq!(field.site[[2, 3]], (2, 3));
        assert_eq!(field.distance[[2, 4]], 1.0);
        // (0,0): sqrt(13) to (2,3) beats 4.0 to (4,0).
        assert_eq!(field.distance[[0, 0]], 13f64.sqrt());
        assert_eq!(field.site[[0, 0]], (2, 3));
    }

    #[test]
    fn equidistant_sites_resolve_to_the_smaller_row_then_column() {
        let mut fg = Array2::from_elem((3, 3), false);
        fg[[0, 1]] = true;
        fg[[2, 1]] = true;
        fg[[1, 0]] = true;
        fg[[1, 2]] = true;
        let field = nearest_foreground(&fg);
        // Center is at distance 1 from all four; canonical pick is (0,1).
        assert_eq!(field.site[[1, 1]], (0, 1));
        assert_eq!(field.distance[[1, 1]], 1.0);
    }
}
