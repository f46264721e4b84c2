//! Bilinear resampling with half-pixel centers and clamped edges.
//!
//! Source coordinate for output index `o` on an axis scaled by
//! `s = in/out`: `src = (o + 0.5)·s − 0.5`, clamped at 0; the two taps are
//! `floor(src)` and its right neighbour clamped to the last index. The same
//! rule is used inside the network (as a differentiable op), when scaling
//! predictions back to ground-truth resolution for metrics, and in the CLI,
//! so every consumer resamples identically.

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;

/// Per-output-index taps and weight for one axis.
#[derive(Debug, Clone)]
pub struct AxisTable<T: Scalar> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    /// Interpolation weight of the `hi` tap; the `lo` tap gets `1 − t`.
    pub t: Vec<T>,
}

impl<T: Scalar> AxisTable<T> {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        assert!(in_len > 0 && out_len > 0, "resize: axis length must be positive");
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut t = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            lo.push(i0);
            hi.push((i0 + 1).min(in_len - 1));
            t.push(T::c(src - i0 as f64));
        }
        AxisTable { lo, hi, t }
    }
}

/// Forward resize of a 4-d NCHW tensor.
pub fn resize_forward<T: Scalar>(
    x: &ArrayD<T>,
    rows: &AxisTable<T>,
    cols: &AxisTable<T>,
) -> ArrayD<T> {
    let s = x.shape();
    let (n, c, in_w) = (s[0], s[1], s[3]);
    let (out_h, out_w) = (rows.lo.len(), cols.lo.len());
    let mut out = ArrayD::zeros(IxDyn(&[n, c, out_h, out_w]));
    let xs = x.as_slice().expect("resize input is standard layout");
    let os = out.as_slice_mut().expect("fresh array is contiguous");
    let in_plane = s[2] * in_w;
    let out_plane = out_h * out_w;
    for p in 0..n * c {
        let src = &xs[p * in_plane..(p + 1) * in_plane];
        let dst = &mut os[p * out_plane..(p + 1) * out_plane];
        for oy in 0..out_h {
            let (y0, y1, ty) = (rows.lo[oy], rows.hi[oy], rows.t[oy]);
            let wy0 = T::one() - ty;
            let r0 = &src[y0 * in_w..y0 * in_w + in_w];
            let r1 = &src[y1 * in_w..y1 * in_w + in_w];
            let drow = &mut dst[oy * out_w..(oy + 1) * out_w];
            for ox in 0..out_w {
                let (x0, x1, tx) = (cols.lo[ox], cols.hi[ox], cols.t[ox]);
                let wx0 = T::one() - tx;
                let top = wx0 * r0[x0] + tx * r0[x1];
                let bot = wx0 * r1[x0] + tx * r1[x1];
                drow[ox] = wy0 * top + ty * bot;
            }
        }
    }
    out
}

/// Transpose of [`resize_forward`]: scatter the output gradient back onto
/// the four source taps of every output pixel.
pub fn resize_backward<T: Scalar>(
    grad: &ArrayD<T>,
    in_shape: &[usize],
    rows: &AxisTable<T>,
    cols: &AxisTable<T>,
) -> ArrayD<T> {
    let (n, c, in_h, in_w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (out_h, out_w) = (rows.lo.len(), cols.lo.len());
    let mut dx = ArrayD::zeros(IxDyn(in_shape));
    let gs = grad.as_slice().expect("grad is standard layout");
    let ds = dx.as_slice_mut().expect("fresh array is contiguous");
    let in_plane = in_h * in_w;
    let out_plane = out_h * out_w;
    for p in 0..n * c {
        let g = &gs[p * out_plane..(p + 1) * out_plane];
        let d = &mut ds[p * in_plane..(p + 1) * in_plane];
        for oy in 0..out_h {
            let (y0, y1, ty) = (rows.lo[oy], rows.hi[oy], rows.t[oy]);
            let wy0 = T::one() - ty;
            for ox in 0..out_w {
                let (x0, x1, tx) = (cols.lo[ox], cols.hi[ox], cols.t[ox]);
                let wx0 = T::one() - tx;
                let gv = g[oy * out_w + ox];
                d[y0 * in_w + x0] += wy0 * wx0 * gv;
                d[y0 * in_w + x1] += wy0 * tx * gv;
                d[y1 * in_w + x0] += ty * wx0 * gv;
                d[y1 * in_w + x1] += ty * tx * gv;
            }
        }
    }
    dx
}

/// Resize a single-channel `f64` map — the shared resampling rule for
/// metrics and I/O paths that never touch a tape.
pub fn resize_bilinear_2d(x: &ndarray::Array2<f64>, out_hw: (usize, usize)) -> ndarray::Array2<f64> {
    let (in_h, in_w) = x.dim();
    if (in_h, in_w) == out_hw {
        return x.clone();
    }
    let x4 = x
        .view()
        .into_shape_with_order((1, 1, in_h, in_w))
        .expect("2-d map is standard layout")
        .into_dyn()
        .to_owned();
    let rows = AxisTable::<f64>::new(in_h, out_hw.0);
    let cols = AxisTable::<f64>::new(in_w, out_hw.1);
    let out = resize_forward(&x4, &rows, &cols);
    out.into_shape_with_order((out_hw.0, out_hw.1))
        .expect("contiguous reshape")
        .into_dimensionality()
        .expect("2-d result")
}
