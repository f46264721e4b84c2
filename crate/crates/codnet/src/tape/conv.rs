//! Convolution kernels: im2col + GEMM forward, col2im backward.
//!
//! Each image is lowered into a `[K, L]` column matrix (`K = Cin·kh·kw`,
//! `L = out_h·out_w`) and multiplied on its own, reusing one scratch buffer
//! across the batch. Per-image GEMMs keep peak memory flat in the batch size
//! and make every sample's arithmetic independent of its batch neighbors —
//! bit for bit — because the kernel never sees a shape that depends on `N`.
//! Column matrices are rebuilt in the backward pass instead of cached;
//! recomputing them is far cheaper than holding one per convolution of the
//! graph.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::scalar::Scalar;

/// Output spatial size for one axis: `floor((in + 2·pad − k)/stride) + 1`.
fn out_len(in_len: usize, k: usize, stride: usize, pad: usize) -> usize {
    let padded = in_len + 2 * pad;
    assert!(
        padded >= k,
        "conv2d: kernel {k} exceeds padded input extent {padded}"
    );
    (padded - k) / stride + 1
}

/// For one kernel tap offset `v` on an axis, the output coordinate range
/// whose sampled input coordinate `o·stride + v − pad` stays in bounds.
fn valid_out_range(in_len: usize, out: usize, stride: usize, pad: usize, v: usize) -> (usize, usize) {
    // o·stride + v − pad ≥ 0  and  o·stride + v − pad ≤ in_len − 1
    let lo = if v >= pad { 0 } else { (pad - v).div_ceil(stride) };
    let hi_raw = in_len - 1 + pad;
    if hi_raw < v {
        return (0, 0);
    }
    let hi = ((hi_raw - v) / stride + 1).min(out);
    (lo.min(hi), hi)
}

/// Lower one image `[Cin, H, W]` (a contiguous slice) into columns:
/// `cols[(ci·kh + u)·kw + v, oy·out_w + ox] = x[ci, oy·sh+u−ph, ox·sw+v−pw]`
/// with zeros outside. `cols_block` is the `[K, L]` destination, pre-zeroed.
fn im2col_image<T: Scalar>(
    x: &[T],
    (cin, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (out_h, out_w): (usize, usize),
    mut cols_block: ndarray::ArrayViewMut2<'_, T>,
) {
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for u in 0..kh {
            let (oy_lo, oy_hi) = valid_out_range(h, out_h, sh, ph, u);
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                let (ox_lo, ox_hi) = valid_out_range(w, out_w, sw, pw, v);
                if ox_lo >= ox_hi {
                    continue;
                }
                let mut dst_row = cols_block.row_mut(row);
                let dst = dst_row.as_slice_mut().expect("cols row is contiguous");
                for oy in oy_lo..oy_hi {
                    let iy = oy * sh + u - ph;
                    let src_base = iy * w + (ox_lo * sw + v - pw);
                    let dst_base = oy * out_w;
                    if sw == 1 {
                        dst[dst_base + ox_lo..dst_base + ox_hi]
                            .copy_from_slice(&plane[src_base..src_base + (ox_hi - ox_lo)]);
                    } else {
                        for (i, ox) in (ox_lo..ox_hi).enumerate() {
                            dst[dst_base + ox] = plane[src_base + i * sw];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the transpose of [`im2col_image`]: columns back into the
/// image gradient.
fn col2im_image<T: Scalar>(
    cols_block: ndarray::ArrayView2<'_, T>,
    dx: &mut [T],
    (cin, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (out_h, out_w): (usize, usize),
) {
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for u in 0..kh {
            let (oy_lo, oy_hi) = valid_out_range(h, out_h, sh, ph, u);
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                let (ox_lo, ox_hi) = valid_out_range(w, out_w, sw, pw, v);
                if ox_lo >= ox_hi {
                    continue;
                }
                let src_row = cols_block.row(row);
                let src = src_row.as_slice().expect("cols row is contiguous");
                for oy in oy_lo..oy_hi {
                    let iy = oy * sh + u - ph;
                    let dst_base = iy * w + (ox_lo * sw + v - pw);
                    let src_base = oy * out_w;
                    if sw == 1 {
                        for i in 0..(ox_hi - ox_lo) {
                            plane[dst_base + i] += src[src_base + ox_lo + i];
                        }
                    } else {
                        for (i, ox) in (ox_lo..ox_hi).enumerate() {
                            plane[dst_base + i * sw] += src[src_base + ox];
                        }
                    }
                }
            }
        }
    }
}

fn dims4<T: Scalar>(x: &ArrayD<T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "conv2d: expected a 4-d NCHW tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Forward convolution. `weight` is `[Cout, Cin, kh, kw]`, `bias` `[Cout]`.
pub fn conv2d_forward<T: Scalar>(
    x: &ArrayD<T>,
    weight: &ArrayD<T>,
    bias: Option<&ArrayD<T>>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> ArrayD<T> {
    let (n, cin, h, w) = dims4(x);
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv2d: weight must be 4-d, got {ws:?}");
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(
        wcin, cin,
        "conv2d: input has {cin} channels but weight expects {wcin}"
    );
    let out_h = out_len(h, kh, stride.0, pad.0);
    let out_w = out_len(w, kw, stride.1, pad.1);
    let l = out_h * out_w;
    let k = cin * kh * kw;

    let w2 = weight
        .view()
        .into_shape_with_order((cout, k))
        .expect("weight is standard layout");
    // A pointwise convolution needs no lowering: the image itself is
    // already the [Cin, L] operand.
    let pointwise = is_pointwise((kh, kw), stride, pad);
    // Scratch columns for one image. Entries that correspond to padding are
    // never written by `im2col_image`, so zeroing once up front keeps them
    // zero across every reuse.
    let mut cols = Array2::<T>::zeros(if pointwise { (0, 0) } else { (k, l) });
    let xs = x.as_slice().expect("conv input is standard layout");

    let mut out = ArrayD::zeros(IxDyn(&[n, cout, out_h, out_w]));
    {
        let out_s = out.as_slice_mut().expect("fresh array is contiguous");
        for i in 0..n {
            let image = &xs[i * cin * h * w..(i + 1) * cin * h * w];
            let src = if pointwise {
                ndarray::ArrayView2::from_shape((k, l), image)
                    .expect("image block matches the gemm shape")
            } else {
                im2col_image(image, (cin, h, w), (kh, kw), stride, pad, (out_h, out_w), cols.view_mut());
                cols.view()
            };
            // The [Cout, L] product is exactly this image's output block.
            let block = &mut out_s[i * cout * l..(i + 1) * cout * l];
            let dst = ndarray::ArrayViewMut2::from_shape((cout, l), &mut *block)
                .expect("output block matches the gemm shape");
            T::gemm(w2.view(), src, dst, false);
            if let Some(b) = bias {
                for c in 0..cout {
                    let bv = b[[c]];
                    for o in &mut block[c * l..(c + 1) * l] {
                        *o += bv;
                    }
                }
            }
        }
    }
    out
}

/// A 1×1 kernel at unit stride with no padding: lowering and scattering
/// are both the identity, so the GEMMs can touch the images directly.
fn is_pointwise(k: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> bool {
    k == (1, 1) && stride == (1, 1) && pad == (0, 0)
}

/// Backward convolution; returns `(dX, dW, db)` with entries only for the
/// operands that need gradients.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn conv2d_backward<T: Scalar>(
    x: &ArrayD<T>,
    weight: &ArrayD<T>,
    grad: &ArrayD<T>,
    stride: (usize, usize),
    pad: (usize, usize),
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<ArrayD<T>>, Option<ArrayD<T>>, Option<ArrayD<T>>) {
    let (n, cin, h, w) = dims4(x);
    let ws = weight.shape();
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let gs = grad.shape();
    let (out_h, out_w) = (gs[2], gs[3]);
    let l = out_h * out_w;
    let k = cin * kh * kw;

    let g_s = grad.as_slice().expect("grad is standard layout");
    // This image's gradient block, viewed as the [Cout, L] gemm operand.
    let g_image = |i: usize| {
        ndarray::ArrayView2::from_shape((cout, l), &g_s[i * cout * l..(i + 1) * cout * l])
            .expect("grad block matches the gemm shape")
    };

    let db = if need_db {
        let mut db = ArrayD::zeros(IxDyn(&[cout]));
        for i in 0..n {
            for c in 0..cout {
                let mut acc = T::zero();
                for &g in &g_s[(i * cout + c) * l..(i * cout + c + 1) * l] {
                    acc += g;
                }
                db[[c]] += acc;
            }
        }
        Some(db)
    } else {
        None
    };

    let pointwise = is_pointwise((kh, kw), stride, pad);

    let dw = if need_dw {
        let xs = x.as_slice().expect("conv input is standard layout");
        let mut cols = Array2::<T>::zeros(if pointwise { (0, 0) } else { (k, l) });
        let mut dw2 = Array2::<T>::zeros((cout, k));
        for i in 0..n {
            let image = &xs[i * cin * h * w..(i + 1) * cin * h * w];
            let src = if pointwise {
                ndarray::ArrayView2::from_shape((k, l), image)
                    .expect("image block matches the gemm shape")
            } else {
                im2col_image(image, (cin, h, w), (kh, kw), stride, pad, (out_h, out_w), cols.view_mut());
                cols.view()
            };
            T::gemm(g_image(i), src.reversed_axes(), dw2.view_mut(), true);
        }
        Some(
            dw2.into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                .expect("contiguous reshape")
                .into_dyn(),
        )
    } else {
        None
    };

    let dx = if need_dx {
        let w2 = weight
            .view()
            .into_shape_with_order((cout, k))
            .expect("weight is standard layout");
        let mut dcols = Array2::<T>::zeros(if pointwise { (0, 0) } else { (k, l) });
        let mut dx = ArrayD::zeros(IxDyn(&[n, cin, h, w]));
        {
            let dx_s = dx.as_slice_mut().expect("fresh array is contiguous");
            for i in 0..n {
                let block = &mut dx_s[i * cin * h * w..(i + 1) * cin * h * w];
                if pointwise {
                    // The scatter is the identity, so the product lands
                    // straight in this image's gradient block.
                    let dst = ndarray::ArrayViewMut2::from_shape((k, l), block)
                        .expect("gradient block matches the gemm shape");
                    T::gemm(w2.t(), g_image(i), dst, false);
                } else {
                    T::gemm(w2.t(), g_image(i), dcols.view_mut(), false);
                    col2im_image(
                        dcols.view(),
                        block,
                        (cin, h, w),
                        (kh, kw),
                        stride,
                        pad,
                        (out_h, out_w),
                    );
                }
            }
        }
        Some(dx)
    } else {
        None
    };

    (dx, dw, db)
}
