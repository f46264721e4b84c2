//! Batch normalization kernels (per-channel over `N, H, W`).

use ndarray::{ArrayD, IxDyn};

use super::StatUpdate;
use crate::scalar::Scalar;

/// How a batch-norm node sources its statistics.
pub enum BnMode<'a, T: Scalar> {
    /// Normalize with batch statistics, differentiate through them, and
    /// queue refreshed running statistics under `update_name`
    /// (momentum-blended, with the unbiased variance correction).
    Train {
        momentum: f64,
        running_mean: &'a ArrayD<T>,
        running_var: &'a ArrayD<T>,
        update_name: &'a str,
    },
    /// Normalize with the stored running statistics, treated as constants.
    Eval {
        running_mean: &'a ArrayD<T>,
        running_var: &'a ArrayD<T>,
    },
}

fn dims4<T: Scalar>(x: &ArrayD<T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "batch_norm: expected a 4-d NCHW tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Forward pass. Returns `(y, mean, invstd, train, update)` where `mean`
/// and `invstd` are the per-channel statistics actually applied.
#[allow(clippy::type_complexity)]
pub fn forward<T: Scalar>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    eps: f64,
    mode: BnMode<'_, T>,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>, bool, Option<StatUpdate<T>>) {
    let (n, c, h, w) = dims4(x);
    assert_eq!(gamma.shape(), [c], "batch_norm: gamma must be [C]");
    assert_eq!(beta.shape(), [c], "batch_norm: beta must be [C]");
    let m = n * h * w;
    let eps_t = T::c(eps);

    let (mean, var, train, update) = match mode {
        BnMode::Train {
            momentum,
            running_mean,
            running_var,
            update_name,
        } => {
            let (mean, var) = batch_stats(x, (n, c, h, w));
            let mom = T::c(momentum);
            let keep = T::one() - mom;
            let mut new_mean = ArrayD::zeros(IxDyn(&[c]));
            let mut new_var = ArrayD::zeros(IxDyn(&[c]));
            for ic in 0..c {
                new_mean[[ic]] = keep * running_mean[[ic]] + mom * mean[[ic]];
                // Running variance keeps the unbiased estimate; with a
                // single element there is none, so it is left unchanged.
                new_var[[ic]] = if m > 1 {
                    let unbiased = var[[ic] ] * T::c(m as f64 / (m as f64 - 1.0));
                    keep * running_var[[ic]] + mom * unbiased
                } else {
                    running_var[[ic]]
                };
            }
            let update = StatUpdate {
                name: update_name.to_string(),
                running_mean: new_mean,
                running_var: new_var,
            };
            (mean, var, true, Some(update))
        }
        BnMode::Eval {
            running_mean,
            running_var,
        } => {
            assert_eq!(running_mean.shape(), [c], "batch_norm: running_mean must be [C]");
            assert_eq!(running_var.shape(), [c], "batch_norm: running_var must be [C]");
            (running_mean.clone(), running_var.clone(), false, None)
        }
    };

    let mut invstd = ArrayD::zeros(IxDyn(&[c]));
    for ic in 0..c {
        invstd[[ic]] = T::one() / (var[[ic]] + eps_t).sqrt();
    }

    // y = a·x + b with per-channel a = γ·invstd, b = β − μ·a.
    let mut y = ArrayD::zeros(IxDyn(&[n, c, h, w]));
    {
        let xs = x.as_slice().expect("bn input is standard layout");
        let ys = y.as_slice_mut().expect("fresh array is contiguous");
        let plane = h * w;
        for ic in 0..c {
            let a = gamma[[ic]] * invstd[[ic]];
            let b = beta[[ic]] - mean[[ic]] * a;
            for im in 0..n {
                let base = (im * c + ic) * plane;
                for i in 0..plane {
                    ys[base + i] = a * xs[base + i] + b;
                }
            }
        }
    }
    (y, mean, invstd, train, update)
}

/// Per-channel mean and biased variance, two-pass, in deterministic order.
fn batch_stats<T: Scalar>(x: &ArrayD<T>, (n, c, h, w): (usize, usize, usize, usize)) -> (ArrayD<T>, ArrayD<T>) {
    let m = T::c((n * h * w) as f64);
    let plane = h * w;
    let xs = x.as_slice().expect("bn input is standard layout");
    let mut mean = ArrayD::zeros(IxDyn(&[c]));
    let mut var = ArrayD::zeros(IxDyn(&[c]));
    for ic in 0..c {
        let mut acc = T::zero();
        for im in 0..n {
            let base = (im * c + ic) * plane;
            for i in 0..plane {
                acc += xs[base + i];
            }
        }
        let mu = acc / m;
        mean[[ic]] = mu;
        let mut acc2 = T::zero();
        for im in 0..n {
            let base = (im * c + ic) * plane;
            for i in 0..plane {
                let d = xs[base + i] - mu;
                acc2 += d * d;
            }
        }
        var[[ic]] = acc2 / m;
    }
    (mean, var)
}

/// Backward pass. In training mode the batch statistics are functions of
/// the input, giving the full three-term gradient; in eval mode they are
/// constants and only the affine part differentiates.
#[allow(clippy::type_complexity)]
pub fn backward<T: Scalar>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    mean: &ArrayD<T>,
    invstd: &ArrayD<T>,
    grad: &ArrayD<T>,
    train: bool,
    need_dx: bool,
) -> (Option<ArrayD<T>>, ArrayD<T>, ArrayD<T>) {
    let (n, c, h, w) = dims4(x);
    let plane = h * w;
    let m = T::c((n * h * w) as f64);
    let xs = x.as_slice().expect("bn input is standard layout");
    let gs = grad.as_slice().expect("grad is standard layout");

    let mut dgamma = ArrayD::zeros(IxDyn(&[c]));
    let mut dbeta = ArrayD::zeros(IxDyn(&[c]));
    let mut dx = if need_dx {
        Some(ArrayD::<T>::zeros(IxDyn(&[n, c, h, w])))
    } else {
        None
    };

    for ic in 0..c {
        let mu = mean[[ic]];
        let is = invstd[[ic]];
        // s1 = Σ g, s2 = Σ g·x̂
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for im in 0..n {
            let base = (im * c + ic) * plane;
            for i in 0..plane {
                let g = gs[base + i];
                let xhat = (xs[base + i] - mu) * is;
                s1 += g;
                s2 += g * xhat;
            }
        }
        dbeta[[ic]] = s1;
        dgamma[[ic]] = s2;

        if let Some(dx) = dx.as_mut() {
            let dxs = dx.as_slice_mut().expect("fresh array is contiguous");
            let a = gamma[[ic]] * is;
            if train {
                let s1m = s1 / m;
                let s2m = s2 / m;
                for im in 0..n {
                    let base = (im * c + ic) * plane;
                    for i in 0..plane {
                        let g = gs[base + i];
                        let xhat = (xs[base + i] - mu) * is;
                        dxs[base + i] = a * (g - s1m - xhat * s2m);
                    }
                }
            } else {
                for im in 0..n {
                    let base = (im * c + ic) * plane;
                    for i in 0..plane {
                        dxs[base + i] = a * gs[base + i];
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
