//! Reference implementations used to verify the optimized paths.
//!
//! Everything here is written as plain nested loops with no shared code,
//! no GEMM, and no tape: slow, obvious, and independently checkable against
//! the formulas. The test suites and the `gradcheck` command compare the
//! production implementations against these.

use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Output extent and leading pad for one spatial axis, derived here
/// independently of the production implementation.
pub fn conv_axis(extent: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((extent - kernel) / stride + 1, 0),
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(extent);
            (out, total / 2)
        }
    }
}

/// Direct quintuple-loop convolution. Kernel layout `[kh, kw, Cin, Cout]`.
pub fn naive_conv2d<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: [usize; 2],
    padding: Padding,
) -> Tensor<E> {
    let [n, h, w, cin] = x.shape();
    let [kh, kw, kcin, cout] = kernel.shape();
    assert_eq!(cin, kcin, "naive_conv2d: channel mismatch");
    let (ho, pad_t) = conv_axis(h, kh, stride[0], padding);
    let (wo, pad_l) = conv_axis(w, kw, stride[1], padding);
    let mut out = Tensor::zeros([n, ho, wo, cout]);
    for b in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                for oc in 0..cout {
                    let mut acc = 0.0f64;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let ih = (oh * stride[0] + ky) as isize - pad_t as isize;
                            let iw = (ow * stride[1] + kx) as isize - pad_l as isize;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                continue;
                            }
                            for ic in 0..cin {
                                acc += x.at(b, ih as usize, iw as usize, ic).as_f64()
                                    * kernel.at(ky, kx, ic, oc).as_f64();
                            }
                        }
                    }
                    if let Some(bv) = bias {
                        acc += bv.data()[oc].as_f64();
                    }
                    out.set(b, oh, ow, oc, E::of_f64(acc));
                }
            }
        }
    }
    out
}

/// Direct scatter-loop transposed convolution. Kernel layout `[kh, kw, Cout, Cin]`.
pub fn naive_conv_transpose2d<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: [usize; 2],
) -> Tensor<E> {
    let [n, h, w, cin] = x.shape();
    let [kh, kw, cout, kcin] = kernel.shape();
    assert_eq!(cin, kcin, "naive_conv_transpose2d: channel mismatch");
    let ho = (h - 1) * stride[0] + kh;
    let wo = (w - 1) * stride[1] + kw;
    let mut acc = vec![0.0f64; n * ho * wo * cout];
    let at = |b: usize, y: usize, xx: usize, c: usize| ((b * ho + y) * wo + xx) * cout + c;
    for b in 0..n {
        for ih in 0..h {
            for iw in 0..w {
                for ky in 0..kh {
                    for kx in 0..kw {
                        for oc in 0..cout {
                            for ic in 0..cin {
                                acc[at(b, ih * stride[0] + ky, iw * stride[1] + kx, oc)] += x
                                    .at(b, ih, iw, ic)
                                    .as_f64()
                                    * kernel.at(ky, kx, oc, ic).as_f64();
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(bv) = bias {
        for v in acc.chunks_mut(cout) {
            for (a, b) in v.iter_mut().zip(bv.data()) {
                *a += b.as_f64();
            }
        }
    }
    Tensor::from_fn([n, ho, wo, cout], |b, y, xx, c| E::of_f64(acc[at(b, y, xx, c)]))
}

/// Per-channel batch normalization over the N*H*W axis, biased variance.
/// Returns the normalized tensor along with the batch mean and variance.
pub fn naive_batchnorm_train<E: Element>(
    x: &Tensor<E>,
    gamma: &[E],
    beta: &[E],
    eps: f64,
) -> (Tensor<E>, Vec<f64>, Vec<f64>) {
    let [n, h, w, c] = x.shape();
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    mean[ch] += x.at(b, y, xx, ch).as_f64();
                }
            }
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let d = x.at(b, y, xx, ch).as_f64() - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    let out = Tensor::from_fn([n, h, w, c], |b, y, xx, ch| {
        let xhat = (x.at(b, y, xx, ch).as_f64() - mean[ch]) / (var[ch] + eps).sqrt();
        E::of_f64(gamma[ch].as_f64() * xhat + beta[ch].as_f64())
    });
    (out, mean, var)
}

/// Batch normalization applied with frozen statistics.
pub fn naive_batchnorm_eval<E: Element>(
    x: &Tensor<E>,
    gamma: &[E],
    beta: &[E],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Tensor<E> {
    let [n, h, w, c] = x.shape();
    Tensor::from_fn([n, h, w, c], |b, y, xx, ch| {
        let xhat = (x.at(b, y, xx, ch).as_f64() - mean[ch]) / (var[ch] + eps).sqrt();
        E::of_f64(gamma[ch].as_f64() * xhat + beta[ch].as_f64())
    })
}

/// Peak signal-to-noise ratio from a mean squared error, capped where the
/// error underflows to zero.
pub fn psnr_from_mse(mse: f64, peak: f64, cap_db: f64) -> f64 {
    if mse <= 0.0 {
        return cap_db;
    }
    (10.0 * ((peak * peak) / mse).log10()).min(cap_db)
}

/// Normalized 2-D Gaussian window, `size` x `size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as isize - 1) / 2;
    let mut w = Vec::with_capacity(size * size);
    for y in -half..=half {
        for x in -half..=half {
            w.push((-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Structural similarity by explicit per-window loops: 11x11 Gaussian window
/// (sigma 1.5), valid placements only, averaged over windows, channels, and
/// batch. Errors when either spatial extent is under the window size.
pub fn naive_ssim<E: Element>(a: &Tensor<E>, b: &Tensor<E>, peak: f64) -> Result<f64> {
    const WIN: usize = 11;
    let [n, h, w, c] = a.shape();
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "ssim",
            detail: format!(
                "{} vs {}",
                crate::tensor::fmt_shape(a.shape()),
                crate::tensor::fmt_shape(b.shape())
            ),
        });
    }
    if h < WIN || w < WIN {
        return Err(Error::eval(format!(
            "ssim needs images at least {WIN}x{WIN}, got {h}x{w}"
        )));
    }
    let win = gaussian_window(WIN, 1.5);
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let mut total = 0.0;
    let mut count = 0usize;
    for img in 0..n {
        for ch in 0..c {
            for oy in 0..=(h - WIN) {
                for ox in 0..=(w - WIN) {
                    let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for wy in 0..WIN {
                        for wx in 0..WIN {
                            let g = win[wy * WIN + wx];
                            let xv = a.at(img, oy + wy, ox + wx, ch).as_f64();
                            let yv = b.at(img, oy + wy, ox + wx, ch).as_f64();
                            mx += g * xv;
                            my += g * yv;
                            mxx += g * xv * xv;
                            myy += g * yv * yv;
                            mxy += g * xv * yv;
                        }
                    }
                    let vx = mxx - mx * mx;
                    let vy = myy - my * my;
                    let cov = mxy - mx * my;
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Central finite-difference gradient of `f` with respect to `x`, one
/// element at a time.
pub fn fd_gradient<E: Element>(
    x: &Tensor<E>,
    step: f64,
    mut f: impl FnMut(&Tensor<E>) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = E::of_f64(orig.as_f64() + step);
        let up = f(&probe)?;
        probe.data_mut()[i] = E::of_f64(orig.as_f64() - step);
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Solves `A x = b` for square `A` (row-major) by Gauss-Jordan elimination
/// with partial pivoting. Used by tests for closed-form least squares.
pub fn solve_dense(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    assert_eq!(a.len(), n * n, "solve_dense: A must be n x n");
    let mut m = vec![0.0f64; n * (n + 1)];
    for r in 0..n {
        m[r * (n + 1)..r * (n + 1) + n].copy_from_slice(&a[r * n..(r + 1) * n]);
        m[r * (n + 1) + n] = b[r];
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                m[i * (n + 1) + col]
                    .abs()
                    .total_cmp(&m[j * (n + 1) + col].abs())
            })
            .unwrap();
        if m[pivot * (n + 1) + col].abs() < 1e-12 {
            return Err(Error::eval("solve_dense: singular matrix"));
        }
        if pivot != col {
            for k in 0..=n {
                m.swap(col * (n + 1) + k, pivot * (n + 1) + k);
            }
        }
        let d = m[col * (n + 1) + col];
        for k in 0..=n {
            m[col * (n + 1) + k] /= d;
        }
        for r in 0..n {
            if r != col {
                let factor = m[r * (n + 1) + col];
                if factor != 0.0 {
                    for k in 0..=n {
                        m[r * (n + 1) + k] -= factor * m[col * (n + 1) + k];
                    }
                }
            }
        }
    }
    Ok((0..n).map(|r| m[r * (n + 1) + n]).collect())
}

fn per_sample_sq<E: Element>(t: &Tensor<E>) -> Vec<f64> {
    let [n, h, w, c] = t.shape();
    let per = h * w * c;
    t.data()
        .chunks_exact(per.max(1))
        .take(n)
        .map(|chunk| chunk.iter().map(|v| v.as_f64() * v.as_f64()).sum())
        .collect()
}

/// Measurement-consistency loss from precomputed operands: mean over the
/// batch of (‖F(x̂−x)‖² − ‖x̂−x‖²)², with `fd` the measured difference and
/// `d` the raw difference.
pub fn naive_loss_measurement<E: Element>(fd: &Tensor<E>, d: &Tensor<E>) -> f64 {
    let fs = per_sample_sq(fd);
    let ds = per_sample_sq(d);
    assert_eq!(fs.len(), ds.len());
    fs.iter().zip(&ds).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / fs.len() as f64
}

/// Measured-domain residual loss: mean over the batch of ‖F(G(Ẑ)) − F(x)‖².
pub fn naive_loss_recurrent<E: Element>(fgz: &Tensor<E>, fx: &Tensor<E>) -> f64 {
    assert_eq!(fgz.shape(), fx.shape());
    let [n, h, w, c] = fgz.shape();
    let d = Tensor::<f64>::from_fn([n, h, w, c], |b, y, x, ch| {
        fgz.at(b, y, x, ch).as_f64() - fx.at(b, y, x, ch).as_f64()
    });
    per_sample_sq(&d).iter().sum::<f64>() / n as f64
}

/// Plain mean squared error over every element.
pub fn naive_loss_mse<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}
