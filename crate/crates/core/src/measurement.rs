//! Sensor-side stage: a frozen block-wise coded mask followed by a 1x1
//! measurement convolution.
//!
//! The mask turns each N1 x N2 x N_ch image block into one pixel with
//! N1*N2*N_ch channels (a strided convolution), and the measurement matrix
//! mixes those channels down to m samples. Together they act per block like
//! an m x (N1*N2*N_ch) matrix, which the tests exploit.

use crate::conv::{self, Padding};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Element, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Half-up rounding, the documented rule for deriving the measurement count.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    pub block_h: usize,
    pub block_w: usize,
    pub channels: usize,
    pub rate: f64,
    /// Measurement channels per block, `round(rate * block_len)`, at least 1.
    pub m: usize,
}

impl SamplingConfig {
    pub fn new(block_h: usize, block_w: usize, channels: usize, rate: f64) -> Result<Self> {
        if block_h == 0 || block_w == 0 || channels == 0 {
            return Err(Error::config("block dimensions and channels must be at least 1"));
        }
        if !(rate > 0.0 && rate <= 1.0) || !rate.is_finite() {
            return Err(Error::config(format!("sampling rate {rate} outside (0, 1]")));
        }
        let len = block_h * block_w * channels;
        let m = round_half_up(rate * len as f64).max(1);
        if m > len {
            return Err(Error::config(format!(
                "derived {m} measurements exceed block length {len}"
            )));
        }
        Ok(SamplingConfig { block_h, block_w, channels, rate, m })
    }

    /// Elements per sampling block, the mask's output channel count.
    pub fn block_len(&self) -> usize {
        self.block_h * self.block_w * self.channels
    }

    pub fn check_divisible(&self, h: usize, w: usize) -> Result<()> {
        if h % self.block_h != 0 || w % self.block_w != 0 {
            let ph = h.div_ceil(self.block_h) * self.block_h;
            let pw = w.div_ceil(self.block_w) * self.block_w;
            return Err(Error::Shape {
                op: "apply_mask",
                detail: format!(
                    "image {h}x{w} not divisible by {}x{} blocks; pad to {ph}x{pw}",
                    self.block_h, self.block_w
                ),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Dct,
    Identity,
    Custom,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Dct => "dct",
            MaskMode::Identity => "identity",
            MaskMode::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dct" => Ok(MaskMode::Dct),
            "identity" => Ok(MaskMode::Identity),
            "custom" => Ok(MaskMode::Custom),
            other => Err(Error::config(format!(
                "unknown mask mode {other:?}; expected dct, identity, or custom"
            ))),
        }
    }
}

/// Frozen block-transform kernel `[N1, N2, N_ch, N1*N2*N_ch]`. Never carries
/// gradients.
pub struct CodedMask<E> {
    pub mode: MaskMode,
    pub kernel: Tensor<E>,
}

impl<E: Element> CodedMask<E> {
    /// Separable orthonormal cosine basis per color channel. Output channel
    /// k + k1*N_ch + k2*N1*N_ch holds frequency (k1, k2) of channel k.
    pub fn dct(cfg: &SamplingConfig) -> Self {
        let (n1, n2, nc) = (cfg.block_h, cfg.block_w, cfg.channels);
        let norm = (2.0 / n1 as f64).sqrt() * (2.0 / n2 as f64).sqrt();
        let alpha = |t: usize| if t == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
        let mut kernel = Tensor::zeros([n1, n2, nc, n1 * n2 * nc]);
        for i in 0..n1 {
            for j in 0..n2 {
                for k in 0..nc {
                    for k1 in 0..n1 {
                        for k2 in 0..n2 {
                            let o = k + k1 * nc + k2 * n1 * nc;
                            let v = norm
                                * alpha(k1)
                                * alpha(k2)
                                * (((2 * i + 1) * k1) as f64 * std::f64::consts::PI
                                    / (2 * n1) as f64)
                                    .cos()
                                * (((2 * j + 1) * k2) as f64 * std::f64::consts::PI
                                    / (2 * n2) as f64)
                                    .cos();
                            kernel.set(i, j, k, o, E::of_f64(v));
                        }
                    }
                }
            }
        }
        CodedMask { mode: MaskMode::Dct, kernel }
    }

    /// Pure rearrangement: block pixel (i, j, k) lands in output channel
    /// k + i*N_ch + j*N1*N_ch.
    pub fn identity(cfg: &SamplingConfig) -> Self {
        let (n1, n2, nc) = (cfg.block_h, cfg.block_w, cfg.channels);
        let mut kernel = Tensor::zeros([n1, n2, nc, n1 * n2 * nc]);
        for i in 0..n1 {
            for j in 0..n2 {
                for k in 0..nc {
                    let o = k + i * nc + j * n1 * nc;
                    kernel.set(i, j, k, o, E::one());
                }
            }
        }
        CodedMask { mode: MaskMode::Identity, kernel }
    }

    pub fn custom(cfg: &SamplingConfig, kernel: Tensor<E>) -> Result<Self> {
        let want = [cfg.block_h, cfg.block_w, cfg.channels, cfg.block_len()];
        if kernel.shape() != want {
            return Err(Error::Shape {
                op: "coded_mask",
                detail: format!(
                    "custom kernel {} does not match blocks {}",
                    fmt_shape(kernel.shape()),
                    fmt_shape(want)
                ),
            });
        }
        Ok(CodedMask { mode: MaskMode::Custom, kernel })
    }

    pub fn build(mode: MaskMode, cfg: &SamplingConfig) -> Result<Self> {
        match mode {
            MaskMode::Dct => Ok(Self::dct(cfg)),
            MaskMode::Identity => Ok(Self::identity(cfg)),
            MaskMode::Custom => {
                Err(Error::config("custom mask requires an explicit kernel tensor"))
            }
        }
    }

    /// Largest deviation of the output-channel slices from an orthonormal
    /// family (unit norms, zero cross dots).
    pub fn orthonormality_error(&self) -> f64 {
        let [n1, n2, nc, l] = self.kernel.shape();
        let vol = n1 * n2 * nc;
        // Column-major view: slice o is strided by l in memory.
        let dot = |a: usize, b: usize| -> f64 {
            (0..vol)
                .map(|q| {
                    self.kernel.data()[q * l + a].as_f64() * self.kernel.data()[q * l + b].as_f64()
                })
                .sum()
        };
        let mut worst = 0.0f64;
        for a in 0..l {
            worst = worst.max((dot(a, a) - 1.0).abs());
            for b in a + 1..l {
                worst = worst.max(dot(a, b).abs());
            }
        }
        worst
    }
}

/// Block transform: strided convolution with the frozen mask kernel.
pub fn apply_mask<E: Element>(
    image: &Tensor<E>,
    mask: &CodedMask<E>,
    cfg: &SamplingConfig,
) -> Result<Tensor<E>> {
    let [_, h, w, c] = image.shape();
    if c != cfg.channels {
        return Err(Error::Shape {
            op: "apply_mask",
            detail: format!("image has {c} channels, sampling expects {}", cfg.channels),
        });
    }
    cfg.check_divisible(h, w)?;
    conv::conv2d(image, &mask.kernel, None, [cfg.block_h, cfg.block_w], Padding::Valid)
}

/// Undoes `apply_mask` for orthonormal masks (the transpose is the inverse).
pub fn invert_mask<E: Element>(
    y: &Tensor<E>,
    mask: &CodedMask<E>,
    cfg: &SamplingConfig,
) -> Result<Tensor<E>> {
    if mask.mode == MaskMode::Custom && mask.orthonormality_error() > 1e-4 {
        return Err(Error::config(
            "custom mask is not orthonormal; inversion unsupported".to_string(),
        ));
    }
    if y.shape()[3] != cfg.block_len() {
        return Err(Error::Shape {
            op: "invert_mask",
            detail: format!(
                "input has {} channels, expected block length {}",
                y.shape()[3],
                cfg.block_len()
            ),
        });
    }
    conv::conv_transpose2d(y, &mask.kernel, None, [cfg.block_h, cfg.block_w])
}

/// Channel mixdown with the measurement kernel `[1, 1, block_len, m]`.
pub fn measure<E: Element>(y1: &Tensor<E>, weights: &Tensor<E>) -> Result<Tensor<E>> {
    conv::conv2d(y1, weights, None, [1, 1], Padding::Valid)
}

/// Adds i.i.d. zero-mean Gaussian noise with the given standard deviation.
pub fn add_noise<E: Element>(t: &Tensor<E>, sigma: f64, rng: &mut impl Rng) -> Result<Tensor<E>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("noise sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(t.clone());
    }
    let dist = Normal::new(0.0, sigma).expect("finite positive sigma");
    let mut out = t.clone();
    for v in out.data_mut() {
        *v = *v + E::of_f64(dist.sample(rng));
    }
    Ok(out)
}

pub fn measure_noisy<E: Element>(
    y1: &Tensor<E>,
    weights: &Tensor<E>,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<E>> {
    let clean = measure(y1, weights)?;
    add_noise(&clean, sigma, rng)
}

/// Fresh measurement kernel with i.i.d. N(0, 1/block_len) entries, scaled so
/// rows have unit expected squared norm.
pub fn init_matrix_kernel<E: Element>(cfg: &SamplingConfig, rng: &mut impl Rng) -> Tensor<E> {
    let l = cfg.block_len();
    let dist = Normal::new(0.0, (1.0 / l as f64).sqrt()).expect("positive variance");
    let mut t = Tensor::zeros([1, 1, l, cfg.m]);
    for v in t.data_mut() {
        *v = E::of_f64(dist.sample(rng));
    }
    t
}

/// Recomposes measurement weights when switching coded masks so the
/// end-to-end operator is unchanged: W' = W * T_from * T_to^T, valid when the
/// destination mask is orthonormal.
pub fn compose_swap<E: Element>(
    weights: &Tensor<E>,
    from: &CodedMask<E>,
    to: &CodedMask<E>,
    cfg: &SamplingConfig,
) -> Result<Tensor<E>> {
    let l = cfg.block_len();
    let m = cfg.m;
    if weights.shape() != [1, 1, l, m] {
        return Err(Error::Shape {
            op: "compose_swap",
            detail: format!("weights {} do not match [1,1,{l},{m}]", fmt_shape(weights.shape())),
        });
    }
    if to.orthonormality_error() > 1e-4 {
        return Err(Error::config("destination mask is not orthonormal; swap unsupported"));
    }
    // Mask memory is [pixel q, channel o] row-major, i.e. T transposed;
    // weight memory is [o, mi]. First B[mi,q] = sum_o W[mi,o] T[o,q], then
    // W'[o',mi] = sum_q T'[o',q] B[mi,q], laid out directly as [1,1,L,m].
    let mut b = vec![E::zero(); m * l];
    crate::tensor::gemm(m, l, l, E::one(), weights.data(), true, from.kernel.data(), true, E::zero(), &mut b);
    let mut out = Tensor::zeros([1, 1, l, m]);
    crate::tensor::gemm(l, l, m, E::one(), to.kernel.data(), true, &b, true, E::zero(), out.data_mut());
    Ok(out)
}
