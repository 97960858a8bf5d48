//! Image quality scores and the evaluation driver that produces them.
//!
//! PSNR is computed per image and averaged so one ruined frame cannot hide
//! behind a sharp batch. SSIM follows the classic windowed formulation and is
//! cross-checked against the per-window loop in [`crate::reference`]; here the
//! window sums are convolutions so large images stay cheap.

use crate::bundle::ModelBundle;
use crate::conv::{conv2d, Padding};
use crate::error::{Error, Result};
use crate::reference::gaussian_window;
use crate::strategy::reconstruct_batch;
use crate::tensor::{fmt_shape, Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reported when the error underflows to zero; also the cap for finite values.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn check_same_shape<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            detail: format!("{} vs {}", fmt_shape(a.shape()), fmt_shape(b.shape())),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, averaged over the batch dimension.
pub fn psnr<E: Element>(reference: &Tensor<E>, test: &Tensor<E>, peak: f64) -> Result<f64> {
    check_same_shape("psnr", reference, test)?;
    if peak <= 0.0 {
        return Err(Error::eval(format!("psnr peak must be positive, got {peak}")));
    }
    let [n, h, w, c] = reference.shape();
    let per_image = h * w * c;
    let mut total_db = 0.0;
    for img in 0..n {
        let mut se = 0.0;
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let d = reference.at(img, y, x, ch).as_f64() - test.at(img, y, x, ch).as_f64();
                    se += d * d;
                }
            }
        }
        total_db += crate::reference::psnr_from_mse(se / per_image as f64, peak, PSNR_CAP_DB);
    }
    Ok(total_db / n as f64)
}

/// One channel of a batch lifted to f64, as an [n, h, w, 1] plane.
fn plane<E: Element>(t: &Tensor<E>, ch: usize) -> Tensor<f64> {
    let [n, h, w, _] = t.shape();
    Tensor::from_fn([n, h, w, 1], |b, y, x, _| t.at(b, y, x, ch).as_f64())
}

/// Mean structural similarity over valid 11x11 Gaussian windows, channels,
/// and batch. Scores are in [-1, 1] with 1 meaning identical content.
pub fn ssim<E: Element>(a: &Tensor<E>, b: &Tensor<E>, peak: f64) -> Result<f64> {
    check_same_shape("ssim", a, b)?;
    let [n, h, w, c] = a.shape();
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::eval(format!(
            "ssim needs images at least {SSIM_WIN}x{SSIM_WIN}, got {h}x{w}"
        )));
    }
    let kernel = Tensor::from_vec([SSIM_WIN, SSIM_WIN, 1, 1], gaussian_window(SSIM_WIN, SSIM_SIGMA))?;
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let blur = |p: &Tensor<f64>| conv2d(p, &kernel, None, [1, 1], Padding::Valid);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = plane(a, ch);
        let pb = plane(b, ch);
        let paa = pa.map(|v| v * v);
        let pbb = pb.map(|v| v * v);
        let pab = Tensor::from_fn(pa.shape(), |i, y, x, _| pa.at(i, y, x, 0) * pb.at(i, y, x, 0));
        let mu_a = blur(&pa)?;
        let mu_b = blur(&pb)?;
        let m_aa = blur(&paa)?;
        let m_bb = blur(&pbb)?;
        let m_ab = blur(&pab)?;
        let [no, ho, wo, _] = mu_a.shape();
        for img in 0..no {
            for y in 0..ho {
                for x in 0..wo {
                    let ma = mu_a.at(img, y, x, 0);
                    let mb = mu_b.at(img, y, x, 0);
                    let va = m_aa.at(img, y, x, 0) - ma * ma;
                    let vb = m_bb.at(img, y, x, 0) - mb * mb;
                    let cov = m_ab.at(img, y, x, 0) - ma * mb;
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
        debug_assert_eq!(no, n);
    }
    Ok(total / count as f64)
}

/// Worst relative energy distortion seen across difference vectors.
#[derive(Debug, Clone, Copy)]
pub struct RipReport {
    pub delta_hat: f64,
    pub pairs_used: usize,
    pub skipped: usize,
}

/// Probes how far `measure` strays from an isometry: for each pair the
/// difference x1 - x2 is pushed through and |‖F(d)‖²/‖d‖² - 1| recorded,
/// keeping the maximum. Pairs with identical members carry no information
/// and are skipped with a warning.
pub fn rip_spread<E: Element>(
    mut measure: impl FnMut(&Tensor<E>) -> Result<Tensor<E>>,
    pairs: &[(Tensor<E>, Tensor<E>)],
) -> Result<RipReport> {
    let mut report = RipReport { delta_hat: 0.0, pairs_used: 0, skipped: 0 };
    for (i, (x1, x2)) in pairs.iter().enumerate() {
        check_same_shape("rip_spread", x1, x2)?;
        let [n, h, w, c] = x1.shape();
        let d = Tensor::from_fn([n, h, w, c], |b, y, x, ch| {
            E::of_f64(x1.at(b, y, x, ch).as_f64() - x2.at(b, y, x, ch).as_f64())
        });
        let energy = d.sq_l2();
        if energy == 0.0 {
            eprintln!("warning: rip probe pair {i} has zero difference, skipping");
            report.skipped += 1;
            continue;
        }
        let y = measure(&d)?;
        let ratio = y.sq_l2() / energy;
        report.delta_hat = report.delta_hat.max((ratio - 1.0).abs());
        report.pairs_used += 1;
    }
    if report.pairs_used == 0 {
        return Err(Error::eval("rip probe needs at least one pair with distinct members"));
    }
    Ok(report)
}

/// Everything copied into [0, 1], the range scores are defined over.
pub fn clamp_unit<E: Element>(t: &Tensor<E>) -> Tensor<E> {
    t.map(|v| E::of_f64(v.as_f64().clamp(0.0, 1.0)))
}

/// Scores for one image under one noise level and refinement depth.
#[derive(Debug, Clone)]
pub struct QualityRow {
    pub name: String,
    pub sigma: f64,
    pub steps: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Default)]
pub struct QualityReport {
    pub rows: Vec<QualityRow>,
}

impl QualityReport {
    /// Mean scores per (sigma, steps) cell, in first-appearance order.
    pub fn group_means(&self) -> Vec<(f64, usize, f64, f64)> {
        let mut groups: Vec<(f64, usize, f64, f64, usize)> = Vec::new();
        for row in &self.rows {
            match groups.iter_mut().find(|g| g.0 == row.sigma && g.1 == row.steps) {
                Some(g) => {
                    g.2 += row.psnr_db;
                    g.3 += row.ssim;
                    g.4 += 1;
                }
                None => groups.push((row.sigma, row.steps, row.psnr_db, row.ssim, 1)),
            }
        }
        groups
            .into_iter()
            .map(|(s, t, p, q, k)| (s, t, p / k as f64, q / k as f64))
            .collect()
    }

    pub fn mean_psnr(&self, sigma: f64, steps: usize) -> Option<f64> {
        self.group_means()
            .into_iter()
            .find(|g| g.0 == sigma && g.1 == steps)
            .map(|g| g.2)
    }

    pub fn mean_ssim(&self, sigma: f64, steps: usize) -> Option<f64> {
        self.group_means()
            .into_iter()
            .find(|g| g.0 == sigma && g.1 == steps)
            .map(|g| g.3)
    }

    /// Per-row table; six decimals so reruns are comparable to the last digit.
    pub fn csv(&self) -> String {
        let mut out = String::from("name,sigma,steps,psnr_db,ssim\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                r.name, r.sigma, r.steps, r.psnr_db, r.ssim
            ));
        }
        out
    }
}

/// Runs the model over every (sigma, steps, image) combination and scores the
/// clamped reconstructions against the originals. Each row draws its noise
/// from an rng derived from `seed` and the row's position, so results do not
/// depend on which other rows were requested.
pub fn evaluate<E: Element>(
    bundle: &ModelBundle<E>,
    images: &[(String, Tensor<E>)],
    sigmas: &[f64],
    step_list: &[usize],
    seed: u64,
) -> Result<QualityReport> {
    if images.is_empty() {
        return Err(Error::eval("evaluate needs at least one image"));
    }
    let mut report = QualityReport::default();
    let mut row_index = 0u64;
    for &sigma in sigmas {
        for &steps in step_list {
            for (name, x) in images {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seed ^ row_index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                row_index += 1;
                let out = reconstruct_batch(bundle, x, sigma, steps, &mut rng)?;
                let recon = clamp_unit(&out.image);
                report.rows.push(QualityRow {
                    name: name.clone(),
                    sigma,
                    steps,
                    psnr_db: psnr(x, &recon, 1.0)?,
                    ssim: ssim(x, &recon, 1.0)?,
                });
            }
        }
    }
    Ok(report)
}
