//! Convolution forward and backward passes, lowered to GEMM via im2col.
//!
//! Patches are gathered strip-by-strip (a bounded number of output rows at a
//! time) so the scratch matrix stays small regardless of image size. The
//! channel-contiguous tensor layout makes each patch row a handful of
//! contiguous copies, and the kernel tensor `[kh,kw,Cin,Cout]` flattens
//! directly into the `[kh*kw*Cin, Cout]` GEMM operand without rearrangement.

use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, gemm, Element, Tensor};

/// Zero-padding rule for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by the kernel extent.
    Valid,
    /// Zero-pad so the output covers ceil(extent / stride) positions; at
    /// stride 1 this preserves height and width.
    Same,
}

/// Scratch-buffer budget for one im2col strip, in elements.
const STRIP_BUDGET: usize = 1 << 20;

fn out_extent(
    op: &'static str,
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Shape { op, detail: "stride must be at least 1".into() });
    }
    match padding {
        Padding::Valid => {
            if kernel > extent {
                return Err(Error::Shape {
                    op,
                    detail: format!("kernel extent {kernel} exceeds input extent {extent}"),
                });
            }
            Ok(((extent - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(extent);
            Ok((out, total / 2))
        }
    }
}

struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    pad_t: usize,
    pad_l: usize,
    stride: [usize; 2],
}

impl ConvGeom {
    fn resolve<E: Element>(
        op: &'static str,
        x: &Tensor<E>,
        kernel: &Tensor<E>,
        stride: [usize; 2],
        padding: Padding,
    ) -> Result<ConvGeom> {
        let [n, h, w, cin] = x.shape();
        let [kh, kw, kcin, cout] = kernel.shape();
        if cin != kcin {
            return Err(Error::Shape {
                op,
                detail: format!(
                    "input {} has {cin} channels but kernel {} expects {kcin}",
                    fmt_shape(x.shape()),
                    fmt_shape(kernel.shape())
                ),
            });
        }
        let (ho, pad_t) = out_extent(op, h, kh, stride[0], padding)?;
        let (wo, pad_l) = out_extent(op, w, kw, stride[1], padding)?;
        Ok(ConvGeom { n, h, w, cin, kh, kw, cout, ho, wo, pad_t, pad_l, stride })
    }

    fn kvol(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn strip_rows(&self) -> usize {
        (STRIP_BUDGET / (self.wo * self.kvol()).max(1)).clamp(1, self.ho)
    }
}

fn check_bias<E: Element>(op: &'static str, bias: Option<&Tensor<E>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [1, 1, 1, cout] {
            return Err(Error::Shape {
                op,
                detail: format!(
                    "bias {} does not match output channels [1,1,1,{cout}]",
                    fmt_shape(b.shape())
                ),
            });
        }
    }
    Ok(())
}

/// Copies the patches for output rows `[oh0, oh0+rows)` of batch item `b`
/// into `cols`, row-major `[rows*wo, kvol]`, zero-filling padded positions.
fn im2col_strip<E: Element>(x: &Tensor<E>, g: &ConvGeom, b: usize, oh0: usize, rows: usize, cols: &mut [E]) {
    let kvol = g.kvol();
    let row_w = g.kw * g.cin;
    for r in 0..rows {
        let ih_base = ((oh0 + r) * g.stride[0]) as isize - g.pad_t as isize;
        for ow in 0..g.wo {
            let patch = &mut cols[(r * g.wo + ow) * kvol..(r * g.wo + ow + 1) * kvol];
            let iw_base = (ow * g.stride[1]) as isize - g.pad_l as isize;
            let kx0 = (-iw_base).clamp(0, g.kw as isize) as usize;
            let kx1 = (g.w as isize - iw_base).clamp(0, g.kw as isize) as usize;
            for ky in 0..g.kh {
                let ih = ih_base + ky as isize;
                let seg = &mut patch[ky * row_w..(ky + 1) * row_w];
                if ih < 0 || ih >= g.h as isize || kx0 >= kx1 {
                    seg.fill(E::zero());
                    continue;
                }
                seg[..kx0 * g.cin].fill(E::zero());
                seg[kx1 * g.cin..].fill(E::zero());
                let src = x.idx(b, ih as usize, (iw_base + kx0 as isize) as usize, 0);
                seg[kx0 * g.cin..kx1 * g.cin]
                    .copy_from_slice(&x.data()[src..src + (kx1 - kx0) * g.cin]);
            }
        }
    }
}

/// Scatter-adds patch gradients back to input positions; the exact reverse
/// of `im2col_strip`, skipping padded entries.
fn col2im_strip<E: Element>(dx: &mut Tensor<E>, g: &ConvGeom, b: usize, oh0: usize, rows: usize, cols: &[E]) {
    let kvol = g.kvol();
    let row_w = g.kw * g.cin;
    for r in 0..rows {
        let ih_base = ((oh0 + r) * g.stride[0]) as isize - g.pad_t as isize;
        for ow in 0..g.wo {
            let patch = &cols[(r * g.wo + ow) * kvol..(r * g.wo + ow + 1) * kvol];
            let iw_base = (ow * g.stride[1]) as isize - g.pad_l as isize;
            let kx0 = (-iw_base).clamp(0, g.kw as isize) as usize;
            let kx1 = (g.w as isize - iw_base).clamp(0, g.kw as isize) as usize;
            for ky in 0..g.kh {
                let ih = ih_base + ky as isize;
                if ih < 0 || ih >= g.h as isize || kx0 >= kx1 {
                    continue;
                }
                let seg = &patch[ky * row_w + kx0 * g.cin..ky * row_w + kx1 * g.cin];
                let dst = dx.idx(b, ih as usize, (iw_base + kx0 as isize) as usize, 0);
                for (d, s) in dx.data_mut()[dst..dst + seg.len()].iter_mut().zip(seg) {
                    *d = *d + *s;
                }
            }
        }
    }
}

fn add_bias_rows<E: Element>(data: &mut [E], bias: &Tensor<E>) {
    let c = bias.len();
    for row in data.chunks_exact_mut(c) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v = *v + *b;
        }
    }
}

/// 2-D convolution. Input `[N,H,W,Cin]`, kernel `[kh,kw,Cin,Cout]`, optional
/// bias `[1,1,1,Cout]`, output `[N,Ho,Wo,Cout]`.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: [usize; 2],
    padding: Padding,
) -> Result<Tensor<E>> {
    let g = ConvGeom::resolve("conv2d", x, kernel, stride, padding)?;
    check_bias("conv2d", bias, g.cout)?;
    let kvol = g.kvol();
    let strip = g.strip_rows();
    let mut cols = vec![E::zero(); strip * g.wo * kvol];
    let mut out = Tensor::zeros([g.n, g.ho, g.wo, g.cout]);
    for b in 0..g.n {
        let mut oh0 = 0;
        while oh0 < g.ho {
            let rows = strip.min(g.ho - oh0);
            im2col_strip(x, &g, b, oh0, rows, &mut cols[..rows * g.wo * kvol]);
            let off = out.idx(b, oh0, 0, 0);
            gemm(
                rows * g.wo,
                kvol,
                g.cout,
                E::one(),
                &cols[..rows * g.wo * kvol],
                false,
                kernel.data(),
                false,
                E::zero(),
                &mut out.data_mut()[off..off + rows * g.wo * g.cout],
            );
            oh0 += rows;
        }
    }
    if let Some(bv) = bias {
        add_bias_rows(out.data_mut(), bv);
    }
    out.ensure_finite("conv2d")?;
    Ok(out)
}

pub struct ConvGrads<E> {
    pub dx: Option<Tensor<E>>,
    pub dk: Option<Tensor<E>>,
    pub dbias: Option<Tensor<E>>,
}

/// Gradients of `conv2d` with respect to its inputs; each is computed only
/// when requested.
pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: [usize; 2],
    padding: Padding,
    dout: &Tensor<E>,
    want_dx: bool,
    want_dk: bool,
    want_dbias: bool,
) -> Result<ConvGrads<E>> {
    let g = ConvGeom::resolve("conv2d_backward", x, kernel, stride, padding)?;
    debug_assert_eq!(dout.shape(), [g.n, g.ho, g.wo, g.cout]);
    let kvol = g.kvol();
    let strip = g.strip_rows();
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dk = want_dk.then(|| Tensor::zeros(kernel.shape()));
    if want_dx || want_dk {
        let mut cols = vec![E::zero(); strip * g.wo * kvol];
        for b in 0..g.n {
            let mut oh0 = 0;
            while oh0 < g.ho {
                let rows = strip.min(g.ho - oh0);
                let m = rows * g.wo;
                let off = dout.idx(b, oh0, 0, 0);
                let dout_strip = &dout.data()[off..off + m * g.cout];
                if let Some(dk) = dk.as_mut() {
                    im2col_strip(x, &g, b, oh0, rows, &mut cols[..m * kvol]);
                    gemm(
                        kvol,
                        m,
                        g.cout,
                        E::one(),
                        &cols[..m * kvol],
                        true,
                        dout_strip,
                        false,
                        E::one(),
                        dk.data_mut(),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let mut dcols = vec![E::zero(); m * kvol];
                    gemm(
                        m,
                        g.cout,
                        kvol,
                        E::one(),
                        dout_strip,
                        false,
                        kernel.data(),
                        true,
                        E::zero(),
                        &mut dcols,
                    );
                    col2im_strip(dx, &g, b, oh0, rows, &dcols);
                }
                oh0 += rows;
            }
        }
    }
    let dbias = want_dbias.then(|| {
        let mut db = Tensor::zeros([1, 1, 1, g.cout]);
        for row in dout.data().chunks_exact(g.cout) {
            for (d, v) in db.data_mut().iter_mut().zip(row) {
                *d = *d + *v;
            }
        }
        db
    });
    Ok(ConvGrads { dx, dk, dbias })
}

fn transpose_geom<E: Element>(
    op: &'static str,
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: [usize; 2],
) -> Result<([usize; 4], [usize; 4])> {
    let [n, h, w, cin] = x.shape();
    let [kh, kw, cout, kcin] = kernel.shape();
    if cin != kcin {
        return Err(Error::Shape {
            op,
            detail: format!(
                "input {} has {cin} channels but kernel {} expects {kcin}",
                fmt_shape(x.shape()),
                fmt_shape(kernel.shape())
            ),
        });
    }
    if stride[0] == 0 || stride[1] == 0 {
        return Err(Error::Shape { op, detail: "stride must be at least 1".into() });
    }
    let ho = (h - 1) * stride[0] + kh;
    let wo = (w - 1) * stride[1] + kw;
    Ok(([n, h, w, cin], [n, ho, wo, cout]))
}

/// Transposed 2-D convolution (the adjoint of a valid `conv2d` with the same
/// kernel memory). Input `[N,h,w,Cin]`, kernel `[kh,kw,Cout,Cin]`, output
/// `[N,(h-1)*sh+kh,(w-1)*sw+kw,Cout]`.
pub fn conv_transpose2d<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: [usize; 2],
) -> Result<Tensor<E>> {
    let (in_shape, out_shape) = transpose_geom("conv_transpose2d", x, kernel, stride)?;
    let [n, h, w, cin] = in_shape;
    let [kh, kw, cout, _] = kernel.shape();
    check_bias("conv_transpose2d", bias, cout)?;
    let mut out = Tensor::zeros(out_shape);
    if stride == [kh, kw] {
        // Non-overlapping: every input pixel owns one kh x kw output block,
        // so the whole thing is a single GEMM plus a row rearrangement.
        let kvol = kh * kw * cout;
        let mut blocks = vec![E::zero(); h * w * kvol];
        for b in 0..n {
            let xoff = x.idx(b, 0, 0, 0);
            gemm(
                h * w,
                cin,
                kvol,
                E::one(),
                &x.data()[xoff..xoff + h * w * cin],
                false,
                kernel.data(),
                true,
                E::zero(),
                &mut blocks,
            );
            for hi in 0..h {
                for wi in 0..w {
                    let block = &blocks[(hi * w + wi) * kvol..(hi * w + wi + 1) * kvol];
                    for ky in 0..kh {
                        let dst = out.idx(b, hi * kh + ky, wi * kw, 0);
                        out.data_mut()[dst..dst + kw * cout]
                            .copy_from_slice(&block[ky * kw * cout..(ky + 1) * kw * cout]);
                    }
                }
            }
        }
    } else {
        // Overlapping strides scatter-add; only exercised at small scale.
        for b in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let dst = out.idx(b, hi * stride[0] + ky, wi * stride[1] + kx, 0);
                            for oc in 0..cout {
                                let mut acc = out.data()[dst + oc];
                                for ic in 0..cin {
                                    acc = acc + x.at(b, hi, wi, ic) * kernel.at(ky, kx, oc, ic);
                                }
                                out.data_mut()[dst + oc] = acc;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(bv) = bias {
        add_bias_rows(out.data_mut(), bv);
    }
    out.ensure_finite("conv_transpose2d")?;
    Ok(out)
}

/// Gradients of `conv_transpose2d`.
pub fn conv_transpose2d_backward<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: [usize; 2],
    dout: &Tensor<E>,
    want_dx: bool,
    want_dk: bool,
    want_dbias: bool,
) -> Result<ConvGrads<E>> {
    let (in_shape, out_shape) = transpose_geom("conv_transpose2d_backward", x, kernel, stride)?;
    let [n, h, w, cin] = in_shape;
    let [kh, kw, cout, _] = kernel.shape();
    debug_assert_eq!(dout.shape(), out_shape);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dk = want_dk.then(|| Tensor::zeros(kernel.shape()));
    if want_dx || want_dk {
        if stride == [kh, kw] {
            let kvol = kh * kw * cout;
            let mut blocks = vec![E::zero(); h * w * kvol];
            for b in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        let block = &mut blocks[(hi * w + wi) * kvol..(hi * w + wi + 1) * kvol];
                        for ky in 0..kh {
                            let src = dout.idx(b, hi * kh + ky, wi * kw, 0);
                            block[ky * kw * cout..(ky + 1) * kw * cout]
                                .copy_from_slice(&dout.data()[src..src + kw * cout]);
                        }
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let off = dx.idx(b, 0, 0, 0);
                    gemm(
                        h * w,
                        kvol,
                        cin,
                        E::one(),
                        &blocks,
                        false,
                        kernel.data(),
                        false,
                        E::zero(),
                        &mut dx.data_mut()[off..off + h * w * cin],
                    );
                }
                if let Some(dk) = dk.as_mut() {
                    let xoff = x.idx(b, 0, 0, 0);
                    gemm(
                        kvol,
                        h * w,
                        cin,
                        E::one(),
                        &blocks,
                        true,
                        &x.data()[xoff..xoff + h * w * cin],
                        false,
                        E::one(),
                        dk.data_mut(),
                    );
                }
            }
        } else {
            for b in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let o = dout.idx(b, hi * stride[0] + ky, wi * stride[1] + kx, 0);
                                for oc in 0..cout {
                                    let go = dout.data()[o + oc];
                                    for ic in 0..cin {
                                        if let Some(dx) = dx.as_mut() {
                                            let i = dx.idx(b, hi, wi, ic);
                                            dx.data_mut()[i] =
                                                dx.data()[i] + go * kernel.at(ky, kx, oc, ic);
                                        }
                                        if let Some(dk) = dk.as_mut() {
                                            let i = dk.idx(ky, kx, oc, ic);
                                            dk.data_mut()[i] =
                                                dk.data()[i] + go * x.at(b, hi, wi, ic);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let dbias = want_dbias.then(|| {
        let mut db = Tensor::zeros([1, 1, 1, cout]);
        for row in dout.data().chunks_exact(cout) {
            for (d, v) in db.data_mut().iter_mut().zip(row) {
                *d = *d + *v;
            }
        }
        db
    });
    Ok(ConvGrads { dx, dk, dbias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_matches_naive_across_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases: &[([usize; 4], [usize; 4], [usize; 2], Padding, bool)] = &[
            ([1, 5, 5, 1], [3, 3, 1, 2], [1, 1], Padding::Valid, false),
            ([2, 6, 6, 3], [3, 3, 3, 4], [1, 1], Padding::Same, true),
            ([1, 8, 8, 2], [2, 2, 2, 5], [2, 2], Padding::Valid, true),
            ([2, 16, 16, 3], [8, 8, 3, 7], [8, 8], Padding::Valid, false),
            ([1, 7, 9, 4], [1, 1, 4, 6], [1, 1], Padding::Valid, true),
            ([1, 9, 7, 2], [5, 3, 2, 3], [2, 3], Padding::Valid, false),
            ([1, 6, 6, 2], [4, 4, 2, 3], [1, 1], Padding::Same, true),
        ];
        for &(xs, ks, stride, pad, with_bias) in cases {
            let x = rand_tensor(&mut rng, xs);
            let k = rand_tensor(&mut rng, ks);
            let b = with_bias.then(|| rand_tensor(&mut rng, [1, 1, 1, ks[3]]));
            let got = conv2d(&x, &k, b.as_ref(), stride, pad).unwrap();
            let want = reference::naive_conv2d(&x, &k, b.as_ref(), stride, pad);
            assert_eq!(got.shape(), want.shape(), "case {xs:?}");
            assert!(got.max_abs_diff(&want) < 1e-12, "case {xs:?}");
        }
    }

    #[test]
    fn conv2d_strip_splitting_agrees_with_single_gemm() {
        // Force several strips by making the output taller than the budget
        // allows in one piece; values must not depend on strip boundaries.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, [1, 40, 33, 3]);
        let k = rand_tensor(&mut rng, [3, 3, 3, 2]);
        let got = conv2d(&x, &k, None, [1, 1], Padding::Same).unwrap();
        let want = reference::naive_conv2d(&x, &k, None, [1, 1], Padding::Same);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn conv2d_rejects_bad_geometry() {
        let x = Tensor::<f32>::zeros([1, 4, 4, 2]);
        let k3 = Tensor::<f32>::zeros([3, 3, 3, 1]);
        let err = conv2d(&x, &k3, None, [1, 1], Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
        let kbig = Tensor::<f32>::zeros([5, 5, 2, 1]);
        let err = conv2d(&x, &kbig, None, [1, 1], Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("exceeds"), "{err}");
        let k = Tensor::<f32>::zeros([2, 2, 2, 3]);
        let bad_bias = Tensor::<f32>::zeros([1, 1, 1, 2]);
        let err = conv2d(&x, &k, Some(&bad_bias), [1, 1], Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
        let err = conv2d(&x, &k, None, [0, 1], Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("stride"), "{err}");
    }

    #[test]
    fn conv_transpose2d_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cases: &[([usize; 4], [usize; 4], [usize; 2], bool)] = &[
            ([1, 1, 1, 64], [8, 8, 1, 64], [8, 8], false),
            ([2, 3, 4, 5], [2, 2, 3, 5], [2, 2], true),
            ([1, 4, 4, 3], [3, 3, 2, 3], [1, 1], false),
            ([1, 3, 3, 2], [4, 4, 3, 2], [2, 2], true),
        ];
        for &(xs, ks, stride, with_bias) in cases {
            let x = rand_tensor(&mut rng, xs);
            let k = rand_tensor(&mut rng, ks);
            let b = with_bias.then(|| rand_tensor(&mut rng, [1, 1, 1, ks[2]]));
            let got = conv_transpose2d(&x, &k, b.as_ref(), stride).unwrap();
            let want = reference::naive_conv_transpose2d(&x, &k, b.as_ref(), stride);
            assert_eq!(got.shape(), want.shape(), "case {xs:?}");
            assert!(got.max_abs_diff(&want) < 1e-12, "case {xs:?}");
        }
    }

    #[test]
    fn conv_transpose_block_upsample_shape() {
        let x = Tensor::<f32>::zeros([1, 1, 1, 64]);
        let k = Tensor::<f32>::zeros([8, 8, 1, 64]);
        let y = conv_transpose2d(&x, &k, None, [8, 8]).unwrap();
        assert_eq!(y.shape(), [1, 8, 8, 1]);
    }

    #[test]
    fn conv_and_transpose_are_adjoint() {
        // <conv2d(x,K), y> == <x, conv_transpose2d(y,K)> with the same kernel
        // memory viewed under the two layouts.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for &(xs, ks, stride) in &[
            ([1usize, 8, 8, 3], [2usize, 2, 3, 5], [2usize, 2]),
            ([2, 9, 9, 2], [3, 3, 2, 4], [3, 3]),
            ([1, 6, 6, 1], [3, 3, 1, 2], [1, 1]),
        ] {
            let x = rand_tensor(&mut rng, xs);
            let k = rand_tensor(&mut rng, ks);
            let fx = conv2d(&x, &k, None, stride, Padding::Valid).unwrap();
            let y = rand_tensor(&mut rng, fx.shape());
            // The same buffer serves both layouts: slot 2 is the transpose's
            // output channel count, slot 3 its input channel count.
            let bty = conv_transpose2d(&y, &k, None, stride).unwrap();
            let lhs: f64 = fx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(bty.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "adjoint broken for {xs:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_tensor(&mut rng, [2, 5, 5, 2]);
        let k = rand_tensor(&mut rng, [3, 3, 2, 3]);
        let bias = rand_tensor(&mut rng, [1, 1, 1, 3]);
        let cot = rand_tensor(&mut rng, [2, 5, 5, 3]);
        let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let y = conv2d(x, k, Some(b), [1, 1], Padding::Same).unwrap();
            y.data().iter().zip(cot.data()).map(|(a, c)| a * c).sum()
        };
        let grads =
            conv2d_backward(&x, &k, [1, 1], Padding::Same, &cot, true, true, true).unwrap();
        let fdx = reference::fd_gradient(&x, 1e-6, |p| Ok(loss(p, &k, &bias))).unwrap();
        for (a, f) in grads.dx.unwrap().data().iter().zip(&fdx) {
            assert!((a - f).abs() < 1e-7, "dx {a} vs {f}");
        }
        let fdk = reference::fd_gradient(&k, 1e-6, |p| Ok(loss(&x, p, &bias))).unwrap();
        for (a, f) in grads.dk.unwrap().data().iter().zip(&fdk) {
            assert!((a - f).abs() < 1e-7, "dk {a} vs {f}");
        }
        let fdb = reference::fd_gradient(&bias, 1e-6, |p| Ok(loss(&x, &k, p))).unwrap();
        for (a, f) in grads.dbias.unwrap().data().iter().zip(&fdb) {
            assert!((a - f).abs() < 1e-7, "dbias {a} vs {f}");
        }
    }

    #[test]
    fn conv_transpose2d_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for &stride in &[[2usize, 2], [1usize, 1]] {
            let x = rand_tensor(&mut rng, [1, 3, 3, 4]);
            let k = rand_tensor(&mut rng, [2, 2, 3, 4]);
            let bias = rand_tensor(&mut rng, [1, 1, 1, 3]);
            let out_shape =
                conv_transpose2d(&x, &k, Some(&bias), stride).unwrap().shape();
            let cot = rand_tensor(&mut rng, out_shape);
            let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
                let y = conv_transpose2d(x, k, Some(b), stride).unwrap();
                y.data().iter().zip(cot.data()).map(|(a, c)| a * c).sum()
            };
            let grads =
                conv_transpose2d_backward(&x, &k, stride, &cot, true, true, true).unwrap();
            let fdx = reference::fd_gradient(&x, 1e-6, |p| Ok(loss(p, &k, &bias))).unwrap();
            for (a, f) in grads.dx.unwrap().data().iter().zip(&fdx) {
                assert!((a - f).abs() < 1e-7, "dx stride {stride:?}");
            }
            let fdk = reference::fd_gradient(&k, 1e-6, |p| Ok(loss(&x, p, &bias))).unwrap();
            for (a, f) in grads.dk.unwrap().data().iter().zip(&fdk) {
                assert!((a - f).abs() < 1e-7, "dk stride {stride:?}");
            }
            let fdb = reference::fd_gradient(&bias, 1e-6, |p| Ok(loss(&x, &k, p))).unwrap();
            for (a, f) in grads.dbias.unwrap().data().iter().zip(&fdb) {
                assert!((a - f).abs() < 1e-7, "dbias stride {stride:?}");
            }
        }
    }
}
