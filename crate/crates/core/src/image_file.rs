//! Image decoding and encoding around unit-range tensors.
//!
//! Loads land in [0, 1] as [1, H, W, C] with C of 1 or 3; saves quantize
//! half-up to 8 bits, so a round trip moves no pixel by more than 1/510.
//! Containers: PNG plus binary PPM/PGM.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ImageEncoder, ImageOutputFormat};
use std::path::Path;

fn img_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Image { path: path.display().to_string(), msg: msg.to_string() }
}

/// Decodes to a [1, H, W, C] tensor in [0, 1]. Grayscale sources keep one
/// channel; everything else is read as RGB.
pub fn load_image<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let img = image::open(path).map_err(|e| img_err(path, e))?;
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
    );
    Ok(if gray {
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        Tensor::from_fn([1, h as usize, w as usize, 1], |_, y, x, _| {
            E::of_f64(f64::from(g.get_pixel(x as u32, y as u32)[0]) / 255.0)
        })
    } else {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Tensor::from_fn([1, h as usize, w as usize, 3], |_, y, x, c| {
            E::of_f64(f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0)
        })
    })
}

fn quantize<E: Element>(t: &Tensor<E>) -> Vec<u8> {
    t.data()
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Encodes a [1, H, W, 1|3] tensor. The extension picks the container:
/// .png for either layout, .pgm for single-channel, .ppm for three.
/// Writing is atomic like every other artifact.
pub fn save_image<E: Element>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let [n, h, w, c] = t.shape();
    if n != 1 || (c != 1 && c != 3) {
        return Err(img_err(
            path,
            format!("expected one [1,H,W,1|3] frame, got {}", crate::tensor::fmt_shape(t.shape())),
        ));
    }
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let pixels = quantize(t);
    let color = if c == 1 { image::ColorType::L8 } else { image::ColorType::Rgb8 };
    let mut bytes = Vec::new();
    match ext.as_str() {
        "png" => {
            let dynimg = raw_to_dynamic(path, w, h, c, pixels)?;
            let mut cursor = std::io::Cursor::new(&mut bytes);
            dynimg
                .write_to(&mut cursor, ImageOutputFormat::Png)
                .map_err(|e| img_err(path, e))?;
        }
        "ppm" if c == 3 => {
            PnmEncoder::new(&mut bytes)
                .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                .write_image(&pixels, w as u32, h as u32, color)
                .map_err(|e| img_err(path, e))?;
        }
        "pgm" if c == 1 => {
            PnmEncoder::new(&mut bytes)
                .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
                .write_image(&pixels, w as u32, h as u32, color)
                .map_err(|e| img_err(path, e))?;
        }
        "ppm" | "pgm" => {
            return Err(img_err(
                path,
                format!("{c}-channel data does not fit .{ext}; use .png or match the channel count"),
            ));
        }
        other => {
            return Err(img_err(path, format!("unsupported image extension '{other}'")));
        }
    }
    crate::model_file::atomic_write(path, &bytes)
}

fn raw_to_dynamic(path: &Path, w: usize, h: usize, c: usize, pixels: Vec<u8>) -> Result<DynamicImage> {
    if c == 1 {
        image::GrayImage::from_raw(w as u32, h as u32, pixels)
            .map(DynamicImage::ImageLuma8)
            .ok_or_else(|| img_err(path, "buffer size mismatch"))
    } else {
        image::RgbImage::from_raw(w as u32, h as u32, pixels)
            .map(DynamicImage::ImageRgb8)
            .ok_or_else(|| img_err(path, "buffer size mismatch"))
    }
}

/// Mirror-pads the bottom and right edges until both extents divide by the
/// block, reflecting across the border pixel. Refuses pads wider than the
/// image, which would need wrap-around sources.
pub fn pad_reflect<E: Element>(t: &Tensor<E>, block_h: usize, block_w: usize) -> Result<Tensor<E>> {
    let [n, h, w, c] = t.shape();
    let ho = h.div_ceil(block_h) * block_h;
    let wo = w.div_ceil(block_w) * block_w;
    if ho - h > h || wo - w > w {
        return Err(Error::config(format!(
            "cannot reflect-pad {h}x{w} out to {ho}x{wo}; the border exceeds the image"
        )));
    }
    Ok(Tensor::from_fn([n, ho, wo, c], |b, y, x, ch| {
        let sy = if y < h { y } else { 2 * h - 1 - y };
        let sx = if x < w { x } else { 2 * w - 1 - x };
        t.at(b, sy, sx, ch)
    }))
}

/// Drops padded rows and columns, keeping the top-left `h` x `w` window.
pub fn crop_spatial<E: Element>(t: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    let [n, th, tw, c] = t.shape();
    if h > th || w > tw {
        return Err(Error::config(format!("cannot crop {th}x{tw} up to {h}x{w}")));
    }
    Ok(Tensor::from_fn([n, h, w, c], |b, y, x, ch| t.at(b, y, x, ch)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn round_trips_stay_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let cases: [(&str, usize); 4] =
            [("a.png", 3), ("b.png", 1), ("c.ppm", 3), ("d.pgm", 1)];
        for (name, channels) in cases {
            let x = random_image([1, 9, 13, channels], 7);
            let path = dir.path().join(name);
            save_image(&path, &x).unwrap();
            let back: Tensor<f32> = load_image(&path).unwrap();
            assert_eq!(back.shape(), x.shape(), "{name}");
            let worst = back.max_abs_diff(&x);
            assert!(worst <= 1.0 / 510.0 + 1e-6, "{name}: worst {worst}");
        }
    }

    #[test]
    fn quantization_rounds_half_up_and_clamps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.png");
        let x = Tensor::<f32>::from_vec(
            [1, 1, 4, 1],
            vec![1.0 / 510.0, -0.25, 1.25, 0.0],
        )
        .unwrap();
        save_image(&path, &x).unwrap();
        let back: Tensor<f64> = load_image(&path).unwrap();
        assert!((back.at(0, 0, 0, 0) - 1.0 / 255.0).abs() < 1e-9, "half went down");
        assert_eq!(back.at(0, 0, 1, 0), 0.0);
        assert_eq!(back.at(0, 0, 2, 0), 1.0);
        assert_eq!(back.at(0, 0, 3, 0), 0.0);
    }

    #[test]
    fn extension_channel_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = random_image([1, 4, 4, 3], 1);
        let gray = random_image([1, 4, 4, 1], 2);
        assert!(save_image(&dir.path().join("x.pgm"), &rgb).is_err());
        assert!(save_image(&dir.path().join("x.ppm"), &gray).is_err());
        assert!(save_image(&dir.path().join("x.bmp"), &rgb).is_err());
        assert!(load_image::<f32>(&dir.path().join("absent.png")).is_err());
    }

    #[test]
    fn reflect_padding_mirrors_and_cropping_undoes() {
        let x = random_image([1, 5, 7, 2], 3);
        let padded = pad_reflect(&x, 4, 4).unwrap();
        assert_eq!(padded.shape(), [1, 8, 8, 2]);
        for c in 0..2 {
            assert_eq!(padded.at(0, 5, 0, c), x.at(0, 4, 0, c));
            assert_eq!(padded.at(0, 7, 0, c), x.at(0, 2, 0, c));
            assert_eq!(padded.at(0, 0, 7, c), x.at(0, 0, 6, c));
        }
        let back = crop_spatial(&padded, 5, 7).unwrap();
        assert_eq!(back.max_abs_diff(&x), 0.0);

        let tiny = random_image([1, 2, 2, 1], 4);
        assert!(pad_reflect(&tiny, 8, 8).is_err());
    }
}
