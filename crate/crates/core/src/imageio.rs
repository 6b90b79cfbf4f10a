//! Lossless image and mask files. Images are `[h, w, 3]` tensors in
//! `[-1, 1]`; masks are 8-bit grayscale with `{0, 255}` values, read back
//! with a threshold at 128.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use promptpaint_autograd::Tensor;

use crate::maskgen::Mask;
use crate::{Error, Result};

pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

fn check_rgb(img: &Tensor<f32>) -> Result<(usize, usize)> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("expected an [h, w, 3] image, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

pub fn to_rgb8(img: &Tensor<f32>) -> Result<RgbImage> {
    let (h, w) = check_rgb(img)?;
    let raw: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from shape"))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| from_u8(v)).collect();
    Tensor::new(&[h as usize, w as usize, 3], data).expect("rgb buffer")
}

/// Rounds an image through its 8-bit representation.
pub fn quantize(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| from_u8(to_u8(v)))
}

pub fn mask_to_gray(m: &Mask) -> GrayImage {
    let raw = m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    GrayImage::from_raw(m.width() as u32, m.height() as u32, raw).expect("mask buffer")
}

pub fn mask_from_gray(img: &GrayImage) -> Mask {
    let (w, h) = img.dimensions();
    let bits = img.as_raw().iter().map(|&v| v >= 128).collect();
    Mask::from_bits(h as usize, w as usize, bits).expect("gray buffer")
}

pub fn encode_png_rgb(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_rgb8(img)?.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn encode_png_mask(m: &Mask) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    mask_to_gray(m).write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Decodes any lossless image to RGB.
pub fn decode_rgb(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    Ok(mask_from_gray(&img.to_luma8()))
}

pub fn save_rgb(path: &Path, img: &Tensor<f32>) -> Result<()> {
    to_rgb8(img)?.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

pub fn save_mask(path: &Path, m: &Mask) -> Result<()> {
    mask_to_gray(m).save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    decode_rgb(&std::fs::read(path)?)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    decode_mask(&std::fs::read(path)?)
}

/// Bilinear resampling of an `[h, w, c]` image with pixel-centre alignment.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("resize expects [h, w, c], got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    crop_resize(img, (0.0, 0.0, h as f64, w as f64), out_h, out_w).inspect(|t| {
        debug_assert_eq!(t.shape(), &[out_h, out_w, c]);
    })
}

/// Samples the window `(y0, x0, y1, x1)` (continuous pixel-edge
/// coordinates) onto an `out_h × out_w` grid with bilinear interpolation.
pub fn crop_resize(img: &Tensor<f32>, window: (f64, f64, f64, f64), out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("crop expects [h, w, c], got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (y0, x0, y1, x1) = window;
    if !(y1 > y0 && x1 > x0) {
        return Err(Error::Shape(format!("empty crop window {window:?}")));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    let sample = |pos: f64, n: usize| -> (usize, usize, f32) {
        let p = (pos - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (p - i0 as f64) as f32)
    };
    for oy in 0..out_h {
        let sy = y0 + (oy as f64 + 0.5) * (y1 - y0) / out_h as f64;
        let (ya, yb, fy) = sample(sy, h);
        for ox in 0..out_w {
            let sx = x0 + (ox as f64 + 0.5) * (x1 - x0) / out_w as f64;
            let (xa, xb, fx) = sample(sx, w);
            for ch in 0..c {
                let at = |y: usize, x: usize| d[(y * w + x) * c + ch];
                let top = at(ya, xa) * (1.0 - fx) + at(ya, xb) * fx;
                let bot = at(yb, xa) * (1.0 - fx) + at(yb, xb) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::new(&[out_h, out_w, c], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_round_trip_is_exact() {
        for v in 0..=255u8 {
            assert_eq!(to_u8(from_u8(v)), v);
        }
    }

    #[test]
    fn png_round_trips() {
        let img = Tensor::new(&[2, 3, 3], (0..18).map(|i| from_u8(i * 14)).collect()).unwrap();
        let back = decode_rgb(&encode_png_rgb(&img).unwrap()).unwrap();
        assert_eq!(back, img);
        let m = Mask::from_fn(4, 5, |y, x| (x + y) % 3 == 0);
        assert_eq!(decode_mask(&encode_png_mask(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn gray_threshold_at_128() {
        let g = GrayImage::from_raw(3, 1, vec![127, 128, 200]).unwrap();
        assert_eq!(mask_from_gray(&g).bits(), &[false, true, true]);
    }

    #[test]
    fn identity_resize() {
        let img = Tensor::new(&[3, 2, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(resize_bilinear(&img, 3, 2).unwrap(), img);
    }

    #[test]
    fn not_a_png() {
        assert!(decode_rgb(b"definitely not an image").is_err());
    }
}
