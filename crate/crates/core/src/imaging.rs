//! Image containers and the conversions at the I/O boundary.
//!
//! Every pixel inside the pipeline is an `f32` in `[0, 1]`. 8-bit values are
//! mapped to `v / 255` on load and rounded back on save. Bilinear resampling
//! uses the half-pixel-centers convention (`align_corners = false`): output
//! pixel `d` samples source coordinate `(d + 0.5) * in / out - 0.5`.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorSpace {
    Rgb,
    Gray,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Rgb => 3,
            ColorSpace::Gray => 1,
        }
    }
}

/// An `H x W x C` image with interleaved `f32` samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    color_space: ColorSpace,
    pixels: Vec<f32>,
}

impl Raster {
    pub fn new(
        height: usize,
        width: usize,
        color_space: ColorSpace,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        let expected = height * width * color_space.channels();
        if pixels.len() != expected {
            return Err(Error::mismatch(expected, pixels.len()));
        }
        if height == 0 || width == 0 {
            return Err(Error::Argument("raster dimensions must be positive".into()));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Raster {
            height,
            width,
            color_space,
            pixels,
        })
    }

    /// Builds a raster, clamping every sample into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(
        height: usize,
        width: usize,
        color_space: ColorSpace,
        mut pixels: Vec<f32>,
    ) -> Result<Self> {
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Raster::new(height, width, color_space, pixels)
    }

    pub fn filled(
        height: usize,
        width: usize,
        color_space: ColorSpace,
        value: f32,
    ) -> Result<Self> {
        Raster::new(
            height,
            width,
            color_space,
            vec![value; height * width * color_space.channels()],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.color_space.channels()
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color_space
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels() + c]
    }

    /// Writes a sample, clamping it into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let ch = self.channels();
        self.pixels[(y * self.width + x) * ch + c] = v.clamp(0.0, 1.0);
    }

    /// Luma conversion (`0.299 R + 0.587 G + 0.114 B`); gray rasters are cloned.
    pub fn to_gray(&self) -> Raster {
        match self.color_space {
            ColorSpace::Gray => self.clone(),
            ColorSpace::Rgb => {
                let pixels = self
                    .pixels
                    .chunks_exact(3)
                    .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
                    .collect();
                Raster {
                    height: self.height,
                    width: self.width,
                    color_space: ColorSpace::Gray,
                    pixels,
                }
            }
        }
    }

    /// Replicates a gray raster into three channels; RGB rasters are cloned.
    pub fn to_rgb(&self) -> Raster {
        match self.color_space {
            ColorSpace::Rgb => self.clone(),
            ColorSpace::Gray => Raster {
                height: self.height,
                width: self.width,
                color_space: ColorSpace::Rgb,
                pixels: self.pixels.iter().flat_map(|&v| [v, v, v]).collect(),
            },
        }
    }

    /// Copies the `h x w` window anchored at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Raster> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::Argument(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let ch = self.channels();
        let mut pixels = Vec::with_capacity(h * w * ch);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * ch;
            pixels.extend_from_slice(&self.pixels[start..start + w * ch]);
        }
        Ok(Raster {
            height: h,
            width: w,
            color_space: self.color_space,
            pixels,
        })
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| quantize(v)).collect();
        match self.color_space {
            ColorSpace::Rgb => DynamicImage::ImageRgb8(
                RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
                    .expect("buffer size checked"),
            ),
            ColorSpace::Gray => DynamicImage::ImageLuma8(
                GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
                    .expect("buffer size checked"),
            ),
        }
    }

    pub fn from_dynamic(img: &DynamicImage) -> Result<Raster> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (color_space, bytes) = match img {
            DynamicImage::ImageLuma8(g) => (ColorSpace::Gray, g.as_raw().clone()),
            DynamicImage::ImageLumaA8(_) => (ColorSpace::Gray, img.to_luma8().into_raw()),
            DynamicImage::ImageRgb8(rgb) => (ColorSpace::Rgb, rgb.as_raw().clone()),
            DynamicImage::ImageRgba8(_) => (ColorSpace::Rgb, img.to_rgb8().into_raw()),
            other => {
                return Err(Error::Format(format!(
                    "unsupported pixel layout {:?}; only 8-bit gray/RGB images are accepted",
                    other.color()
                )))
            }
        };
        Raster::new(
            h,
            w,
            color_space,
            bytes.into_iter().map(|b| b as f32 / 255.0).collect(),
        )
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decodes a PNG or JPEG file into a raster.
pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Decodes an in-memory PNG or JPEG payload.
pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Format(e.to_string()))?;
    Raster::from_dynamic(&img)
}

/// Writes an 8-bit PNG.
pub fn save_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    raster
        .to_dynamic()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn encode_png(img: &DynamicImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out.into_inner())
}

/// A binary `H x W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::mismatch(height * width, pixels.len()));
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(Error::Argument("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x) as u8);
            }
        }
        BinaryMask {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.pixels[y * self.width + x] = v as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }

    /// Nearest-neighbour resize; preserves binarity.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<BinaryMask> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Argument("output dimensions must be positive".into()));
        }
        let mut pixels = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let sy = ((y as f64 + 0.5) * self.height as f64 / out_h as f64).floor() as usize;
            let sy = sy.min(self.height - 1);
            for x in 0..out_w {
                let sx = ((x as f64 + 0.5) * self.width as f64 / out_w as f64).floor() as usize;
                pixels.push(self.pixels[sy * self.width + sx.min(self.width - 1)]);
            }
        }
        Ok(BinaryMask {
            height: out_h,
            width: out_w,
            pixels,
        })
    }

    /// Smallest `(y0, x0, y1, x1)` box (exclusive end) containing every set pixel.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bbox = Some(match bbox {
                        None => (y, x, y + 1, x + 1),
                        Some((y0, x0, y1, x1)) => {
                            (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1))
                        }
                    });
                }
            }
        }
        bbox
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.pixels
                .iter()
                .map(|&p| if p != 0 { 255 } else { 0 })
                .collect(),
        )
        .expect("buffer size checked")
    }
}

/// Reads an 8-bit mask PNG, binarizing at 128.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let gray = match &img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => img.to_luma8(),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported mask layout {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    let pixels = gray
        .into_raw()
        .into_iter()
        .map(|b| (b >= 128) as u8)
        .collect();
    BinaryMask::new(h as usize, w as usize, pixels)
}

/// Writes a mask as an 8-bit PNG with values `{0, 255}`.
pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    mask.to_gray_image()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// A single-channel map of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

const AMAP_MAGIC: &[u8; 4] = b"AMAP";

impl FloatMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::mismatch(height * width, values.len()));
        }
        if height == 0 || width == 0 {
            return Err(Error::Argument("map dimensions must be positive".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("map values must be finite".into()));
        }
        Ok(FloatMap {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        FloatMap::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.values
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn argmax(&self) -> (usize, usize) {
        let (idx, _) =
            self.values
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                });
        (idx / self.width, idx % self.width)
    }

    /// Pixels with value `>= threshold`.
    pub fn threshold(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            pixels: self
                .values
                .iter()
                .map(|&v| (v >= threshold) as u8)
                .collect(),
        }
    }

    /// Serializes to the `AMAP` container: 16-byte header then row-major little-endian `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.values.len());
        out.extend_from_slice(AMAP_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FloatMap> {
        if bytes.len() < 16 || &bytes[..4] != AMAP_MAGIC {
            return Err(Error::Format("missing AMAP header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (h, w) = (word(4), word(8));
        let body = &bytes[16..];
        if body.len() != 4 * h * w {
            return Err(Error::Format(format!(
                "AMAP body holds {} bytes, header declares {h}x{w}",
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FloatMap::new(h, w, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FloatMap> {
        let path = path.as_ref();
        FloatMap::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Bilinear resampling shared by rasters and maps.
pub trait Resample: Sized {
    fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self>;
}

impl Resample for Raster {
    fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Raster> {
        let pixels = resize_interleaved(
            &self.pixels,
            self.height,
            self.width,
            self.channels(),
            out_h,
            out_w,
        )?;
        // Convex combinations of values in [0, 1] stay in range up to rounding.
        Raster::from_clamped(out_h, out_w, self.color_space, pixels)
    }
}

impl Resample for FloatMap {
    fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<FloatMap> {
        let values = resize_interleaved(&self.values, self.height, self.width, 1, out_h, out_w)?;
        FloatMap::new(out_h, out_w, values)
    }
}

/// Source sampling table for one axis: `(lower index, upper index, upper weight)`.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

pub(crate) fn resize_interleaved(
    data: &[f32],
    h: usize,
    w: usize,
    ch: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f32>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument(format!(
            "output size {out_h}x{out_w} must be positive"
        )));
    }
    if out_h == h && out_w == w {
        return Ok(data.to_vec());
    }
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w * ch);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..ch {
                let p = |y: usize, x: usize| data[(y * w + x) * ch + c];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                let v = top + (bottom - top) * fy;
                // Clamp against rounding so the output never leaves the local range.
                let lo = p(y0, x0).min(p(y0, x1)).min(p(y1, x0)).min(p(y1, x1));
                let hi = p(y0, x0).max(p(y0, x1)).max(p(y1, x0)).max(p(y1, x1));
                out.push(v.clamp(lo, hi));
            }
        }
    }
    Ok(out)
}

/// Normalizes a set of maps with one global `(min, max)`.
pub fn minmax_normalize(maps: &[FloatMap]) -> Result<Vec<FloatMap>> {
    let (lo, hi) = global_range(maps)?;
    maps.iter()
        .map(|m| normalize_with(m, lo, hi, false))
        .collect()
}

/// Joint `(min, max)` over every value of every map.
pub fn global_range(maps: &[FloatMap]) -> Result<(f32, f32)> {
    if maps.is_empty() {
        return Err(Error::Argument("cannot normalize an empty map list".into()));
    }
    let lo = maps.iter().map(FloatMap::min).fold(f32::INFINITY, f32::min);
    let hi = maps
        .iter()
        .map(FloatMap::max)
        .fold(f32::NEG_INFINITY, f32::max);
    if hi <= lo {
        return Err(Error::DegenerateRange { value: lo });
    }
    Ok((lo, hi))
}

/// Applies `(v - lo) / (hi - lo)`, optionally clamping to `[0, 1]`.
pub fn normalize_with(map: &FloatMap, lo: f32, hi: f32, clamp: bool) -> Result<FloatMap> {
    if !(hi > lo) {
        return Err(Error::DegenerateRange { value: lo });
    }
    let span = (hi as f64) - (lo as f64);
    let values = map
        .values
        .iter()
        .map(|&v| {
            let n = ((v as f64 - lo as f64) / span) as f32;
            if clamp {
                n.clamp(0.0, 1.0)
            } else {
                n
            }
        })
        .collect();
    FloatMap::new(map.height, map.width, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray_png(dir: &Path, name: &str, w: u32, h: u32, v: u8) -> std::path::PathBuf {
        let path = dir.join(name);
        GrayImage::from_pixel(w, h, image::Luma([v]))
            .save(&path)
            .unwrap();
        path
    }

    #[test]
    fn load_black_white_and_midgray() {
        let dir = tempfile::tempdir().unwrap();
        let black = load_raster(gray_png(dir.path(), "b.png", 2, 2, 0)).unwrap();
        assert!(black.pixels().iter().all(|&v| v == 0.0));
        let white = load_raster(gray_png(dir.path(), "w.png", 2, 2, 255)).unwrap();
        assert!(white.pixels().iter().all(|&v| v == 1.0));
        let mid = load_raster(gray_png(dir.path(), "m.png", 2, 2, 128)).unwrap();
        assert!((mid.get(0, 0, 0) - 128.0 / 255.0).abs() < 1e-7);
        assert!((mid.get(0, 0, 0) - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn load_missing_and_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_raster(dir.path().join("nope.png")),
            Err(Error::Io { .. })
        ));
        let bad = dir.path().join("bad.png");
        fs::write(&bad, b"not an image").unwrap();
        assert!(matches!(load_raster(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn sixteen_bit_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_pixel(2, 2, image::Luma([1000]))
            .save(&path)
            .unwrap();
        assert!(matches!(load_raster(&path), Err(Error::Format(_))));
    }

    #[test]
    fn rgb_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<f32> = (0..5 * 7 * 3).map(|i| (i as f32 * 0.37).fract()).collect();
        let r = Raster::new(5, 7, ColorSpace::Rgb, pixels).unwrap();
        let path = dir.path().join("rt.png");
        save_raster(&r, &path).unwrap();
        let back = load_raster(&path).unwrap();
        assert_eq!(back.color_space(), ColorSpace::Rgb);
        for (a, b) in r.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn raster_rejects_out_of_range() {
        assert!(Raster::new(1, 1, ColorSpace::Gray, vec![1.5]).is_err());
        assert!(Raster::new(1, 1, ColorSpace::Rgb, vec![0.5]).is_err());
    }

    #[test]
    fn resize_constant_and_identity() {
        let m = FloatMap::filled(4, 4, 0.5).unwrap();
        let up = m.resize_bilinear(8, 8).unwrap();
        assert!(up.values().iter().all(|&v| v == 0.5));
        let m = FloatMap::new(2, 3, vec![0.1, 0.9, 0.3, 0.4, 0.2, 0.8]).unwrap();
        assert_eq!(m.resize_bilinear(2, 3).unwrap(), m);
        assert!(m.resize_bilinear(0, 3).is_err());
    }

    /// Reference bilinear sample at a continuous source coordinate.
    fn reference_sample(src: &[[f32; 2]; 2], sy: f64, sx: f64) -> f64 {
        let sy = sy.clamp(0.0, 1.0);
        let sx = sx.clamp(0.0, 1.0);
        let at = |y: usize, x: usize| src[y][x] as f64;
        (1.0 - sy) * ((1.0 - sx) * at(0, 0) + sx * at(0, 1))
            + sy * ((1.0 - sx) * at(1, 0) + sx * at(1, 1))
    }

    #[test]
    fn resize_checkerboard_matches_half_pixel_formula() {
        let src = [[0.0f32, 1.0], [1.0, 0.0]];
        let m = FloatMap::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = m.resize_bilinear(4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let sy = (y as f64 + 0.5) * 0.5 - 0.5;
                let sx = (x as f64 + 0.5) * 0.5 - 0.5;
                let want = reference_sample(&src, sy, sx);
                assert!((up.get(y, x) as f64 - want).abs() < 1e-6, "({y},{x})");
            }
        }
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            let v = up.get(y, x);
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn minmax_examples() {
        let out = minmax_normalize(&[FloatMap::new(1, 2, vec![0.2, 1.2]).unwrap()]).unwrap();
        assert_eq!(out[0].values(), &[0.0, 1.0]);

        let a = FloatMap::new(1, 2, vec![0.2, 0.7]).unwrap();
        let b = FloatMap::new(1, 2, vec![1.2, 0.5]).unwrap();
        let out = minmax_normalize(&[a, b]).unwrap();
        assert!((out[0].get(0, 1) - 0.5).abs() < 1e-6);

        let flat = FloatMap::filled(3, 3, 0.4).unwrap();
        assert!(matches!(
            minmax_normalize(&[flat.clone(), flat]),
            Err(Error::DegenerateRange { .. })
        ));
    }

    #[test]
    fn amap_container_layout() {
        let m = FloatMap::new(2, 3, vec![1.0, -2.0, 0.5, 3.25, 0.0, 7.0]).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"AMAP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(FloatMap::from_bytes(&bytes).unwrap(), m);
        assert!(FloatMap::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn mask_png_binarizes_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        GrayImage::from_raw(4, 1, vec![0, 127, 128, 255])
            .unwrap()
            .save(&path)
            .unwrap();
        let m = load_mask(&path).unwrap();
        assert_eq!(m.pixels(), &[0, 0, 1, 1]);
        save_mask(&m, &path).unwrap();
        let raw = image::open(&path).unwrap().to_luma8().into_raw();
        assert_eq!(raw, vec![0, 0, 255, 255]);
    }

    proptest! {
        #[test]
        fn resize_preserves_range(
            h in 1usize..7, w in 1usize..7, oh in 1usize..12, ow in 1usize..12,
            seed in proptest::collection::vec(-5.0f32..5.0, 49)
        ) {
            let m = FloatMap::new(h, w, seed[..h * w].to_vec()).unwrap();
            let r = m.resize_bilinear(oh, ow).unwrap();
            prop_assert_eq!((r.height(), r.width()), (oh, ow));
            prop_assert!(r.min() >= m.min());
            prop_assert!(r.max() <= m.max());
        }

        #[test]
        fn normalization_is_order_preserving(raw in proptest::collection::vec(-160i32..160, 2..40)) {
            let values: Vec<f32> = raw.iter().map(|&i| i as f32 / 16.0).collect();
            let split = values.len() / 2;
            let maps = vec![
                FloatMap::new(1, split.max(1), values[..split.max(1)].to_vec()).unwrap(),
                FloatMap::new(1, values.len() - split.max(1) , values[split.max(1)..].to_vec())
                    .unwrap_or_else(|_| FloatMap::filled(1, 1, values[0]).unwrap()),
            ];
            let all: Vec<f32> = maps.iter().flat_map(|m| m.values().to_vec()).collect();
            prop_assume!(all.iter().any(|&v| v != all[0]));
            let out = minmax_normalize(&maps).unwrap();
            let normed: Vec<f32> = out.iter().flat_map(|m| m.values().to_vec()).collect();
            for i in 0..all.len() {
                prop_assert!((0.0..=1.0).contains(&normed[i]));
                for j in 0..all.len() {
                    if all[i] < all[j] {
                        prop_assert!(normed[i] < normed[j]);
                    }
                }
            }
        }
    }
}
