//! Float RGB images in `[0, 1]`, stored row-major as interleaved `HxWx3`.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Rgb, Rgb32FImage};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "expected {} values for a {width}x{height} RGB image, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-planar copy (`3xHxW`), the layout tensors use.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            out[p] = px[0];
            out[n + p] = px[1];
            out[2 * n + p] = px[2];
        }
        out
    }

    pub fn from_planar(width: usize, height: usize, planar: &[f32]) -> Result<Self> {
        let n = width * height;
        if planar.len() != 3 * n {
            return Err(Error::Shape(format!("planar buffer has {} values, want {}", planar.len(), 3 * n)));
        }
        let mut data = Vec::with_capacity(3 * n);
        for p in 0..n {
            data.extend_from_slice(&[planar[p], planar[n + p], planar[2 * n + p]]);
        }
        Self::new(width, height, data)
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height || width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Self::new(width, height, data)
    }

    /// Box-filter downsampling by an integer factor; trailing rows/columns that do not fill a
    /// whole block are dropped.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("downsample factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width / factor, self.height / factor);
        if w == 0 || h == 0 {
            return Err(Error::Shape(format!("downsample {factor} collapses a {}x{} image", self.width, self.height)));
        }
        let norm = 1.0 / (factor * factor) as f32;
        Ok(Self::from_fn(w, h, |x, y| {
            let mut acc = [0.0f32; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = self.pixel(x * factor + dx, y * factor + dy);
                    acc[0] += p[0];
                    acc[1] += p[1];
                    acc[2] += p[2];
                }
            }
            [acc[0] * norm, acc[1] * norm, acc[2] * norm]
        }))
    }

    /// Bilinear (triangle filter) resize.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let buf: Rgb32FImage =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone()).expect("sized buffer");
        let out = image::imageops::resize(&buf, width as u32, height as u32, image::imageops::FilterType::Triangle);
        let mut data = out.into_raw();
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self { width, height, data }
    }

    /// Center crop to a square, then resize to `size x size`.
    pub fn square_resize(&self, size: usize) -> Self {
        let side = self.width.min(self.height);
        let x0 = (self.width - side) / 2;
        let y0 = (self.height - side) / 2;
        let sq = self.crop(x0, y0, side, side).expect("crop within bounds");
        sq.resize(size, size)
    }

    pub fn from_dynamic(img: DynamicImage, composite_on_white: bool) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if composite_on_white && img.color().has_alpha() {
            let rgba = img.to_rgba32f();
            let mut data = Vec::with_capacity(w * h * 3);
            for px in rgba.pixels() {
                let a = px[3];
                for c in 0..3 {
                    data.push(px[c] * a + (1.0 - a));
                }
            }
            Self { width: w, height: h, data }
        } else {
            let rgb = img.to_rgb32f();
            Self {
                width: w,
                height: h,
                data: rgb.into_raw(),
            }
        }
    }

    /// Decodes a raster file. Grayscale is replicated to three channels; alpha is composited
    /// onto white when requested and dropped otherwise.
    pub fn load(path: &Path, composite_on_white: bool) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::format(path, format!("cannot read image: {io}")),
            other => Error::format(path, format!("cannot decode image: {other}")),
        })?;
        Ok(Self::from_dynamic(img, composite_on_white))
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, bytes).expect("sized buffer")
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Ok(Self::from_dynamic(img, true))
    }

    /// Bytes of the raw float buffer, used for content hashing.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.width as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn mse(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape("mse on images of different sizes".into()));
    }
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for p in 0..a.width * a.height {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        for c in 0..3 {
            let d = (a.data[p * 3 + c] - b.data[p * 3 + c]) as f64;
            acc += d * d;
        }
        n += 3;
    }
    if n == 0 {
        return Err(Error::Empty("mse over an empty mask".into()));
    }
    Ok(acc / n as f64)
}

/// Peak signal-to-noise ratio in dB for unit-range images.
pub fn psnr(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<f64> {
    let m = mse(a, b, mask)?;
    Ok(-10.0 * m.max(1e-12).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_round_trip() {
        let img = Image::from_fn(3, 2, |x, y| [x as f32 * 0.1, y as f32 * 0.2, 0.5]);
        let back = Image::from_planar(3, 2, &img.to_planar()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = Image::from_fn(4, 2, |x, _| [x as f32, 0.0, 1.0]);
        let d = img.downsample(2).unwrap();
        assert_eq!((d.width(), d.height()), (2, 1));
        assert_eq!(d.pixel(0, 0), [0.5, 0.0, 1.0]);
        assert_eq!(d.pixel(1, 0), [2.5, 0.0, 1.0]);
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let img = Image::from_fn(5, 4, |x, y| [x as f32 / 4.0, y as f32 / 3.0, 0.25]);
        let back = Image::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn psnr_of_identical_images_is_large() {
        let img = Image::filled(4, 4, [0.3, 0.2, 0.1]);
        assert!(psnr(&img, &img, None).unwrap() > 100.0);
    }
}
