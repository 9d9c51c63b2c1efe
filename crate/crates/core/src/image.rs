//! The RGB float raster every stage of the pipeline passes around.

use std::path::Path;

use image::{imageops, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, IoContext, Result};

pub const CHANNELS: usize = 3;

/// An `height × width × 3` image with interleaved channels and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// Wraps interleaved RGB data, rejecting empty shapes and values outside `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "empty shape {height}x{width}"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::InvalidImage(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage(format!(
                "value {} at flat index {bad} outside [0, 1]",
                data[bad]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from arbitrary values, clamping each into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    /// Builds an image from a per-pixel function returning RGB; values are clamped.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::from_clamped(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch {
                left: format!("{}x{}", self.height, self.width),
                right: format!("{}x{}", other.height, other.width),
            });
        }
        Ok(())
    }

    /// Planar `3 × H × W` copy of the pixel data.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * CHANNELS];
        for (p, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * plane + p] = px[c];
            }
        }
        out
    }

    /// Inverse of [`Image::to_planar`], clamping into `[0, 1]`.
    pub fn from_planar(height: usize, width: usize, planar: &[f32]) -> Result<Self> {
        let plane = height * width;
        if planar.len() != plane * CHANNELS {
            return Err(Error::InvalidImage(format!(
                "{} planar values for {height}x{width}x3",
                planar.len()
            )));
        }
        let mut data = vec![0.0; plane * CHANNELS];
        for p in 0..plane {
            for c in 0..CHANNELS {
                data[p * CHANNELS + c] = planar[c * plane + p];
            }
        }
        Self::from_clamped(height, width, data)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::InvalidImage(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in top..top + height {
            let start = (y * self.width + left) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + width * CHANNELS]);
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn center_crop(&self, height: usize, width: usize) -> Result<Image> {
        if height > self.height || width > self.width {
            return Err(Error::InvalidImage(format!(
                "center crop {height}x{width} larger than {}x{}",
                self.height, self.width
            )));
        }
        self.crop(
            (self.height - height) / 2,
            (self.width - width) / 2,
            height,
            width,
        )
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = (y * self.width + x) * CHANNELS;
                data.extend_from_slice(&self.data[i..i + CHANNELS]);
            }
        }
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Bilinear (triangle filter) resize.
    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "resize to empty shape {height}x{width}"
            )));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length checked at construction");
        let out = imageops::resize(
            &buf,
            width as u32,
            height as u32,
            imageops::FilterType::Triangle,
        );
        Image::from_clamped(height, width, out.into_raw())
    }

    /// Gaussian blur with standard deviation `sigma` pixels; `sigma <= 0` is a copy.
    pub fn blur(&self, sigma: f32) -> Image {
        if !(sigma > 0.0) {
            return self.clone();
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length checked at construction");
        let out = imageops::blur(&buf, sigma);
        Image::from_clamped(self.height, self.width, out.into_raw()).expect("same shape")
    }

    /// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| f32::from(quantize(*v)) / 255.0)
                .collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|v| quantize(*v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length checked at construction")
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|b| f32::from(*b) / 255.0).collect(),
        }
    }

    /// Loads any image file the codec understands, converting to 8-bit RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let reader = image::ImageReader::open(path).at(path)?;
        let decoded = reader
            .with_guessed_format()
            .at(path)?
            .decode()
            .map_err(|source| Error::Codec {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(Image::from_rgb8(&decoded.to_rgb8()))
    }

    /// Writes an 8-bit PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Codec {
                path: path.to_path_buf(),
                source,
            })
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(Image::new(0, 1, vec![]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn planar_round_trip() {
        let img = Image::from_fn(3, 5, |y, x| [y as f32 / 3.0, x as f32 / 5.0, 0.25]).unwrap();
        let back = Image::from_planar(3, 5, &img.to_planar()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn crop_and_flip() {
        let img = Image::from_fn(4, 4, |y, x| [(y * 4 + x) as f32 / 16.0, 0.0, 0.0]).unwrap();
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.pixel(0, 0)[0], 6.0 / 16.0);
        assert_eq!(c.flip_horizontal().pixel(0, 0)[0], 7.0 / 16.0);
        assert!(img.crop(3, 3, 2, 2).is_err());
    }

    #[test]
    fn blur_keeps_flat_images_and_spreads_edges() {
        let flat = Image::filled(9, 9, 0.4).unwrap();
        assert!(flat.blur(1.5).data().iter().all(|v| (v - 0.4).abs() < 1e-5));
        let step = Image::from_fn(9, 9, |_, x| [if x < 4 { 0.0 } else { 1.0 }; 3]).unwrap();
        assert_eq!(step.blur(0.0), step);
        let b = step.blur(1.0);
        assert!(b.pixel(4, 3)[0] > 0.05 && b.pixel(4, 4)[0] < 0.95);
        assert!(b.pixel(4, 0)[0] < b.pixel(4, 3)[0] && b.pixel(4, 3)[0] < b.pixel(4, 5)[0]);
    }

    #[test]
    fn png_round_trip_matches_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Image::from_fn(5, 7, |y, x| [0.1 * y as f32, 0.13 * x as f32, 0.333]).unwrap();
        img.save_png(&path).unwrap();
        assert_eq!(Image::load(&path).unwrap(), img.quantized());
    }
}
