//! Single-channel images with values in [0, 1], plus PGM/PNG I/O.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder};

use crate::error::{Error, Result};

/// Row-major grayscale raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::shape(
                "image",
                format!("{} pixels for {}x{}", data.len(), width, height),
            ));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Copies the `width x height` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::shape(
                "crop",
                format!(
                    "{}x{} window at ({}, {}) exceeds {}x{} image",
                    width, height, x0, y0, self.width, self.height
                ),
            ));
        }
        Ok(Image::from_fn(width, height, |x, y| self.get(x0 + x, y0 + y)))
    }

    /// Zero-pads on the right and bottom to `width x height`.
    pub fn pad_to(&self, width: usize, height: usize) -> Result<Image> {
        if width < self.width || height < self.height {
            return Err(Error::shape(
                "pad",
                format!(
                    "cannot pad {}x{} down to {}x{}",
                    self.width, self.height, width, height
                ),
            ));
        }
        Ok(Image::from_fn(width, height, |x, y| {
            if x < self.width && y < self.height {
                self.get(x, y)
            } else {
                0.0
            }
        }))
    }

    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Reads PGM, PNG or any other format the `image` crate can decode as
    /// 8-bit grayscale, scaling to [0, 1] by 1/255.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let gray = image::open(path.as_ref())?.to_luma8();
        let (w, h) = gray.dimensions();
        let data = gray.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Image::new(w as usize, h as usize, data)
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Writes binary PGM (P5) for `.pgm` paths and PNG otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let pixels = self.to_gray8();
        let is_pgm = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
        if is_pgm {
            let out = BufWriter::new(File::create(path)?);
            PnmEncoder::new(out)
                .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
                .write_image(
                    &pixels,
                    self.width as u32,
                    self.height as u32,
                    ExtendedColorType::L8,
                )?;
        } else {
            let img = GrayImage::from_raw(self.width as u32, self.height as u32, pixels)
                .expect("buffer size matches dimensions");
            img.save(path)?;
        }
        Ok(())
    }
}
