//! Deterministic input preprocessing: encoder-ready images and fixed-length
//! token sequences.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, Rgb32FImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub mod tokenizer;

pub use tokenizer::{ClipBpeTokenizer, StubTokenizer, TokenSequence, Tokenizer, CONTEXT_LENGTH};

/// Side length the style encoder consumes.
pub const ENCODER_RESOLUTION: u32 = 224;

/// Per-channel normalization mean of the CLIP image towers.
pub const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
/// Per-channel normalization standard deviation of the CLIP image towers.
pub const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// A `3 × 224 × 224` channel-first normalized image.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedImage<T> {
    pixels: Tensor<T>,
}

impl<T: Scalar> PreprocessedImage<T> {
    /// Wraps an already-normalized `[3, H, W]` array; the encoder checks the
    /// spatial size on use.
    pub fn from_tensor(pixels: Tensor<T>) -> Result<Self> {
        if pixels.shape().len() != 3 || pixels.shape()[0] != 3 {
            return Err(Error::Shape(format!("expected [3, H, W] pixels, got {:?}", pixels.shape())));
        }
        if !pixels.all_finite() {
            return Err(Error::Invalid("non-finite pixel values".into()));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Value at channel `c`, row `y`, column `x`.
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        let (h, w) = (self.height(), self.width());
        self.pixels.data()[c * h * w + y * w + x]
    }
}

/// Decodes any supported file into 8-bit RGB, dropping alpha.
pub fn load_rgb(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)?;
    Ok(DynamicImage::ImageRgb8(img.to_rgb8()))
}

/// Resizes to 224×224 (triangle filter, antialiased when shrinking) and
/// normalizes each channel with the CLIP statistics.
pub fn preprocess_image<T: Scalar>(image: &DynamicImage) -> Result<PreprocessedImage<T>> {
    let rgb: Rgb32FImage = match image {
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgb32F(_) => image.to_rgb32f(),
        other => return Err(Error::Invalid(format!("expected an RGB image, got {:?}", other.color()))),
    };
    if rgb.width() == 0 || rgb.height() == 0 {
        return Err(Error::Invalid("image has no pixels".into()));
    }
    let side = ENCODER_RESOLUTION;
    let resized =
        if rgb.dimensions() == (side, side) { rgb } else { imageops::resize(&rgb, side, side, FilterType::Triangle) };
    let s = side as usize;
    let mut data = vec![T::zero(); 3 * s * s];
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            let v = (f64::from(px.0[c]) - CLIP_MEAN[c]) / CLIP_STD[c];
            data[c * s * s + y as usize * s + x as usize] = T::lit(v);
        }
    }
    PreprocessedImage::from_tensor(Tensor::from_vec(&[3, s, s], data)?)
}
