//! 8-bit rasters and binary masks: representation, codecs, resampling,
//! grayscale conversion and overlay rendering.

mod codec;
mod resize;

pub use codec::{load_image, load_mask, save_image, save_mask, DEFAULT_MASK_THRESHOLD};
pub use resize::{resize_bilinear, resize_mask_nearest};

use crate::error::{Error, Result};

/// Row-major, channel-interleaved 8-bit image with 1 or 3 channels.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ImageU8 {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::ChannelMismatch(format!(
                "expected 1 or 3 channels, got {channels}"
            )));
        }
        let expected = width * height * channels;
        if pixels.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "pixel buffer holds {} values, {width}x{height}x{channels} needs {expected}",
                pixels.len()
            )));
        }
        Ok(ImageU8 {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    /// Channel values of the pixel at `(x, y)`.
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let at = (y * self.width + x) * self.channels;
        &self.pixels[at..at + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let at = (y * self.width + x) * self.channels;
        &mut self.pixels[at..at + self.channels]
    }

    pub fn dimensions(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Per-pixel 0/1 segmentation label, row-major.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "mask buffer holds {} values, {width}x{height} needs {}",
                bits.len(),
                width * height
            )));
        }
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask values must be 0 or 1, found {bad}"
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0; width * height])
    }

    pub fn ones(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![1; width * height])
    }

    /// Builds a mask from a predicate over pixel coordinates.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y) as u8);
            }
        }
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dimensions(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on as u8;
    }

    /// Number of 1-pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    /// Coordinates of every 1-pixel in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(move |(i, _)| (i % w, i / w))
    }
}

/// Round-half-up to the nearest integer, clamped to the 8-bit range.
pub(crate) fn round_to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// BT.601 luma replicated into all three channels.
///
/// Integer arithmetic keeps the result exact, so the conversion is idempotent.
pub fn to_grayscale3(image: &ImageU8) -> Result<ImageU8> {
    if image.channels != 3 {
        return Err(Error::ChannelMismatch(format!(
            "grayscale conversion needs 3 channels, got {}",
            image.channels
        )));
    }
    let mut out = image.pixels.clone();
    for px in out.chunks_exact_mut(3) {
        let luma =
            (299 * px[0] as u32 + 587 * px[1] as u32 + 114 * px[2] as u32 + 500) / 1000;
        let luma = luma.min(255) as u8;
        px.fill(luma);
    }
    ImageU8::new(image.width, image.height, 3, out)
}

/// Replicates a single-channel image into three channels; 3-channel input is cloned.
pub fn to_rgb(image: &ImageU8) -> ImageU8 {
    if image.channels == 3 {
        return image.clone();
    }
    let pixels = image.pixels.iter().flat_map(|&v| [v, v, v]).collect();
    ImageU8 {
        width: image.width,
        height: image.height,
        channels: 3,
        pixels,
    }
}

/// Alpha-blends `color` over the pixels selected by `mask`.
pub fn overlay(image: &ImageU8, mask: &BinaryMask, color: [u8; 3], alpha: f64) -> Result<ImageU8> {
    if image.channels != 3 {
        return Err(Error::ChannelMismatch(format!(
            "overlay needs a 3-channel image, got {}",
            image.channels
        )));
    }
    if image.dimensions() != mask.dimensions() {
        return Err(Error::DimensionMismatch(format!(
            "image is {}x{}, mask is {}x{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let mut out = image.clone();
    for (px, &bit) in out.pixels.chunks_exact_mut(3).zip(&mask.bits) {
        if bit == 1 {
            for (v, &c) in px.iter_mut().zip(&color) {
                *v = round_to_u8((1.0 - alpha) * *v as f64 + alpha * c as f64);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(r: u8, g: u8, b: u8) -> ImageU8 {
        ImageU8::new(1, 1, 3, vec![r, g, b]).unwrap()
    }

    #[test]
    fn image_invariants_enforced() {
        assert!(ImageU8::new(0, 1, 1, vec![]).is_err());
        assert!(ImageU8::new(1, 1, 2, vec![0, 0]).is_err());
        assert!(ImageU8::new(2, 2, 1, vec![0; 3]).is_err());
        assert!(BinaryMask::new(2, 1, vec![0, 2]).is_err());
    }

    #[test]
    fn grayscale_values() {
        assert_eq!(to_grayscale3(&rgb(100, 100, 100)).unwrap().pixels(), &[100; 3]);
        assert_eq!(to_grayscale3(&rgb(255, 0, 0)).unwrap().pixels(), &[76; 3]);
        assert_eq!(to_grayscale3(&rgb(0, 0, 255)).unwrap().pixels(), &[29; 3]);
        assert_eq!(to_grayscale3(&rgb(255, 255, 255)).unwrap().pixels(), &[255; 3]);
    }

    #[test]
    fn grayscale_rejects_single_channel() {
        let img = ImageU8::filled(2, 2, 1, 9).unwrap();
        assert!(matches!(to_grayscale3(&img), Err(Error::ChannelMismatch(_))));
    }

    #[test]
    fn overlay_blending() {
        let img = ImageU8::new(2, 1, 3, vec![0, 0, 0, 10, 20, 30]).unwrap();
        let mask = BinaryMask::new(2, 1, vec![1, 0]).unwrap();
        let half = overlay(&img, &mask, [255, 0, 0], 0.5).unwrap();
        assert_eq!(half.pixels(), &[128, 0, 0, 10, 20, 30]);
        assert_eq!(overlay(&img, &mask, [255, 0, 0], 0.0).unwrap(), img);
        let full = overlay(&img, &BinaryMask::ones(2, 1).unwrap(), [1, 2, 3], 1.0).unwrap();
        assert_eq!(full.pixels(), &[1, 2, 3, 1, 2, 3]);
    }

    #[test]
    fn overlay_dimension_mismatch() {
        let img = ImageU8::filled(2, 2, 3, 0).unwrap();
        let mask = BinaryMask::zeros(3, 2).unwrap();
        assert!(matches!(
            overlay(&img, &mask, [0, 0, 0], 0.5),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
