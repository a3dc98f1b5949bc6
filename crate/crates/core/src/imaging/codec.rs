//! Binary PGM (P5) / PPM (P6) reading and writing, maxval 255.
//!
//! PNG and JPEG decoding is available behind the `extra-codecs` feature.

use std::fs;
use std::path::Path;

use super::{BinaryMask, ImageU8};
use crate::error::{Error, Result};

/// Foreground threshold used when a mask file is binarized.
pub const DEFAULT_MASK_THRESHOLD: u8 = 128;

const MAX_SIDE: u64 = 1 << 16;

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageU8> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<ImageU8> {
    match bytes {
        [b'P', b'5', ..] => decode_pnm(bytes, 1),
        [b'P', b'6', ..] => decode_pnm(bytes, 3),
        [b'P', d, ..] if (b'1'..=b'7').contains(d) => Err(Error::UnsupportedFormat(format!(
            "netpbm variant P{} (only binary P5/P6 are supported)",
            *d as char
        ))),
        [0x89, b'P', b'N', b'G', ..] | [0xFF, 0xD8, 0xFF, ..] => decode_compressed(bytes),
        _ => Err(Error::UnsupportedFormat("unrecognized file signature".into())),
    }
}

#[cfg(feature = "extra-codecs")]
fn decode_compressed(bytes: &[u8]) -> Result<ImageU8> {
    use image::DynamicImage;

    let decoded =
        image::load_from_memory(bytes).map_err(|e| Error::MalformedImage(e.to_string()))?;
    let (w, h) = (decoded.width() as u64, decoded.height() as u64);
    check_dimensions(w, h)?;
    match decoded {
        DynamicImage::ImageLuma8(buf) => ImageU8::new(w as usize, h as usize, 1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => ImageU8::new(w as usize, h as usize, 3, buf.into_raw()),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgba8(_) => {
            let rgb = decoded.to_rgb8();
            ImageU8::new(w as usize, h as usize, 3, rgb.into_raw())
        }
        _ => Err(Error::UnsupportedFormat(
            "only 8-bit sources are supported".into(),
        )),
    }
}

#[cfg(not(feature = "extra-codecs"))]
fn decode_compressed(_bytes: &[u8]) -> Result<ImageU8> {
    Err(Error::UnsupportedFormat(
        "PNG/JPEG support requires the `extra-codecs` feature".into(),
    ))
}

fn check_dimensions(width: u64, height: u64) -> Result<()> {
    if width > MAX_SIDE || height > MAX_SIDE {
        return Err(Error::DimensionOverflow { width, height });
    }
    if width == 0 || height == 0 {
        return Err(Error::MalformedImage(format!(
            "zero dimension {width}x{height}"
        )));
    }
    Ok(())
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::MalformedImage(format!("missing {what} in header")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedImage(format!("{what} out of range")))
    }
}

fn decode_pnm(bytes: &[u8], channels: usize) -> Result<ImageU8> {
    let mut rd = HeaderReader { bytes, pos: 2 };
    let width = rd.number("width")?;
    let height = rd.number("height")?;
    let maxval = rd.number("maxval")?;
    check_dimensions(width, height)?;
    if maxval == 0 {
        return Err(Error::MalformedImage("maxval must be positive".into()));
    }
    if maxval > 255 {
        return Err(Error::UnsupportedFormat(format!(
            "maxval {maxval}: 16-bit samples are not supported"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(rd.pos) {
        Some(b) if b.is_ascii_whitespace() => rd.pos += 1,
        _ => return Err(Error::MalformedImage("header not terminated".into())),
    }
    let (w, h) = (width as usize, height as usize);
    let len = w * h * channels;
    let payload = &bytes[rd.pos..];
    if payload.len() < len {
        return Err(Error::MalformedImage(format!(
            "short read: expected {len} pixel bytes, found {}",
            payload.len()
        )));
    }
    let mut pixels = payload[..len].to_vec();
    if maxval != 255 {
        for v in &mut pixels {
            if u64::from(*v) > maxval {
                return Err(Error::MalformedImage(format!(
                    "sample {v} exceeds maxval {maxval}"
                )));
            }
            *v = ((u64::from(*v) * 255 + maxval / 2) / maxval) as u8;
        }
    }
    ImageU8::new(w, h, channels, pixels)
}

fn encode_pnm(image: &ImageU8) -> Vec<u8> {
    let magic = if image.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.pixels());
    out
}

/// Writes `image`, choosing the encoding from the file extension
/// (`.pgm` single channel, `.ppm` three channels, `.pnm` either).
pub fn save_image(image: &ImageU8, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = match (ext.as_str(), image.channels()) {
        ("pgm", 1) | ("ppm", 3) | ("pnm", _) => encode_pnm(image),
        ("pgm", c) | ("ppm", c) => {
            return Err(Error::ChannelMismatch(format!(
                "cannot write a {c}-channel image as .{ext}"
            )))
        }
        #[cfg(feature = "extra-codecs")]
        ("png", _) => return save_png(image, path),
        _ => {
            return Err(Error::UnsupportedFormat(format!(
                "cannot write extension {ext:?}"
            )))
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(feature = "extra-codecs")]
fn save_png(image: &ImageU8, path: &Path) -> Result<()> {
    let color = if image.channels() == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer(
        path,
        image.pixels(),
        image.width() as u32,
        image.height() as u32,
        color,
    )
    .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Loads a label image and binarizes its first channel at `threshold`.
pub fn load_mask(path: impl AsRef<Path>, threshold: u8) -> Result<BinaryMask> {
    let image = load_image(path)?;
    let c = image.channels();
    let bits = image
        .pixels()
        .chunks_exact(c)
        .map(|px| (px[0] >= threshold) as u8)
        .collect();
    BinaryMask::new(image.width(), image.height(), bits)
}

/// Writes a mask as a single-channel image with values {0, 255}.
pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let pixels = mask.bits().iter().map(|&b| b * 255).collect();
    let image = ImageU8::new(mask.width(), mask.height(), 1, pixels)?;
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => save_image(&super::to_rgb(&image), path),
        _ => save_image(&image, path),
    }
}
