//! Resampling with half-pixel centers: `src = (dst + 0.5) * in / out - 0.5`.

use super::{round_to_u8, BinaryMask, ImageU8};
use crate::error::{Error, Result};

fn check_target(out_w: usize, out_h: usize) -> Result<()> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {out_w}x{out_h}"
        )));
    }
    Ok(())
}

/// Source sample positions for one axis: (lower index, upper index, weight of upper).
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    let last = (input - 1) as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn nearest_index(d: usize, input: usize, output: usize) -> usize {
    let src = ((d as f64 + 0.5) * input as f64 / output as f64).floor() as usize;
    src.min(input - 1)
}

pub fn resize_bilinear(image: &ImageU8, out_w: usize, out_h: usize) -> Result<ImageU8> {
    check_target(out_w, out_h)?;
    if image.dimensions() == (out_w, out_h) {
        return Ok(image.clone());
    }
    let c = image.channels();
    let xs = bilinear_taps(image.width(), out_w);
    let ys = bilinear_taps(image.height(), out_h);
    let src = image.pixels();
    let row = image.width() * c;
    let mut out = Vec::with_capacity(out_w * out_h * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let at = |x: usize, y: usize| src[y * row + x * c + ch] as f64;
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                out.push(round_to_u8(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    ImageU8::new(out_w, out_h, c, out)
}

pub fn resize_mask_nearest(mask: &BinaryMask, out_w: usize, out_h: usize) -> Result<BinaryMask> {
    check_target(out_w, out_h)?;
    let (w, h) = mask.dimensions();
    let xs: Vec<usize> = (0..out_w).map(|d| nearest_index(d, w, out_w)).collect();
    let mut bits = Vec::with_capacity(out_w * out_h);
    for dy in 0..out_h {
        let sy = nearest_index(dy, h, out_h);
        let row = &mask.bits()[sy * w..(sy + 1) * w];
        bits.extend(xs.iter().map(|&sx| row[sx]));
    }
    BinaryMask::new(out_w, out_h, bits)
}
