//! Binary morphology with rectangular all-ones structuring elements.
//!
//! A `k`-wide window covers offsets `-(k-1)/2 ..= k/2` (floor/ceil), so a
//! 10×10 kernel spans `[-4, +5]` on each axis. Pixels outside the image
//! count as background.

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

fn offsets(k: usize) -> (usize, usize) {
    ((k - 1) / 2, k / 2)
}

fn check_kernel(kw: usize, kh: usize) -> Result<()> {
    if kw == 0 || kh == 0 {
        return Err(Error::InvalidArgument(format!("kernel must be at least 1x1, got {kw}x{kh}")));
    }
    Ok(())
}

/// Summed-area table with a zero row and column prepended.
struct Integral {
    w1: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(mask: &BinaryMask) -> Self {
        let (w, h) = mask.dimensions();
        let w1 = w + 1;
        let mut sums = vec![0u32; w1 * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += mask.get(x, y) as u32;
                sums[(y + 1) * w1 + x + 1] = sums[y * w1 + x + 1] + row;
            }
        }
        Integral { w1, sums }
    }

    /// Foreground count in `[x0, x1) × [y0, y1)`.
    fn count(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> u32 {
        let s = |x: usize, y: usize| self.sums[y * self.w1 + x];
        s(x1, y1) + s(x0, y0) - s(x0, y1) - s(x1, y0)
    }
}

/// Keeps a pixel iff the whole window around it is foreground.
pub fn erode(mask: &BinaryMask, kw: usize, kh: usize) -> Result<BinaryMask> {
    check_kernel(kw, kh)?;
    let (w, h) = mask.dimensions();
    let (lx, rx) = offsets(kw);
    let (ly, ry) = offsets(kh);
    let table = Integral::new(mask);
    let full = (kw * kh) as u32;
    BinaryMask::from_fn(w, h, |x, y| {
        x >= lx
            && y >= ly
            && x + rx < w
            && y + ry < h
            && table.count(x - lx, y - ly, x + rx + 1, y + ry + 1) == full
    })
}

/// Sets a pixel iff any foreground pixel lies in the reflected window, so
/// that `erode(dilate(m))` is a closing with the same element.
pub fn dilate(mask: &BinaryMask, kw: usize, kh: usize) -> Result<BinaryMask> {
    check_kernel(kw, kh)?;
    let (w, h) = mask.dimensions();
    let (lx, rx) = offsets(kw);
    let (ly, ry) = offsets(kh);
    let table = Integral::new(mask);
    BinaryMask::from_fn(w, h, |x, y| {
        let x0 = x.saturating_sub(rx);
        let y0 = y.saturating_sub(ry);
        let x1 = (x + lx + 1).min(w);
        let y1 = (y + ly + 1).min(h);
        table.count(x0, y0, x1, y1) > 0
    })
}

/// Dilation followed by erosion; fills holes smaller than the kernel.
pub fn close(mask: &BinaryMask, kw: usize, kh: usize) -> Result<BinaryMask> {
    erode(&dilate(mask, kw, kh)?, kw, kh)
}
