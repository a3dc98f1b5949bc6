//! Training-time augmentation: random changing pixel value (RCPV) occlusion,
//! joint flips, lesion-preserving random crops, and their composition.
//!
//! All randomness comes from an explicit [`RngState`]; given the same inputs,
//! [`AugmentSpec`] and seed every function here is bit-reproducible.

use crate::error::{Error, Result};
use crate::geometry::{lesion_geometry, LesionGeometry};
use crate::imaging::{
    resize_bilinear, resize_mask_nearest, to_grayscale3, to_rgb, BinaryMask, ImageU8,
};
use crate::rng::RngState;

/// Where occlusion circle centers are drawn relative to the lesion centroid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CenterSampling {
    /// `[c, c + R]` per axis.
    #[default]
    Literal,
    /// `[c - R, c + R]` per axis.
    Symmetric,
}

/// Acceptance test applied to a drawn circle center.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CenterConstraint {
    /// Center within Euclidean distance R of the centroid.
    #[default]
    Euclidean,
    /// Center within R of the centroid along each axis separately.
    PerAxis,
}

/// Maximum center draws before an occlusion is abandoned.
pub const RCPV_MAX_ATTEMPTS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    /// Probability that RCPV modifies a sample.
    pub rcpv_apply_prob: f64,
    /// Fill values are drawn from `fill_low..fill_high`.
    pub fill_low: u16,
    pub fill_high: u16,
    pub center_sampling: CenterSampling,
    pub center_constraint: CenterConstraint,
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    /// Smallest crop side as a fraction of the image side, in (0, 1].
    pub crop_min_fraction: f64,
    pub grayscale_first: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            rcpv_apply_prob: 0.5,
            fill_low: 0,
            fill_high: 128,
            center_sampling: CenterSampling::Literal,
            center_constraint: CenterConstraint::Euclidean,
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            crop_min_fraction: 0.8,
            grayscale_first: true,
        }
    }
}

impl AugmentSpec {
    /// Every stage switched off.
    pub fn identity() -> Self {
        AugmentSpec {
            rcpv_apply_prob: 0.0,
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            crop_min_fraction: 1.0,
            grayscale_first: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1], got {p}"
                )))
            }
        };
        prob("rcpv_apply_prob", self.rcpv_apply_prob)?;
        prob("flip_h_prob", self.flip_h_prob)?;
        prob("flip_v_prob", self.flip_v_prob)?;
        if !(self.fill_low < self.fill_high && self.fill_high <= 256) {
            return Err(Error::InvalidArgument(format!(
                "fill range {}..{} must satisfy 0 <= low < high <= 256",
                self.fill_low, self.fill_high
            )));
        }
        if !(self.crop_min_fraction > 0.0 && self.crop_min_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "crop_min_fraction must lie in (0, 1], got {}",
                self.crop_min_fraction
            )));
        }
        Ok(())
    }
}

/// Integer center coordinate drawn from `[lo, hi]`, or the rounded
/// centroid when no integer falls inside the interval.
fn draw_center_axis(rng: &mut RngState, lo: f64, hi: f64, fallback: f64) -> i64 {
    let (a, b) = (lo.ceil() as i64, hi.floor() as i64);
    if a <= b {
        rng.range_inclusive(a, b)
    } else {
        fallback.round() as i64
    }
}

/// Random changing pixel value: replaces a random disc near the lesion
/// centroid with uniformly drawn intensities, one per pixel, written to
/// every channel.
pub fn rcpv(
    image: &ImageU8,
    geometry: &LesionGeometry,
    spec: &AugmentSpec,
    rng: &mut RngState,
) -> Result<ImageU8> {
    spec.validate()?;
    let (w, h) = image.dimensions();
    if geometry.centroid_x < 0.0
        || geometry.centroid_y < 0.0
        || geometry.centroid_x > (w - 1) as f64
        || geometry.centroid_y > (h - 1) as f64
    {
        return Err(Error::DimensionMismatch(format!(
            "lesion centroid ({}, {}) lies outside the {w}x{h} image",
            geometry.centroid_x, geometry.centroid_y
        )));
    }

    let draw = rng.next_f64();
    if draw >= spec.rcpv_apply_prob {
        return Ok(image.clone());
    }
    let big_r = geometry.inradius;
    if big_r <= 0.0 {
        return Ok(image.clone());
    }
    let (cx, cy) = (geometry.centroid_x, geometry.centroid_y);

    let mut circle = None;
    for _ in 0..RCPV_MAX_ATTEMPTS {
        let r = rng.uniform(0.0, big_r);
        let (lo_x, hi_x, lo_y, hi_y) = match spec.center_sampling {
            CenterSampling::Literal => (cx, cx + big_r, cy, cy + big_r),
            CenterSampling::Symmetric => (cx - big_r, cx + big_r, cy - big_r, cy + big_r),
        };
        let xe = draw_center_axis(rng, lo_x, hi_x, cx);
        let ye = draw_center_axis(rng, lo_y, hi_y, cy);
        let (dx, dy) = (xe as f64 - cx, ye as f64 - cy);
        let accepted = match spec.center_constraint {
            CenterConstraint::Euclidean => dx.hypot(dy) <= big_r,
            CenterConstraint::PerAxis => dx.abs() <= big_r && dy.abs() <= big_r,
        };
        if accepted {
            circle = Some((xe, ye, r));
            break;
        }
    }
    let Some((xe, ye, r)) = circle else {
        return Ok(image.clone());
    };

    let mut out = image.clone();
    let reach = r.floor() as i64;
    let y_range = (ye - reach).max(0)..=(ye + reach).min(h as i64 - 1);
    let x_range = (xe - reach).max(0)..=(xe + reach).min(w as i64 - 1);
    for y in y_range {
        for x in x_range.clone() {
            let (ddx, ddy) = ((x - xe) as f64, (y - ye) as f64);
            if ddx * ddx + ddy * ddy <= r * r {
                let v = rng.below(spec.fill_low as u64, spec.fill_high as u64) as u8;
                out.pixel_mut(x as usize, y as usize).fill(v);
            }
        }
    }
    Ok(out)
}

fn check_pair(image: &ImageU8, mask: &BinaryMask) -> Result<()> {
    if image.dimensions() != mask.dimensions() {
        return Err(Error::DimensionMismatch(format!(
            "image is {}x{}, mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    Ok(())
}

/// Mirrors image and mask about the vertical axis.
pub fn flip_h(image: &ImageU8, mask: &BinaryMask) -> Result<(ImageU8, BinaryMask)> {
    check_pair(image, mask)?;
    let (w, h) = image.dimensions();
    let c = image.channels();
    let mut px = Vec::with_capacity(image.pixels().len());
    for row in image.pixels().chunks_exact(w * c) {
        for x in (0..w).rev() {
            px.extend_from_slice(&row[x * c..(x + 1) * c]);
        }
    }
    let bits = mask
        .bits()
        .chunks_exact(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Ok((ImageU8::new(w, h, c, px)?, BinaryMask::new(w, h, bits)?))
}

/// Mirrors image and mask about the horizontal axis.
pub fn flip_v(image: &ImageU8, mask: &BinaryMask) -> Result<(ImageU8, BinaryMask)> {
    check_pair(image, mask)?;
    let (w, h) = image.dimensions();
    let c = image.channels();
    let px = image
        .pixels()
        .chunks_exact(w * c)
        .rev()
        .flatten()
        .copied()
        .collect();
    let bits = mask.bits().chunks_exact(w).rev().flatten().copied().collect();
    Ok((ImageU8::new(w, h, c, px)?, BinaryMask::new(w, h, bits)?))
}

/// Pixel the crop must contain: the rounded centroid when it is a lesion
/// pixel, otherwise the lesion pixel closest to it.
fn crop_anchor(mask: &BinaryMask) -> Option<(usize, usize)> {
    let g = lesion_geometry(mask).ok()?;
    let (rx, ry) = (g.centroid_x.round() as usize, g.centroid_y.round() as usize);
    if mask.get(rx, ry) {
        return Some((rx, ry));
    }
    mask.foreground().min_by(|a, b| {
        let d = |p: &(usize, usize)| (p.0 as f64 - g.centroid_x).powi(2) + (p.1 as f64 - g.centroid_y).powi(2);
        d(a).total_cmp(&d(b))
    })
}

fn crop_offset(rng: &mut RngState, full: usize, crop: usize, anchor: Option<usize>) -> usize {
    let (lo, hi) = match anchor {
        Some(a) => ((a + 1).saturating_sub(crop), a.min(full - crop)),
        None => (0, full - crop),
    };
    rng.range_inclusive(lo as i64, hi as i64) as usize
}

/// Crops a random window containing the lesion and scales it back to the
/// original dimensions (bilinear for the image, nearest for the mask).
pub fn random_crop(
    image: &ImageU8,
    mask: &BinaryMask,
    spec: &AugmentSpec,
    rng: &mut RngState,
) -> Result<(ImageU8, BinaryMask)> {
    check_pair(image, mask)?;
    spec.validate()?;
    let (w, h) = image.dimensions();
    let fx = rng.uniform(spec.crop_min_fraction, 1.0);
    let fy = rng.uniform(spec.crop_min_fraction, 1.0);
    let cw = ((fx * w as f64).round() as usize).clamp(1, w);
    let ch = ((fy * h as f64).round() as usize).clamp(1, h);
    let anchor = crop_anchor(mask);
    let x0 = crop_offset(rng, w, cw, anchor.map(|a| a.0));
    let y0 = crop_offset(rng, h, ch, anchor.map(|a| a.1));
    if (cw, ch) == (w, h) {
        return Ok((image.clone(), mask.clone()));
    }

    let c = image.channels();
    let mut px = Vec::with_capacity(cw * ch * c);
    for y in y0..y0 + ch {
        let start = (y * w + x0) * c;
        px.extend_from_slice(&image.pixels()[start..start + cw * c]);
    }
    let cropped = ImageU8::new(cw, ch, c, px)?;
    let cropped_mask = BinaryMask::from_fn(cw, ch, |x, y| mask.get(x0 + x, y0 + y))?;
    Ok((
        resize_bilinear(&cropped, w, h)?,
        resize_mask_nearest(&cropped_mask, w, h)?,
    ))
}

/// Grayscale, flips, crop and RCPV applied in that order. RCPV never
/// touches the mask and is skipped when the (transformed) mask is empty.
pub fn augment_sample(
    image: &ImageU8,
    mask: &BinaryMask,
    spec: &AugmentSpec,
    rng: &mut RngState,
) -> Result<(ImageU8, BinaryMask)> {
    check_pair(image, mask)?;
    spec.validate()?;
    let mut img = if spec.grayscale_first {
        to_grayscale3(&to_rgb(image))?
    } else {
        image.clone()
    };
    let mut m = mask.clone();
    if rng.bernoulli(spec.flip_h_prob) {
        (img, m) = flip_h(&img, &m)?;
    }
    if rng.bernoulli(spec.flip_v_prob) {
        (img, m) = flip_v(&img, &m)?;
    }
    (img, m) = random_crop(&img, &m, spec, rng)?;
    if let Ok(geometry) = lesion_geometry(&m) {
        img = rcpv(&img, &geometry, spec, rng)?;
    }
    Ok((img, m))
}
