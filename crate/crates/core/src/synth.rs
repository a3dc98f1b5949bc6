//! Seeded synthetic dermoscopy-like data: noisy skin, one elliptical
//! lesion of random size, eccentricity and contrast, and optional dark
//! hair strokes that occlude it.

use std::fs;
use std::path::Path;

use crate::dataset::{Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::imaging::{round_to_u8, save_image, save_mask, BinaryMask, ImageU8};
use crate::rng::{derive_rng, RngState};

/// Generated masks always cover at least this fraction of the image.
pub const MIN_LESION_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    /// Probability that an image gets hair strokes.
    pub hair_prob: f64,
    /// Standard deviation-like amplitude of the skin noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            width: 128,
            height: 96,
            hair_prob: 0.5,
            noise: 12.0,
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Squared normalized radius; `<= 1` inside.
    fn rho2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

fn noise(rng: &mut RngState, amp: f64) -> f64 {
    // sum of uniforms, roughly Gaussian
    (rng.next_f64() + rng.next_f64() + rng.next_f64() - 1.5) * amp
}

fn draw_hair(rgb: &mut [f64], w: usize, h: usize, rng: &mut RngState) {
    let pt = |rng: &mut RngState| (rng.uniform(0.0, w as f64), rng.uniform(0.0, h as f64));
    let (p0, p1, p2) = (pt(rng), pt(rng), pt(rng));
    let radius = rng.uniform(0.5, 1.3);
    let shade = rng.uniform(25.0, 70.0);
    let steps = 4 * (w + h);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let u = 1.0 - t;
        let x = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
        let y = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
        let r = radius.ceil() as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                let (px, py) = (x.round() as isize + dx, y.round() as isize + dy);
                if px < 0 || py < 0 || px >= w as isize || py >= h as isize {
                    continue;
                }
                if ((px as f64 - x).powi(2) + (py as f64 - y).powi(2)).sqrt() <= radius {
                    let i = (py as usize * w + px as usize) * 3;
                    for c in 0..3 {
                        rgb[i + c] = shade;
                    }
                }
            }
        }
    }
}

/// Image and mask for one sample stream.
pub fn generate(spec: &SynthSpec, rng: &mut RngState) -> Result<(ImageU8, BinaryMask)> {
    let (w, h) = (spec.width, spec.height);
    if w < 8 || h < 8 {
        return Err(Error::InvalidArgument(format!("synthetic images must be at least 8x8, got {w}x{h}")));
    }
    let short = w.min(h) as f64;
    let skin = [rng.uniform(185.0, 235.0), rng.uniform(135.0, 180.0), rng.uniform(110.0, 150.0)];
    let darkness = rng.uniform(0.35, 0.75);
    let tint = [rng.uniform(0.9, 1.05), rng.uniform(0.85, 1.0), rng.uniform(0.85, 1.0)];
    let mask;
    let ellipse = loop {
        let a = rng.uniform(0.15, 0.42) * short;
        let b = a * rng.uniform(0.55, 1.0);
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        let margin = 0.6 * a;
        let e = Ellipse {
            cx: rng.uniform(margin, w as f64 - margin),
            cy: rng.uniform(margin.min(h as f64 / 2.0), (h as f64 - margin).max(h as f64 / 2.0)),
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        };
        let m = BinaryMask::from_fn(w, h, |x, y| e.rho2(x as f64, y as f64) <= 1.0)?;
        if m.count() as f64 >= MIN_LESION_FRACTION * (w * h) as f64 {
            mask = m;
            break e;
        }
    };

    let mut rgb = vec![0.0f64; w * h * 3];
    let shade_x = rng.uniform(-0.15, 0.15);
    let shade_y = rng.uniform(-0.15, 0.15);
    for y in 0..h {
        for x in 0..w {
            let light = 1.0 + shade_x * (x as f64 / w as f64 - 0.5) + shade_y * (y as f64 / h as f64 - 0.5);
            let rho = ellipse.rho2(x as f64, y as f64).sqrt();
            // soft edge: full darkening inside, fading over a thin rim
            let inside = ((1.0 - rho) / 0.08 + 0.5).clamp(0.0, 1.0);
            let mottle = 1.0 + 0.08 * noise(rng, 1.0);
            let n = noise(rng, spec.noise);
            let i = (y * w + x) * 3;
            for c in 0..3 {
                let lesion = skin[c] * darkness * tint[c] * mottle;
                let base = skin[c] * (1.0 - inside) + lesion * inside;
                rgb[i + c] = base * light + n;
            }
        }
    }
    if rng.bernoulli(spec.hair_prob) {
        for _ in 0..rng.range_inclusive(1, 4) {
            draw_hair(&mut rgb, w, h, rng);
        }
    }
    let image = ImageU8::new(w, h, 3, rgb.into_iter().map(round_to_u8).collect())?;
    Ok((image, mask))
}

/// Mask file stem for an image id: challenge-style ids (`ISIC_...`) get
/// `_segmentation`, everything else `_mask`.
pub fn mask_stem(id: &str) -> String {
    if id.starts_with("ISIC_") {
        format!("{id}_segmentation")
    } else {
        format!("{id}_mask")
    }
}

/// Writes `count` samples as `synth_NNNNN.ppm` plus masks and a
/// `manifest.csv` into `dir`. Sample `i` depends only on `(seed, i)`.
pub fn write_dataset(dir: &Path, count: usize, spec: &SynthSpec, seed: u64) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for i in 0..count {
        let (image, mask) = generate(spec, &mut derive_rng(seed, 0, i as u64))?;
        let id = format!("synth_{i:05}");
        let image_path = dir.join(format!("{id}.ppm"));
        let mask_path = dir.join(format!("{}.pgm", mask_stem(&id)));
        save_image(&image, &image_path)?;
        save_mask(&mask, &mask_path)?;
        manifest.entries.push(ManifestEntry::new(image_path, Some(mask_path)));
    }
    manifest.save(dir.join("manifest.csv"))?;
    Ok(manifest)
}
