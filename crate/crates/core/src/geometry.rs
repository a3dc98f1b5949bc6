//! Lesion center, in-radius and area measured on a ground-truth mask.
//!
//! The boundary is taken under 4-connectivity with everything outside the
//! frame counting as background, so masks touching the border still have a
//! well-defined in-radius. The centroid of a non-convex lesion may fall
//! outside the lesion itself; the in-radius is still the distance to the
//! nearest boundary pixel.

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionGeometry {
    pub centroid_x: f64,
    pub centroid_y: f64,
    /// Distance from the centroid to the closest boundary pixel.
    pub inradius: f64,
    /// Number of lesion pixels.
    pub area: usize,
}

/// Mean coordinate of all 1-pixels.
pub fn mask_centroid(mask: &BinaryMask) -> Result<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0u64, 0u64, 0u64);
    for (x, y) in mask.foreground() {
        sx += x as u64;
        sy += y as u64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyLesion);
    }
    Ok((sx as f64 / n as f64, sy as f64 / n as f64))
}

/// 1-pixels with at least one 4-neighbour that is 0 or off the image.
pub fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (w, h) = mask.dimensions();
    mask.foreground()
        .filter(|&(x, y)| {
            x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1)
        })
        .collect()
}

pub fn inradius(mask: &BinaryMask, centroid: (f64, f64)) -> Result<f64> {
    let (cx, cy) = centroid;
    boundary_pixels(mask)
        .into_iter()
        .map(|(x, y)| (x as f64 - cx).hypot(y as f64 - cy))
        .min_by(f64::total_cmp)
        .ok_or(Error::EmptyLesion)
}

pub fn lesion_geometry(mask: &BinaryMask) -> Result<LesionGeometry> {
    let (centroid_x, centroid_y) = mask_centroid(mask)?;
    let inradius = inradius(mask, (centroid_x, centroid_y))?;
    Ok(LesionGeometry {
        centroid_x,
        centroid_y,
        inradius,
        area: mask.count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disk(size: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
        BinaryMask::from_fn(size, size, |x, y| {
            (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r
        })
        .unwrap()
    }

    #[test]
    fn centroid_examples() {
        let one = BinaryMask::from_fn(10, 10, |x, y| (x, y) == (3, 7)).unwrap();
        assert_eq!(mask_centroid(&one).unwrap(), (3.0, 7.0));
        let two = BinaryMask::from_fn(3, 1, |x, _| x != 1).unwrap();
        assert_eq!(mask_centroid(&two).unwrap(), (1.0, 0.0));
        let square =
            BinaryMask::from_fn(20, 20, |x, y| (10..15).contains(&x) && (10..15).contains(&y))
                .unwrap();
        assert_eq!(mask_centroid(&square).unwrap(), (12.0, 12.0));
        assert!(matches!(
            mask_centroid(&BinaryMask::zeros(4, 4).unwrap()),
            Err(Error::EmptyLesion)
        ));
    }

    #[test]
    fn boundary_examples() {
        let full = BinaryMask::ones(3, 3).unwrap();
        let b = boundary_pixels(&full);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(1, 1)));
        let one = BinaryMask::from_fn(5, 5, |x, y| (x, y) == (2, 2)).unwrap();
        assert_eq!(boundary_pixels(&one), vec![(2, 2)]);
        assert!(boundary_pixels(&BinaryMask::zeros(4, 4).unwrap()).is_empty());
    }

    #[test]
    fn inradius_examples() {
        let one = BinaryMask::from_fn(5, 5, |x, y| (x, y) == (2, 2)).unwrap();
        assert_eq!(inradius(&one, (2.0, 2.0)).unwrap(), 0.0);

        let square = BinaryMask::ones(11, 11).unwrap();
        assert_eq!(inradius(&square, (5.0, 5.0)).unwrap(), 5.0);

        let d = disk(101, 50.0, 50.0, 10.0);
        let g = lesion_geometry(&d).unwrap();
        assert_eq!((g.centroid_x, g.centroid_y), (50.0, 50.0));
        assert!((9.0..=10.0).contains(&g.inradius), "{}", g.inradius);
        let expected = std::f64::consts::PI * 100.0;
        assert!((g.area as f64 - expected).abs() <= 0.05 * expected, "{}", g.area);
    }

    #[test]
    fn geometry_of_single_pixel_and_square() {
        let one = BinaryMask::from_fn(5, 5, |x, y| (x, y) == (1, 3)).unwrap();
        let g = lesion_geometry(&one).unwrap();
        assert_eq!(
            g,
            LesionGeometry {
                centroid_x: 1.0,
                centroid_y: 3.0,
                inradius: 0.0,
                area: 1
            }
        );
        let sq = BinaryMask::from_fn(9, 9, |x, y| (2..7).contains(&x) && (2..7).contains(&y))
            .unwrap();
        assert_eq!(lesion_geometry(&sq).unwrap().area, 25);
    }

    fn random_mask(w: usize, h: usize, seed: u64) -> BinaryMask {
        let mut s = seed;
        BinaryMask::from_fn(w, h, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            !(s >> 33).is_multiple_of(3)
        })
        .unwrap()
    }

    proptest! {
        #[test]
        fn inradius_is_minimal(seed in any::<u64>(), w in 1usize..16, h in 1usize..16) {
            let mask = random_mask(w, h, seed);
            prop_assume!(!mask.is_empty());
            let g = lesion_geometry(&mask).unwrap();
            let boundary = boundary_pixels(&mask);
            for &(x, y) in &boundary {
                prop_assert!(mask.get(x, y));
                let d = (x as f64 - g.centroid_x).hypot(y as f64 - g.centroid_y);
                prop_assert!(g.inradius <= d);
            }
            prop_assert!(g.inradius >= 0.0);
            prop_assert!(g.inradius <= (w.max(h) as f64) * 2f64.sqrt());
            prop_assert!(g.centroid_x >= 0.0 && g.centroid_x <= (w - 1) as f64);
            prop_assert!(g.centroid_y >= 0.0 && g.centroid_y <= (h - 1) as f64);
        }

        #[test]
        fn translation_equivariance(seed in any::<u64>(), dx in 0usize..5, dy in 0usize..5) {
            let base = random_mask(8, 8, seed);
            prop_assume!(!base.is_empty());
            // embed in a frame of zeros so no clipping occurs
            let place = |ox: usize, oy: usize| BinaryMask::from_fn(20, 20, |x, y| {
                x >= ox && y >= oy && x < ox + 8 && y < oy + 8 && base.get(x - ox, y - oy)
            }).unwrap();
            let a = lesion_geometry(&place(2, 2)).unwrap();
            let b = lesion_geometry(&place(2 + dx, 2 + dy)).unwrap();
            prop_assert!((b.centroid_x - a.centroid_x - dx as f64).abs() < 1e-9);
            prop_assert!((b.centroid_y - a.centroid_y - dy as f64).abs() < 1e-9);
            prop_assert!((b.inradius - a.inradius).abs() < 1e-9);
            prop_assert_eq!(a.area, b.area);
        }
    }
}
