//! Segmentation losses over probability maps. Both return the mean-reduced
//! (BCE) or batch-pooled (soft Jaccard) scalar and its exact gradient with
//! respect to the probabilities.

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor4};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Default additive smoothing of the soft Jaccard ratio.
pub const JACCARD_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    Bce,
    #[default]
    SoftJaccard,
}

impl LossKind {
    pub fn evaluate<T: Scalar>(self, pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
        match self {
            LossKind::Bce => bce_loss(pred, target),
            LossKind::SoftJaccard => soft_jaccard_loss(pred, target, JACCARD_SMOOTH),
        }
    }
}

fn check<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::ShapeMismatch("empty prediction".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy.
pub fn bce_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    check(pred, target)?;
    let n = pred.len() as f64;
    let (lo, hi) = (BCE_CLAMP, 1.0 - BCE_CLAMP);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let (p, y) = (p.to_f64(), y.to_f64());
        let pc = p.clamp(lo, hi);
        total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        let g = if p > lo && p < hi {
            (-y / pc + (1.0 - y) / (1.0 - pc)) / n
        } else {
            0.0
        };
        grad.push(T::from_f64(g));
    }
    Ok((total / n, Tensor4::new(pred.shape(), grad)?))
}

/// `1 - (Σpy + ε) / (Σp + Σy - Σpy + ε)` pooled over the whole batch.
pub fn soft_jaccard_loss<T: Scalar>(
    pred: &Tensor4<T>,
    target: &Tensor4<T>,
    smooth: f64,
) -> Result<(f64, Tensor4<T>)> {
    check(pred, target)?;
    if smooth.is_nan() || smooth <= 0.0 {
        return Err(Error::InvalidArgument(format!("smoothing must be positive, got {smooth}")));
    }
    let (mut inter, mut sp, mut sy) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let (p, y) = (p.to_f64(), y.to_f64());
        inter += p * y;
        sp += p;
        sy += y;
    }
    let num = inter + smooth;
    let den = sp + sy - inter + smooth;
    let loss = 1.0 - num / den;
    let den2 = den * den;
    let grad = target
        .data()
        .iter()
        .map(|&y| {
            let y = y.to_f64();
            T::from_f64(-(y * den - num * (1.0 - y)) / den2)
        })
        .collect();
    Ok((loss, Tensor4::new(pred.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor4<f64> {
        Tensor4::new((1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn bce_values() {
        let y = t(&[0.0, 1.0, 1.0, 0.0]);
        let (l, _) = bce_loss(&y, &y).unwrap();
        assert!(l <= 1e-6);
        let (l, _) = bce_loss(&t(&[0.5; 4]), &y).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&t(&[0.5; 3]), &y).is_err());
    }

    #[test]
    fn soft_jaccard_values() {
        let y = Tensor4::<f64>::new((1, 1, 10, 20), (0..200).map(|i| (i < 100) as u8 as f64).collect()).unwrap();
        let (l, _) = soft_jaccard_loss(&y, &y, 1.0).unwrap();
        assert!((0.0..=0.01).contains(&l));
        let z = t(&[0.0; 5]);
        let (l, _) = soft_jaccard_loss(&z, &z, 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(soft_jaccard_loss(&z, &z, 0.0).is_err());
    }

    #[test]
    fn losses_non_negative() {
        let p = t(&[0.1, 0.9, 0.4, 0.7]);
        let y = t(&[1.0, 0.0, 1.0, 1.0]);
        assert!(bce_loss(&p, &y).unwrap().0 > 0.0);
        assert!(soft_jaccard_loss(&p, &y, 1.0).unwrap().0 > 0.0);
    }
}
