use crate::error::{Error, Result};
use crate::nn::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum SGD with L2 weight decay:
/// `v <- momentum * v - lr * (g + weight_decay * w)`, then `w <- w + v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Vec<T>],
    grads: &[Vec<T>],
    velocity: &mut [Vec<T>],
    cfg: &SgdConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter blocks, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::ShapeMismatch("parameter/gradient block sizes differ".into()));
        }
    }
    let lr = T::from_f64(cfg.learning_rate);
    let mu = T::from_f64(cfg.momentum);
    let wd = T::from_f64(cfg.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((w, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi - lr * (gi + wd * *w);
            *w += *vi;
        }
    }
    Ok(())
}
