//! Central finite-difference verification of every backward pass, run in
//! `f64`.
//!
//! Each check contracts the layer output with a fixed random projection
//! `r` (loss `Σ r·f(x)`), so the analytic gradient is the layer's backward
//! applied to `r`. The error is `max|a - n| / max(‖a‖∞, ‖n‖∞)` over all
//! checked coordinates.

use crate::error::{Error, Result};
use crate::nn::layers::{
    maxpool2, maxpool2_backward, relu, relu_backward, sigmoid, sigmoid_backward, upsample_nearest2,
    upsample_nearest2_backward, BatchNorm, Conv2d, DropoutMask,
};
use crate::nn::{Network, NetworkConfig, Tensor4};
use crate::rng::RngState;
use crate::train::{bce_loss, soft_jaccard_loss, JACCARD_SMOOTH};

/// Every check, in report order.
pub const GRADCHECK_NAMES: [&str; 11] = [
    "conv3x3",
    "conv1x1",
    "batchnorm",
    "relu",
    "sigmoid",
    "maxpool2",
    "upsample2",
    "dropout",
    "bce_loss",
    "soft_jaccard_loss",
    "network",
];

pub const LAYER_TOLERANCE: f64 = 1e-3;
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-2;

/// Factor applied to the analytic gradient of a sabotaged check.
pub const SABOTAGE_FACTOR: f64 = 1.05;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = inf(analytic).max(inf(numeric));
    if scale == 0.0 {
        return 0.0;
    }
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

/// Central differences of `f` at `x` for the coordinates in `coords`.
pub fn numeric_gradient(
    x: &[f64],
    coords: &[usize],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut buf = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            buf[i] = x[i] + h;
            let plus = f(&buf)?;
            buf[i] = x[i] - h;
            let minus = f(&buf)?;
            buf[i] = x[i];
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

fn uniform_vec(rng: &mut RngState, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tensor(shape: (usize, usize, usize, usize), data: &[f64]) -> Result<Tensor4<f64>> {
    Tensor4::new(shape, data.to_vec())
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

struct Outcome {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

fn check_conv(rng: &mut RngState, kernel: usize) -> Result<Outcome> {
    let (n, cin, cout, h, w) = (2, 3, 4, 5, 6);
    let conv = Conv2d::<f64>::he_uniform(cin, cout, kernel, rng)?;
    let xs = (n, cin, h, w);
    let x = uniform_vec(rng, n * cin * h * w, -1.0, 1.0);
    let bias = uniform_vec(rng, cout, -0.5, 0.5);
    let r = uniform_vec(rng, n * cout * h * w, -1.0, 1.0);
    let (nx, nw) = (x.len(), conv.weight.len());
    let mut flat = x.clone();
    flat.extend(&conv.weight);
    flat.extend(&bias);

    let eval = |v: &[f64]| -> Result<f64> {
        let mut c = conv.clone();
        c.weight = v[nx..nx + nw].to_vec();
        c.bias = v[nx + nw..].to_vec();
        Ok(dot(c.forward(&tensor(xs, &v[..nx])?)?.data(), &r))
    };
    let mut layer = conv.clone();
    layer.bias = bias;
    let g = layer.backward(&tensor(xs, &x)?, &tensor((n, cout, h, w), &r)?)?;
    let mut analytic = g.input.into_data();
    analytic.extend(g.weight);
    analytic.extend(g.bias);
    let numeric = numeric_gradient(&flat, &all(flat.len()), 1e-2, eval)?;
    Ok(Outcome { analytic, numeric })
}

fn check_batchnorm(rng: &mut RngState) -> Result<Outcome> {
    let shape = (3, 2, 3, 4);
    let len = 3 * 2 * 3 * 4;
    let mut bn = BatchNorm::<f64>::new(2, 1e-5, 0.9);
    bn.gamma = uniform_vec(rng, 2, 0.5, 1.5);
    bn.beta = uniform_vec(rng, 2, -0.5, 0.5);
    let x = uniform_vec(rng, len, -1.0, 1.0);
    let r = uniform_vec(rng, len, -1.0, 1.0);
    let mut flat = x.clone();
    flat.extend(&bn.gamma);
    flat.extend(&bn.beta);
    let eval = |v: &[f64]| -> Result<f64> {
        let mut b = bn.clone();
        b.gamma = v[len..len + 2].to_vec();
        b.beta = v[len + 2..].to_vec();
        Ok(dot(b.forward_train(&tensor(shape, &v[..len])?)?.0.data(), &r))
    };
    let (_, cache) = bn.forward_train(&tensor(shape, &x)?)?;
    let g = bn.backward(&cache, &tensor(shape, &r)?)?;
    let mut analytic = g.input.into_data();
    analytic.extend(g.gamma);
    analytic.extend(g.beta);
    let numeric = numeric_gradient(&flat, &all(flat.len()), 1e-3, eval)?;
    Ok(Outcome { analytic, numeric })
}

fn check_elementwise(
    rng: &mut RngState,
    x: Vec<f64>,
    shape: (usize, usize, usize, usize),
    forward: impl Fn(&Tensor4<f64>) -> Tensor4<f64>,
    backward: impl Fn(&Tensor4<f64>, &Tensor4<f64>) -> Result<Tensor4<f64>>,
    h: f64,
) -> Result<Outcome> {
    let r = uniform_vec(rng, x.len(), -1.0, 1.0);
    let out = forward(&tensor(shape, &x)?);
    let analytic = backward(&out, &tensor(shape, &r)?)?.into_data();
    let numeric = numeric_gradient(&x, &all(x.len()), h, |v| Ok(dot(forward(&tensor(shape, v)?).data(), &r)))?;
    Ok(Outcome { analytic, numeric })
}

fn check_relu(rng: &mut RngState) -> Result<Outcome> {
    let shape = (2, 2, 3, 3);
    // keep every input well away from the kink
    let x = (0..36)
        .map(|_| {
            let m = rng.uniform(0.05, 1.0);
            if rng.bernoulli(0.5) { m } else { -m }
        })
        .collect();
    check_elementwise(rng, x, shape, relu, relu_backward, 1e-3)
}

fn check_sigmoid(rng: &mut RngState) -> Result<Outcome> {
    let shape = (2, 1, 3, 4);
    let x = uniform_vec(rng, 24, -3.0, 3.0);
    check_elementwise(rng, x, shape, sigmoid, sigmoid_backward, 1e-4)
}

fn check_maxpool(rng: &mut RngState) -> Result<Outcome> {
    let shape = (2, 2, 4, 6);
    let len = 96;
    // distinct values at least 0.1 apart so no perturbation changes a winner
    let x: Vec<f64> = rng.permutation(len).into_iter().map(|p| p as f64 * 0.1).collect();
    let r = uniform_vec(rng, len / 4, -1.0, 1.0);
    let (_, arg) = maxpool2(&tensor(shape, &x)?)?;
    let analytic = maxpool2_backward(shape, &arg, &tensor((2, 2, 2, 3), &r)?)?.into_data();
    let numeric = numeric_gradient(&x, &all(len), 1e-3, |v| {
        Ok(dot(maxpool2(&tensor(shape, v)?)?.0.data(), &r))
    })?;
    Ok(Outcome { analytic, numeric })
}

fn check_upsample(rng: &mut RngState) -> Result<Outcome> {
    let shape = (2, 2, 3, 2);
    let x = uniform_vec(rng, 24, -1.0, 1.0);
    let r = uniform_vec(rng, 96, -1.0, 1.0);
    let analytic = upsample_nearest2_backward(&tensor((2, 2, 6, 4), &r)?)?.into_data();
    let numeric = numeric_gradient(&x, &all(24), 1e-2, |v| {
        Ok(dot(upsample_nearest2(&tensor(shape, v)?).data(), &r))
    })?;
    Ok(Outcome { analytic, numeric })
}

fn check_dropout(rng: &mut RngState) -> Result<Outcome> {
    let shape = (2, 3, 3, 3);
    let x = uniform_vec(rng, 54, -1.0, 1.0);
    let r = uniform_vec(rng, 54, -1.0, 1.0);
    let mask = DropoutMask::<f64>::sample(54, 0.5, rng)?;
    let analytic = mask.apply(&tensor(shape, &r)?)?.into_data();
    let numeric = numeric_gradient(&x, &all(54), 1e-2, |v| Ok(dot(mask.apply(&tensor(shape, v)?)?.data(), &r)))?;
    Ok(Outcome { analytic, numeric })
}

fn check_loss(rng: &mut RngState, jaccard: bool) -> Result<Outcome> {
    let shape = (2, 1, 3, 4);
    let p = uniform_vec(rng, 24, 0.1, 0.9);
    let y: Vec<f64> = (0..24).map(|_| rng.bernoulli(0.5) as u8 as f64).collect();
    let target = tensor(shape, &y)?;
    let loss = |v: &[f64]| -> Result<(f64, Tensor4<f64>)> {
        let pt = tensor(shape, v)?;
        if jaccard {
            soft_jaccard_loss(&pt, &target, JACCARD_SMOOTH)
        } else {
            bce_loss(&pt, &target)
        }
    };
    let analytic = loss(&p)?.1.into_data();
    let numeric = numeric_gradient(&p, &all(24), 1e-5, |v| Ok(loss(v)?.0))?;
    Ok(Outcome { analytic, numeric })
}

/// Small network on a 3×16×16 input; a random subset of two coordinates
/// per parameter block is compared.
fn check_network(rng: &mut RngState) -> Result<Outcome> {
    let cfg = NetworkConfig {
        stage_channels: vec![3, 4],
        bottleneck_channels: 5,
        ..NetworkConfig::default()
    };
    let net = Network::<f64>::new(cfg, rng)?;
    let shape = (2, 3, 16, 16);
    let x = tensor(shape, &uniform_vec(rng, 2 * 3 * 256, 0.0, 1.0))?;
    let r = uniform_vec(rng, 2 * 256, -1.0, 1.0);
    let dropout_seed = rng.next_u64();

    let (_, trace) = net.forward_train(&x, &mut RngState::new(dropout_seed))?;
    let grads = net.backward(&trace, &tensor((2, 1, 16, 16), &r)?)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (block, g) in grads.0.iter().enumerate() {
        for _ in 0..2 {
            let i = rng.below(0, g.len() as u64) as usize;
            analytic.push(g[i]);
            let base = net.trainable()[block].values[i];
            let mut probe = net.clone();
            numeric.extend(numeric_gradient(&[base], &[0], 1e-5, |v| {
                probe.trainable_mut()[block][i] = v[0];
                let (p, _) = probe.forward_train(&x, &mut RngState::new(dropout_seed))?;
                Ok(dot(p.data(), &r))
            })?);
        }
    }
    Ok(Outcome { analytic, numeric })
}

/// Runs every check. `sabotage` names a check whose analytic gradient is
/// scaled by [`SABOTAGE_FACTOR`], which must make it fail.
pub fn run_gradchecks(seed: u64, sabotage: Option<&str>) -> Result<Vec<GradcheckResult>> {
    if let Some(name) = sabotage {
        if !GRADCHECK_NAMES.contains(&name) {
            return Err(Error::InvalidArgument(format!(
                "unknown gradient check {name:?}; expected one of {}",
                GRADCHECK_NAMES.join(", ")
            )));
        }
    }
    GRADCHECK_NAMES
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let rng = &mut RngState::new(seed.wrapping_add(k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (outcome, tolerance) = match name {
                "conv3x3" => (check_conv(rng, 3)?, LAYER_TOLERANCE),
                "conv1x1" => (check_conv(rng, 1)?, LAYER_TOLERANCE),
                "batchnorm" => (check_batchnorm(rng)?, LAYER_TOLERANCE),
                "relu" => (check_relu(rng)?, LAYER_TOLERANCE),
                "sigmoid" => (check_sigmoid(rng)?, LAYER_TOLERANCE),
                "maxpool2" => (check_maxpool(rng)?, LAYER_TOLERANCE),
                "upsample2" => (check_upsample(rng)?, LAYER_TOLERANCE),
                "dropout" => (check_dropout(rng)?, LAYER_TOLERANCE),
                "bce_loss" => (check_loss(rng, false)?, LOSS_TOLERANCE),
                "soft_jaccard_loss" => (check_loss(rng, true)?, LOSS_TOLERANCE),
                "network" => (check_network(rng)?, NETWORK_TOLERANCE),
                _ => unreachable!("names come from GRADCHECK_NAMES"),
            };
            let mut analytic = outcome.analytic;
            if sabotage == Some(name) {
                analytic.iter_mut().for_each(|a| *a *= SABOTAGE_FACTOR);
            }
            Ok(GradcheckResult {
                name,
                max_rel_error: relative_error(&analytic, &outcome.numeric),
                tolerance,
                checked: analytic.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_known_function() {
        // f = x0^2 + 3 x1, gradient (2 x0, 3)
        let g = numeric_gradient(&[1.5, -2.0], &[0, 1], 1e-4, |v| Ok(v[0] * v[0] + 3.0 * v[1])).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_scale() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-12);
    }

    #[test]
    fn every_check_passes() {
        let results = run_gradchecks(7, None).unwrap();
        assert_eq!(results.len(), GRADCHECK_NAMES.len());
        for r in &results {
            assert!(r.passed(), "{} error {} >= {}", r.name, r.max_rel_error, r.tolerance);
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn sabotage_is_detected() {
        for name in ["conv3x3", "bce_loss", "network"] {
            let results = run_gradchecks(7, Some(name)).unwrap();
            for r in results {
                assert_eq!(r.passed(), r.name != name, "{}", r.name);
            }
        }
        assert!(run_gradchecks(7, Some("nope")).is_err());
    }
}
