use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use super::{sgd_step, LossKind, SgdConfig};
use crate::augment::{augment_sample, AugmentSpec};
use crate::dataset::{load_samples, Manifest, Sample};
use crate::ensemble::{images_to_tensor, masks_to_tensor, predict_single, threshold_plane, EvalReport, ImageResult, Postprocess};
use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, resize_mask_nearest, BinaryMask, ImageU8};
use crate::metrics::jaccard;
use crate::nn::{ModelCheckpoint, Network, NetworkConfig, TrainingMeta};
use crate::rng::{derive_rng, RngState};

const INIT_SALT: u64 = 0x494E_4954_0000_0001;
const SHUFFLE_SALT: u64 = 0x5348_5546_0000_0002;
const DROPOUT_SALT: u64 = 0x4452_4F50_0000_0003;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Network input `(width, height)`.
    pub input_size: (usize, usize),
    pub loss: LossKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub master_seed: u64,
    pub augment: AugmentSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        TrainConfig {
            input_size: (96, 64),
            loss: LossKind::SoftJaccard,
            learning_rate: sgd.learning_rate,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            epochs: 20,
            batch_size: 8,
            master_seed: 0,
            augment: AugmentSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return bad("input size must be positive".into());
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        self.augment.validate()
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    /// Mean per-sample Jaccard of the thresholded training predictions.
    pub jaccard: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,jaccard,seconds\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{:.3}", r.epoch, r.loss, r.jaccard, r.seconds);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Loads the manifest's samples and trains on them.
pub fn train(
    manifest: &Manifest,
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
) -> Result<(ModelCheckpoint, TrainLog)> {
    cfg.validate()?;
    if manifest.is_empty() {
        return Err(Error::InvalidArgument("training manifest is empty".into()));
    }
    let samples = load_samples(manifest)?;
    train_samples(&samples, cfg, net_cfg, |_, _| Ok(()))
}

/// The weights training starts from for `master_seed`.
pub fn initial_network(net_cfg: &NetworkConfig, master_seed: u64) -> Result<Network<f32>> {
    Network::new(net_cfg.clone(), &mut RngState::new(master_seed ^ INIT_SALT))
}

fn prepare(sample: &Sample, spec: &AugmentSpec, size: (usize, usize), rng: &mut RngState) -> Result<(ImageU8, BinaryMask)> {
    let (img, mask) = augment_sample(&sample.image, &sample.mask, spec, rng)?;
    Ok((
        resize_bilinear(&img, size.0, size.1)?,
        resize_mask_nearest(&mask, size.0, size.1)?,
    ))
}

/// Epoch loop. Every sample is re-augmented from its original each time
/// it is drawn, using a stream derived from `(master_seed, epoch, index)`.
/// `on_epoch` sees each finished epoch and the current weights.
pub fn train_samples(
    samples: &[Sample],
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelCheckpoint) -> Result<()>,
) -> Result<(ModelCheckpoint, TrainLog)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut net = initial_network(net_cfg, cfg.master_seed)?;
    let mut velocity: Vec<Vec<f32>> = net.trainable().iter().map(|p| vec![0.0; p.values.len()]).collect();
    let sgd = cfg.sgd();
    let seed = cfg.master_seed;
    let mut log = TrainLog::default();
    let meta = |epoch: usize| TrainingMeta {
        epoch: epoch as u64,
        seed,
        input_width: cfg.input_size.0,
        input_height: cfg.input_size.1,
    };

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let order = derive_rng(seed ^ SHUFFLE_SALT, epoch as u64, 0).permutation(samples.len());
        let (mut loss_sum, mut jac_sum) = (0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let prepared = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = derive_rng(seed, epoch as u64, i as u64);
                    prepare(&samples[i], &cfg.augment, cfg.input_size, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let images: Vec<&ImageU8> = prepared.iter().map(|p| &p.0).collect();
            let masks: Vec<&BinaryMask> = prepared.iter().map(|p| &p.1).collect();
            let x = images_to_tensor::<f32>(&images)?;
            let y = masks_to_tensor::<f32>(&masks)?;

            let mut drop_rng = derive_rng(seed ^ DROPOUT_SALT, epoch as u64, b as u64);
            let (probs, trace) = net
                .forward_train(&x, &mut drop_rng)
                .map_err(|e| divergence(e, epoch))?;
            let (loss, grad) = cfg.loss.evaluate(&probs, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("loss is {loss} in epoch {}", epoch + 1)));
            }
            let grads = net.backward(&trace, &grad)?;
            if grads.0.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("non-finite gradient in epoch {}", epoch + 1)));
            }
            sgd_step(&mut net.trainable_mut(), &grads.0, &mut velocity, &sgd)?;
            net.update_running_stats(&trace);

            loss_sum += loss * batch.len() as f64;
            for (k, m) in masks.iter().enumerate() {
                jac_sum += jaccard(&threshold_plane(&probs, k, 0.5)?, m)?;
            }
        }
        let n = samples.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / n,
            jaccard: jac_sum / n,
            seconds: started.elapsed().as_secs_f64(),
        };
        let snapshot = ModelCheckpoint { network: net.clone(), meta: meta(epoch + 1) };
        on_epoch(&record, &snapshot)?;
        log.records.push(record);
    }
    Ok((ModelCheckpoint { network: net, meta: meta(cfg.epochs) }, log))
}

fn divergence(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged(format!("non-finite {what} in epoch {}", epoch + 1)),
        other => other,
    }
}

/// Single-model evaluation at the checkpoint's training resolution.
pub fn evaluate_model(
    checkpoint: &ModelCheckpoint,
    samples: &[Sample],
    threshold: f64,
    postprocess: &Postprocess,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let size = (checkpoint.meta.input_width, checkpoint.meta.input_height);
    let images = samples
        .par_iter()
        .map(|s| {
            let raw = predict_single(&checkpoint.network, &s.image, size, threshold)?;
            let raw_j = jaccard(&raw, &s.mask)?;
            Ok(ImageResult {
                id: s.id.clone(),
                jaccard: jaccard(&postprocess.apply(&raw)?, &s.mask)?,
                member: 0,
                member_jaccards: vec![raw_j],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(images))
}
