//! Multi-resolution prediction, per-image member selection, mask
//! post-processing and the evaluation report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, resize_mask_nearest, to_grayscale3, to_rgb, BinaryMask, ImageU8};
use crate::metrics::jaccard;
use crate::morphology::{close, erode};
use crate::nn::{load_checkpoint, Network, Scalar, Tensor4};

/// Converts a batch of equally sized RGB images to an `(n, 3, h, w)` tensor
/// scaled to [0, 1].
pub fn images_to_tensor<T: Scalar>(images: &[&ImageU8]) -> Result<Tensor4<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    let plane = w * h;
    let mut data = vec![T::ZERO; images.len() * 3 * plane];
    let scale = 1.0 / 255.0;
    for (i, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) || img.channels() != 3 {
            return Err(Error::ShapeMismatch("batch images must share size and have 3 channels".into()));
        }
        let out = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for (p, px) in img.pixels().chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = T::from_f64(px[c] as f64 * scale);
            }
        }
    }
    Tensor4::new((images.len(), 3, h, w), data)
}

/// Batch of masks as an `(n, 1, h, w)` tensor of 0/1 values.
pub fn masks_to_tensor<T: Scalar>(masks: &[&BinaryMask]) -> Result<Tensor4<T>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty mask batch".into()))?;
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        if m.dimensions() != (w, h) {
            return Err(Error::ShapeMismatch("batch masks must share size".into()));
        }
        data.extend(m.bits().iter().map(|&b| T::from_f64(b as f64)));
    }
    Tensor4::new((masks.len(), 1, h, w), data)
}

/// Thresholds one probability plane (`p > threshold`).
pub fn threshold_plane<T: Scalar>(probs: &Tensor4<T>, index: usize, threshold: f64) -> Result<BinaryMask> {
    let t = T::from_f64(threshold);
    BinaryMask::new(
        probs.w(),
        probs.h(),
        probs.sample(index).iter().map(|&p| (p > t) as u8).collect(),
    )
}

/// Grayscale, resize to `input_size`, forward in eval mode, threshold and
/// resize back to the image's own dimensions.
pub fn predict_single(
    network: &Network<f32>,
    image: &ImageU8,
    input_size: (usize, usize),
    threshold: f64,
) -> Result<BinaryMask> {
    let (iw, ih) = input_size;
    if iw == 0 || ih == 0 {
        return Err(Error::InvalidArgument("input size must be positive".into()));
    }
    let gray = to_grayscale3(&to_rgb(image))?;
    let small = resize_bilinear(&gray, iw, ih)?;
    let probs = network.forward_eval(&images_to_tensor(&[&small])?)?;
    let mask = threshold_plane(&probs, 0, threshold)?;
    let (w, h) = image.dimensions();
    resize_mask_nearest(&mask, w, h)
}

/// Index of the prediction with the highest Jaccard against `truth`;
/// the lowest index wins ties.
pub fn select_oracle(predictions: &[BinaryMask], truth: &BinaryMask) -> Result<usize> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions to select from".into()));
    }
    let scores = predictions
        .iter()
        .map(|p| jaccard(p, truth))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmax_first(&scores))
}

/// Index of the prediction with the highest mean Jaccard against the
/// others; the lowest index wins ties.
pub fn select_consensus(predictions: &[BinaryMask]) -> Result<usize> {
    let n = predictions.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no predictions to select from".into()));
    }
    if n == 1 {
        return Ok(0);
    }
    let mut pair = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = jaccard(&predictions[i], &predictions[j])?;
            pair[i * n + j] = v;
            pair[j * n + i] = v;
        }
    }
    let scores: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| pair[i * n + j]).sum::<f64>() / (n - 1) as f64)
        .collect();
    Ok(argmax_first(&scores))
}

fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Best member against ground truth (needs labels).
    Oracle,
    /// Member agreeing most with the others.
    Consensus,
    /// Always the given member.
    Single(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Postprocess {
    pub erosion: Option<(usize, usize)>,
    /// Applied before erosion.
    pub closing: Option<(usize, usize)>,
}

impl Default for Postprocess {
    fn default() -> Self {
        Postprocess {
            erosion: Some((10, 10)),
            closing: None,
        }
    }
}

impl Postprocess {
    pub fn none() -> Self {
        Postprocess {
            erosion: None,
            closing: None,
        }
    }

    pub fn apply(&self, mask: &BinaryMask) -> Result<BinaryMask> {
        let mut m = mask.clone();
        if let Some((w, h)) = self.closing {
            m = close(&m, w, h)?;
        }
        if let Some((w, h)) = self.erosion {
            m = erode(&m, w, h)?;
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemberSpec {
    pub checkpoint: PathBuf,
    pub input_size: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub members: Vec<MemberSpec>,
    pub selection: Selection,
    pub threshold: f64,
    pub postprocess: Postprocess,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::InvalidArgument("an ensemble needs at least one member".into()));
        }
        if let Selection::Single(i) = self.selection {
            if i >= self.members.len() {
                return Err(Error::InvalidArgument(format!(
                    "member {i} selected but only {} configured",
                    self.members.len()
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Member {
    pub network: Network<f32>,
    pub input_size: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<Member>,
    pub selection: Selection,
    pub threshold: f64,
    pub postprocess: Postprocess,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    /// Post-processed mask of the selected member.
    pub mask: BinaryMask,
    pub selected: usize,
    /// Raw (pre-post-processing) mask of every member.
    pub raw: Vec<BinaryMask>,
}

impl Ensemble {
    pub fn load(config: &EnsembleConfig) -> Result<Self> {
        config.validate()?;
        let members = config
            .members
            .iter()
            .map(|m| {
                Ok(Member {
                    network: load_checkpoint(&m.checkpoint)?.network,
                    input_size: m.input_size,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ensemble {
            members,
            selection: config.selection,
            threshold: config.threshold,
            postprocess: config.postprocess,
        })
    }

    /// Selection runs on the raw member masks; post-processing is applied
    /// once to the chosen one.
    pub fn predict(&self, image: &ImageU8, truth: Option<&BinaryMask>) -> Result<EnsemblePrediction> {
        if self.members.is_empty() {
            return Err(Error::InvalidArgument("an ensemble needs at least one member".into()));
        }
        let raw = self
            .members
            .iter()
            .map(|m| predict_single(&m.network, image, m.input_size, self.threshold))
            .collect::<Result<Vec<_>>>()?;
        let selected = match self.selection {
            Selection::Oracle => {
                let truth = truth.ok_or_else(|| {
                    Error::InvalidArgument("oracle selection requires a ground-truth mask".into())
                })?;
                select_oracle(&raw, truth)?
            }
            Selection::Consensus => select_consensus(&raw)?,
            Selection::Single(i) if i < raw.len() => i,
            Selection::Single(i) => {
                return Err(Error::InvalidArgument(format!("no ensemble member {i}")));
            }
        };
        Ok(EnsemblePrediction {
            mask: self.postprocess.apply(&raw[selected])?,
            selected,
            raw,
        })
    }

    /// Predicts and scores every sample. Images are processed in parallel;
    /// the report keeps input order.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<EvalReport> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("nothing to evaluate".into()));
        }
        let images = samples
            .par_iter()
            .map(|s| {
                let pred = self.predict(&s.image, Some(&s.mask))?;
                let member_jaccards = pred
                    .raw
                    .iter()
                    .map(|m| jaccard(m, &s.mask))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ImageResult {
                    id: s.id.clone(),
                    jaccard: jaccard(&pred.mask, &s.mask)?,
                    member: pred.selected,
                    member_jaccards,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport::new(images))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub id: String,
    /// Jaccard of the final (post-processed) mask.
    pub jaccard: f64,
    pub member: usize,
    /// Raw Jaccard of each member before post-processing.
    pub member_jaccards: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageResult>,
    pub mean_jaccard: f64,
}

impl EvalReport {
    pub fn new(images: Vec<ImageResult>) -> Self {
        let mean_jaccard = if images.is_empty() {
            0.0
        } else {
            images.iter().map(|r| r.jaccard).sum::<f64>() / images.len() as f64
        };
        EvalReport { images, mean_jaccard }
    }

    pub fn count(&self) -> usize {
        self.images.len()
    }

    /// Mean raw Jaccard of one member over all images.
    pub fn member_mean(&self, member: usize) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.images.iter().map(|r| r.member_jaccards.get(member).copied()).collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let wrap = |e: csv::Error| Error::InvalidArgument(e.to_string());
        w.write_record(["id", "jaccard", "member"]).map_err(wrap)?;
        for r in &self.images {
            w.write_record([r.id.clone(), r.jaccard.to_string(), r.member.to_string()])
                .map_err(wrap)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// `key=value` summary; `extra` lines (a configuration echo) are
    /// appended verbatim.
    pub fn summary(&self, extra: &[(String, String)]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mean_jaccard={}", self.mean_jaccard);
        let _ = writeln!(s, "count={}", self.count());
        let members = self.images.first().map_or(0, |r| r.member_jaccards.len());
        for m in 0..members {
            if let Some(v) = self.member_mean(m) {
                let _ = writeln!(s, "member{m}_raw_mean_jaccard={v}");
            }
        }
        for (k, v) in extra {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn write(&self, csv_path: &Path, summary_path: &Path, extra: &[(String, String)]) -> Result<()> {
        fs::write(csv_path, self.to_csv()?).map_err(|e| Error::io(csv_path, e))?;
        fs::write(summary_path, self.summary(extra)).map_err(|e| Error::io(summary_path, e))
    }
}
