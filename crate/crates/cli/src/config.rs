//! TOML pipeline configuration. Every section is optional and falls back to
//! the library defaults; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use lesionseg::augment::{AugmentSpec, CenterConstraint, CenterSampling};
use lesionseg::ensemble::{Postprocess, Selection};
use lesionseg::nn::NetworkConfig;
use lesionseg::synth::SynthSpec;
use lesionseg::train::{LossKind, TrainConfig};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub master_seed: u64,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub augment: AugmentSection,
    pub ensemble: EnsembleSection,
    pub synth: SynthSection,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub stage_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub dropout_prob: f64,
    pub skip_connections: bool,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let d = NetworkConfig::default();
        NetworkSection {
            stage_channels: d.stage_channels,
            bottleneck_channels: d.bottleneck_channels,
            dropout_prob: d.dropout_prob,
            skip_connections: d.skip_connections,
            bn_epsilon: d.bn_epsilon,
            bn_momentum: d.bn_momentum,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Bce,
    SoftJaccard,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub loss: LossName,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Save an intermediate checkpoint every N epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            loss: LossName::SoftJaccard,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            epochs: d.epochs,
            batch_size: d.batch_size,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SamplingName {
    Literal,
    Symmetric,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintName {
    Euclidean,
    PerAxis,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub rcpv_apply_prob: f64,
    pub fill_low: u16,
    pub fill_high: u16,
    pub center_sampling: SamplingName,
    pub center_constraint: ConstraintName,
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub crop_min_fraction: f64,
    pub grayscale_first: bool,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentSpec::default();
        AugmentSection {
            rcpv_apply_prob: d.rcpv_apply_prob,
            fill_low: d.fill_low,
            fill_high: d.fill_high,
            center_sampling: match d.center_sampling {
                CenterSampling::Literal => SamplingName::Literal,
                CenterSampling::Symmetric => SamplingName::Symmetric,
            },
            center_constraint: match d.center_constraint {
                CenterConstraint::Euclidean => ConstraintName::Euclidean,
                CenterConstraint::PerAxis => ConstraintName::PerAxis,
            },
            flip_h_prob: d.flip_h_prob,
            flip_v_prob: d.flip_v_prob,
            crop_min_fraction: d.crop_min_fraction,
            grayscale_first: d.grayscale_first,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SelectionName {
    Oracle,
    Consensus,
    Single,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MemberSection {
    /// Checkpoint file stem inside the models directory.
    pub name: String,
    /// `[width, height]` of the network input.
    pub input_size: [usize; 2],
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    /// Directory holding member checkpoints, relative to the config file.
    pub models_dir: PathBuf,
    pub members: Vec<MemberSection>,
    pub selection: SelectionName,
    /// Member used by `single` selection.
    pub single_member: usize,
    pub threshold: f64,
    pub erosion_enabled: bool,
    pub erosion_kernel: [usize; 2],
    pub closing_enabled: bool,
    pub closing_kernel: [usize; 2],
}

impl Default for EnsembleSection {
    fn default() -> Self {
        let member = |w: usize, h: usize| MemberSection {
            name: format!("m{w}x{h}"),
            input_size: [w, h],
        };
        EnsembleSection {
            models_dir: PathBuf::from("models"),
            members: vec![member(500, 350), member(450, 300), member(400, 250)],
            selection: SelectionName::Oracle,
            single_member: 0,
            threshold: 0.5,
            erosion_enabled: true,
            erosion_kernel: [10, 10],
            closing_enabled: false,
            closing_kernel: [5, 5],
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub hair_prob: f64,
    pub noise: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthSpec::default();
        SynthSection {
            count: 200,
            width: d.width,
            height: d.height,
            hair_prob: d.hair_prob,
            noise: d.noise,
        }
    }
}

/// A parsed configuration together with the directory relative paths
/// resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let config = Self::parse(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok(LoadedConfig {
            config,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: lesionseg::Error| CliError::Usage(e.to_string());
        self.network_config().validate().map_err(usage)?;
        self.train_config((1, 1)).validate().map_err(usage)?;
        if self.ensemble.members.is_empty() {
            return Err(CliError::Usage("ensemble.members must not be empty".into()));
        }
        for (i, m) in self.ensemble.members.iter().enumerate() {
            if m.name.is_empty() || m.name.contains(['/', '\\']) {
                return Err(CliError::Usage(format!("member {i} has an invalid name {:?}", m.name)));
            }
            if m.input_size.contains(&0) {
                return Err(CliError::Usage(format!("member {:?} has a zero input size", m.name)));
            }
            if self.ensemble.members[..i].iter().any(|o| o.name == m.name) {
                return Err(CliError::Usage(format!("duplicate member name {:?}", m.name)));
            }
        }
        if self.ensemble.selection == SelectionName::Single && self.ensemble.single_member >= self.ensemble.members.len() {
            return Err(CliError::Usage("ensemble.single_member is out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.ensemble.threshold) {
            return Err(CliError::Usage("ensemble.threshold must lie in [0, 1]".into()));
        }
        if self.ensemble.erosion_kernel.contains(&0) || self.ensemble.closing_kernel.contains(&0) {
            return Err(CliError::Usage("morphology kernels must be at least 1x1".into()));
        }
        if self.synth.width < 8 || self.synth.height < 8 || !(0.0..=1.0).contains(&self.synth.hair_prob) {
            return Err(CliError::Usage("synth images must be at least 8x8 with hair_prob in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn network_config(&self) -> NetworkConfig {
        let n = &self.network;
        NetworkConfig {
            in_channels: 3,
            stage_channels: n.stage_channels.clone(),
            bottleneck_channels: n.bottleneck_channels,
            dropout_prob: n.dropout_prob,
            skip_connections: n.skip_connections,
            bn_epsilon: n.bn_epsilon,
            bn_momentum: n.bn_momentum,
        }
    }

    pub fn augment_spec(&self) -> AugmentSpec {
        let a = &self.augment;
        AugmentSpec {
            rcpv_apply_prob: a.rcpv_apply_prob,
            fill_low: a.fill_low,
            fill_high: a.fill_high,
            center_sampling: match a.center_sampling {
                SamplingName::Literal => CenterSampling::Literal,
                SamplingName::Symmetric => CenterSampling::Symmetric,
            },
            center_constraint: match a.center_constraint {
                ConstraintName::Euclidean => CenterConstraint::Euclidean,
                ConstraintName::PerAxis => CenterConstraint::PerAxis,
            },
            flip_h_prob: a.flip_h_prob,
            flip_v_prob: a.flip_v_prob,
            crop_min_fraction: a.crop_min_fraction,
            grayscale_first: a.grayscale_first,
        }
    }

    pub fn train_config(&self, input_size: (usize, usize)) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            input_size,
            loss: match t.loss {
                LossName::Bce => LossKind::Bce,
                LossName::SoftJaccard => LossKind::SoftJaccard,
            },
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            master_seed: self.master_seed,
            augment: self.augment_spec(),
        }
    }

    pub fn selection(&self) -> Selection {
        match self.ensemble.selection {
            SelectionName::Oracle => Selection::Oracle,
            SelectionName::Consensus => Selection::Consensus,
            SelectionName::Single => Selection::Single(self.ensemble.single_member),
        }
    }

    pub fn postprocess(&self) -> Postprocess {
        let e = &self.ensemble;
        let kernel = |k: [usize; 2]| (k[0], k[1]);
        Postprocess {
            erosion: e.erosion_enabled.then(|| kernel(e.erosion_kernel)),
            closing: e.closing_enabled.then(|| kernel(e.closing_kernel)),
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            width: self.synth.width,
            height: self.synth.height,
            hair_prob: self.synth.hair_prob,
            noise: self.synth.noise,
        }
    }
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn models_dir(&self) -> PathBuf {
        self.resolve(&self.config.ensemble.models_dir)
    }
}
