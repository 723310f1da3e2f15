//! Flat TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::candidate_ops::DecoderOpSet;
use crate::data::PhantomSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::nasvit::AlphaSharing;
use crate::objectives::{LossWeights, UncertaintyMean};
use crate::optim::{AdamConfig, SgdConfig};
use crate::supernet::SupernetConfig;
use crate::trainer::TrainConfig;

/// Value of `data` that selects generated phantoms instead of a directory.
pub const PHANTOM_DATA: &str = "phantom";

/// Every knob of one run. `output_dir` and `data` are required; everything
/// else has a default and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// `"phantom"` or a directory with `images/` and optional `masks/`.
    pub data: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d::labeled_fraction")]
    pub labeled_fraction: f64,
    #[serde(default = "d::test_fraction")]
    pub test_fraction: f64,

    #[serde(default = "d::phantom_count")]
    pub phantom_count: usize,
    #[serde(default = "d::phantom_size")]
    pub phantom_size: usize,
    #[serde(default = "d::interior_axes")]
    pub interior_axes: [f64; 2],
    #[serde(default = "d::wall_thickness")]
    pub wall_thickness: [f64; 2],
    #[serde(default = "d::center_jitter")]
    pub center_jitter: f64,
    #[serde(default = "d::speckle")]
    pub speckle: f64,
    #[serde(default = "d::bias")]
    pub bias: f64,

    #[serde(default = "d::layers")]
    pub layers: usize,
    #[serde(default = "d::nodes")]
    pub nodes: usize,
    #[serde(default = "d::c_base")]
    pub c_base: usize,
    #[serde(default = "d::num_resolutions")]
    pub num_resolutions: usize,
    #[serde(default = "d::channel_fraction")]
    pub channel_fraction: f64,
    #[serde(default)]
    pub alpha_sharing: AlphaSharing,
    #[serde(default = "d::num_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub decoder_op_set: DecoderOpSet,

    #[serde(default = "d::epochs")]
    pub epochs: usize,
    #[serde(default = "d::arch_warmup")]
    pub arch_warmup: usize,
    #[serde(default = "d::g_steps")]
    pub g_steps: usize,
    #[serde(default = "d::weight_lr")]
    pub weight_lr: f64,
    #[serde(default = "d::momentum")]
    pub momentum: f64,
    #[serde(default = "d::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d::arch_lr")]
    pub arch_lr: f64,
    #[serde(default = "d::arch_weight_decay")]
    pub arch_weight_decay: f64,
    #[serde(default = "d::g_lr")]
    pub g_lr: f64,
    #[serde(default = "d::batch")]
    pub labeled_batch: usize,
    #[serde(default = "d::batch")]
    pub unlabeled_batch: usize,
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "d::contrastive_resolutions")]
    pub contrastive_resolutions: Vec<usize>,
    #[serde(default)]
    pub uncertainty_mean: UncertaintyMean,

    #[serde(default = "d::lambda1")]
    pub lambda1: f64,
    #[serde(default = "d::lambda3")]
    pub lambda3: f64,
    #[serde(default = "d::ramp_max")]
    pub ramp_max: f64,
    #[serde(default = "d::i_ramp")]
    pub i_ramp: usize,
}

mod d {
    use crate::data::PhantomSpec;
    use crate::encoder::EncoderConfig;
    use crate::objectives::LossWeights;
    use crate::trainer::TrainConfig;

    pub fn labeled_fraction() -> f64 {
        0.25
    }
    pub fn test_fraction() -> f64 {
        0.2
    }
    pub fn phantom_count() -> usize {
        200
    }
    pub fn phantom_size() -> usize {
        PhantomSpec::default().size
    }
    pub fn interior_axes() -> [f64; 2] {
        PhantomSpec::default().interior_axes
    }
    pub fn wall_thickness() -> [f64; 2] {
        PhantomSpec::default().wall_thickness
    }
    pub fn center_jitter() -> f64 {
        PhantomSpec::default().center_jitter
    }
    pub fn speckle() -> f64 {
        PhantomSpec::default().speckle
    }
    pub fn bias() -> f64 {
        PhantomSpec::default().bias
    }
    pub fn layers() -> usize {
        EncoderConfig::default().layers
    }
    pub fn nodes() -> usize {
        EncoderConfig::default().nodes
    }
    pub fn c_base() -> usize {
        EncoderConfig::default().c_base
    }
    pub fn num_resolutions() -> usize {
        EncoderConfig::default().num_resolutions
    }
    pub fn channel_fraction() -> f64 {
        EncoderConfig::default().channel_fraction
    }
    pub fn num_classes() -> usize {
        3
    }
    pub fn epochs() -> usize {
        TrainConfig::default().epochs
    }
    pub fn arch_warmup() -> usize {
        TrainConfig::default().arch_warmup
    }
    pub fn g_steps() -> usize {
        TrainConfig::default().g_steps
    }
    pub fn weight_lr() -> f64 {
        TrainConfig::default().weight_opt.lr
    }
    pub fn momentum() -> f64 {
        TrainConfig::default().weight_opt.momentum
    }
    pub fn weight_decay() -> f64 {
        TrainConfig::default().weight_opt.weight_decay
    }
    pub fn arch_lr() -> f64 {
        TrainConfig::default().arch_opt.lr
    }
    pub fn arch_weight_decay() -> f64 {
        TrainConfig::default().arch_opt.weight_decay
    }
    pub fn g_lr() -> f64 {
        TrainConfig::default().g_opt.lr
    }
    pub fn batch() -> usize {
        4
    }
    pub fn contrastive_resolutions() -> Vec<usize> {
        TrainConfig::default().contrastive_resolutions
    }
    pub fn lambda1() -> f64 {
        LossWeights::default().lambda1
    }
    pub fn lambda3() -> f64 {
        LossWeights::default().lambda3
    }
    pub fn ramp_max() -> f64 {
        LossWeights::default().ramp_max
    }
    pub fn i_ramp() -> usize {
        LossWeights::default().i_ramp
    }
}

impl RunConfig {
    /// Defaults for everything except the two required keys.
    pub fn new(output_dir: impl Into<PathBuf>, data: impl Into<String>) -> Self {
        let text = format!(
            "output_dir = {}\ndata = {}\n",
            toml::Value::String(output_dir.into().to_string_lossy().into_owned()),
            toml::Value::String(data.into())
        );
        toml::from_str(&text).expect("required keys alone form a valid config")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn uses_phantoms(&self) -> bool {
        self.data == PHANTOM_DATA
    }

    pub fn supernet(&self) -> SupernetConfig {
        SupernetConfig {
            encoder: EncoderConfig {
                layers: self.layers,
                nodes: self.nodes,
                c_base: self.c_base,
                num_resolutions: self.num_resolutions,
                channel_fraction: self.channel_fraction,
                alpha_sharing: self.alpha_sharing,
            },
            in_channels: 1,
            num_classes: self.num_classes,
            decoder_ops: self.decoder_op_set,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            arch_warmup: self.arch_warmup,
            g_steps: self.g_steps,
            weight_opt: SgdConfig {
                lr: self.weight_lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            arch_opt: AdamConfig::new(self.arch_lr, self.arch_weight_decay),
            g_opt: AdamConfig::new(self.g_lr, 0.0),
            labeled_batch: self.labeled_batch,
            unlabeled_batch: self.unlabeled_batch,
            grad_clip: self.grad_clip,
            steps_per_epoch: self.steps_per_epoch,
            seed: self.seed,
            contrastive_resolutions: self.contrastive_resolutions.clone(),
            uncertainty_mean: self.uncertainty_mean,
            loss: LossWeights {
                lambda1: self.lambda1,
                lambda3: self.lambda3,
                ramp_max: self.ramp_max,
                i_ramp: self.i_ramp,
            },
        }
    }

    pub fn phantom(&self) -> PhantomSpec {
        PhantomSpec {
            size: self.phantom_size,
            num_classes: self.num_classes,
            interior_axes: self.interior_axes,
            wall_thickness: self.wall_thickness,
            center_jitter: self.center_jitter,
            speckle: self.speckle,
            bias: self.bias,
            ..PhantomSpec::default()
        }
    }

    /// Checks every derived configuration before any compute happens.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| match e {
            Error::Config(m) => Error::Config(format!("{name}: {m}")),
            other => other,
        };
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir: must not be empty".into()));
        }
        if self.data.is_empty() {
            return Err(Error::Config("data: must not be empty".into()));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!("labeled_fraction: {} is outside (0, 1]", self.labeled_fraction)));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test_fraction: {} is outside [0, 1)", self.test_fraction)));
        }
        if self.uses_phantoms() {
            if self.phantom_count == 0 {
                return Err(Error::Config("phantom_count: must be positive".into()));
            }
            self.phantom().validate().map_err(|e| field("phantom", e))?;
        }
        self.supernet().validate().map_err(|e| field("network", e))?;
        let train = self.train();
        train.validate().map_err(|e| field("training", e))?;
        let avail = self.supernet().encoder.resolutions();
        if let Some(r) = self.contrastive_resolutions.iter().find(|r| !avail.contains(r)) {
            return Err(Error::Config(format!("contrastive_resolutions: {r} is not one of {avail:?}")));
        }
        Ok(())
    }
}
