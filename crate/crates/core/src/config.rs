//! Run configuration shared by the CLI subcommands and the pipeline.
//!
//! Every field has a default, so a config file only needs the values it
//! changes. The full, materialized config is written next to outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{DEFAULT_GAMMA_INIT, DEFAULT_ROPE_BASE};
use crate::error::{Error, Result};
use crate::flow::{AvWeights, LossWeights, TimeSampler};
use crate::kinematics::{BoundaryAccel, DEFAULT_ENCODER_HIDDEN};
use crate::metrics::MetricConfig;
use crate::optim::OptimizerConfig;
use crate::rng::Seed;
use crate::toy::control::ControlConfig;
use crate::toy::net::NetConfig;
use crate::toy::scene::SceneParams;
use crate::toy::train::{TrainConfig, TOY_LR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Latent frame count `f`.
    pub frames: usize,
    /// Latent channels `d`. The latent height and width follow from the
    /// image size and `vae_downsample`.
    pub channels: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            channels: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KinConfig {
    pub boundary: BoundaryAccel,
    pub encoder_hidden: usize,
    /// Width of kinematic tokens and of the audio stream they attend from.
    pub token_dim: usize,
    pub heads: usize,
    pub rope_base: f64,
}

impl Default for KinConfig {
    fn default() -> Self {
        Self {
            boundary: BoundaryAccel::Replicate,
            encoder_hidden: DEFAULT_ENCODER_HIDDEN,
            token_dim: 32,
            heads: 4,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }
}

/// Desk-scale generator settings. Loss weights, blur, dropout and the
/// optimizer other than its learning rate come from the top level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub scene: SceneParams,
    pub num_scenes: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub net: NetConfig,
    pub time_sampler: TimeSampler,
    pub eval_items: usize,
    pub sample_steps: usize,
    pub track_threshold: f64,
    pub audio_sample_rate: u32,
    pub carrier_hz: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let c = ControlConfig::default();
        Self {
            scene: SceneParams::default(),
            num_scenes: 256,
            steps: 300,
            batch_size: 8,
            lr: TOY_LR,
            net: NetConfig::default(),
            time_sampler: TimeSampler::Uniform,
            eval_items: 32,
            sample_steps: c.sample_steps,
            track_threshold: c.track_threshold,
            audio_sample_rate: 16_000,
            carrier_hz: 440.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub vae_downsample: usize,
    pub blur_sigma: f64,
    pub loss: LossWeights,
    pub av_weights: AvWeights,
    pub dropout_p: f64,
    pub gamma_init: f64,
    pub optimizer: OptimizerConfig,
    pub kinematics: KinConfig,
    pub metrics: MetricConfig,
    pub toy: ToyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: GridConfig::default(),
            vae_downsample: 1,
            blur_sigma: 0.5,
            loss: LossWeights::default(),
            av_weights: AvWeights::default(),
            dropout_p: 0.05,
            gamma_init: DEFAULT_GAMMA_INIT,
            optimizer: OptimizerConfig::default(),
            kinematics: KinConfig::default(),
            metrics: MetricConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, serde_json::Value)>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        leaf => out.push((prefix.to_owned(), leaf.clone())),
    }
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn seed(&self) -> Seed {
        Seed(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.frames < 2 || self.grid.channels == 0 || self.vae_downsample == 0 {
            return Err(Error::invalid(
                "grid needs >= 2 frames, >= 1 channel and vae_downsample >= 1",
            ));
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(Error::invalid("blur_sigma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("dropout_p must lie in [0, 1]"));
        }
        let m = &self.metrics;
        if !(m.hop_seconds > 0.0 && m.window_seconds >= m.hop_seconds && m.cap_seconds >= 0.0) {
            return Err(Error::invalid(
                "metrics need window >= hop > 0 and cap >= 0",
            ));
        }
        if !(m.theta_traj > 0.0 && m.theta_audio > 0.0) {
            return Err(Error::invalid("event thresholds must be positive"));
        }
        if self.kinematics.heads == 0
            || self.kinematics.token_dim % (2 * self.kinematics.heads) != 0
        {
            return Err(Error::invalid(
                "token_dim must be a positive multiple of 2 x heads",
            ));
        }
        if self.toy.sample_steps == 0 {
            return Err(Error::invalid("sample_steps must be >= 1"));
        }
        self.train_config().validate()
    }

    /// Dotted paths of every value that differs from the defaults.
    pub fn overrides(&self) -> Vec<String> {
        let (mut ours, mut base) = (Vec::new(), Vec::new());
        flatten(
            "",
            &serde_json::to_value(self).expect("serializable"),
            &mut ours,
        );
        flatten(
            "",
            &serde_json::to_value(Self::default()).expect("serializable"),
            &mut base,
        );
        let base: std::collections::BTreeMap<_, _> = base.into_iter().collect();
        ours.into_iter()
            .filter(|(k, v)| base.get(k) != Some(v))
            .map(|(k, v)| format!("{k} = {v}"))
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.toy;
        TrainConfig {
            seed: self.seed().derive_str("toy"),
            scene: SceneParams {
                frames: self.grid.frames,
                ..t.scene
            },
            num_scenes: t.num_scenes,
            steps: t.steps,
            batch_size: t.batch_size,
            net: NetConfig {
                channels: self.grid.channels,
                ..t.net
            },
            optimizer: OptimizerConfig {
                lr: t.lr,
                ..self.optimizer
            },
            dropout_p: self.dropout_p,
            loss: self.loss,
            av_weights: self.av_weights,
            time_sampler: t.time_sampler,
            blur_sigma: self.blur_sigma,
            vae_downsample: self.vae_downsample,
            eval_items: t.eval_items,
        }
    }

    pub fn control_config(&self) -> ControlConfig {
        ControlConfig {
            train: self.train_config(),
            sample_steps: self.toy.sample_steps,
            track_threshold: self.toy.track_threshold,
            ..Default::default()
        }
    }
}
