//! Paired trajectory-control benchmark: a conditioned model against an
//! identically trained unconditional one, scored by centroid-tracked TE on
//! held-out scenes.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::latent::LatentVideo;
use crate::metrics::trajectory_error;
use crate::rng::Seed;
use crate::tensor::Tensor;
use crate::toy::net::VelocityField;
use crate::toy::sample::sample;
use crate::toy::scene::track_centroids;
use crate::toy::train::{
    make_dataset, train_toy_with_progress, unconditional, CurvePoint, SceneItem, TrainConfig,
    TrainOutput,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub train: TrainConfig,
    pub heldout_scenes: usize,
    pub sample_steps: usize,
    /// Fraction of the frame peak subtracted before taking the centroid.
    pub track_threshold: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            heldout_scenes: 16,
            sample_steps: 20,
            track_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub te_conditioned: f64,
    pub te_baseline: f64,
    /// `1 - te_conditioned / te_baseline`.
    pub te_reduction: f64,
    /// Fixed-batch `l_video` at step 0 over its value after training.
    pub loss_drop_conditioned: f64,
    pub loss_drop_baseline: f64,
    pub per_scene: Vec<[f64; 2]>,
}

pub struct ControlOutcome {
    pub report: ControlReport,
    pub conditioned: TrainOutput,
    pub baseline: TrainOutput,
}

/// Samples a clip for `item` and decodes it to pixels.
pub fn generate(
    field: &dyn VelocityField,
    item: &SceneItem,
    conditioned: bool,
    cfg: &ControlConfig,
    seed: Seed,
) -> Result<Tensor> {
    let cond = if conditioned {
        item.cond.clone()
    } else {
        unconditional(&item.cond)?
    };
    let lv: LatentVideo = sample(field, &cond.xtraj, &cond.mask, cfg.sample_steps, seed)?;
    cfg.train
        .vae()
        .decode(&lv, cfg.train.scene.height, cfg.train.scene.width)
}

pub fn tracked_te(
    field: &dyn VelocityField,
    item: &SceneItem,
    conditioned: bool,
    cfg: &ControlConfig,
    seed: Seed,
) -> Result<f64> {
    let video = generate(field, item, conditioned, cfg, seed)?;
    let tracked = track_centroids(&video, cfg.track_threshold, &item.scene.path)?;
    trajectory_error(&item.scene.path, &tracked)
}

pub fn run_control(
    cfg: &ControlConfig,
    mut progress: impl FnMut(&str, &CurvePoint),
) -> Result<ControlOutcome> {
    let seed = cfg.train.seed;
    let items = make_dataset(&cfg.train, seed.derive_str("scenes"), cfg.train.num_scenes)?;
    let conditioned = train_toy_with_progress(&items, &cfg.train, |p| progress("conditioned", p))?;
    let base_cfg = TrainConfig {
        dropout_p: 1.0,
        ..cfg.train
    };
    let baseline = train_toy_with_progress(&items, &base_cfg, |p| progress("baseline", p))?;

    let heldout = make_dataset(&cfg.train, seed.derive_str("heldout"), cfg.heldout_scenes)?;
    let mut per_scene = Vec::with_capacity(heldout.len());
    for (k, item) in heldout.iter().enumerate() {
        let s = seed.derive_str("sample").derive(&[k as u64]);
        per_scene.push([
            tracked_te(&conditioned.net, item, true, cfg, s)?,
            tracked_te(&baseline.net, item, false, cfg, s)?,
        ]);
    }
    let n = per_scene.len().max(1) as f64;
    let te_conditioned = per_scene.iter().map(|p| p[0]).sum::<f64>() / n;
    let te_baseline = per_scene.iter().map(|p| p[1]).sum::<f64>() / n;
    let report = ControlReport {
        te_conditioned,
        te_baseline,
        te_reduction: 1.0 - te_conditioned / te_baseline,
        loss_drop_conditioned: conditioned.eval_initial.l_video / conditioned.eval_final.l_video,
        loss_drop_baseline: baseline.eval_initial.l_video / baseline.eval_final.l_video,
        per_scene,
    };
    Ok(ControlOutcome {
        report,
        conditioned,
        baseline,
    })
}
