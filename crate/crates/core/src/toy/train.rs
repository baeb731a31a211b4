//! Hybrid flow-matching training of the toy velocity network.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    combine_av, hybrid_interpolant, region_losses_grad, traj_dropout, AvWeights, ConditionBundle,
    LossWeights, TimeSampler,
};
use crate::injection::inject;
use crate::latent::ToyVae;
use crate::mask::build_mask;
use crate::nn::Parameterized;
use crate::optim::{AdamW, OptimizerConfig};
use crate::rng::{gaussian_noise, Seed};
use crate::tensor::Tensor;
use crate::toy::net::{NetConfig, VelocityNet};
use crate::toy::scene::{make_scene, SceneParams, SyntheticScene};
use crate::trajectory::{latent_extent, to_latent_grid, LatentTrajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: Seed,
    pub scene: SceneParams,
    pub num_scenes: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub net: NetConfig,
    pub optimizer: OptimizerConfig,
    pub dropout_p: f64,
    pub loss: LossWeights,
    pub av_weights: AvWeights,
    pub time_sampler: TimeSampler,
    pub blur_sigma: f64,
    pub vae_downsample: usize,
    /// Size of the fixed batch scored before and after training.
    pub eval_items: usize,
}

/// Learning rate of the toy runs, far above the large-scale setting so a
/// few thousand steps suffice.
pub const TOY_LR: f64 = 3e-3;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: Seed(0),
            scene: SceneParams::default(),
            num_scenes: 256,
            steps: 2000,
            batch_size: 8,
            net: NetConfig::default(),
            optimizer: OptimizerConfig {
                lr: TOY_LR,
                ..Default::default()
            },
            dropout_p: 0.05,
            loss: LossWeights::default(),
            av_weights: AvWeights::default(),
            time_sampler: TimeSampler::Uniform,
            blur_sigma: 0.5,
            vae_downsample: 1,
            eval_items: 32,
        }
    }
}

pub const MIN_SCENES: usize = 64;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.num_scenes < MIN_SCENES {
            return Err(Error::invalid(format!(
                "training needs at least {MIN_SCENES} scenes, got {}",
                self.num_scenes
            )));
        }
        if self.batch_size == 0 || self.eval_items == 0 || self.vae_downsample == 0 {
            return Err(Error::invalid(
                "batch_size, eval_items and vae_downsample must be >= 1",
            ));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!(
                "dropout_p must lie in [0, 1], got {}",
                self.dropout_p
            )));
        }
        if self.net.channels != 1 {
            return Err(Error::invalid(
                "toy scenes are single-channel; set net.channels = 1",
            ));
        }
        Ok(())
    }

    pub fn vae(&self) -> ToyVae {
        ToyVae {
            downsample: self.vae_downsample,
        }
    }

    /// Latent grid `(h, w)`.
    pub fn latent_grid(&self) -> (usize, usize) {
        (
            latent_extent(self.scene.height as u32, self.vae_downsample),
            latent_extent(self.scene.width as u32, self.vae_downsample),
        )
    }
}

/// A scene in latent space with its trajectory conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneItem {
    pub scene: SyntheticScene,
    /// `[f, h, w, 1]`.
    pub x0: Tensor,
    pub lt: LatentTrajectory,
    pub cond: ConditionBundle,
}

/// Encodes every frame with the toy VAE, `[f, H, W, C] -> [f, h, w, C]`.
pub fn encode_video(vae: ToyVae, video: &Tensor) -> Result<Tensor> {
    let &[f, hh, ww, c] = video.dims() else {
        return Err(Error::invalid("video must be [f, H, W, C]"));
    };
    let frame_len = hh * ww * c;
    let mut out = Vec::new();
    let mut dims = Vec::new();
    for i in 0..f {
        let frame = Tensor::new(
            vec![hh, ww, c],
            video.data()[i * frame_len..(i + 1) * frame_len].to_vec(),
        )?;
        let z = vae.encode(&frame)?;
        dims = z.dims().to_vec();
        out.extend_from_slice(z.data());
    }
    let mut full = vec![f];
    full.extend(dims);
    Tensor::new(full, out)
}

/// First latent frame `[h, w, C]` of a `[f, h, w, C]` clip.
pub fn first_frame(x: &Tensor) -> Result<Tensor> {
    let d = x.dims();
    let len: usize = d[1..].iter().product();
    Tensor::new(d[1..].to_vec(), x.data()[..len].to_vec())
}

pub fn prepare_item(scene: SyntheticScene, cfg: &TrainConfig, seed: Seed) -> Result<SceneItem> {
    let x0 = encode_video(cfg.vae(), &scene.video)?;
    let (h, w) = cfg.latent_grid();
    let lt = to_latent_grid(&scene.path, cfg.vae_downsample, h, w)?;
    let mask = build_mask(&lt, scene.path.frames, h, w, cfg.blur_sigma, seed)?;
    let xtraj = inject(&first_frame(&x0)?, &lt, &mask)?.data;
    Ok(SceneItem {
        scene,
        x0,
        lt,
        cond: ConditionBundle {
            xtraj,
            mask,
            dropped: false,
        },
    })
}

/// Seeded scene set. Scene `k` depends only on `(seed, k)`.
pub fn make_dataset(cfg: &TrainConfig, seed: Seed, count: usize) -> Result<Vec<SceneItem>> {
    (0..count)
        .map(|k| {
            let s = seed.derive(&[k as u64]);
            let scene = make_scene(&cfg.scene, None, s.derive_str("scene"))?;
            prepare_item(scene, cfg, s.derive_str("mask"))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub l_out: f64,
    pub l_traj: f64,
    pub l_video: f64,
    pub l_final: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalLoss {
    pub l_out: f64,
    pub l_traj: f64,
    pub l_video: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: VelocityNet,
    pub curve: Vec<CurvePoint>,
    pub eval_initial: EvalLoss,
    pub eval_final: EvalLoss,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,l_out,l_traj,l_video,l_final,grad_norm\n");
    for p in curve {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.step, p.l_out, p.l_traj, p.l_video, p.l_final, p.grad_norm
        ));
    }
    s
}

/// One flow-matching draw: which scene, `t`, the noise and the conditioning.
struct Draw {
    item: usize,
    t: f64,
    eps: Tensor,
    cond: ConditionBundle,
}

fn draw(items: &[SceneItem], cfg: &TrainConfig, seed: Seed, dropout: Option<f64>) -> Result<Draw> {
    let mut rng = seed.derive_str("pick").rng();
    let item = rng.random_range(0..items.len());
    let t = cfg.time_sampler.sample(&mut rng);
    let eps = gaussian_noise(items[item].x0.dims(), seed.derive_str("noise"))?;
    let base = items[item].cond.clone();
    let cond = match dropout {
        Some(p) => traj_dropout(base, p, seed.derive_str("drop"))?,
        None => base,
    };
    Ok(Draw { item, t, eps, cond })
}

/// Mean region losses over `draws`, plus the parameter gradient of the
/// mean final loss when `with_grad` is set. Clips are processed one at a
/// time.
fn batch_loss(
    net: &VelocityNet,
    items: &[SceneItem],
    draws: &[Draw],
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<(EvalLoss, Option<VelocityNet>)> {
    let mut acc = EvalLoss {
        l_out: 0.0,
        l_traj: 0.0,
        l_video: 0.0,
    };
    let mut grad = with_grad.then(|| net.zeros_like());
    let nb = draws.len() as f64;
    let d = cfg.net.channels;
    for dr in draws {
        let fs = hybrid_interpolant(
            &items[dr.item].x0,
            &dr.eps,
            &dr.cond.xtraj,
            &dr.cond.mask,
            dr.t,
        )?;
        let u = net.features(&fs.x_t, &dr.cond.xtraj, &dr.cond.mask, dr.t)?;
        let m = &dr.cond.mask;
        let (out, cache) = net.forward_rows(&u, m.frames, m.h, m.w);
        let v_hat = Tensor::new(fs.v_target.dims().to_vec(), out.iter().copied().collect())?;
        let (l, g) = region_losses_grad(&v_hat, &fs.v_target, &m.soft, cfg.loss)?;
        acc.l_out += l.l_out / nb;
        acc.l_traj += l.l_traj / nb;
        acc.l_video += l.l_video / nb;
        if let Some(total) = grad.as_mut() {
            let scale = cfg.av_weights.video / nb;
            let dout =
                Array2::from_shape_vec((m.cells(), d), g.into_data()).expect("cells x d") * scale;
            total.add_assign(&net.backward(&cache, &dout));
        }
    }
    Ok((acc, grad))
}

fn eval_draws(items: &[SceneItem], cfg: &TrainConfig) -> Result<Vec<Draw>> {
    // scored in the model's own conditioning mode: conditioned unless fully dropped
    let dropout = (cfg.dropout_p >= 1.0).then_some(1.0);
    let root = cfg.seed.derive_str("eval");
    (0..cfg.eval_items)
        .map(|e| draw(items, cfg, root.derive(&[e as u64]), dropout))
        .collect()
}

pub fn evaluate(net: &VelocityNet, items: &[SceneItem], cfg: &TrainConfig) -> Result<EvalLoss> {
    let draws = eval_draws(items, cfg)?;
    Ok(batch_loss(net, items, &draws, cfg, false)?.0)
}

/// Trains from a seeded initialization on `items`.
pub fn train_toy(items: &[SceneItem], cfg: &TrainConfig) -> Result<TrainOutput> {
    train_toy_with_progress(items, cfg, |_| {})
}

pub fn train_toy_with_progress(
    items: &[SceneItem],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&CurvePoint),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if items.len() < MIN_SCENES {
        return Err(Error::invalid(format!(
            "training needs at least {MIN_SCENES} scenes, got {}",
            items.len()
        )));
    }
    let mut net = VelocityNet::new(cfg.net, cfg.seed.derive_str("init"))?;
    let mut opt = AdamW::new(cfg.optimizer, net.num_params());
    let eval = eval_draws(items, cfg)?;
    let eval_initial = batch_loss(&net, items, &eval, cfg, false)?.0;
    let root = cfg.seed.derive_str("train");
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let draws = (0..cfg.batch_size)
            .map(|b| {
                draw(
                    items,
                    cfg,
                    root.derive(&[step as u64, b as u64]),
                    Some(cfg.dropout_p),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, grad) = batch_loss(&net, items, &draws, cfg, true)?;
        if !loss.l_video.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("l_video = {}", loss.l_video),
            });
        }
        let g = grad.expect("requested");
        let grad_norm = opt.step(&mut net, &g);
        if !grad_norm.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("gradient norm = {grad_norm}"),
            });
        }
        let point = CurvePoint {
            step,
            l_out: loss.l_out,
            l_traj: loss.l_traj,
            l_video: loss.l_video,
            l_final: combine_av(loss.l_video, 0.0, cfg.av_weights),
            grad_norm,
        };
        progress(&point);
        curve.push(point);
    }
    let eval_final = batch_loss(&net, items, &eval, cfg, false)?.0;
    Ok(TrainOutput {
        net,
        curve,
        eval_initial,
        eval_final,
    })
}

/// Unconditional counterpart of a conditioning bundle.
pub fn unconditional(cond: &ConditionBundle) -> Result<ConditionBundle> {
    traj_dropout(cond.clone(), 1.0, Seed(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            scene: SceneParams {
                height: 8,
                width: 8,
                frames: 4,
                margin: 1.0,
                ..Default::default()
            },
            num_scenes: 64,
            steps: 3,
            batch_size: 2,
            net: NetConfig {
                hidden: 4,
                ..Default::default()
            },
            eval_items: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_keeps_initial_parameters() {
        let mut cfg = small();
        cfg.optimizer.lr = 0.0;
        let items = make_dataset(&cfg, Seed(1), 64).unwrap();
        let out = train_toy(&items, &cfg).unwrap();
        let init = VelocityNet::new(cfg.net, cfg.seed.derive_str("init")).unwrap();
        assert_eq!(out.net, init);
        assert_eq!(out.curve.len(), 3);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = small();
        let items = make_dataset(&cfg, Seed(1), 64).unwrap();
        let a = train_toy(&items, &cfg).unwrap();
        let b = train_toy(&items, &cfg).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn full_dropout_has_no_trajectory_term() {
        let mut cfg = small();
        cfg.dropout_p = 1.0;
        let items = make_dataset(&cfg, Seed(1), 64).unwrap();
        let out = train_toy(&items, &cfg).unwrap();
        assert!(out.curve.iter().all(|p| p.l_traj == 0.0));
        assert!(out
            .curve
            .iter()
            .all(|p| (p.l_video - 0.5 * p.l_out).abs() < 1e-15));
    }

    #[test]
    fn rejects_small_datasets() {
        let cfg = small();
        let items = make_dataset(&cfg, Seed(1), 10).unwrap();
        assert!(train_toy(&items, &cfg).is_err());
        let bad = TrainConfig {
            num_scenes: 10,
            ..small()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn diverging_run_reports_step() {
        let mut cfg = small();
        cfg.loss.delta = f64::NAN;
        let items = make_dataset(&cfg, Seed(1), 64).unwrap();
        match train_toy(&items, &cfg) {
            Err(Error::Training { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected a training error, got {other:?}"),
        }
    }

    #[test]
    fn downsampled_pipeline_shapes() {
        let cfg = TrainConfig {
            vae_downsample: 2,
            ..small()
        };
        let items = make_dataset(&cfg, Seed(1), 2).unwrap();
        assert_eq!(items[0].x0.dims(), &[4, 4, 4, 1]);
        assert_eq!(items[0].cond.mask.h, 4);
    }
}
