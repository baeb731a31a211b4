//! Hybrid flow matching.
//!
//! Off the trajectory the interpolant runs from the clean latent `x0` to
//! Gaussian noise; on the trajectory it runs to the trajectory-conditioned
//! latent instead:
//!
//! ```text
//! x_t = (1 - M) * ((1 - t) x0 + t eps) + M * ((1 - t) x0 + t xtraj)
//! v   = (1 - M) * (eps - x0)           + M * (xtraj - x0)
//! ```
//!
//! with the binary mask `M` broadcast over channels. The region-balanced
//! loss weights errors by the blurred mask instead.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injection::frame0_only;
use crate::mask::TrajMask;
use crate::rng::Seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x_t: Tensor,
    pub v_target: Tensor,
    pub t: f64,
}

fn check_mask_shape(x: &Tensor, mask: &TrajMask) -> Result<usize> {
    let &[f, h, w, c] = x.dims() else {
        return Err(Error::invalid(format!(
            "latent must be [f, h, w, d], got {:?}",
            x.dims()
        )));
    };
    if (mask.frames, mask.h, mask.w) != (f, h, w) {
        return Err(Error::invalid(format!(
            "mask is {}x{}x{}, latent {f}x{h}x{w}",
            mask.frames, mask.h, mask.w
        )));
    }
    Ok(c)
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "{what}: shape {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn hybrid_interpolant(
    x0: &Tensor,
    eps: &Tensor,
    xtraj: &Tensor,
    mask: &TrajMask,
    t: f64,
) -> Result<FlowSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t must lie in [0, 1], got {t}")));
    }
    check_same(x0, eps, "noise endpoint")?;
    check_same(x0, xtraj, "trajectory endpoint")?;
    let c = check_mask_shape(x0, mask)?;
    let mut x_t = x0.clone();
    let mut v = x0.clone();
    let (a, e, tr) = (x0.data(), eps.data(), xtraj.data());
    for (k, (xt, vt)) in x_t.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
        let end = if mask.binary[k / c] == 1.0 {
            tr[k]
        } else {
            e[k]
        };
        *xt = (1.0 - t) * a[k] + t * end;
        *vt = end - a[k];
    }
    Ok(FlowSample {
        x_t,
        v_target: v,
        t,
    })
}

/// The flow state at `t = 1`: noise off the trajectory, `xtraj` on it.
pub fn inference_init(eps: &Tensor, xtraj: &Tensor, mask: &TrajMask) -> Result<Tensor> {
    check_same(eps, xtraj, "trajectory endpoint")?;
    let c = check_mask_shape(eps, mask)?;
    let mut x = eps.clone();
    for (k, v) in x.data_mut().iter_mut().enumerate() {
        if mask.binary[k / c] == 1.0 {
            *v = xtraj.data()[k];
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_out: f64,
    pub lambda_traj: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_out: 0.5,
            lambda_traj: 0.5,
            delta: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AvWeights {
    pub video: f64,
    pub audio: f64,
}

impl Default for AvWeights {
    fn default() -> Self {
        Self {
            video: 0.85,
            audio: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_out: f64,
    pub l_traj: f64,
    pub l_video: f64,
    /// Combined objective; computed with a zero audio loss until [`LossBreakdown::with_audio`].
    pub l_final: f64,
}

impl LossBreakdown {
    pub fn with_audio(mut self, l_audio: f64, av: AvWeights) -> Self {
        self.l_final = combine_av(self.l_video, l_audio, av);
        self
    }
}

/// `0.85 l_video + 0.15 l_audio`.
pub fn final_loss(l_video: f64, l_audio: f64) -> f64 {
    combine_av(l_video, l_audio, AvWeights::default())
}

pub fn combine_av(l_video: f64, l_audio: f64, av: AvWeights) -> f64 {
    av.video * l_video + av.audio * l_audio
}

/// Per-element sums behind the two region losses. Mask weights are counted
/// once per channel.
struct RegionSums {
    num_out: f64,
    num_traj: f64,
    den_out: f64,
    den_traj: f64,
}

fn region_sums(v_hat: &[f64], v: &[f64], soft: &[f64], c: usize) -> RegionSums {
    let mut s = RegionSums {
        num_out: 0.0,
        num_traj: 0.0,
        den_out: 0.0,
        den_traj: 0.0,
    };
    for k in 0..v.len() {
        let m = soft[k / c];
        let e2 = (v_hat[k] - v[k]).powi(2);
        s.num_out += (1.0 - m) * e2;
        s.num_traj += m * e2;
        s.den_out += 1.0 - m;
        s.den_traj += m;
    }
    s
}

fn check_loss_inputs(v_hat: &Tensor, v: &Tensor, soft: &[f64]) -> Result<usize> {
    check_same(v_hat, v, "velocity prediction")?;
    let c = *v.dims().last().expect("rank >= 1");
    if soft.len() * c != v.len() {
        return Err(Error::invalid(format!(
            "soft mask has {} cells, velocity {} elements of width {c}",
            soft.len(),
            v.len()
        )));
    }
    Ok(c)
}

pub fn region_losses(
    v_hat: &Tensor,
    v: &Tensor,
    soft: &[f64],
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let c = check_loss_inputs(v_hat, v, soft)?;
    let s = region_sums(v_hat.data(), v.data(), soft, c);
    Ok(breakdown(&s, weights))
}

fn breakdown(s: &RegionSums, wts: LossWeights) -> LossBreakdown {
    let l_out = s.num_out / (s.den_out + wts.delta);
    let l_traj = s.num_traj / (s.den_traj + wts.delta);
    let l_video = wts.lambda_out * l_out + wts.lambda_traj * l_traj;
    LossBreakdown {
        l_out,
        l_traj,
        l_video,
        l_final: final_loss(l_video, 0.0),
    }
}

/// Loss breakdown plus `d l_video / d v_hat`.
pub fn region_losses_grad(
    v_hat: &Tensor,
    v: &Tensor,
    soft: &[f64],
    weights: LossWeights,
) -> Result<(LossBreakdown, Tensor)> {
    let c = check_loss_inputs(v_hat, v, soft)?;
    let s = region_sums(v_hat.data(), v.data(), soft, c);
    let a_out = 2.0 * weights.lambda_out / (s.den_out + weights.delta);
    let a_traj = 2.0 * weights.lambda_traj / (s.den_traj + weights.delta);
    let mut g = v_hat.clone();
    for (k, gk) in g.data_mut().iter_mut().enumerate() {
        let m = soft[k / c];
        let e = v_hat.data()[k] - v.data()[k];
        *gk = (a_out * (1.0 - m) + a_traj * m) * e;
    }
    Ok((breakdown(&s, weights), g))
}

/// Trajectory conditioning for one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub xtraj: Tensor,
    pub mask: TrajMask,
    pub dropped: bool,
}

/// With probability `p`, replaces the conditioning by its unconditional
/// form: empty mask and an `xtraj` that keeps only frame 0.
pub fn traj_dropout(bundle: ConditionBundle, p: f64, seed: Seed) -> Result<ConditionBundle> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "dropout probability must lie in [0, 1], got {p}"
        )));
    }
    if seed.rng().random::<f64>() >= p {
        return Ok(bundle);
    }
    let dims = bundle.xtraj.dims();
    let frame_len: usize = dims[1..].iter().product();
    let z = Tensor::new(
        dims[1..].to_vec(),
        bundle.xtraj.data()[..frame_len].to_vec(),
    )?;
    Ok(ConditionBundle {
        xtraj: frame0_only(&z, dims[0])?,
        mask: TrajMask::empty(bundle.mask.frames, bundle.mask.h, bundle.mask.w),
        dropped: true,
    })
}

/// Training-time distribution of flow timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeSampler {
    #[default]
    Uniform,
    LogitNormal {
        mean: f64,
        std: f64,
    },
}

impl TimeSampler {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            TimeSampler::Uniform => rng.random::<f64>(),
            TimeSampler::LogitNormal { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                crate::nn::sigmoid(mean + std * z)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(v: f64) -> Tensor {
        Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap()
    }

    fn single_mask(on: bool) -> TrajMask {
        let mut m = TrajMask::empty(1, 1, 1);
        if on {
            m.binary[0] = 1.0;
            m.soft[0] = 1.0;
            m.owner[0] = 0;
        }
        m
    }

    #[test]
    fn hand_evaluated_cell() {
        let (x0, eps, tr) = (cell(2.0), cell(0.5), cell(-1.0));
        let off = hybrid_interpolant(&x0, &eps, &tr, &single_mask(false), 0.5).unwrap();
        assert_eq!(off.x_t.data(), &[1.25]);
        assert_eq!(off.v_target.data(), &[-1.5]);
        let on = hybrid_interpolant(&x0, &eps, &tr, &single_mask(true), 0.5).unwrap();
        assert_eq!(on.x_t.data(), &[0.5]);
        assert_eq!(on.v_target.data(), &[-3.0]);
    }

    #[test]
    fn rejects_bad_time_and_shapes() {
        let (x0, eps) = (cell(0.0), cell(1.0));
        assert!(hybrid_interpolant(&x0, &eps, &x0, &single_mask(false), 1.5).is_err());
        assert!(hybrid_interpolant(&x0, &eps, &x0, &single_mask(false), -0.1).is_err());
        let big = Tensor::zeros(&[1, 1, 1, 2]).unwrap();
        assert!(hybrid_interpolant(&x0, &big, &x0, &single_mask(false), 0.5).is_err());
    }

    #[test]
    fn loss_degenerate_masks() {
        let v = Tensor::zeros(&[2, 2, 2, 3]).unwrap();
        let v_hat = Tensor::filled(&[2, 2, 2, 3], 0.7).unwrap();
        // 24 channel elements carry the region weight, all with error 0.49
        let full = 0.49 * 24.0 / (24.0 + 1e-8);
        let l = region_losses(&v_hat, &v, &[0.0; 8], LossWeights::default()).unwrap();
        assert!((l.l_out - full).abs() < 1e-12);
        assert_eq!(l.l_traj, 0.0);
        let half = 0.49 * 12.0 / (12.0 + 1e-8);
        let l = region_losses(&v_hat, &v, &[0.5; 8], LossWeights::default()).unwrap();
        assert!((l.l_out - half).abs() < 1e-12 && (l.l_traj - half).abs() < 1e-12);
        assert!((l.l_video - half).abs() < 1e-12);
        let l = region_losses(&v, &v, &[0.3; 8], LossWeights::default()).unwrap();
        assert_eq!((l.l_out, l.l_traj, l.l_video), (0.0, 0.0, 0.0));
    }

    #[test]
    fn final_loss_values() {
        assert_eq!(final_loss(0.0, 0.0), 0.0);
        assert!((final_loss(1.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((final_loss(2.0, 0.4) - 1.76).abs() < 1e-12);
    }

    #[test]
    fn init_extremes() {
        let eps = Tensor::filled(&[1, 2, 2, 2], 1.0).unwrap();
        let tr = Tensor::filled(&[1, 2, 2, 2], -3.0).unwrap();
        let empty = TrajMask::empty(1, 2, 2);
        assert_eq!(inference_init(&eps, &tr, &empty).unwrap(), eps);
        let mut full = TrajMask::empty(1, 2, 2);
        full.binary.fill(1.0);
        assert_eq!(inference_init(&eps, &tr, &full).unwrap(), tr);
        let mut one = TrajMask::empty(1, 2, 2);
        one.binary[2] = 1.0;
        let x = inference_init(&eps, &tr, &one).unwrap();
        let diff: Vec<usize> = (0..8).filter(|&k| x.data()[k] != eps.data()[k]).collect();
        assert_eq!(diff, vec![4, 5]);
    }

    fn bundle() -> ConditionBundle {
        let mut m = TrajMask::empty(3, 2, 2);
        m.binary[5] = 1.0;
        m.soft[5] = 1.0;
        m.owner[5] = 0;
        ConditionBundle {
            xtraj: Tensor::filled(&[3, 2, 2, 1], 2.0).unwrap(),
            mask: m,
            dropped: false,
        }
    }

    #[test]
    fn dropout_extremes() {
        for s in 0..20 {
            assert_eq!(traj_dropout(bundle(), 0.0, Seed(s)).unwrap(), bundle());
            let d = traj_dropout(bundle(), 1.0, Seed(s)).unwrap();
            assert!(d.dropped && d.mask.is_empty());
            assert_eq!(&d.xtraj.data()[..4], &[2.0; 4]);
            assert!(d.xtraj.data()[4..].iter().all(|&x| x == 0.0));
        }
        assert!(traj_dropout(bundle(), 1.5, Seed(0)).is_err());
    }

    #[test]
    fn logit_normal_in_unit_interval() {
        let mut rng = Seed(4).rng();
        let s = TimeSampler::LogitNormal {
            mean: 0.0,
            std: 1.0,
        };
        for _ in 0..1000 {
            let t = s.sample(&mut rng);
            assert!((0.0..=1.0).contains(&t));
        }
    }
}
