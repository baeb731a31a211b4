//! Euler integration of the learned flow from `t = 1` to `t = 0`.

use crate::error::{Error, Result};
use crate::flow::inference_init;
use crate::latent::LatentVideo;
use crate::mask::TrajMask;
use crate::rng::{gaussian_noise, Seed};
use crate::tensor::Tensor;
use crate::toy::net::VelocityField;

/// Integrates from `x_1 = inference_init(eps, xtraj, M)` with `steps`
/// uniform Euler steps `x <- x - dt * v(x, t)`.
pub fn sample_from(
    field: &dyn VelocityField,
    eps: &Tensor,
    xtraj: &Tensor,
    mask: &TrajMask,
    steps: usize,
) -> Result<LatentVideo> {
    if steps == 0 {
        return Err(Error::invalid("sampling needs at least one step"));
    }
    let mut x = inference_init(eps, xtraj, mask)?;
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = field.velocity(&x, xtraj, mask, t)?;
        if !v.same_shape(&x) {
            return Err(Error::invalid(format!(
                "velocity shape {:?}, state {:?}",
                v.dims(),
                x.dims()
            )));
        }
        for (xk, vk) in x.data_mut().iter_mut().zip(v.data()) {
            *xk -= dt * vk;
        }
    }
    LatentVideo::new(x)
}

/// Same as [`sample_from`] with seeded Gaussian noise.
pub fn sample(
    field: &dyn VelocityField,
    xtraj: &Tensor,
    mask: &TrajMask,
    steps: usize,
    seed: Seed,
) -> Result<LatentVideo> {
    let eps = gaussian_noise(xtraj.dims(), seed)?;
    sample_from(field, &eps, xtraj, mask, steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns `eps - x0` everywhere, ignoring its inputs.
    struct Constant(Tensor);

    impl VelocityField for Constant {
        fn velocity(&self, _: &Tensor, _: &Tensor, _: &TrajMask, _: f64) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn constant_field_recovers_target_in_one_step() {
        let dims = [3, 4, 4, 2];
        let x0 = gaussian_noise(&dims, Seed(1)).unwrap();
        let eps = gaussian_noise(&dims, Seed(2)).unwrap();
        let xtraj = gaussian_noise(&dims, Seed(3)).unwrap();
        let mut mask = TrajMask::empty(3, 4, 4);
        mask.binary[5] = 1.0;
        let mut v = eps.clone();
        for (a, b) in v.data_mut().iter_mut().zip(x0.data()) {
            *a -= b;
        }
        let out = sample_from(&Constant(v), &eps, &xtraj, &mask, 1).unwrap();
        for k in 0..x0.len() {
            if mask.binary[k / 2] == 0.0 {
                assert!((out.data.data()[k] - x0.data()[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let x = Tensor::zeros(&[1, 1, 1, 1]).unwrap();
        let field = Constant(x.clone());
        assert!(sample(&field, &x, &TrajMask::empty(1, 1, 1), 0, Seed(0)).is_err());
    }

    #[test]
    fn deterministic() {
        let x = gaussian_noise(&[2, 3, 3, 1], Seed(4)).unwrap();
        let field = Constant(x.clone());
        let m = TrajMask::empty(2, 3, 3);
        let a = sample(&field, &x, &m, 5, Seed(9)).unwrap();
        let b = sample(&field, &x, &m, 5, Seed(9)).unwrap();
        assert!(a.data.bit_eq(&b.data));
    }
}
