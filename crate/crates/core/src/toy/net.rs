//! Small per-frame convolutional velocity network.
//!
//! Every frame is processed independently by
//!
//! ```text
//! h1  = gelu(conv3(u))
//! h2  = h1 + gelu(conv3(h1))
//! out = conv3(h2) + conv5(u)
//! ```
//!
//! where `u` stacks `[x_t, xtraj, x_t / tau, xtraj / tau, M, t]` per cell
//! and `tau = max(t, min_tau)`. Convolutions zero-pad and are computed as
//! im2col followed by a dense product.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::TrajMask;
use crate::nn::{gelu, gelu_grad, slice1, slice1_mut, slice2, slice2_mut, Linear, Parameterized};
use crate::rng::Seed;
use crate::tensor::Tensor;

/// Anything that predicts a flow velocity for a latent clip.
pub trait VelocityField {
    fn velocity(&self, x_t: &Tensor, xtraj: &Tensor, mask: &TrajMask, t: f64) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden: usize,
    /// Latent channels `d`.
    pub channels: usize,
    pub min_tau: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            channels: 1,
            min_tau: 0.05,
        }
    }
}

pub const MAX_PARAMS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    pub config: NetConfig,
    pub conv_in: Linear,
    pub conv_mid: Linear,
    pub conv_out: Linear,
    pub skip: Linear,
}

pub struct NetCache {
    images: usize,
    h: usize,
    w: usize,
    col0: Array2<f64>,
    a1: Array2<f64>,
    col1: Array2<f64>,
    a2: Array2<f64>,
    col2: Array2<f64>,
    col_skip: Array2<f64>,
}

/// Rows are cells of `images` stacked `h x w` images, row-major.
/// Output row holds the `k x k` neighbourhood, kernel-offset major.
fn im2col(x: &Array2<f64>, images: usize, h: usize, w: usize, k: usize) -> Array2<f64> {
    let c = x.ncols();
    let r = (k / 2) as isize;
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut col = Array2::zeros((images * h * w, k * k * c));
    let dst = col.as_slice_mut().expect("standard layout");
    let width = k * k * c;
    for n in 0..images {
        for p in 0..h {
            for q in 0..w {
                let row = (n * h + p) * w + q;
                let out = &mut dst[row * width..(row + 1) * width];
                for ky in 0..k {
                    let pp = p as isize + ky as isize - r;
                    if pp < 0 || pp >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let qq = q as isize + kx as isize - r;
                        if qq < 0 || qq >= w as isize {
                            continue;
                        }
                        let from = ((n * h + pp as usize) * w + qq as usize) * c;
                        let to = (ky * k + kx) * c;
                        out[to..to + c].copy_from_slice(&src[from..from + c]);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(
    dcol: &Array2<f64>,
    images: usize,
    h: usize,
    w: usize,
    k: usize,
    c: usize,
) -> Array2<f64> {
    let r = (k / 2) as isize;
    let dcol = dcol.as_standard_layout();
    let src = dcol.as_slice().expect("standard layout");
    let mut dx = Array2::zeros((images * h * w, c));
    let dst = dx.as_slice_mut().expect("standard layout");
    let width = k * k * c;
    for n in 0..images {
        for p in 0..h {
            for q in 0..w {
                let row = (n * h + p) * w + q;
                let inp = &src[row * width..(row + 1) * width];
                for ky in 0..k {
                    let pp = p as isize + ky as isize - r;
                    if pp < 0 || pp >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let qq = q as isize + kx as isize - r;
                        if qq < 0 || qq >= w as isize {
                            continue;
                        }
                        let to = ((n * h + pp as usize) * w + qq as usize) * c;
                        let from = (ky * k + kx) * c;
                        for ch in 0..c {
                            dst[to + ch] += inp[from + ch];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn accumulate(x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) {
    grad.w += &x.t().dot(dy);
    grad.b += &dy.sum_axis(Axis(0));
}

impl VelocityNet {
    pub fn new(config: NetConfig, seed: Seed) -> Result<Self> {
        if config.hidden == 0 || config.channels == 0 || !(config.min_tau > 0.0) {
            return Err(Error::invalid(
                "network needs hidden >= 1, channels >= 1 and min_tau > 0",
            ));
        }
        let cin = Self::input_channels(config.channels);
        let c = config.hidden;
        let net = Self {
            config,
            conv_in: Linear::new(9 * cin, c, seed.derive(&[0])),
            conv_mid: Linear::new(9 * c, c, seed.derive(&[1])),
            conv_out: Linear::new(9 * c, config.channels, seed.derive(&[2])),
            skip: Linear::new(25 * cin, config.channels, seed.derive(&[3])),
        };
        if net.num_params() > MAX_PARAMS {
            return Err(Error::invalid(format!(
                "network has {} parameters, limit is {MAX_PARAMS}",
                net.num_params()
            )));
        }
        Ok(net)
    }

    pub fn input_channels(d: usize) -> usize {
        4 * d + 2
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.w.nrows(), l.w.ncols());
        Self {
            config: self.config,
            conv_in: z(&self.conv_in),
            conv_mid: z(&self.conv_mid),
            conv_out: z(&self.conv_out),
            skip: z(&self.skip),
        }
    }

    /// `self += other`, parameter by parameter.
    pub fn add_assign(&mut self, other: &VelocityNet) {
        for (a, b) in [
            (&mut self.conv_in, &other.conv_in),
            (&mut self.conv_mid, &other.conv_mid),
            (&mut self.conv_out, &other.conv_out),
            (&mut self.skip, &other.skip),
        ] {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    /// Input rows `[f * h * w, 4d + 2]` for one clip.
    pub fn features(
        &self,
        x_t: &Tensor,
        xtraj: &Tensor,
        mask: &TrajMask,
        t: f64,
    ) -> Result<Array2<f64>> {
        let d = self.config.channels;
        if x_t.dims() != xtraj.dims() || x_t.rank() != 4 || x_t.dims()[3] != d {
            return Err(Error::invalid(format!(
                "network expects matching [f, h, w, {d}] inputs, got {:?} and {:?}",
                x_t.dims(),
                xtraj.dims()
            )));
        }
        if [mask.frames, mask.h, mask.w] != x_t.dims()[..3] {
            return Err(Error::invalid("mask grid differs from the latent grid"));
        }
        let cells = mask.cells();
        let cin = Self::input_channels(d);
        let inv = 1.0 / t.max(self.config.min_tau);
        let mut u = Array2::zeros((cells, cin));
        let (xs, ts) = (x_t.data(), xtraj.data());
        for (k, mut row) in u.rows_mut().into_iter().enumerate() {
            for ch in 0..d {
                let (a, b) = (xs[k * d + ch], ts[k * d + ch]);
                row[ch] = a;
                row[d + ch] = b;
                row[2 * d + ch] = a * inv;
                row[3 * d + ch] = b * inv;
            }
            row[4 * d] = mask.binary[k];
            row[4 * d + 1] = t;
        }
        Ok(u)
    }

    /// Forward over `images` stacked `h x w` frames.
    pub fn forward_rows(
        &self,
        u: &Array2<f64>,
        images: usize,
        h: usize,
        w: usize,
    ) -> (Array2<f64>, NetCache) {
        let col0 = im2col(u, images, h, w, 3);
        let a1 = self.conv_in.forward(&col0);
        let h1 = a1.mapv(gelu);
        let col1 = im2col(&h1, images, h, w, 3);
        let a2 = self.conv_mid.forward(&col1);
        let h2 = &h1 + &a2.mapv(gelu);
        let col2 = im2col(&h2, images, h, w, 3);
        let col_skip = im2col(u, images, h, w, 5);
        let out = self.conv_out.forward(&col2) + self.skip.forward(&col_skip);
        let cache = NetCache {
            images,
            h,
            w,
            col0,
            a1,
            col1,
            a2,
            col2,
            col_skip,
        };
        (out, cache)
    }

    /// Parameter gradients for upstream gradient `dout`.
    pub fn backward(&self, cache: &NetCache, dout: &Array2<f64>) -> VelocityNet {
        let (n, h, w) = (cache.images, cache.h, cache.w);
        let c = self.config.hidden;
        let mut g = self.zeros_like();
        accumulate(&cache.col_skip, dout, &mut g.skip);
        let dcol2 = self.conv_out.backward(&cache.col2, dout, &mut g.conv_out);
        let dh2 = col2im(&dcol2, n, h, w, 3, c);
        let da2 = &dh2 * &cache.a2.mapv(gelu_grad);
        let dcol1 = self.conv_mid.backward(&cache.col1, &da2, &mut g.conv_mid);
        let dh1 = dh2 + col2im(&dcol1, n, h, w, 3, c);
        let da1 = dh1 * cache.a1.mapv(gelu_grad);
        accumulate(&cache.col0, &da1, &mut g.conv_in);
        g
    }
}

impl VelocityField for VelocityNet {
    fn velocity(&self, x_t: &Tensor, xtraj: &Tensor, mask: &TrajMask, t: f64) -> Result<Tensor> {
        let u = self.features(x_t, xtraj, mask, t)?;
        let (out, _) = self.forward_rows(&u, mask.frames, mask.h, mask.w);
        Tensor::new(x_t.dims().to_vec(), out.into_raw_vec_and_offset().0)
    }
}

impl Parameterized for VelocityNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (name, l) in [
            ("conv_in", &self.conv_in),
            ("conv_mid", &self.conv_mid),
            ("conv_out", &self.conv_out),
            ("skip", &self.skip),
        ] {
            f(&format!("{name}.w"), l.w.shape(), slice2(&l.w));
            f(&format!("{name}.b"), l.b.shape(), slice1(&l.b));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (name, l) in [
            ("conv_in", &mut self.conv_in),
            ("conv_mid", &mut self.conv_mid),
            ("conv_out", &mut self.conv_out),
            ("skip", &mut self.skip),
        ] {
            f(&format!("{name}.w"), slice2_mut(&mut l.w));
            f(&format!("{name}.b"), slice1_mut(&mut l.b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_noise;
    use rand::Rng;

    #[test]
    fn im2col_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (n, h, w, c, k) = (2, 3, 4, 2, 3);
        let mut rng = Seed(1).rng();
        let x = Array2::from_shape_fn((n * h * w, c), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((n * h * w, k * k * c), |_| rng.random_range(-1.0..1.0));
        let lhs = (&im2col(&x, n, h, w, k) * &y).sum();
        let rhs = (&x * &col2im(&y, n, h, w, k, c)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_centre_tap_is_identity() {
        let x = Array2::from_shape_fn((9, 1), |(i, _)| i as f64);
        let col = im2col(&x, 1, 3, 3, 3);
        for r in 0..9 {
            assert_eq!(col[[r, 4]], x[[r, 0]]);
        }
        assert_eq!(col[[0, 0]], 0.0);
    }

    #[test]
    fn gradients_match_differences() {
        let cfg = NetConfig {
            hidden: 3,
            channels: 1,
            min_tau: 0.05,
        };
        let net = VelocityNet::new(cfg, Seed(4)).unwrap();
        let (f, h, w) = (2, 4, 3);
        let x = gaussian_noise(&[f, h, w, 1], Seed(5)).unwrap();
        let tr = gaussian_noise(&[f, h, w, 1], Seed(6)).unwrap();
        let mut mask = TrajMask::empty(f, h, w);
        mask.binary[3] = 1.0;
        let u = net.features(&x, &tr, &mask, 0.3).unwrap();
        let r = gaussian_noise(&[f * h * w, 1], Seed(7)).unwrap();
        let r = Array2::from_shape_vec((f * h * w, 1), r.into_data()).unwrap();
        let loss = |m: &VelocityNet| (&m.forward_rows(&u, f, h, w).0 * &r).sum();
        let (_, cache) = net.forward_rows(&u, f, h, w);
        let g = net.backward(&cache, &r).to_flat();
        let theta = net.to_flat();
        let mut probe = net.clone();
        for k in (0..theta.len()).step_by(7) {
            let mut tp = theta.clone();
            tp[k] += 1e-5;
            probe.set_flat(&tp);
            let lp = loss(&probe);
            tp[k] -= 2e-5;
            probe.set_flat(&tp);
            let lm = loss(&probe);
            let fd = (lp - lm) / 2e-5;
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
            assert!(rel < 1e-5, "param {k}: analytic {} numeric {fd}", g[k]);
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let net = VelocityNet::new(NetConfig::default(), Seed(0)).unwrap();
        assert!(net.num_params() < MAX_PARAMS);
        let x = gaussian_noise(&[3, 5, 6, 1], Seed(1)).unwrap();
        let m = TrajMask::empty(3, 5, 6);
        let a = net.velocity(&x, &x, &m, 0.5).unwrap();
        let b = net.velocity(&x, &x, &m, 0.5).unwrap();
        assert_eq!(a.dims(), x.dims());
        assert!(a.bit_eq(&b));
        assert!(net
            .velocity(&x, &x, &TrajMask::empty(3, 5, 5), 0.5)
            .is_err());
    }
}
