//! Trajectory occupancy masks over the latent grid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::Seed;
use crate::tensor::Tensor;
use crate::trajectory::LatentTrajectory;

/// Binary occupancy, its blurred relaxation, and per-cell owning object.
///
/// Arrays are `[frames, h, w]` row-major. `owner` is `-1` off the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajMask {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub binary: Vec<f64>,
    pub soft: Vec<f64>,
    pub owner: Vec<i64>,
}

impl TrajMask {
    pub fn empty(frames: usize, h: usize, w: usize) -> Self {
        let n = frames * h * w;
        Self {
            frames,
            h,
            w,
            binary: vec![0.0; n],
            soft: vec![0.0; n],
            owner: vec![-1; n],
        }
    }

    pub fn index(&self, frame: usize, p: usize, q: usize) -> usize {
        (frame * self.h + p) * self.w + q
    }

    pub fn cells(&self) -> usize {
        self.binary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.binary.iter().all(|&b| b == 0.0)
    }

    /// `[3, frames, h, w]`: binary, soft, owner planes.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(3 * self.cells());
        data.extend_from_slice(&self.binary);
        data.extend_from_slice(&self.soft);
        data.extend(self.owner.iter().map(|&o| o as f64));
        Tensor::new(vec![3, self.frames, self.h, self.w], data).expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[3, frames, h, w] = t.dims() else {
            return Err(Error::invalid(format!(
                "mask tensor must be [3, f, h, w], got {:?}",
                t.dims()
            )));
        };
        let n = frames * h * w;
        let d = t.data();
        let binary = d[..n].to_vec();
        let soft = d[n..2 * n].to_vec();
        let owner: Vec<i64> = d[2 * n..].iter().map(|&o| o as i64).collect();
        let mask = Self {
            frames,
            h,
            w,
            binary,
            soft,
            owner,
        };
        mask.check()?;
        Ok(mask)
    }

    fn check(&self) -> Result<()> {
        for k in 0..self.cells() {
            let b = self.binary[k];
            if b != 0.0 && b != 1.0 {
                return Err(Error::invalid(format!("binary mask value {b} at {k}")));
            }
            if (b == 1.0) != (self.owner[k] >= 0) {
                return Err(Error::invalid(format!(
                    "owner map disagrees with binary mask at {k}"
                )));
            }
            if !(0.0..=1.0).contains(&self.soft[k]) {
                return Err(Error::invalid(format!(
                    "soft mask value {} at {k}",
                    self.soft[k]
                )));
            }
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps of radius `max(ceil(3 sigma), 1)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = ((3.0 * sigma).ceil() as usize).max(1) as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur of each `h x w` frame with zero padding.
pub fn blur_frames(data: &[f64], frames: usize, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    let mut tmp = vec![0.0; h * w];
    for i in 0..frames {
        let src = &data[i * h * w..(i + 1) * h * w];
        for p in 0..h {
            for q in 0..w {
                let mut acc = 0.0;
                for (j, &kj) in k.iter().enumerate() {
                    let qq = q as isize + j as isize - r;
                    if (0..w as isize).contains(&qq) {
                        acc += kj * src[p * w + qq as usize];
                    }
                }
                tmp[p * w + q] = acc;
            }
        }
        let dst = &mut out[i * h * w..(i + 1) * h * w];
        for p in 0..h {
            for q in 0..w {
                let mut acc = 0.0;
                for (j, &kj) in k.iter().enumerate() {
                    let pp = p as isize + j as isize - r;
                    if (0..h as isize).contains(&pp) {
                        acc += kj * tmp[pp as usize * w + q];
                    }
                }
                dst[p * w + q] = acc;
            }
        }
    }
    out
}

/// Marks every trajectory cell in every frame, resolves collisions with a
/// seeded draw keyed by `(frame, row, col)`, and blurs the result.
pub fn build_mask(
    lt: &LatentTrajectory,
    f: usize,
    h: usize,
    w: usize,
    blur_sigma: f64,
    seed: Seed,
) -> Result<TrajMask> {
    if !(blur_sigma >= 0.0 && blur_sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "blur sigma must be >= 0, got {blur_sigma}"
        )));
    }
    if lt.frames != f || lt.h != h || lt.w != w {
        return Err(Error::invalid(format!(
            "latent trajectory is {}x{}x{}, mask requested {f}x{h}x{w}",
            lt.frames, lt.h, lt.w
        )));
    }
    let mut mask = TrajMask::empty(f, h, w);
    let mut claims: Vec<Vec<usize>> = vec![Vec::new(); mask.cells()];
    for i in 0..f {
        for n in 0..lt.objects {
            let [p, q] = lt.cell(i, n);
            claims[mask.index(i, p, q)].push(n);
        }
    }
    for (k, objs) in claims.iter_mut().enumerate() {
        match objs.len() {
            0 => {}
            1 => {
                mask.binary[k] = 1.0;
                mask.owner[k] = objs[0] as i64;
            }
            m => {
                objs.sort_unstable();
                let (i, rem) = (k / (h * w), k % (h * w));
                let pick = seed
                    .derive(&[i as u64, (rem / w) as u64, (rem % w) as u64])
                    .rng()
                    .random_range(0..m);
                mask.binary[k] = 1.0;
                mask.owner[k] = objs[pick] as i64;
            }
        }
    }
    mask.soft = blur_frames(&mask.binary, f, h, w, blur_sigma)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(mask)
}
