//! Second-order kinematic state of pooled trajectories and the 8-D feature
//! built from it.
//!
//! Feature row layout: `[r_x, r_y, v_x, v_y, a_x, a_y, |v|, |a|]`. Positions
//! are normalized by the longer image side; velocities and accelerations are
//! in normalized units per second and per second squared.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp3;
use crate::tensor::Tensor;
use crate::trajectory::PooledTrajectory;

pub const FEATURE_DIM: usize = 8;
pub const STATS_VERSION: u32 = 1;
pub const STD_FLOOR: f64 = 1e-6;

/// How acceleration is filled in at the first and last frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryAccel {
    /// Copy the nearest interior value.
    #[default]
    Replicate,
    /// Second-order one-sided stencil `(2r0 - 5r1 + 4r2 - r3) / tau^2`; needs 4 frames.
    OneSided,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTrack {
    pub frames: usize,
    pub objects: usize,
    pub r: Vec<[f64; 2]>,
    pub v: Vec<[f64; 2]>,
    pub a: Vec<[f64; 2]>,
    pub vmag: Vec<f64>,
    pub amag: Vec<f64>,
    pub tau: f64,
}

impl KinematicTrack {
    pub fn at(&self, frame: usize, object: usize) -> usize {
        frame * self.objects + object
    }

    /// Raw 8-D feature row for `(frame, object)`.
    pub fn phi(&self, frame: usize, object: usize) -> [f64; FEATURE_DIM] {
        let k = self.at(frame, object);
        let ([rx, ry], [vx, vy], [ax, ay]) = (self.r[k], self.v[k], self.a[k]);
        [rx, ry, vx, vy, ax, ay, self.vmag[k], self.amag[k]]
    }

    pub fn phi_rows(&self) -> Vec<[f64; FEATURE_DIM]> {
        (0..self.frames)
            .flat_map(|i| (0..self.objects).map(move |n| (i, n)))
            .map(|(i, n)| self.phi(i, n))
            .collect()
    }

    /// Per-frame motion intensity: mean speed over objects.
    pub fn mean_speed(&self) -> Vec<f64> {
        (0..self.frames)
            .map(|i| {
                (0..self.objects)
                    .map(|n| self.vmag[self.at(i, n)])
                    .sum::<f64>()
                    / self.objects as f64
            })
            .collect()
    }
}

fn norm2([x, y]: [f64; 2]) -> f64 {
    x.hypot(y)
}

fn combine(terms: &[(f64, [f64; 2])], scale: f64) -> [f64; 2] {
    let (mut x, mut y) = (0.0, 0.0);
    for &(c, [px, py]) in terms {
        x += c * px;
        y += c * py;
    }
    [x / scale, y / scale]
}

pub fn derive_kinematics(pt: &PooledTrajectory) -> Result<KinematicTrack> {
    derive_kinematics_with(pt, BoundaryAccel::Replicate)
}

/// Finite-difference velocity and acceleration: central differences on
/// interior frames, forward/backward velocity at the two ends.
pub fn derive_kinematics_with(
    pt: &PooledTrajectory,
    boundary: BoundaryAccel,
) -> Result<KinematicTrack> {
    let f = pt.frames;
    if f < 2 {
        return Err(Error::invalid(format!(
            "kinematics need >= 2 frames, got {f}"
        )));
    }
    if boundary == BoundaryAccel::OneSided && f < 4 {
        return Err(Error::invalid(
            "one-sided boundary acceleration needs >= 4 frames",
        ));
    }
    if !(pt.fps_effective.is_finite() && pt.fps_effective > 0.0) {
        return Err(Error::invalid("effective fps must be positive"));
    }
    let n = pt.objects;
    let tau = pt.tau();
    let side = f64::from(pt.image_width.max(pt.image_height));
    let r: Vec<[f64; 2]> = pt
        .points
        .iter()
        .map(|&[x, y]| [x / side, y / side])
        .collect();
    let at = |i: usize, obj: usize| r[i * n + obj];

    let mut v = vec![[0.0; 2]; f * n];
    let mut a = vec![[0.0; 2]; f * n];
    for obj in 0..n {
        for i in 1..f.saturating_sub(1) {
            let (prev, cur, next) = (at(i - 1, obj), at(i, obj), at(i + 1, obj));
            v[i * n + obj] = combine(&[(1.0, next), (-1.0, prev)], 2.0 * tau);
            a[i * n + obj] = combine(&[(1.0, next), (-2.0, cur), (1.0, prev)], tau * tau);
        }
        v[obj] = combine(&[(1.0, at(1, obj)), (-1.0, at(0, obj))], tau);
        v[(f - 1) * n + obj] = combine(&[(1.0, at(f - 1, obj)), (-1.0, at(f - 2, obj))], tau);
        if f >= 3 {
            match boundary {
                BoundaryAccel::Replicate => {
                    a[obj] = a[n + obj];
                    a[(f - 1) * n + obj] = a[(f - 2) * n + obj];
                }
                BoundaryAccel::OneSided => {
                    let t2 = tau * tau;
                    a[obj] = combine(
                        &[
                            (2.0, at(0, obj)),
                            (-5.0, at(1, obj)),
                            (4.0, at(2, obj)),
                            (-1.0, at(3, obj)),
                        ],
                        t2,
                    );
                    a[(f - 1) * n + obj] = combine(
                        &[
                            (2.0, at(f - 1, obj)),
                            (-5.0, at(f - 2, obj)),
                            (4.0, at(f - 3, obj)),
                            (-1.0, at(f - 4, obj)),
                        ],
                        t2,
                    );
                }
            }
        }
    }
    let vmag = v.iter().copied().map(norm2).collect();
    let amag = a.iter().copied().map(norm2).collect();
    Ok(KinematicTrack {
        frames: f,
        objects: n,
        r,
        v,
        a,
        vmag,
        amag,
        tau,
    })
}

/// `sign(d) * log10(1 + |d|)`.
pub fn log_compress(d: f64) -> f64 {
    d.signum() * d.abs().ln_1p() / std::f64::consts::LN_10
}

/// Positions pass through; the six motion components are log-compressed.
pub fn compress_row(phi: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
    let mut out = *phi;
    for x in &mut out[2..] {
        *x = if *x == 0.0 { 0.0 } else { log_compress(*x) };
    }
    out
}

/// Dataset-level standardization statistics of compressed features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
    pub version: u32,
}

impl FeatureStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; FEATURE_DIM],
            std: [1.0; FEATURE_DIM],
            version: STATS_VERSION,
        }
    }

    pub fn normalize(&self, compressed: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
        std::array::from_fn(|c| (compressed[c] - self.mean[c]) / self.std[c])
    }

    pub fn denormalize(&self, normalized: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
        std::array::from_fn(|c| normalized[c] * self.std[c] + self.mean[c])
    }

    fn check(&self) -> Result<()> {
        if self.version != STATS_VERSION {
            return Err(Error::invalid(format!(
                "unsupported stats version {}",
                self.version
            )));
        }
        if let Some(s) = self.std.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!(
                "stats std must be positive, got {s}"
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: Self = serde_json::from_str(&s)?;
        stats.check()?;
        Ok(stats)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Per-component mean and population standard deviation over compressed rows.
pub fn fit_stats(rows: &[[f64; FEATURE_DIM]]) -> Result<FeatureStats> {
    if rows.len() < 2 {
        return Err(Error::invalid(format!(
            "fit_stats needs >= 2 feature rows, got {}",
            rows.len()
        )));
    }
    let compressed: Vec<_> = rows.iter().map(compress_row).collect();
    let n = compressed.len() as f64;
    let mut mean = [0.0; FEATURE_DIM];
    for row in &compressed {
        for c in 0..FEATURE_DIM {
            mean[c] += row[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; FEATURE_DIM];
    for row in &compressed {
        for c in 0..FEATURE_DIM {
            var[c] += (row[c] - mean[c]).powi(2);
        }
    }
    let std = var.map(|v| (v / n).sqrt().max(STD_FLOOR));
    Ok(FeatureStats {
        mean,
        std,
        version: STATS_VERSION,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicFeature {
    pub frames: usize,
    pub objects: usize,
    pub phi: Vec<[f64; FEATURE_DIM]>,
    pub phi_tilde_in: Vec<[f64; FEATURE_DIM]>,
}

impl KinematicFeature {
    /// `[frames, objects, 8]` tensor of the normalized encoder inputs.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.phi_tilde_in.iter().flatten().copied().collect();
        Tensor::new(vec![self.frames, self.objects, FEATURE_DIM], data).expect("consistent dims")
    }

    /// Encoder inputs as a `(frames * objects) x 8` matrix.
    pub fn input_matrix(&self) -> Array2<f64> {
        let data = self.phi_tilde_in.iter().flatten().copied().collect();
        Array2::from_shape_vec((self.phi_tilde_in.len(), FEATURE_DIM), data)
            .expect("consistent dims")
    }
}

pub fn assemble_features(kt: &KinematicTrack, stats: &FeatureStats) -> Result<KinematicFeature> {
    stats.check()?;
    let phi = kt.phi_rows();
    let phi_tilde_in = phi
        .iter()
        .map(|row| stats.normalize(&compress_row(row)))
        .collect();
    Ok(KinematicFeature {
        frames: kt.frames,
        objects: kt.objects,
        phi,
        phi_tilde_in,
    })
}

/// Three-layer MLP `8 -> hidden -> hidden -> d` mapping features to kinematic tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct KinEncoder {
    pub mlp: Mlp3,
}

pub const DEFAULT_ENCODER_HIDDEN: usize = 256;

impl KinEncoder {
    pub fn new(hidden: usize, d: usize, seed: crate::rng::Seed) -> Self {
        Self {
            mlp: Mlp3::new([FEATURE_DIM, hidden, hidden, d], seed),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.dims()[3]
    }

    /// Kinematic tokens `H_kin` as a `[frames, objects, d]` tensor.
    pub fn encode(&self, feat: &KinematicFeature) -> Result<Tensor> {
        let x = feat.input_matrix();
        let y = self.mlp.forward(&x)?;
        let d = self.out_dim();
        Tensor::new(
            vec![feat.frames, feat.objects, d],
            y.into_raw_vec_and_offset().0,
        )
    }
}
