//! Synthetic moving-blob clips with a paired loudness envelope.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::derive_kinematics;
use crate::rng::Seed;
use crate::tensor::Tensor;
use crate::trajectory::{pool_temporal, PooledTrajectory, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    /// Image height and width in pixels.
    pub height: usize,
    pub width: usize,
    /// Pooled frame count.
    pub frames: usize,
    /// Raw frames per pooled frame in generated paths.
    pub raw_factor: usize,
    /// Pooled frames per second.
    pub fps: f64,
    pub amplitude: f64,
    pub radius: f64,
    /// Envelope gain on speed (normalized units per second).
    pub kappa: f64,
    /// Closest distance in pixels between a generated centre and the border.
    pub margin: f64,
    /// Speed range of generated paths in pixels per raw frame.
    pub min_speed: f64,
    pub max_speed: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            frames: 16,
            raw_factor: 2,
            fps: 8.0,
            amplitude: 1.0,
            radius: 1.5,
            kappa: 2.0,
            margin: 2.0,
            min_speed: 0.3,
            max_speed: 0.6,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames < 2 || self.raw_factor == 0 {
            return Err(Error::invalid(
                "scene needs a non-empty grid, >= 2 frames and raw_factor >= 1",
            ));
        }
        if !(self.radius > 0.0) {
            return Err(Error::invalid(format!(
                "blob radius must be positive, got {}",
                self.radius
            )));
        }
        if !(self.fps > 0.0 && self.kappa >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::invalid(
                "scene needs fps > 0, kappa >= 0 and finite amplitude",
            ));
        }
        let span = (self.height.min(self.width) as f64 - 1.0) - 2.0 * self.margin;
        if !(self.margin >= 0.0 && span > 0.0) {
            return Err(Error::invalid(format!(
                "margin {} leaves no room on the grid",
                self.margin
            )));
        }
        if !(0.0 <= self.min_speed && self.min_speed <= self.max_speed) {
            return Err(Error::invalid("need 0 <= min_speed <= max_speed"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `[frames, height, width, 1]`, the sum of one blob per object.
    pub video: Tensor,
    pub path: PooledTrajectory,
    /// Pooled frames at which the generated path bounced.
    pub impacts: Vec<usize>,
    /// Per-frame loudness, `>= 0`.
    pub audio_env: Vec<f64>,
}

/// `A * exp(-|u - c|^2 / 2 rho^2)` sampled at integer pixel coordinates
/// (`u = (col, row)`).
pub fn render_blob(
    height: usize,
    width: usize,
    center: [f64; 2],
    amplitude: f64,
    radius: f64,
) -> Vec<f64> {
    let inv = 1.0 / (2.0 * radius * radius);
    let mut out = Vec::with_capacity(height * width);
    for p in 0..height {
        for q in 0..width {
            let (dx, dy) = (q as f64 - center[0], p as f64 - center[1]);
            out.push(amplitude * (-(dx * dx + dy * dy) * inv).exp());
        }
    }
    out
}

/// Straight-line path reflecting off the walls of the margin box.
pub fn random_path(cfg: &SceneParams, seed: Seed) -> Result<(PooledTrajectory, Vec<usize>)> {
    cfg.validate()?;
    let mut rng = seed.rng();
    let lo = cfg.margin;
    let hi = [
        cfg.width as f64 - 1.0 - cfg.margin,
        cfg.height as f64 - 1.0 - cfg.margin,
    ];
    let mut pos = [rng.random_range(lo..=hi[0]), rng.random_range(lo..=hi[1])];
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = rng.random_range(cfg.min_speed..=cfg.max_speed);
    let mut vel = [speed * angle.cos(), speed * angle.sin()];

    let raw = cfg.frames * cfg.raw_factor;
    let mut points = Vec::with_capacity(raw);
    let mut impacts = Vec::new();
    for r in 0..raw {
        points.push(pos);
        let mut bounced = false;
        for a in 0..2 {
            pos[a] += vel[a];
            if pos[a] < lo {
                pos[a] = 2.0 * lo - pos[a];
                vel[a] = -vel[a];
                bounced = true;
            } else if pos[a] > hi[a] {
                pos[a] = 2.0 * hi[a] - pos[a];
                vel[a] = -vel[a];
                bounced = true;
            }
        }
        if bounced && r + 1 < raw {
            impacts.push((r + 1) / cfg.raw_factor);
        }
    }
    impacts.dedup();
    let traj = Trajectory::new(
        vec!["blob".into()],
        raw,
        points,
        cfg.width as u32,
        cfg.height as u32,
        cfg.fps * cfg.raw_factor as f64,
    )?;
    Ok((pool_temporal(&traj, cfg.frames)?, impacts))
}

/// Renders a scene along `path`, or along a seeded random path when `None`.
/// `impacts` is only used with an explicit path.
pub fn make_scene(
    cfg: &SceneParams,
    path: Option<(&PooledTrajectory, &[usize])>,
    seed: Seed,
) -> Result<SyntheticScene> {
    cfg.validate()?;
    let (path, impacts) = match path {
        Some((p, imp)) => (p.clone(), imp.to_vec()),
        None => random_path(cfg, seed)?,
    };
    if path.frames != cfg.frames {
        return Err(Error::invalid(format!(
            "scene path must have {} frames, got {}",
            cfg.frames, path.frames
        )));
    }
    if (path.image_width as usize, path.image_height as usize) != (cfg.width, cfg.height) {
        return Err(Error::invalid(
            "scene path image size differs from the grid",
        ));
    }
    for &[x, y] in &path.points {
        if !(0.0..cfg.width as f64).contains(&x) || !(0.0..cfg.height as f64).contains(&y) {
            return Err(Error::invalid(format!(
                "path point ({x}, {y}) outside the grid"
            )));
        }
    }
    if let Some(&i) = impacts.iter().find(|&&i| i >= cfg.frames) {
        return Err(Error::invalid(format!("impact frame {i} beyond clip")));
    }

    let frame_len = cfg.height * cfg.width;
    let mut data = vec![0.0; cfg.frames * frame_len];
    for i in 0..cfg.frames {
        for n in 0..path.objects {
            let blob = render_blob(
                cfg.height,
                cfg.width,
                path.point(i, n),
                cfg.amplitude,
                cfg.radius,
            );
            for (d, b) in data[i * frame_len..(i + 1) * frame_len]
                .iter_mut()
                .zip(blob)
            {
                *d += b;
            }
        }
    }
    let video = Tensor::new(vec![cfg.frames, cfg.height, cfg.width, 1], data)?;

    let kt = derive_kinematics(&path)?;
    let mut audio_env: Vec<f64> = kt
        .mean_speed()
        .iter()
        .map(|v| (cfg.kappa * v).clamp(0.0, 1.0))
        .collect();
    for &i in &impacts {
        audio_env[i] += 1.0;
    }
    Ok(SyntheticScene {
        video,
        path,
        impacts,
        audio_env,
    })
}

/// Intensity-weighted centroid `(x, y)` using weights `max(v - thr * max, 0)`.
/// Falls back to the grid centre when no pixel is positive.
pub fn centroid(frame: &[f64], height: usize, width: usize, threshold: f64) -> [f64; 2] {
    let peak = frame.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let centre = [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0];
    if !(peak > 0.0) {
        return centre;
    }
    let cut = threshold * peak;
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for p in 0..height {
        for q in 0..width {
            let wgt = (frame[p * width + q] - cut).max(0.0);
            sw += wgt;
            sx += wgt * q as f64;
            sy += wgt * p as f64;
        }
    }
    if sw > 0.0 {
        [sx / sw, sy / sw]
    } else {
        centre
    }
}

/// Half-width in pixels of the search window used when several objects share a frame.
pub const TRACK_WINDOW: usize = 4;

/// Tracks blobs through a `[f, H, W, C]` pixel video (channel 0), returning
/// a track laid out like `like`. A single object is tracked by the global
/// centroid; with several, each uses the centroid of a window of
/// half-width [`TRACK_WINDOW`] around its reference position.
pub fn track_centroids(
    video: &Tensor,
    threshold: f64,
    like: &PooledTrajectory,
) -> Result<PooledTrajectory> {
    let &[f, h, w, c] = video.dims() else {
        return Err(Error::invalid(format!(
            "video must be [f, H, W, C], got {:?}",
            video.dims()
        )));
    };
    if f != like.frames || (w, h) != (like.image_width as usize, like.image_height as usize) {
        return Err(Error::invalid(
            "video and reference trajectory disagree on frames or size",
        ));
    }
    let mut points = Vec::with_capacity(f * like.objects);
    let mut frame = vec![0.0; h * w];
    for i in 0..f {
        for (k, v) in frame.iter_mut().enumerate() {
            *v = video.data()[(i * h * w + k) * c];
        }
        if like.objects == 1 {
            points.push(centroid(&frame, h, w, threshold));
            continue;
        }
        for n in 0..like.objects {
            let [x, y] = like.point(i, n);
            let (q0, p0) = (
                (x.round() as usize).min(w - 1),
                (y.round() as usize).min(h - 1),
            );
            let rows = p0.saturating_sub(TRACK_WINDOW)..(p0 + TRACK_WINDOW + 1).min(h);
            let cols = q0.saturating_sub(TRACK_WINDOW)..(q0 + TRACK_WINDOW + 1).min(w);
            let mut win = Vec::with_capacity(rows.len() * cols.len());
            for p in rows.clone() {
                win.extend_from_slice(&frame[p * w + cols.start..p * w + cols.end]);
            }
            let [cx, cy] = centroid(&win, rows.len(), cols.len(), threshold);
            points.push([cx + cols.start as f64, cy + rows.start as f64]);
        }
    }
    Ok(PooledTrajectory {
        frames: f,
        objects: like.objects,
        points,
        image_width: like.image_width,
        image_height: like.image_height,
        fps_effective: like.fps_effective,
    })
}

/// Amplitude-modulated tone following a per-frame loudness envelope
/// (frame `i` held over `[i / fps, (i + 1) / fps)`), lasting `frames / fps`.
pub fn synthesize_audio(env: &[f64], fps: f64, sample_rate: u32, carrier_hz: f64) -> Vec<f64> {
    let sr = f64::from(sample_rate);
    let n = (env.len() as f64 / fps * sr).round() as usize;
    (0..n)
        .map(|k| {
            let t = k as f64 / sr;
            let a = env[((t * fps) as usize).min(env.len() - 1)];
            a * (std::f64::consts::TAU * carrier_hz * t).sin()
        })
        .collect()
}
