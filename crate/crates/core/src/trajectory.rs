//! Object trajectories in pixel space, their temporal pooling, and their
//! mapping onto the latent grid.
//!
//! Coordinates are `(x, y)` with `x` the column and `y` the row, `y`
//! increasing downward. All per-frame arrays are laid out frame-major:
//! element `(i, n)` lives at `i * objects + n`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Raw per-frame object positions as read from a trajectory file.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub ids: Vec<String>,
    pub frames: usize,
    pub points: Vec<[f64; 2]>,
    pub image_width: u32,
    pub image_height: u32,
    pub fps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryFile {
    image_width: u32,
    image_height: u32,
    fps: f64,
    objects: Vec<ObjectFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectFile {
    id: String,
    points: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn new(
        ids: Vec<String>,
        frames: usize,
        points: Vec<[f64; 2]>,
        image_width: u32,
        image_height: u32,
        fps: f64,
    ) -> Result<Self> {
        let t = Self {
            ids,
            frames,
            points,
            image_width,
            image_height,
            fps,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn objects(&self) -> usize {
        self.ids.len()
    }

    pub fn point(&self, frame: usize, object: usize) -> [f64; 2] {
        self.points[frame * self.objects() + object]
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::invalid("trajectory has no objects"));
        }
        if self.frames < 2 {
            return Err(Error::invalid(format!(
                "trajectory needs at least 2 frames, got {}",
                self.frames
            )));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::invalid(format!(
                "fps must be positive, got {}",
                self.fps
            )));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if self.points.len() != self.frames * self.objects() {
            return Err(Error::invalid(
                "point count does not match frames x objects",
            ));
        }
        check_bounds(&self.points, self.image_width, self.image_height)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: TrajectoryFile = serde_json::from_str(s)?;
        let frames = file.objects.first().map_or(0, |o| o.points.len());
        if let Some(bad) = file.objects.iter().find(|o| o.points.len() != frames) {
            return Err(Error::invalid(format!(
                "object {:?} has {} frames, expected {frames}",
                bad.id,
                bad.points.len()
            )));
        }
        let n = file.objects.len();
        let mut points = vec![[0.0; 2]; frames * n];
        for (j, obj) in file.objects.iter().enumerate() {
            for (i, p) in obj.points.iter().enumerate() {
                points[i * n + j] = *p;
            }
        }
        let ids = file.objects.into_iter().map(|o| o.id).collect();
        Self::new(
            ids,
            frames,
            points,
            file.image_width,
            file.image_height,
            file.fps,
        )
    }

    pub fn to_json_string(&self) -> Result<String> {
        let n = self.objects();
        let objects = self
            .ids
            .iter()
            .enumerate()
            .map(|(j, id)| ObjectFile {
                id: id.clone(),
                points: (0..self.frames).map(|i| self.points[i * n + j]).collect(),
            })
            .collect();
        let file = TrajectoryFile {
            image_width: self.image_width,
            image_height: self.image_height,
            fps: self.fps,
            objects,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }
}

fn check_bounds(points: &[[f64; 2]], w: u32, h: u32) -> Result<()> {
    for (k, &[x, y]) in points.iter().enumerate() {
        if !(x >= 0.0 && x < f64::from(w) && y >= 0.0 && y < f64::from(h)) {
            return Err(Error::invalid(format!(
                "point #{k} ({x}, {y}) outside {w}x{h} image"
            )));
        }
    }
    Ok(())
}

/// Trajectory resampled to the latent frame count.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledTrajectory {
    pub frames: usize,
    pub objects: usize,
    pub points: Vec<[f64; 2]>,
    pub image_width: u32,
    pub image_height: u32,
    pub fps_effective: f64,
}

impl PooledTrajectory {
    pub fn point(&self, frame: usize, object: usize) -> [f64; 2] {
        self.points[frame * self.objects + object]
    }

    /// Seconds per pooled frame.
    pub fn tau(&self) -> f64 {
        1.0 / self.fps_effective
    }

    pub fn duration(&self) -> f64 {
        self.frames as f64 * self.tau()
    }

    /// Views the pooled track as a raw trajectory (for writing it back out).
    pub fn to_trajectory(&self) -> Trajectory {
        Trajectory {
            ids: (0..self.objects).map(|n| format!("obj{n}")).collect(),
            frames: self.frames,
            points: self.points.clone(),
            image_width: self.image_width,
            image_height: self.image_height,
            fps: self.fps_effective,
        }
    }
}

/// Raw frame indices `[start, end)` averaged into pooled frame `k`.
pub fn pool_window(k: usize, raw_frames: usize, frames: usize) -> (usize, usize) {
    (k * raw_frames / frames, (k + 1) * raw_frames / frames)
}

/// Temporal average pooling over a contiguous near-equal partition of the raw frames.
pub fn pool_temporal(traj: &Trajectory, frames: usize) -> Result<PooledTrajectory> {
    if frames < 2 {
        return Err(Error::invalid(format!(
            "pooled frame count must be >= 2, got {frames}"
        )));
    }
    if frames > traj.frames {
        return Err(Error::invalid(format!(
            "cannot pool {} raw frames into {frames}",
            traj.frames
        )));
    }
    let n = traj.objects();
    let mut points = Vec::with_capacity(frames * n);
    for k in 0..frames {
        let (start, end) = pool_window(k, traj.frames, frames);
        let count = (end - start) as f64;
        for obj in 0..n {
            let (sx, sy) = (start..end).fold((0.0, 0.0), |(sx, sy), i| {
                let [x, y] = traj.point(i, obj);
                (sx + x, sy + y)
            });
            points.push([sx / count, sy / count]);
        }
    }
    Ok(PooledTrajectory {
        frames,
        objects: n,
        points,
        image_width: traj.image_width,
        image_height: traj.image_height,
        fps_effective: traj.fps * frames as f64 / traj.frames as f64,
    })
}

/// Integer `(row, col)` cells of every object on an `h x w` latent grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentTrajectory {
    pub frames: usize,
    pub objects: usize,
    pub cells: Vec<[usize; 2]>,
    pub downsample: usize,
    pub h: usize,
    pub w: usize,
}

impl LatentTrajectory {
    pub fn cell(&self, frame: usize, object: usize) -> [usize; 2] {
        self.cells[frame * self.objects + object]
    }

    /// `[frames, objects, 2]` tensor of `(row, col)` values.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .cells
            .iter()
            .flat_map(|&[p, q]| [p as f64, q as f64])
            .collect();
        Tensor::new(vec![self.frames, self.objects, 2], data).expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor, downsample: usize, h: usize, w: usize) -> Result<Self> {
        let &[frames, objects, two] = t.dims() else {
            return Err(Error::invalid(format!(
                "latent trajectory tensor must be [f, N, 2], got {:?}",
                t.dims()
            )));
        };
        if two != 2 {
            return Err(Error::invalid("latent trajectory last extent must be 2"));
        }
        let mut cells = Vec::with_capacity(frames * objects);
        for c in t.data().chunks_exact(2) {
            let (p, q) = (c[0], c[1]);
            if p.fract() != 0.0 || q.fract() != 0.0 || p < 0.0 || q < 0.0 {
                return Err(Error::invalid(format!(
                    "non-integer latent cell ({p}, {q})"
                )));
            }
            let (p, q) = (p as usize, q as usize);
            if p >= h || q >= w {
                return Err(Error::invalid(format!(
                    "latent cell ({p}, {q}) outside {h}x{w} grid"
                )));
            }
            cells.push([p, q]);
        }
        Ok(Self {
            frames,
            objects,
            cells,
            downsample,
            h,
            w,
        })
    }
}

/// Latent grid extent for an image side of `pixels` at downsample factor `s`.
pub fn latent_extent(pixels: u32, s: usize) -> usize {
    (pixels as usize).div_ceil(s)
}

/// Scales pixel coordinates by `1/s` and rounds to the nearest cell,
/// half away from zero, clamping onto the grid.
pub fn to_latent_grid(
    pt: &PooledTrajectory,
    s: usize,
    h: usize,
    w: usize,
) -> Result<LatentTrajectory> {
    if s == 0 {
        return Err(Error::invalid("downsample factor must be >= 1"));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("latent grid must be non-empty"));
    }
    if h != latent_extent(pt.image_height, s) || w != latent_extent(pt.image_width, s) {
        return Err(Error::invalid(format!(
            "grid {h}x{w} inconsistent with {}x{} image at downsample {s}",
            pt.image_height, pt.image_width
        )));
    }
    let sf = s as f64;
    let snap =
        |v: f64, extent: usize| -> usize { ((v / sf).round().max(0.0) as usize).min(extent - 1) };
    let cells = pt
        .points
        .iter()
        .map(|&[x, y]| [snap(y, h), snap(x, w)])
        .collect();
    Ok(LatentTrajectory {
        frames: pt.frames,
        objects: pt.objects,
        cells,
        downsample: s,
        h,
        w,
    })
}
