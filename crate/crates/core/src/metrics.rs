//! Motion-control and motion-sound coherence metrics.
//!
//! * TE: mean pixel distance between conditioning and tracked trajectories.
//! * ETE: mean absolute offset between trajectory events (acceleration
//!   peaks) and audio onsets (peaks of the rising envelope), after a
//!   symmetric greedy matching. Unmatched events cost `cap` seconds each.
//! * MAIC: Pearson correlation between the mean object speed, resampled to
//!   envelope times, and the RMS energy envelope.
//!
//! Trajectory frame `i` is placed at `i * tau`; envelope window `k` at its
//! centre `k * hop + window / 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::KinematicTrack;
use crate::trajectory::PooledTrajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub window_seconds: f64,
    pub hop_seconds: f64,
    /// Minimum acceleration magnitude (normalized units / s^2) of a trajectory event.
    pub theta_traj: f64,
    /// Minimum envelope rise between consecutive windows for an audio onset.
    pub theta_audio: f64,
    pub cap_seconds: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            window_seconds: 0.02,
            hop_seconds: 0.01,
            theta_traj: 1.0,
            theta_audio: 0.05,
            cap_seconds: 0.5,
        }
    }
}

fn same_layout(a: &PooledTrajectory, b: &PooledTrajectory) -> Result<()> {
    if (a.frames, a.objects, a.image_width, a.image_height)
        != (b.frames, b.objects, b.image_width, b.image_height)
    {
        return Err(Error::invalid(format!(
            "trajectory layouts differ: {}x{} on {}x{} vs {}x{} on {}x{}",
            a.frames,
            a.objects,
            a.image_width,
            a.image_height,
            b.frames,
            b.objects,
            b.image_width,
            b.image_height
        )));
    }
    Ok(())
}

/// Per-point pixel distances, frame-major.
pub fn point_errors(cond: &PooledTrajectory, tracked: &PooledTrajectory) -> Result<Vec<f64>> {
    same_layout(cond, tracked)?;
    Ok(cond
        .points
        .iter()
        .zip(&tracked.points)
        .map(|(&[x0, y0], &[x1, y1])| (x1 - x0).hypot(y1 - y0))
        .collect())
}

pub fn trajectory_error(cond: &PooledTrajectory, tracked: &PooledTrajectory) -> Result<f64> {
    let e = point_errors(cond, tracked)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioEnvelope {
    pub values: Vec<f64>,
    pub hop_seconds: f64,
    pub window_seconds: f64,
    /// Length of the analysed clip.
    pub duration_seconds: f64,
}

impl AudioEnvelope {
    pub fn timestamp(&self, k: usize) -> f64 {
        k as f64 * self.hop_seconds + self.window_seconds / 2.0
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.values.len()).map(|k| self.timestamp(k)).collect()
    }
}

/// Window and hop in samples for the given rates.
pub fn envelope_geometry(sample_rate: u32, window: f64, hop: f64) -> Result<(usize, usize)> {
    if !(hop > 0.0 && window >= hop) {
        return Err(Error::invalid(format!(
            "need window >= hop > 0, got window {window}, hop {hop}"
        )));
    }
    let sr = f64::from(sample_rate);
    let w = (window * sr).round() as usize;
    let h = (hop * sr).round() as usize;
    if h == 0 {
        return Err(Error::invalid("hop shorter than one sample"));
    }
    Ok((w.max(h), h))
}

/// Envelope length `floor((len - W) / H) + 1`.
pub fn envelope_len(len: usize, w: usize, h: usize) -> usize {
    (len - w) / h + 1
}

/// RMS energy over sliding windows.
pub fn audio_envelope(
    samples: &[f64],
    sample_rate: u32,
    window: f64,
    hop: f64,
) -> Result<AudioEnvelope> {
    let (w, h) = envelope_geometry(sample_rate, window, hop)?;
    if samples.len() < w {
        return Err(Error::invalid(format!(
            "clip of {} samples shorter than one {w}-sample window",
            samples.len()
        )));
    }
    let k = envelope_len(samples.len(), w, h);
    let values = (0..k)
        .map(|i| {
            let win = &samples[i * h..i * h + w];
            (win.iter().map(|x| x * x).sum::<f64>() / w as f64).sqrt()
        })
        .collect();
    let sr = f64::from(sample_rate);
    Ok(AudioEnvelope {
        values,
        hop_seconds: h as f64 / sr,
        window_seconds: w as f64 / sr,
        duration_seconds: samples.len() as f64 / sr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSource {
    Trajectory,
    Audio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventList {
    pub times: Vec<f64>,
    pub source: EventSource,
}

/// Indices where `xs` is a strict local maximum (against the neighbours
/// that exist) and at least `theta`.
fn strict_peaks(xs: &[f64], theta: f64) -> Vec<usize> {
    (0..xs.len())
        .filter(|&i| {
            let left = i == 0 || xs[i] > xs[i - 1];
            let right = i + 1 == xs.len() || xs[i] > xs[i + 1];
            xs.len() > 1 && left && right && xs[i] >= theta
        })
        .collect()
}

fn sorted_unique(mut times: Vec<f64>) -> Vec<f64> {
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
}

/// Frame times where an object's acceleration magnitude peaks above `theta`.
pub fn extract_events(kt: &KinematicTrack, theta: f64) -> Result<EventList> {
    if !(theta > 0.0) {
        return Err(Error::invalid(format!(
            "event threshold must be positive, got {theta}"
        )));
    }
    let mut times = Vec::new();
    for n in 0..kt.objects {
        let series: Vec<f64> = (0..kt.frames).map(|i| kt.amag[kt.at(i, n)]).collect();
        times.extend(
            strict_peaks(&series, theta)
                .into_iter()
                .map(|i| i as f64 * kt.tau),
        );
    }
    Ok(EventList {
        times: sorted_unique(times),
        source: EventSource::Trajectory,
    })
}

/// Envelope times where the positive first difference peaks above `theta`.
pub fn onsets(env: &AudioEnvelope, theta: f64) -> Result<EventList> {
    if !(theta > 0.0) {
        return Err(Error::invalid(format!(
            "onset threshold must be positive, got {theta}"
        )));
    }
    let rise: Vec<f64> = (0..env.values.len())
        .map(|k| {
            if k == 0 {
                0.0
            } else {
                (env.values[k] - env.values[k - 1]).max(0.0)
            }
        })
        .collect();
    let times = strict_peaks(&rise, theta)
        .into_iter()
        .map(|k| env.timestamp(k))
        .collect();
    Ok(EventList {
        times: sorted_unique(times),
        source: EventSource::Audio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EteBreakdown {
    pub value: f64,
    /// `(trajectory time, audio time)` of matched pairs.
    pub matched: Vec<(f64, f64)>,
    pub unmatched: usize,
}

/// Greedy matching: repeatedly pair the closest remaining events (ties
/// broken by earliest time), only within `cap`. Symmetric in its arguments.
pub fn ete_matching(a: &[f64], b: &[f64], cap: f64) -> EteBreakdown {
    let mut pairs: Vec<(f64, f64, f64, usize, usize)> = Vec::new();
    for (i, &ta) in a.iter().enumerate() {
        for (j, &tb) in b.iter().enumerate() {
            let d = (ta - tb).abs();
            if d <= cap {
                pairs.push((d, ta.min(tb), ta.max(tb), i, j));
            }
        }
    }
    pairs.sort_by(|x, y| {
        x.0.total_cmp(&y.0)
            .then(x.1.total_cmp(&y.1))
            .then(x.2.total_cmp(&y.2))
    });
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut matched = Vec::new();
    for &(_, _, _, i, j) in &pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            matched.push((a[i], b[j]));
        }
    }
    let unmatched = a.len() + b.len() - 2 * matched.len();
    let count = matched.len() + unmatched;
    let value = if count == 0 {
        0.0
    } else {
        let total: f64 =
            matched.iter().map(|(x, y)| (x - y).abs()).sum::<f64>() + cap * unmatched as f64;
        total / count as f64
    };
    EteBreakdown {
        value,
        matched,
        unmatched,
    }
}

pub fn ete(traj_events: &EventList, audio_events: &EventList, cap: f64) -> f64 {
    ete_matching(&traj_events.times, &audio_events.times, cap).value
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Linear interpolation of per-frame `values` (frame `i` at `i * tau`),
/// held constant beyond the ends.
pub fn resample_frames(values: &[f64], tau: f64, times: &[f64]) -> Vec<f64> {
    let last = values.len() - 1;
    times
        .iter()
        .map(|&t| {
            let pos = (t / tau).clamp(0.0, last as f64);
            let i = (pos.floor() as usize).min(last);
            if i == last {
                values[last]
            } else {
                let frac = pos - i as f64;
                values[i] * (1.0 - frac) + values[i + 1] * frac
            }
        })
        .collect()
}

/// Mean object speed at each envelope timestamp.
pub fn motion_intensity(kt: &KinematicTrack, env: &AudioEnvelope) -> Vec<f64> {
    resample_frames(&kt.mean_speed(), kt.tau, &env.timestamps())
}

pub fn maic(kt: &KinematicTrack, env: &AudioEnvelope) -> Result<f64> {
    let traj_duration = kt.frames as f64 * kt.tau;
    if (traj_duration - env.duration_seconds).abs() > env.hop_seconds + 1e-9 {
        return Err(Error::invalid(format!(
            "clip durations differ: trajectory {traj_duration:.4} s, audio {:.4} s",
            env.duration_seconds
        )));
    }
    if env.values.len() < 2 {
        return Err(Error::invalid("MAIC needs at least 2 envelope samples"));
    }
    Ok(pearson(&motion_intensity(kt, env), &env.values))
}

/// Metric report as written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub config: serde_json::Value,
    pub per_item: Vec<serde_json::Value>,
}
