//! End-to-end run: trajectory file in, artifact bundle out.
//!
//! Stages run in order and each writes its artifacts before the next one
//! starts. `MANIFEST.json` is always written last; it lists the files
//! present and, after a failure, the stage that failed. Nothing in the
//! bundle depends on wall-clock time, so equal inputs give equal bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;
use serde_json::json;

use crate::attention::FusionBlock;
use crate::checkpoint::save_velocity_net;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::injection::inject;
use crate::io::{read_wav_mono, write_tensor};
use crate::kinematics::{assemble_features, derive_kinematics_with, fit_stats, KinEncoder};
use crate::mask::{build_mask, TrajMask};
use crate::metrics::{
    audio_envelope, ete_matching, extract_events, maic, onsets, point_errors, MetricReport,
};
use crate::rng::gaussian_noise;
use crate::tensor::Tensor;
use crate::toy::sample::sample;
use crate::toy::scene::{make_scene, synthesize_audio, track_centroids, SceneParams};
use crate::toy::train::{
    curve_csv, encode_video, first_frame, make_dataset, train_toy_with_progress, CurvePoint,
};
use crate::trajectory::{
    latent_extent, pool_temporal, to_latent_grid, LatentTrajectory, PooledTrajectory, Trajectory,
};

pub const STAGES: [&str; 10] = [
    "setup", "parse", "pool", "stats", "kin", "mask", "inject", "train", "sample", "eval",
];

pub const BUNDLE_MANIFEST: &str = "MANIFEST.json";

/// Audio latent tokens per video latent frame in the fusion demo.
pub const AUDIO_TOKENS_PER_FRAME: usize = 4;

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub te: f64,
    pub ete: f64,
    pub maic: f64,
}

#[derive(Serialize)]
struct BundleManifest<'a> {
    complete: bool,
    failed_stage: Option<&'a str>,
    error: Option<String>,
    stages_completed: Vec<&'a str>,
    /// Relative path to size in bytes.
    files: BTreeMap<String, u64>,
}

fn list_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, u64>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let meta = entry.metadata().map_err(|e| Error::io(&path, e))?;
        if meta.is_dir() {
            list_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("under root")
                .to_string_lossy()
                .replace('\\', "/");
            if rel != BUNDLE_MANIFEST {
                out.insert(rel, meta.len());
            }
        }
    }
    Ok(())
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_json(path: PathBuf, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

struct Runner<'a> {
    out: &'a Path,
    done: Vec<&'static str>,
}

impl Runner<'_> {
    fn stage<T>(
        &mut self,
        name: &'static str,
        f: impl FnOnce() -> Result<T>,
    ) -> Result<T, StageError> {
        let r = f().map_err(|source| StageError {
            stage: name,
            source,
        })?;
        self.done.push(name);
        Ok(r)
    }

    fn finish(&self, failure: Option<&StageError>) -> Result<()> {
        let mut files = BTreeMap::new();
        list_files(self.out, self.out, &mut files)?;
        let m = BundleManifest {
            complete: failure.is_none(),
            failed_stage: failure.map(|e| e.stage),
            error: failure.map(|e| e.source.to_string()),
            stages_completed: self.done.clone(),
            files,
        };
        write_json(self.out.join(BUNDLE_MANIFEST), &m)
    }
}

/// Runs every stage, writing into `out`. `wav` replaces the synthesized
/// reference audio used by ETE and MAIC.
pub fn run_pipeline(
    cfg: &RunConfig,
    traj_path: &Path,
    wav: Option<&Path>,
    out: &Path,
    progress: impl FnMut(&CurvePoint),
) -> Result<PipelineSummary, StageError> {
    let mut runner = Runner {
        out,
        done: Vec::new(),
    };
    runner.stage("setup", || {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_text(out.join("config.json"), &(cfg.to_json_string()? + "\n"))
    })?;
    let result = stages(&mut runner, cfg, traj_path, wav, progress);
    let failure = result.as_ref().err();
    runner.finish(failure).map_err(|source| StageError {
        stage: "eval",
        source,
    })?;
    result
}

fn stages(
    r: &mut Runner<'_>,
    cfg: &RunConfig,
    traj_path: &Path,
    wav: Option<&Path>,
    mut progress: impl FnMut(&CurvePoint),
) -> Result<PipelineSummary, StageError> {
    let out = r.out;
    let seed = cfg.seed();
    let f = cfg.grid.frames;

    let traj = r.stage("parse", || Trajectory::load(traj_path))?;
    let pt = r.stage("pool", || {
        let pt = pool_temporal(&traj, f)?;
        pt.to_trajectory().save(out.join("pooled.json"))?;
        Ok(pt)
    })?;
    let (kt, stats) = r.stage("stats", || {
        let kt = derive_kinematics_with(&pt, cfg.kinematics.boundary)?;
        let stats = fit_stats(&kt.phi_rows())?;
        stats.save(out.join("stats.json"))?;
        Ok((kt, stats))
    })?;
    r.stage("kin", || {
        let feat = assemble_features(&kt, &stats)?;
        write_tensor(out.join("feats.tensor"), &feat.to_tensor())?;
        let k = &cfg.kinematics;
        let enc = KinEncoder::new(k.encoder_hidden, k.token_dim, seed.derive_str("encoder"));
        let tokens = enc.encode(&feat)?;
        write_tensor(out.join("kin_tokens.tensor"), &tokens)?;
        // Stand-in audio latents; the audio backbone is not part of the toy.
        let la = AUDIO_TOKENS_PER_FRAME * f;
        let h_a = gaussian_noise(&[la, k.token_dim], seed.derive_str("audio_latent"))?;
        let h_a = Array2::from_shape_vec((la, k.token_dim), h_a.into_data()).expect("dims");
        let mut block = FusionBlock::with_gamma(
            k.token_dim,
            k.heads,
            cfg.gamma_init,
            seed.derive_str("fusion"),
        )?;
        block.rope_base = k.rope_base;
        let fused = block.fuse_tensor(&h_a, &tokens)?;
        write_tensor(
            out.join("audio_fused.tensor"),
            &Tensor::new(vec![la, k.token_dim], fused.into_raw_vec_and_offset().0)?,
        )
    })?;
    let (lt, mask) = r.stage("mask", || {
        let (lt, mask) = trajectory_mask(cfg, &pt)?;
        write_tensor(out.join("lt.tensor"), &lt.to_tensor())?;
        write_tensor(out.join("mask.tensor"), &mask.to_tensor())?;
        Ok((lt, mask))
    })?;
    let tc = cfg.train_config();
    let (image_h, image_w) = (pt.image_height as usize, pt.image_width as usize);
    let xtraj = r.stage("inject", || {
        let z = first_frame_latent(cfg, &pt)?;
        write_tensor(out.join("z.tensor"), &z)?;
        let xtraj = inject(&z, &lt, &mask)?.data;
        write_tensor(out.join("xtraj.tensor"), &xtraj)?;
        Ok(xtraj)
    })?;
    let net = r.stage("train", || {
        let items = make_dataset(&tc, tc.seed.derive_str("scenes"), tc.num_scenes)?;
        let trained = train_toy_with_progress(&items, &tc, &mut progress)?;
        let ckpt = out.join("ckpt");
        save_velocity_net(&ckpt, &trained.net)?;
        write_json(ckpt.join("train_config.json"), &tc)?;
        write_text(ckpt.join("loss_curve.csv"), &curve_csv(&trained.curve))?;
        write_json(
            ckpt.join("eval.json"),
            &json!({"initial": trained.eval_initial, "final": trained.eval_final}),
        )?;
        Ok(trained.net)
    })?;
    let video = r.stage("sample", || {
        let lv = sample(
            &net,
            &xtraj,
            &mask,
            cfg.toy.sample_steps,
            seed.derive_str("sample"),
        )?;
        let video = tc.vae().decode(&lv, image_h, image_w)?;
        write_tensor(out.join("vid.tensor"), &video)?;
        Ok(video)
    })?;
    r.stage("eval", || {
        let (report, summary) = evaluate(cfg, &pt, &kt, &video, wav)?;
        write_json(out.join("report.json"), &report)?;
        Ok(summary)
    })
}

/// Latent trajectory and mask on the grid implied by the image size.
pub fn trajectory_mask(
    cfg: &RunConfig,
    pt: &PooledTrajectory,
) -> Result<(LatentTrajectory, TrajMask)> {
    let s = cfg.vae_downsample;
    let (h, w) = (
        latent_extent(pt.image_height, s),
        latent_extent(pt.image_width, s),
    );
    let lt = to_latent_grid(pt, s, h, w)?;
    let mask = build_mask(
        &lt,
        pt.frames,
        h,
        w,
        cfg.blur_sigma,
        cfg.seed().derive_str("mask"),
    )?;
    Ok((lt, mask))
}

/// Encoded first frame of the toy scene rendered along `pt`.
pub fn first_frame_latent(cfg: &RunConfig, pt: &PooledTrajectory) -> Result<Tensor> {
    let tc = cfg.train_config();
    let scene_cfg = SceneParams {
        height: pt.image_height as usize,
        width: pt.image_width as usize,
        frames: pt.frames,
        ..tc.scene
    };
    let scene = make_scene(&scene_cfg, Some((pt, &[])), cfg.seed())?;
    first_frame(&encode_video(tc.vae(), &scene.video)?)
}

/// Reference audio for a trajectory: a tone whose loudness follows
/// `clip(kappa * speed, 0, 1)` with a unit bump at each trajectory event.
pub fn reference_audio(
    cfg: &RunConfig,
    kt: &crate::kinematics::KinematicTrack,
) -> Result<(Vec<f64>, u32)> {
    let mut env: Vec<f64> = kt
        .mean_speed()
        .iter()
        .map(|v| (cfg.toy.scene.kappa * v).clamp(0.0, 1.0))
        .collect();
    for t in extract_events(kt, cfg.metrics.theta_traj)?.times {
        let i = ((t / kt.tau).round() as usize).min(env.len() - 1);
        env[i] += 1.0;
    }
    let sr = cfg.toy.audio_sample_rate;
    Ok((
        synthesize_audio(&env, 1.0 / kt.tau, sr, cfg.toy.carrier_hz),
        sr,
    ))
}

fn evaluate(
    cfg: &RunConfig,
    pt: &PooledTrajectory,
    kt: &crate::kinematics::KinematicTrack,
    video: &Tensor,
    wav: Option<&Path>,
) -> Result<(serde_json::Value, PipelineSummary)> {
    let m = cfg.metrics;
    let tracked = track_centroids(video, cfg.toy.track_threshold, pt)?;
    let errs = point_errors(pt, &tracked)?;
    let te = errs.iter().sum::<f64>() / errs.len() as f64;

    let (samples, sr) = match wav {
        Some(p) => {
            let (t, sr) = read_wav_mono(p)?;
            (t.into_data(), sr)
        }
        None => reference_audio(cfg, kt)?,
    };
    let env = audio_envelope(&samples, sr, m.window_seconds, m.hop_seconds)?;
    let kt_tracked = derive_kinematics_with(&tracked, cfg.kinematics.boundary)?;
    let ev_traj = extract_events(&kt_tracked, m.theta_traj)?;
    let ev_audio = onsets(&env, m.theta_audio)?;
    let matching = ete_matching(&ev_traj.times, &ev_audio.times, m.cap_seconds);
    let maic_value = maic(&kt_tracked, &env)?;

    let metric_cfg = serde_json::to_value(m)?;
    let reports = vec![
        MetricReport {
            metric: "te".into(),
            value: te,
            config: json!({"track_threshold": cfg.toy.track_threshold}),
            per_item: errs.iter().map(|&e| json!(e)).collect(),
        },
        MetricReport {
            metric: "ete".into(),
            value: matching.value,
            config: metric_cfg.clone(),
            per_item: matching
                .matched
                .iter()
                .map(|&(a, b)| json!({"trajectory": a, "audio": b}))
                .collect(),
        },
        MetricReport {
            metric: "maic".into(),
            value: maic_value,
            config: metric_cfg,
            per_item: Vec::new(),
        },
    ];
    let summary = PipelineSummary {
        te,
        ete: matching.value,
        maic: maic_value,
    };
    let report = json!({
        "metrics": reports,
        "events": {"trajectory": ev_traj.times, "audio": ev_audio.times, "unmatched": matching.unmatched},
        "audio_source": if wav.is_some() { "wav" } else { "synthesized" },
    });
    Ok((report, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> RunConfig {
        RunConfig::from_json_str(r#"{"toy": {"steps": 3, "num_scenes": 64, "eval_items": 4}}"#)
            .unwrap()
    }

    fn demo() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/demo_traj.json")
    }

    fn manifest(dir: &Path) -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(dir.join(BUNDLE_MANIFEST)).unwrap()).unwrap()
    }

    #[test]
    fn full_run_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let mut seen = 0;
        let s = run_pipeline(&quick(), &demo(), None, dir.path(), |_| seen += 1).unwrap();
        assert_eq!(seen, 3);
        assert!(s.te.is_finite() && s.ete.is_finite() && (-1.0..=1.0).contains(&s.maic));
        let m = manifest(dir.path());
        assert_eq!(m["complete"], true);
        assert_eq!(
            m["stages_completed"].as_array().unwrap().len(),
            STAGES.len()
        );
        for f in [
            "config.json",
            "stats.json",
            "feats.tensor",
            "mask.tensor",
            "lt.tensor",
            "xtraj.tensor",
            "ckpt/manifest.json",
            "ckpt/loss_curve.csv",
            "vid.tensor",
            "report.json",
            "kin_tokens.tensor",
            "audio_fused.tensor",
        ] {
            assert!(m["files"].get(f).is_some(), "{f} missing");
        }
        let vid = crate::io::read_tensor(dir.path().join("vid.tensor")).unwrap();
        assert_eq!(vid.dims(), &[16, 16, 16, 1]);
        let mask = crate::io::read_tensor(dir.path().join("mask.tensor")).unwrap();
        assert_eq!(mask.dims()[0], 3);
    }

    #[test]
    fn missing_trajectory_fails_at_parse() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_pipeline(
            &quick(),
            Path::new("/nonexistent/traj.json"),
            None,
            dir.path(),
            |_| {},
        )
        .unwrap_err();
        assert_eq!(err.stage, "parse");
        let m = manifest(dir.path());
        assert_eq!(m["complete"], false);
        assert_eq!(m["failed_stage"], "parse");
        assert_eq!(m["stages_completed"], json!(["setup"]));
    }
}
