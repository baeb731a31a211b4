use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use trajflow_core::checkpoint::{load_velocity_net, save_velocity_net};
use trajflow_core::config::RunConfig;
use trajflow_core::flow::hybrid_interpolant;
use trajflow_core::injection::inject;
use trajflow_core::io::{read_tensor, read_wav_mono, write_tensor};
use trajflow_core::kinematics::{
    assemble_features, derive_kinematics_with, fit_stats, FeatureStats, KinEncoder,
};
use trajflow_core::mask::TrajMask;
use trajflow_core::metrics::{
    audio_envelope, ete_matching, extract_events, maic, onsets, point_errors, MetricReport,
};
use trajflow_core::pipeline::{
    first_frame_latent, reference_audio, run_pipeline, trajectory_mask, StageError,
};
use trajflow_core::rng::gaussian_noise;
use trajflow_core::toy::control::run_control;
use trajflow_core::toy::train::{curve_csv, make_dataset, train_toy_with_progress, CurvePoint};
use trajflow_core::toy::{sample, track_centroids};
use trajflow_core::trajectory::{pool_temporal, LatentTrajectory, PooledTrajectory, Trajectory};
use trajflow_core::{Seed, Tensor};

/// Trajectory-grounded flow matching on toy moving-blob scenes.
#[derive(Parser)]
#[command(name = "trajflow", version)]
struct Cli {
    /// Overrides the config seed.
    #[arg(long, global = true, env = "KF_SEED")]
    seed: Option<u64>,
    /// Run config JSON; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Kinematic features and normalization statistics.
    #[command(subcommand)]
    Kin(KinCmd),
    /// Binary, soft and owner masks for a trajectory.
    Mask {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the latent-grid trajectory.
        #[arg(long)]
        lt: Option<PathBuf>,
    },
    /// Carries first-frame latent features along the trajectory.
    Inject {
        /// First-frame latent, `[h, w, d]`.
        #[arg(long)]
        latent: PathBuf,
        /// Latent-grid trajectory written by `mask --lt`.
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flow-matching training samples.
    #[command(subcommand)]
    Flow(FlowCmd),
    /// Trains the toy velocity network.
    TrainToy {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generates a clip that follows a trajectory.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trajectory and motion-sound metrics.
    Eval {
        metric: Metric,
        /// Conditioning trajectory.
        #[arg(long)]
        traj: PathBuf,
        /// Observed trajectory.
        #[arg(long)]
        traj_b: Option<PathBuf>,
        /// Generated clip; its tracked blob path is the observed trajectory.
        #[arg(long, conflicts_with = "traj_b")]
        video: Option<PathBuf>,
        /// Reference audio. Synthesized from `--traj` when absent.
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Paired conditioned/unconditioned training on the toy benchmark.
    Control {
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Every stage end to end, writing an artifact bundle.
    Pipeline {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum KinCmd {
    /// Normalized 8-D features; fits `--stats` first if it does not exist.
    Extract {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write encoder tokens `[f, N, d]`.
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
    /// Fits normalization statistics over one or more trajectories.
    FitStats {
        #[arg(long, required = true, num_args = 1..)]
        traj: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum FlowCmd {
    /// Writes `[2f, h, w, d]`: the `f` frames of `x_t`, then the `f` frames
    /// of the target velocity.
    MakeSample {
        #[arg(long)]
        x0: PathBuf,
        /// Noise seed; derived from the run seed when absent.
        #[arg(long)]
        eps_seed: Option<u64>,
        #[arg(long)]
        xtraj: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Te,
    Ete,
    Maic,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    for o in cfg.overrides() {
        eprintln!("config: {o}");
    }
    Ok(cfg)
}

fn pooled(cfg: &RunConfig, path: &Path) -> Result<PooledTrajectory> {
    let traj =
        Trajectory::load(path).with_context(|| format!("reading trajectory {}", path.display()))?;
    Ok(pool_temporal(&traj, cfg.grid.frames)?)
}

/// A trajectory at its own frame rate, without pooling.
fn as_is(path: &Path) -> Result<PooledTrajectory> {
    let traj =
        Trajectory::load(path).with_context(|| format!("reading trajectory {}", path.display()))?;
    Ok(pool_temporal(&traj, traj.frames)?)
}

fn write_json(path: &Path, value: serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(&value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn log_progress(every: usize) -> impl FnMut(&CurvePoint) {
    move |p| {
        if p.step % every == 0 {
            eprintln!(
                "step {:>5}  l_video {:.5}  l_traj {:.5}",
                p.step, p.l_video, p.l_traj
            );
        }
    }
}

fn kin(cfg: &RunConfig, cmd: KinCmd) -> Result<()> {
    match cmd {
        KinCmd::Extract {
            traj,
            stats,
            out,
            tokens,
        } => {
            let kt = derive_kinematics_with(&pooled(cfg, &traj)?, cfg.kinematics.boundary)?;
            let st = if stats.exists() {
                FeatureStats::load(&stats)?
            } else {
                let st = fit_stats(&kt.phi_rows())?;
                st.save(&stats)?;
                eprintln!("fitted {}", stats.display());
                st
            };
            let feat = assemble_features(&kt, &st)?;
            write_tensor(&out, &feat.to_tensor())?;
            if let Some(path) = tokens {
                let k = &cfg.kinematics;
                let enc = KinEncoder::new(
                    k.encoder_hidden,
                    k.token_dim,
                    cfg.seed().derive_str("encoder"),
                );
                write_tensor(&path, &enc.encode(&feat)?)?;
            }
        }
        KinCmd::FitStats { traj, out } => {
            let mut rows = Vec::new();
            for p in &traj {
                rows.extend(
                    derive_kinematics_with(&pooled(cfg, p)?, cfg.kinematics.boundary)?.phi_rows(),
                );
            }
            fit_stats(&rows)?.save(&out)?;
        }
    }
    Ok(())
}

fn eval(
    cfg: &RunConfig,
    metric: Metric,
    traj: &Path,
    traj_b: Option<&Path>,
    video: Option<&Path>,
    wav: Option<&Path>,
) -> Result<MetricReport> {
    let (cond, observed) = match video {
        Some(v) => {
            let vid = read_tensor(v)?;
            let traj = Trajectory::load(traj)?;
            let cond = pool_temporal(&traj, vid.dims()[0])?;
            let tracked = track_centroids(&vid, cfg.toy.track_threshold, &cond)?;
            (cond, Some(tracked))
        }
        None => (as_is(traj)?, traj_b.map(as_is).transpose()?),
    };
    let m = cfg.metrics;
    if let Metric::Te = metric {
        let Some(observed) = observed else {
            bail!("te needs --traj-b or --video");
        };
        let errs = point_errors(&cond, &observed)?;
        return Ok(MetricReport {
            metric: "te".into(),
            value: errs.iter().sum::<f64>() / errs.len() as f64,
            config: json!({"track_threshold": cfg.toy.track_threshold}),
            per_item: errs.iter().map(|&e| json!(e)).collect(),
        });
    }
    let boundary = cfg.kinematics.boundary;
    let kt_cond = derive_kinematics_with(&cond, boundary)?;
    let kt = match &observed {
        Some(o) => derive_kinematics_with(o, boundary)?,
        None => kt_cond.clone(),
    };
    let (samples, sr) = match wav {
        Some(p) => {
            let (t, sr) = read_wav_mono(p)?;
            (t.into_data(), sr)
        }
        None => reference_audio(cfg, &kt_cond)?,
    };
    let env = audio_envelope(&samples, sr, m.window_seconds, m.hop_seconds)?;
    let config = serde_json::to_value(m)?;
    Ok(match metric {
        Metric::Ete => {
            let r = ete_matching(
                &extract_events(&kt, m.theta_traj)?.times,
                &onsets(&env, m.theta_audio)?.times,
                m.cap_seconds,
            );
            MetricReport {
                metric: "ete".into(),
                value: r.value,
                config,
                per_item: r
                    .matched
                    .iter()
                    .map(|&(a, b)| json!({"trajectory": a, "audio": b}))
                    .collect(),
            }
        }
        _ => MetricReport {
            metric: "maic".into(),
            value: maic(&kt, &env)?,
            config,
            per_item: Vec::new(),
        },
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let seed = cfg.seed();
    match cli.cmd {
        Cmd::Kin(cmd) => kin(&cfg, cmd)?,
        Cmd::Mask { traj, out, lt } => {
            let (latent, mask) = trajectory_mask(&cfg, &pooled(&cfg, &traj)?)?;
            write_tensor(&out, &mask.to_tensor())?;
            if let Some(p) = lt {
                write_tensor(&p, &latent.to_tensor())?;
            }
        }
        Cmd::Inject {
            latent,
            traj,
            mask,
            out,
        } => {
            let z = read_tensor(&latent)?;
            let mask = TrajMask::from_tensor(&read_tensor(&mask)?)?;
            let lt = LatentTrajectory::from_tensor(
                &read_tensor(&traj)?,
                cfg.vae_downsample,
                mask.h,
                mask.w,
            )?;
            write_tensor(&out, &inject(&z, &lt, &mask)?.data)?;
        }
        Cmd::Flow(FlowCmd::MakeSample {
            x0,
            eps_seed,
            xtraj,
            mask,
            t,
            out,
        }) => {
            let x0 = read_tensor(&x0)?;
            let eps_seed = eps_seed.map_or_else(|| seed.derive_str("eps"), Seed);
            let eps = gaussian_noise(x0.dims(), eps_seed)?;
            let mask = TrajMask::from_tensor(&read_tensor(&mask)?)?;
            let s = hybrid_interpolant(&x0, &eps, &read_tensor(&xtraj)?, &mask, t)?;
            let mut dims = x0.dims().to_vec();
            dims[0] *= 2;
            let data = [s.x_t.data(), s.v_target.data()].concat();
            write_tensor(&out, &Tensor::new(dims, data)?)?;
        }
        Cmd::TrainToy { out } => {
            let tc = cfg.train_config();
            let items = make_dataset(&tc, tc.seed.derive_str("scenes"), tc.num_scenes)?;
            let trained = train_toy_with_progress(&items, &tc, log_progress(50))?;
            save_velocity_net(&out, &trained.net)?;
            std::fs::write(out.join("config.json"), cfg.to_json_string()? + "\n")?;
            std::fs::write(out.join("loss_curve.csv"), curve_csv(&trained.curve))?;
            eprintln!(
                "eval l_video {:.5} -> {:.5}",
                trained.eval_initial.l_video, trained.eval_final.l_video
            );
        }
        Cmd::Sample {
            ckpt,
            traj,
            steps,
            out,
        } => {
            let net = load_velocity_net(&ckpt)?;
            let pt = pooled(&cfg, &traj)?;
            let (lt, mask) = trajectory_mask(&cfg, &pt)?;
            let xtraj = inject(&first_frame_latent(&cfg, &pt)?, &lt, &mask)?.data;
            let steps = steps.unwrap_or(cfg.toy.sample_steps);
            let lv = sample(&net, &xtraj, &mask, steps, seed.derive_str("sample"))?;
            let video = cfg.train_config().vae().decode(
                &lv,
                pt.image_height as usize,
                pt.image_width as usize,
            )?;
            write_tensor(&out, &video)?;
        }
        Cmd::Eval {
            metric,
            traj,
            traj_b,
            video,
            wav,
            report,
        } => {
            let r = eval(
                &cfg,
                metric,
                &traj,
                traj_b.as_deref(),
                video.as_deref(),
                wav.as_deref(),
            )?;
            match report {
                Some(p) => write_json(&p, serde_json::to_value(&r)?)?,
                None => println!("{}", serde_json::to_string_pretty(&r)?),
            }
        }
        Cmd::Control { report } => {
            let outcome = run_control(&cfg.control_config(), |model, p| {
                if p.step % 100 == 0 {
                    eprintln!("{model} step {:>5}  l_video {:.5}", p.step, p.l_video);
                }
            })?;
            match report {
                Some(p) => write_json(&p, serde_json::to_value(&outcome.report)?)?,
                None => println!("{}", serde_json::to_string_pretty(&outcome.report)?),
            }
        }
        Cmd::Pipeline { traj, wav, out } => {
            let s = run_pipeline(&cfg, &traj, wav.as_deref(), &out, log_progress(50))?;
            println!("{}", serde_json::to_string(&s)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<StageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
