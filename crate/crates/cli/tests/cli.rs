use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const QUICK: &str = r#"{"toy": {"steps": 4, "num_scenes": 64, "eval_items": 4}}"#;

fn demo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/demo_traj.json")
}

fn trajflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajflow"))
        .current_dir(dir)
        .env_remove("KF_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("quick.json"), QUICK).unwrap();
    (dir, demo().display().to_string())
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let help = String::from_utf8(ok(trajflow(dir.path(), &["--help"])).stdout).unwrap();
    for cmd in [
        "kin",
        "mask",
        "inject",
        "flow",
        "train-toy",
        "sample",
        "eval",
        "pipeline",
    ] {
        assert!(
            help.lines().any(|l| l.trim_start().starts_with(cmd)),
            "{cmd} missing from help"
        );
    }
    assert!(help.contains("--seed") && help.contains("KF_SEED"));
}

#[test]
fn missing_trajectory_exits_2_at_parse() {
    let dir = tempfile::tempdir().unwrap();
    let out = trajflow(
        dir.path(),
        &["pipeline", "--traj", "absent.json", "--out", "run"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage parse"));
    let m: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/MANIFEST.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(m["complete"], false);
    assert_eq!(m["failed_stage"], "parse");
}

#[test]
fn pipeline_seed_flag_and_env_agree_and_seeds_differ() {
    let (dir, traj) = setup();
    let d = dir.path();
    let base = [
        "--config",
        "quick.json",
        "pipeline",
        "--traj",
        traj.as_str(),
        "--out",
    ];
    ok(trajflow(d, &[&base[..], &["a", "--seed", "5"]].concat()));
    let out = Command::new(env!("CARGO_BIN_EXE_trajflow"))
        .current_dir(d)
        .env("KF_SEED", "5")
        .args([&base[..], &["b"]].concat())
        .output()
        .unwrap();
    ok(out);
    ok(trajflow(d, &[&base[..], &["c", "--seed", "6"]].concat()));
    let read = |run: &str, f: &str| std::fs::read(d.join(run).join(f)).unwrap();
    for f in [
        "MANIFEST.json",
        "report.json",
        "vid.tensor",
        "ckpt/conv_in.w.tensor",
        "stats.json",
    ] {
        assert_eq!(read("a", f), read("b", f), "{f}");
    }
    assert_ne!(read("a", "vid.tensor"), read("c", "vid.tensor"));
    let report: serde_json::Value = serde_json::from_slice(&read("a", "report.json")).unwrap();
    for m in report["metrics"].as_array().unwrap() {
        assert!(m["value"].as_f64().unwrap().is_finite(), "{m}");
    }
}

#[test]
fn stage_subcommands_compose() {
    let (dir, traj) = setup();
    let d = dir.path();
    let t = traj.as_str();
    ok(trajflow(
        d,
        &[
            "kin",
            "extract",
            "--traj",
            t,
            "--stats",
            "stats.json",
            "--out",
            "feats.tensor",
            "--tokens",
            "tok.tensor",
        ],
    ));
    ok(trajflow(
        d,
        &["kin", "fit-stats", "--traj", t, "--out", "stats2.json"],
    ));
    assert_eq!(
        std::fs::read(d.join("stats.json")).unwrap(),
        std::fs::read(d.join("stats2.json")).unwrap()
    );
    ok(trajflow(
        d,
        &[
            "mask",
            "--traj",
            t,
            "--out",
            "mask.tensor",
            "--lt",
            "lt.tensor",
        ],
    ));
    ok(trajflow(
        d,
        &[
            "--config",
            "quick.json",
            "pipeline",
            "--traj",
            t,
            "--out",
            "run",
        ],
    ));
    ok(trajflow(
        d,
        &[
            "inject",
            "--latent",
            "run/z.tensor",
            "--traj",
            "lt.tensor",
            "--mask",
            "mask.tensor",
            "--out",
            "xtraj.tensor",
        ],
    ));
    assert_eq!(
        std::fs::read(d.join("xtraj.tensor")).unwrap(),
        std::fs::read(d.join("run/xtraj.tensor")).unwrap()
    );
    assert_eq!(
        std::fs::read(d.join("mask.tensor")).unwrap(),
        std::fs::read(d.join("run/mask.tensor")).unwrap()
    );

    ok(trajflow(
        d,
        &["--config", "quick.json", "train-toy", "--out", "ckpt"],
    ));
    ok(trajflow(
        d,
        &[
            "--config",
            "quick.json",
            "sample",
            "--ckpt",
            "ckpt",
            "--traj",
            t,
            "--out",
            "vid.tensor",
        ],
    ));
    assert_eq!(
        std::fs::read(d.join("vid.tensor")).unwrap(),
        std::fs::read(d.join("run/vid.tensor")).unwrap()
    );

    ok(trajflow(
        d,
        &[
            "eval",
            "te",
            "--traj",
            t,
            "--video",
            "vid.tensor",
            "--report",
            "te.json",
        ],
    ));
    let te: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("te.json")).unwrap()).unwrap();
    assert_eq!(te["metric"], "te");
    assert_eq!(te["per_item"].as_array().unwrap().len(), 16);
    let out = ok(trajflow(d, &["eval", "ete", "--traj", t, "--traj-b", t]));
    let ete: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(ete["value"], 0.0);
}

#[test]
fn make_sample_noise_follows_seed() {
    let (dir, traj) = setup();
    let d = dir.path();
    ok(trajflow(
        d,
        &[
            "mask",
            "--traj",
            traj.as_str(),
            "--out",
            "mask.tensor",
            "--lt",
            "lt.tensor",
        ],
    ));
    ok(trajflow(
        d,
        &[
            "--config",
            "quick.json",
            "pipeline",
            "--traj",
            traj.as_str(),
            "--out",
            "run",
        ],
    ));
    let sample = |seed: &str, t: &str, out: &str| {
        ok(trajflow(
            d,
            &[
                "--seed",
                seed,
                "flow",
                "make-sample",
                "--x0",
                "run/xtraj.tensor",
                "--xtraj",
                "run/xtraj.tensor",
                "--mask",
                "mask.tensor",
                "--t",
                t,
                "--out",
                out,
            ],
        ));
        std::fs::read(d.join(out)).unwrap()
    };
    assert_eq!(
        sample("1", "0.3", "a.tensor"),
        sample("1", "0.3", "b.tensor")
    );
    assert_ne!(
        sample("1", "0.3", "a.tensor"),
        sample("2", "0.3", "c.tensor")
    );
}
