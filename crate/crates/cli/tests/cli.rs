use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use smdm::eval::ees;
use smdm::io::read_dataset;
use smdm::keyframes::{build_frame_features, select_keyframes, uniform_mask};
use smdm::MotionSequence;

const TINY: &[&str] = &[
    "--set",
    "data.n_per_class=3",
    "--set",
    "data.n_frames=32",
    "--set",
    "train.steps=12",
    "--set",
    "train.batch_size=4",
    "--set",
    "train.checkpoint_every=6",
    "--set",
    "diffusion.steps=6",
    "--set",
    "model.d_model=16",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.ffn_dim=16",
    "--set",
    "model.n_layers=1",
];

fn workdir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn smdm(out: &Path, args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smdm"))
        .arg(args[0])
        .args(TINY)
        .arg("--out")
        .arg(out)
        .args(&args[1..])
        .env("SMDM_THREADS", threads)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = smdm(out, args, "1");
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn pipeline(dir: &Path, threads: &str) {
    for args in [&["gen-data"][..], &["train"], &["sample", "--count", "4", "--dump-masks"]] {
        let o = smdm(dir, args, threads);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = workdir("pipeline");
    pipeline(&dir, "1");
    for f in ["dataset.smdm", "model.smdm", "checkpoints/step_000006.smdm", "checkpoints/step_000012.smdm", "samples.smdm", "masks.json", "config.toml"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&ok(&dir, &["eval"])).unwrap();
    for key in ["fd", "diversity", "fidelity", "ees", "ees_ref"] {
        assert!(summary[key].as_f64().unwrap().is_finite(), "{key}");
    }
    let loss = std::fs::read_to_string(dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("run_id,metric,value,seed,config_hash"));
    assert_eq!(loss.lines().filter(|l| l.contains(",loss,")).count(), 12);
    assert!(loss.contains("train@12,keyframes_mean,"));
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("eval,fd,")));

    let masks: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("masks.json")).unwrap()).unwrap();
    let steps = masks[0]["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 6);
    assert_eq!(steps[0]["t"], 6);

    let stdout = ok(&dir, &["keyframes", dir.join("dataset.smdm").to_str().unwrap(), "--index", "2", "--rate", "0.75"]);
    let kf: Vec<usize> = stdout.split_whitespace().map(|s| s.parse().unwrap()).collect();
    assert_eq!(kf.len(), 8);
    assert_eq!((kf[0], kf[7]), (0, 31));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("keyframes.json")).unwrap()).unwrap();
    assert_eq!(report["order"].as_array().unwrap().len(), 30);
    assert!(std::fs::read_to_string(dir.join("keyframes.svg")).unwrap().contains("data-keyframe=\"31\""));
}

#[test]
fn runs_are_deterministic_across_thread_counts() {
    let a = workdir("det-a");
    let b = workdir("det-b");
    pipeline(&a, "1");
    pipeline(&b, "3");
    for f in ["dataset.smdm", "model.smdm", "loss.csv", "samples.smdm", "masks.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn plots_are_deterministic() {
    let dir = workdir("plot");
    let csv = dir.join("sweep.csv");
    std::fs::write(
        &csv,
        "run_id,metric,value,seed,config_hash\nsparse@10,fd,2.0,0,h\nsparse@50,fd,1.0,0,h\ndense@10,fd,3.0,0,h\ndense@50,fd,1.5,0,h\n",
    )
    .unwrap();
    ok(&dir, &["plot", csv.to_str().unwrap()]);
    let first = std::fs::read_to_string(dir.join("plots/fd.svg")).unwrap();
    ok(&dir, &["plot", csv.to_str().unwrap()]);
    assert_eq!(first, std::fs::read_to_string(dir.join("plots/fd.svg")).unwrap());
    assert!(first.contains(r#"data-x-min="10.000000" data-x-max="50.000000""#));
    assert!(first.contains(r#"data-series="dense""#) && first.contains(r#"data-series="sparse""#));
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = workdir("codes");
    let code = |args: &[&str]| smdm(&dir, args, "1").status.code();
    // configuration and validation
    assert_eq!(code(&["train", "--set", "model.nope=1"]), Some(2));
    assert_eq!(code(&["gen-data", "--set", "data.fps=0"]), Some(2));
    assert_eq!(code(&["gen-data", "--seed", "minus-one"]), Some(2));
    // common flags belong to the subcommand; a misplaced override must not be dropped silently
    let misplaced = Command::new(env!("CARGO_BIN_EXE_smdm")).args(["--seed", "1", "gen-data"]).output().unwrap();
    assert_eq!(misplaced.status.code(), Some(2));
    assert_eq!(code(&["train", "--config", dir.join("absent.toml").to_str().unwrap()]), Some(3));
    // I/O
    assert_eq!(code(&["train"]), Some(3));
    std::fs::write(dir.join("dataset.smdm"), b"SMDMFILE\x05\0\0\0\0\0\0\0{\"fo").unwrap();
    assert_eq!(code(&["train"]), Some(3));
    // numeric
    pipeline(&dir, "1");
    assert_eq!(code(&["sample", "--count", "1", "--set", "model.guidance_scale=1e308"]), Some(4));
    assert_eq!(code(&["sample", "--class", "fly"]), Some(2));
    let o = smdm(&dir, &["sample", "--set", "model.d_model=8", "--set", "diffusion.steps=7"], "1");
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(2));
    assert!(err.contains("model.d_model") && err.contains("diffusion.steps"), "{err}");
    std::fs::write(dir.join("empty.csv"), "run_id,metric,value,seed,config_hash\n").unwrap();
    assert_eq!(code(&["plot", dir.join("empty.csv").to_str().unwrap()]), Some(2));
}

#[test]
fn dumped_masks_follow_the_schedule() {
    let dir = workdir("masks");
    let t100 = ["--set", "diffusion.steps=100", "--set", "sample.gamma=0.1"];
    for sub in [&["gen-data"][..], &["train"], &["sample", "--count", "2", "--dump-masks"]] {
        let args: Vec<&str> = sub.iter().chain(&t100).copied().collect();
        ok(&dir, &args);
    }
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("masks.json")).unwrap()).unwrap();
    let uniform = uniform_mask(32, 0.8).unwrap().indices();
    for sample in dump.as_array().unwrap() {
        let steps = sample["steps"].as_array().unwrap();
        assert_eq!(steps.len(), 100);
        for s in steps {
            let t = s["t"].as_u64().unwrap();
            let kf: Vec<usize> = s["keyframes"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
            if t > 10 {
                assert_eq!(kf, uniform, "t = {t}");
            } else {
                assert_eq!((kf[0], *kf.last().unwrap(), kf.len()), (0, 31, uniform.len()), "t = {t}");
            }
        }
    }
}

#[test]
fn eval_and_keyframes_agree_with_the_library() {
    let dir = workdir("oracles");
    ok(&dir, &["gen-data"]);
    let data = dir.join("dataset.smdm");
    let summary: serde_json::Value = serde_json::from_str(&ok(&dir, &["eval", "--samples", data.to_str().unwrap()])).unwrap();
    assert!(summary["fd"].as_f64().unwrap().abs() < 1e-6);
    let ds = read_dataset(&data).unwrap();
    let direct = ds.sequences.iter().map(|s| ees(s, &ds.layout)).sum::<f64>() / ds.sequences.len() as f64;
    assert_eq!(summary["ees"].as_f64().unwrap(), direct);
    let again: serde_json::Value = serde_json::from_str(&ok(&dir, &["eval", "--samples", data.to_str().unwrap()])).unwrap();
    assert_eq!(summary, again);

    let all = ok(&dir, &["keyframes", data.to_str().unwrap(), "--index", "4", "--rate", "0"]);
    assert_eq!(all.split_whitespace().count(), 32);
    let shown: Vec<usize> = ok(&dir, &["keyframes", data.to_str().unwrap(), "--index", "4", "--rate", "0.6"])
        .split_whitespace()
        .map(|s| s.parse().unwrap())
        .collect();
    let seq = &ds.sequences[4];
    let normalized = MotionSequence::new(ds.stats.normalize(seq.frames()), seq.fps, seq.class_id).unwrap();
    assert_eq!(shown, select_keyframes(&build_frame_features(&normalized), 0.6).unwrap().indices());

    let mut bytes = std::fs::read(&data).unwrap();
    bytes[20] = b'#';
    std::fs::write(dir.join("broken.smdm"), &bytes).unwrap();
    let o = smdm(&dir, &["keyframes", dir.join("broken.smdm").to_str().unwrap()], "1");
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at byte"));
}
