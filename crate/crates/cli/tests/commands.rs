use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const DATASET: &str = r#"
samples_per_ray = 32

[scanner]
detector_width = 20
detector_height = 20
pixel_pitch = 0.1056
"#;

const TRAIN: &str = r#"
iterations = 300
batch_rays = 16
samples_per_ray = 12
chunk_rays = 8
checkpoint_every = 5

[model]
width = 8
depth = 2
latent_dim = 4

[encoding]
bands = 3
"#;

fn nerfca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nerfca"))
        .args(args)
        .env("NERFCA_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = nerfca(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.run.json")).unwrap()).unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let dcfg = root.join("dataset.toml");
    let tcfg = root.join("train.toml");
    fs::write(&dcfg, DATASET).unwrap();
    fs::write(&tcfg, TRAIN).unwrap();
    let data = root.join("data");
    let data2 = root.join("data2");
    let run = root.join("run");

    let out = ok(&["generate-data", "--config", s(&dcfg), "--out", s(&data)]);
    assert!(out.contains("80 frames"), "{out}");
    ok(&["generate-data", "--config", s(&dcfg), "--out", s(&data2)]);
    for f in ["manifest.json", "frames/view03_phase10.npy", "maps/view00_weights.npy"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(data2.join(f)).unwrap(), "{f}");
    }
    let m = manifest(&data);
    assert_eq!(m["command"], "generate-data");
    assert_eq!(m["seed"], 0);
    assert!(m["artifacts"].as_array().unwrap().iter().any(|a| a == "manifest.json"));

    let out = ok(&[
        "train", "--data", s(&data), "--out", s(&run), "--config", s(&tcfg), "--variant", "dynamic",
    ]);
    assert!(out.contains("iteration 15"), "{out}");
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(csv.starts_with("n,lr,L_p,L_b,L_e,L_o,"));
    assert_eq!(csv.lines().count(), 16);
    assert_eq!(manifest(&run)["config"]["variant"], "dynamic");
    let ckpt = run.join("checkpoint-0000015.bin");
    assert!(ckpt.exists());

    // Resuming a finished run is a no-op that keeps the log intact.
    let out = ok(&[
        "train", "--data", s(&data), "--out", s(&run), "--config", s(&tcfg), "--variant", "dynamic", "--resume",
    ]);
    assert!(out.contains("already complete"), "{out}");
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap(), csv);

    let eval = root.join("eval");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&eval), "--eval-samples", "16"]);
    let metrics = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("view,phase,dice,psnr,ssim\n"));
    assert_eq!(metrics.lines().count(), 1 + 4 * 10);

    let img = root.join("render");
    ok(&[
        "render", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&img), "--theta", "-20", "--phi", "15",
        "--phase", "3", "--samples", "16",
    ]);
    for name in ["static", "dynamic", "composite"] {
        assert!(img.join(format!("{name}.npy")).exists());
        let pgm = fs::read(img.join(format!("{name}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n20 20\n255\n"));
        assert_eq!(pgm.len(), 13 + 400);
    }
}

#[test]
fn views_flag_sets_training_views() {
    let tmp = tempfile::tempdir().unwrap();
    let dcfg = tmp.path().join("dataset.toml");
    fs::write(&dcfg, DATASET).unwrap();
    let data = tmp.path().join("data");
    let out = ok(&[
        "generate-data", "--config", s(&dcfg), "--out", s(&data), "--views", "6", "--no-validation",
    ]);
    assert!(out.contains("60 frames (6 training views"), "{out}");
}

#[test]
fn ablation_cells_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let dcfg = root.join("dataset.toml");
    let tcfg = root.join("train.toml");
    fs::write(&dcfg, DATASET).unwrap();
    fs::write(&tcfg, TRAIN.replace("iterations = 300", "iterations = 60")).unwrap();
    let data = root.join("data");
    ok(&["generate-data", "--config", s(&dcfg), "--out", s(&data)]);
    let out_dir = root.join("wps");
    let args = [
        "ablate", "--suite", "wps", "--data", s(&data), "--out", s(&out_dir), "--config", s(&tcfg),
        "--eval-samples", "8",
    ];
    let first = ok(&args);
    assert!(first.contains("| full |") && first.contains("| without-wps |"), "{first}");
    let table = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    let summary = out_dir.join("full").join("summary.json");
    let before = fs::metadata(&summary).unwrap().modified().unwrap();
    // Finished cells are read back, not retrained.
    let second = ok(&args);
    assert_eq!(first, second);
    assert_eq!(fs::metadata(&summary).unwrap().modified().unwrap(), before);
}

#[test]
fn exit_codes_separate_failure_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "batch_rays = 0\n").unwrap();
    let missing = tmp.path().join("nothing");
    let out = nerfca(&["train", "--data", s(&missing), "--out", s(tmp.path()), "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = nerfca(&["train", "--data", s(&missing), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = nerfca(&["generate-data", "--out", s(&tmp.path().join("d")), "--views", "0"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
