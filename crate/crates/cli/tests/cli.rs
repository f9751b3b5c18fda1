use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fusionlane::bev::{rasterize_lbev, LabelMap};
use fusionlane::pointcloud::{read_velodyne_bin, write_velodyne_bin, LidarPoint};
use fusionlane::synthetic::{synthetic_dataset, SyntheticConfig};
use fusionlane::LbevImage;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusionlane")).args(args).output().expect("spawn fusionlane")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn pngs(dir: &Path) -> usize {
    fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_toy_dataset(root: &Path, scenes: usize, frames: usize) {
    let cfg = SyntheticConfig { size: 16, cell: 8, margin: 1, frames_per_scene: frames, noise: 4, ..Default::default() };
    for s in synthetic_dataset(&cfg, scenes, 3).unwrap() {
        s.save(root).unwrap();
    }
}

#[test]
fn rasterize_writes_one_png_per_scan() {
    let dir = tempfile::tempdir().unwrap();
    let (bins, out) = (dir.path().join("bins"), dir.path().join("out"));
    fs::create_dir(&bins).unwrap();
    for (i, n) in [(1u32, 50), (2, 80)] {
        let pts: Vec<LidarPoint> =
            (0..n).map(|k| LidarPoint::new(6.0 + (k as f32) * 0.2, -9.0 + (k as f32) * 0.1, -1.5, 0.5)).collect();
        write_velodyne_bin(&bins.join(format!("{i:06}.bin")), &pts).unwrap();
    }
    let o = run(&["rasterize", "--in", p(&bins), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("rasterized 2/2"));
    assert!(stdout(&o).contains("[rasterize]"));
    assert_eq!(pngs(&out), 2);

    let frame = read_velodyne_bin(&bins.join("000002.bin")).unwrap();
    let reread = LbevImage::load_png(&out.join("000002.png"), frame.frame_id).unwrap();
    assert_eq!(reread, rasterize_lbev(&frame));
}

#[test]
fn rasterize_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["rasterize", "--in", p(dir.path()), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no .bin files"));
}

#[test]
fn rasterize_fails_when_every_scan_is_bad() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("000001.bin"), [0u8; 7]).unwrap();
    let o = run(&["rasterize", "--in", p(dir.path()), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}

#[test]
fn augment_multiplies_by_forty() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("data"), dir.path().join("aug"));
    write_toy_dataset(&data, 1, 3);
    let o = run(&["augment", "--data", p(&data), "--out", p(&out), "--frame-size", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for sub in ["lbev", "cregion", "gt"] {
        assert_eq!(pngs(&out.join(sub)), 120, "{sub}");
    }
    // Re-running into a clean directory gives the same files.
    let again = dir.path().join("aug2");
    assert!(run(&["augment", "--data", p(&data), "--out", p(&again), "--frame-size", "16"]).status.success());
    let a = fs::read(out.join("gt/0001_r+07.png")).unwrap();
    assert_eq!(a, fs::read(again.join("gt/0001_r+07.png")).unwrap());
}

#[test]
fn train_eval_predict_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run_dir) = (dir.path().join("data"), dir.path().join("run"));
    write_toy_dataset(&data, 2, 2);
    let cfg = dir.path().join("train.cfg");
    fs::write(
        &cfg,
        "preset = toy\nframe_size = 16\ncrop = 16\ntime_step = 2\nbatch_size = 2\nepochs = 150\n\
         learning_rate = 0.01\nlr_decay = 0.995\nclass_weights = auto\nvalidate = false\nseed = 4\n",
    )
    .unwrap();
    let o = run(&["train", "--data", p(&data), "--out", p(&run_dir), "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("time_step = 2") && text.contains("preset = toy"));
    let log = fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 151);

    let ckpt = run_dir.join("best.ckpt");
    let metrics = dir.path().join("metrics.csv");
    let o = run(&[
        "eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&metrics), "--frame-size", "16", "--time-step",
        "2", "--subset", "all",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&metrics).unwrap();
    let miou: f64 = csv.lines().find_map(|l| l.strip_prefix("MIOU,")).unwrap().parse().unwrap();
    assert!(miou > 0.95, "{csv}");

    let pred = dir.path().join("pred");
    let o = run(&[
        "predict", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&pred), "--frame-size", "16", "--time-step",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(pngs(&pred.join("labels")), 4);
    assert_eq!(pngs(&pred.join("overlay")), 4);
    for e in fs::read_dir(pred.join("labels")).unwrap() {
        let labels = LabelMap::load_png(&e.unwrap().path()).unwrap();
        assert!(labels.data.iter().all(|&v| v < 7));
    }

    let shown = dir.path().join("shown");
    let o = run(&["inspect", "--labels", p(&pred.join("labels")), "--out", p(&shown)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(pngs(&shown), 4);
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "eval", "--checkpoint", p(&dir.path().join("nope.ckpt")), "--data", p(dir.path()), "--out",
        p(&dir.path().join("m.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["predict", "--checkpoint", "/nonexistent.ckpt", "--data", p(dir.path()), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_and_bad_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("missing.cfg");
    let o = run(&["train", "--data", p(dir.path()), "--out", p(dir.path()), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["train", "--data", p(dir.path()), "--out", p(dir.path()), "--set", "bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["rasterize", "--in", p(dir.path()), "--out", p(dir.path()), "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}
