use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fusionlane::bev::{colorize_labels, ipm_transform, rasterize_lbev, Homography, LabelMap, PALETTE};
use fusionlane::checkpoint::{load_checkpoint, save_checkpoint};
use fusionlane::dataset::{
    expand_training_set, load_dataset_sized, load_inputs, make_sequences, DatasetSplit, Sample, SequenceSample,
    TEST_IDS,
};
use fusionlane::pointcloud::read_velodyne_bin_with_report;
use fusionlane::trainer::{batch_frames, evaluate, train, TrainConfig};
use fusionlane::{FusionLaneModel, GRID_SIZE};

#[derive(Parser)]
#[command(name = "fusionlane", version, about = "Lane-marking segmentation from fused LIDAR and camera BEV rasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize Velodyne scans into LBEV PNGs, and optionally camera frames into CBEV PNGs.
    Rasterize(RasterizeArgs),
    /// Write the forty rotated copies of every non-test sample.
    Augment(AugmentArgs),
    /// Train a model and write its checkpoint and log.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the metrics CSV.
    Eval(EvalArgs),
    /// Write predicted label maps and colorized overlays.
    Predict(PredictArgs),
    /// Render label PNGs with the class palette.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct RasterizeArgs {
    /// Directory of `.bin` scans.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// 3x3 front-view to BEV homography; requires --camera.
    #[arg(long, requires = "camera")]
    homography: Option<PathBuf>,
    /// Directory of front camera PNGs named like the scans.
    #[arg(long, requires = "homography")]
    camera: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    /// Dataset root with lbev/, cregion/ and gt/.
    #[arg(long)]
    data: PathBuf,
    /// Output root; defaults to the dataset root.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = GRID_SIZE)]
    frame_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides as `key=value`, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metrics CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = GRID_SIZE)]
    frame_size: usize,
    #[arg(long, default_value_t = 4)]
    time_step: usize,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    /// Which originals to score.
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    subset: Subset,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Root with lbev/ and cregion/.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = GRID_SIZE)]
    frame_size: usize,
    /// Frames per recurrent window.
    #[arg(long, default_value_t = 4)]
    time_step: usize,
}

#[derive(Args)]
struct InspectArgs {
    /// A label PNG or a directory of them.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Subset {
    Test,
    Validation,
    All,
}

/// Failures caused by the invocation rather than the data.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(UsageError(format!("{what} `{}` does not exist", path.display())).into());
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(UsageError(format!("{what} `{}` is not a directory", path.display())).into());
    }
    Ok(())
}

fn print_settings(name: &str, pairs: &[(&str, String)]) {
    println!("[{name}]");
    for (k, v) in pairs {
        println!("{k} = {v}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Rasterize(a) => rasterize(a),
        Command::Augment(a) => augment(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(ext))
        .collect();
    out.sort();
    Ok(out)
}

fn rasterize(a: RasterizeArgs) -> Result<()> {
    require_dir(&a.input, "input")?;
    let homography = match &a.homography {
        Some(p) => {
            require_file(p, "homography")?;
            Some(Homography::load(p)?)
        }
        None => None,
    };
    print_settings(
        "rasterize",
        &[
            ("in", a.input.display().to_string()),
            ("out", a.out.display().to_string()),
            ("homography", a.homography.as_ref().map_or("none".into(), |p| p.display().to_string())),
            ("camera", a.camera.as_ref().map_or("none".into(), |p| p.display().to_string())),
        ],
    );
    let scans = files_with_extension(&a.input, "bin")?;
    if scans.is_empty() {
        bail!("no .bin files in {}", a.input.display());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let cbev_dir = a.out.join("cbev");
    if homography.is_some() {
        fs::create_dir_all(&cbev_dir)?;
    }
    let (mut ok, mut seconds) = (0usize, Vec::new());
    for scan in &scans {
        let start = Instant::now();
        let stem = scan.file_stem().and_then(|s| s.to_str()).unwrap_or("frame").to_string();
        let frame = match read_velodyne_bin_with_report(scan) {
            Ok((frame, report)) => {
                if report.dropped_non_finite > 0 || report.clamped_intensity > 0 {
                    eprintln!("warning: {}: {report:?}", scan.display());
                }
                frame
            }
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", scan.display());
                continue;
            }
        };
        let lbev = rasterize_lbev(&frame);
        lbev.save_png(&a.out.join(format!("{stem}.png")))?;
        if let (Some(h), Some(cam)) = (&homography, &a.camera) {
            let front = cam.join(format!("{stem}.png"));
            match image::open(&front) {
                Ok(img) => {
                    let cbev = ipm_transform(&img.to_rgb8(), h, frame.frame_id)?;
                    cbev.image.save(cbev_dir.join(format!("{stem}.png")))?;
                }
                Err(e) => eprintln!("warning: no camera frame for {stem}: {e}"),
            }
        }
        ok += 1;
        seconds.push(start.elapsed().as_secs_f64());
    }
    if ok == 0 {
        bail!("none of the {} scans could be read", scans.len());
    }
    let total: f64 = seconds.iter().sum();
    let max = seconds.iter().cloned().fold(0.0, f64::max);
    println!(
        "rasterized {ok}/{} frames in {total:.3} s (mean {:.1} ms, max {:.1} ms)",
        scans.len(),
        1e3 * total / ok as f64,
        1e3 * max
    );
    Ok(())
}

fn augment(a: AugmentArgs) -> Result<()> {
    require_dir(&a.data, "data")?;
    let out = a.out.clone().unwrap_or_else(|| a.data.clone());
    print_settings(
        "augment",
        &[
            ("data", a.data.display().to_string()),
            ("out", out.display().to_string()),
            ("frame_size", a.frame_size.to_string()),
        ],
    );
    let samples = load_dataset_sized(&a.data, a.frame_size)?;
    let originals: Vec<Sample> =
        samples.into_iter().filter(|s| s.rotation_deg == 0 && !TEST_IDS.contains(&s.frame_id)).collect();
    if originals.is_empty() {
        bail!("no non-test original samples in {}", a.data.display());
    }
    let mut written = 0usize;
    for s in &originals {
        for r in expand_training_set(std::slice::from_ref(s))? {
            r.save(&out)?;
            written += 1;
        }
    }
    println!("wrote {written} rotated samples from {} originals", originals.len());
    Ok(())
}

fn load_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p, "config")?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::parse(&text).map_err(|e| UsageError(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| UsageError(e.to_string()))?;
    }
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn select(samples: &[Arc<Sample>], idx: &[usize]) -> Vec<Arc<Sample>> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

fn run_train(a: TrainArgs) -> Result<()> {
    require_dir(&a.data, "data")?;
    let cfg = load_config(&a)?;
    println!("[train]\ndata = {}\nout = {}", a.data.display(), a.out.display());
    print!("{cfg}");
    let samples = load_dataset_sized(&a.data, cfg.frame_size)?;
    let split = DatasetSplit::from_samples(&samples, &TEST_IDS);
    let shared: Vec<Arc<Sample>> = samples.into_iter().map(Arc::new).collect();
    let train_set = make_sequences(&select(&shared, &split.train), cfg.time_step)?;
    let val_set = make_sequences(&select(&shared, &split.validation), cfg.time_step)?;
    println!(
        "samples: {} train, {} validation, {} test; sequences: {} train, {} validation",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        train_set.len(),
        val_set.len()
    );
    if train_set.is_empty() {
        bail!("no training sequences of {} consecutive frames", cfg.time_step);
    }
    fs::create_dir_all(&a.out)?;
    let samples: Vec<Sample> = shared.iter().map(|s| (**s).clone()).collect();
    fs::write(a.out.join("split.txt"), split.to_text(&samples))?;
    fs::write(a.out.join("config.txt"), cfg.to_string())?;
    let mut model = FusionLaneModel::new(cfg.model_config(), cfg.seed)?;
    println!("parameters: {}", model.store().num_scalars());
    let outcome = train(&mut model, &train_set, &val_set, &cfg, |r| {
        let miou = r.val_miou.map_or("NA".to_string(), |m| format!("{m:.4}"));
        println!("epoch {:>4}  loss {:.5}  val_miou {miou}  lr {:.3e}  {:.1} s", r.epoch, r.loss, r.lr, r.seconds);
    })?;
    fs::write(a.out.join("train_log.csv"), outcome.log.to_csv())?;
    fs::write(a.out.join("best.ckpt"), &outcome.best_checkpoint)?;
    save_checkpoint(&model, &a.out.join("last.ckpt"), true)?;
    let weights: Vec<String> = outcome.class_weights.iter().map(|w| format!("{w:.4}")).collect();
    println!("class weights: {}", weights.join(", "));
    println!("best epoch {}; wrote {}", outcome.best_epoch, a.out.join("best.ckpt").display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_dir(&a.data, "data")?;
    if a.time_step == 0 || a.batch_size == 0 {
        return Err(UsageError("time_step and batch_size must be positive".into()).into());
    }
    let model: FusionLaneModel = load_checkpoint(&a.checkpoint)?;
    let subset = match a.subset {
        Subset::Test => "test",
        Subset::Validation => "validation",
        Subset::All => "all",
    };
    print_settings(
        "eval",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("data", a.data.display().to_string()),
            ("out", a.out.display().to_string()),
            ("frame_size", a.frame_size.to_string()),
            ("time_step", a.time_step.to_string()),
            ("batch_size", a.batch_size.to_string()),
            ("subset", subset.into()),
            ("mode", model.config().mode.to_string()),
        ],
    );
    let samples = load_dataset_sized(&a.data, a.frame_size)?;
    let split = DatasetSplit::from_samples(&samples, &TEST_IDS);
    let idx: Vec<usize> = match a.subset {
        Subset::Test => split.test,
        Subset::Validation => split.validation,
        Subset::All => (0..samples.len()).filter(|&i| samples[i].rotation_deg == 0).collect(),
    };
    let shared: Vec<Arc<Sample>> = samples.into_iter().map(Arc::new).collect();
    let seqs = make_sequences(&select(&shared, &idx), a.time_step)?;
    if seqs.is_empty() {
        bail!("no {subset} sequences of {} consecutive frames", a.time_step);
    }
    let cm = evaluate(&model, &seqs, a.batch_size)?;
    let csv = cm.report_csv()?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

/// Splits samples into runs of consecutive ids per rotation, then into
/// windows of at most `time_step` frames.
fn prediction_windows(samples: Vec<Sample>, time_step: usize) -> Vec<SequenceSample> {
    let mut groups: BTreeMap<i32, Vec<Arc<Sample>>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.rotation_deg).or_default().push(Arc::new(s));
    }
    let mut out = Vec::new();
    for (rotation_deg, mut frames) in groups {
        frames.sort_by_key(|f| f.frame_id);
        let mut run: Vec<Arc<Sample>> = Vec::new();
        for f in frames {
            if run.last().is_some_and(|p| p.frame_id + 1 != f.frame_id) || run.len() == time_step {
                out.push(SequenceSample { frames: std::mem::take(&mut run), rotation_deg });
            }
            run.push(f);
        }
        if !run.is_empty() {
            out.push(SequenceSample { frames: run, rotation_deg });
        }
    }
    out
}

fn overlay(sample: &Sample, labels: &LabelMap) -> image::RgbImage {
    let mut img = sample.lbev.to_rgb_image();
    for (i, px) in img.pixels_mut().enumerate() {
        let class = labels.data[i] as usize;
        if class != 0 {
            let c = PALETTE[class];
            for ch in 0..3 {
                px.0[ch] = ((px.0[ch] as u16 + 3 * c[ch] as u16) / 4) as u8;
            }
        }
    }
    img
}

fn predict(a: PredictArgs) -> Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_dir(&a.data, "data")?;
    if a.time_step == 0 {
        return Err(UsageError("time_step must be positive".into()).into());
    }
    let model: FusionLaneModel = load_checkpoint(&a.checkpoint)?;
    print_settings(
        "predict",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("data", a.data.display().to_string()),
            ("out", a.out.display().to_string()),
            ("frame_size", a.frame_size.to_string()),
            ("time_step", a.time_step.to_string()),
            ("mode", model.config().mode.to_string()),
        ],
    );
    let samples = load_inputs(&a.data, a.frame_size)?;
    if samples.is_empty() {
        bail!("no input frames in {}", a.data.display());
    }
    let (label_dir, overlay_dir) = (a.out.join("labels"), a.out.join("overlay"));
    fs::create_dir_all(&label_dir)?;
    fs::create_dir_all(&overlay_dir)?;
    let mut written = 0usize;
    for seq in prediction_windows(samples, a.time_step) {
        let frames = batch_frames::<f32>(std::slice::from_ref(&seq))?;
        let inputs: Vec<_> = frames.into_iter().map(|(x, _)| x).collect();
        let preds = model.predict_sequence(&inputs)?;
        for (sample, pred) in seq.frames.iter().zip(preds) {
            let labels = LabelMap::new(sample.height(), sample.width(), pred)?;
            labels.save_png(&label_dir.join(format!("{}.png", sample.key())))?;
            overlay(sample, &labels).save(overlay_dir.join(format!("{}.png", sample.key())))?;
            written += 1;
        }
    }
    println!("wrote {written} label maps to {}", label_dir.display());
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let files = if a.labels.is_dir() {
        files_with_extension(&a.labels, "png")?
    } else {
        require_file(&a.labels, "labels")?;
        vec![a.labels.clone()]
    };
    print_settings("inspect", &[("labels", a.labels.display().to_string()), ("out", a.out.display().to_string())]);
    if files.is_empty() {
        bail!("no label PNGs in {}", a.labels.display());
    }
    fs::create_dir_all(&a.out)?;
    for f in &files {
        let labels = LabelMap::load_png(f)?;
        let mut hist = [0u64; PALETTE.len()];
        for &v in &labels.data {
            if let Some(h) = hist.get_mut(v as usize) {
                *h += 1;
            }
        }
        colorize_labels(&labels)?.save(a.out.join(f.file_name().context("label path has no file name")?))?;
        println!("{}: {hist:?}", f.display());
    }
    Ok(())
}
