use std::sync::Arc;

use fusionlane::bev::{rasterize_lbev, LabelMap};
use fusionlane::checkpoint::{load_checkpoint, save_checkpoint};
use fusionlane::dataset::{expand_training_set, load_dataset_sized, make_sequences, DatasetSplit, TEST_IDS};
use fusionlane::pointcloud::{read_velodyne_bin, write_velodyne_bin, LidarPoint};
use fusionlane::synthetic::{synthetic_dataset, SyntheticConfig};
use fusionlane::trainer::{batch_frames, train, Preset, TrainConfig};
use fusionlane::{FusionLaneModel, LbevImage, GRID_SIZE};

#[test]
fn scan_to_png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("000123.bin");
    let pts: Vec<LidarPoint> = (0..500)
        .map(|k| LidarPoint::new(6.0 + (k % 100) as f32 * 0.19, -9.9 + (k / 5) as f32 * 0.19, -1.5, 0.3))
        .chain([LidarPoint::new(30.0, 0.0, -1.5, 1.0), LidarPoint::new(10.0, 0.0, 0.5, 1.0)])
        .collect();
    write_velodyne_bin(&path, &pts).unwrap();
    let frame = read_velodyne_bin(&path).unwrap();
    assert_eq!(frame.frame_id, 123);
    assert_eq!(frame.points.len(), 502);

    let lbev = rasterize_lbev(&frame);
    assert_eq!((lbev.height, lbev.width), (GRID_SIZE, GRID_SIZE));
    let png = dir.path().join("lbev.png");
    lbev.save_png(&png).unwrap();
    assert_eq!(LbevImage::load_png(&png, 123).unwrap(), lbev);
}

#[test]
fn saved_dataset_reloads_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig { size: 16, cell: 8, margin: 1, frames_per_scene: 3, ..Default::default() };
    let originals = synthetic_dataset(&cfg, 2, 1).unwrap();
    for s in originals.iter().chain(&expand_training_set(&originals[..1]).unwrap()) {
        s.save(dir.path()).unwrap();
    }
    let loaded = load_dataset_sized(dir.path(), 16).unwrap();
    assert_eq!(loaded.len(), originals.len() + 40);
    assert!(originals.iter().all(|o| loaded.iter().any(|l| l == o)));
    assert!(load_dataset_sized(dir.path(), 32).is_err());

    let split = DatasetSplit::from_samples(&loaded, &TEST_IDS);
    assert_eq!(split.train.len(), 40);
    assert_eq!(split.validation.len(), originals.len());
    let text = split.to_text(&loaded);
    assert_eq!(DatasetSplit::from_text(&text, &loaded).unwrap(), split);
}

#[test]
fn checkpoint_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig { size: 16, cell: 8, margin: 1, frames_per_scene: 2, ..Default::default() };
    let data: Vec<_> = synthetic_dataset(&cfg, 2, 2).unwrap().into_iter().map(Arc::new).collect();
    let seqs = make_sequences(&data, 2).unwrap();
    let tc = TrainConfig {
        time_step: 2,
        epochs: 3,
        crop: 16,
        frame_size: 16,
        preset: Preset::Toy,
        learning_rate: 1e-2,
        validate: false,
        ..Default::default()
    };
    let mut model = FusionLaneModel::new(tc.model_config(), 0).unwrap();
    train(&mut model, &seqs, &[], &tc, |_| {}).unwrap();

    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path, true).unwrap();
    let restored: FusionLaneModel = load_checkpoint(&path).unwrap();
    assert_eq!(restored.config(), model.config());
    assert_eq!(restored.store().adam_steps(), model.store().adam_steps());

    let frames: Vec<_> = batch_frames::<f32>(&seqs).unwrap().into_iter().map(|(x, _)| x).collect();
    let before = model.forward_sequence(&frames, fusionlane::BnMode::Infer).unwrap();
    let after = restored.forward_sequence(&frames, fusionlane::BnMode::Infer).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.to_vec(), b.to_vec());
    }
    let preds = restored.predict_sequence(&frames).unwrap();
    assert!(preds.iter().flatten().all(|&v| (v as usize) < 7));
    let _ = LabelMap::new(16, 16, preds[0][..256].to_vec()).unwrap();

    std::fs::write(&path, b"FLNE").unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
}
