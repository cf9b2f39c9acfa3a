use std::path::Path;

use sgldm::conditioning::{MultiAeConfig, RegionLayout, TauConfig};
use sgldm::dataset::*;
use sgldm::error::Error;
use sgldm::image_ae::ImageAeConfig;
use sgldm::training::*;
use sgldm::unet::UNetConfig;

fn small(stage: Stage, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::toy(stage);
    c.max_steps = Some(steps);
    c.batch_size = 4;
    c.seed = 11;
    c.model.image_ae = ImageAeConfig { width: 4 };
    c.model.multi_ae = MultiAeConfig { latent_dim: 8, width: 2 };
    c.model.tau = TauConfig { width: 8, max_upsamples: 4 };
    c.model.unet = UNetConfig::new(8, 1);
    c.model.diffusion.steps = 20;
    c
}

fn corpus(dir: &Path, n: usize) -> Vec<LoadedSample> {
    write_toy_corpus(&dir.join("raw"), n, 64, 3).unwrap();
    let cfg = DatasetConfig {
        split: [1.0, 0.0, 0.0],
        ..DatasetConfig::toy()
    };
    build_dataset(&dir.join("raw/images"), Some(&dir.join("raw/mattes")), &dir.join("data"), &cfg, 3).unwrap();
    load_split(&dir.join("data"), SplitName::Train).unwrap().1
}

fn layout() -> RegionLayout {
    RegionLayout::default_for_canvas(32).unwrap()
}

fn blocks_under<'a>(c: &'a Checkpoint, root: &str) -> Vec<(&'a String, &'a Block)> {
    c.blocks.iter().filter(|(k, _)| k.starts_with(&format!("{root}."))).collect()
}

#[test]
fn checkpoint_bytes_survive_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ck = untrained_stage2(&small(Stage::Two, 1), &layout()).unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    let again = dir.path().join("b.ckpt");
    save_checkpoint(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(back.hash().unwrap(), ck.hash().unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let mut ck = untrained_stage2(&small(Stage::Two, 1), &layout()).unwrap();
    ck.blocks.clear();
    ck.blocks.insert(
        "unet.probe".into(),
        Block {
            dims: vec![2],
            data: vec![1.0, 2.0],
        },
    );
    let bytes = ck.to_bytes().unwrap();

    // The byte length sits just before the 8 data bytes.
    let mut bad = bytes.clone();
    let at = bad.len() - 16;
    bad[at..at + 8].copy_from_slice(&12u64.to_le_bytes());
    let err = Checkpoint::from_bytes(&bad).unwrap_err().to_string();
    assert!(err.contains("unet.probe"), "{err}");

    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&99u32.to_le_bytes());
    let err = Checkpoint::from_bytes(&bad).unwrap_err().to_string();
    assert!(err.contains("version 99"), "{err}");

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
    let mut trailing = bytes;
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing).is_err());

    assert!(matches!(
        load_checkpoint(Path::new("/definitely/missing.ckpt")),
        Err(Error::MissingArtifact(_))
    ));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 6);
    let sketches = stage1_sketches(&data, SketchSource::Low);
    let mut c = small(Stage::One, 3);
    c.optimizer.learning_rate = 0.0;
    let a = train_stage1(&sketches, &layout(), &c, &TrainOptions::default()).unwrap();
    c.max_steps = Some(1);
    let b = train_stage1(&sketches, &layout(), &c, &TrainOptions::default()).unwrap();
    assert_eq!(blocks_under(&a.checkpoint, "multi_ae"), blocks_under(&b.checkpoint, "multi_ae"));
    // Same first batch, same parameters: same loss.
    assert_eq!(a.losses[0], b.losses[0]);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 6);
    let sketches = stage1_sketches(&data, SketchSource::All);
    let full = train_stage1(&sketches, &layout(), &small(Stage::One, 6), &TrainOptions::default()).unwrap();
    let first = train_stage1(&sketches, &layout(), &small(Stage::One, 3), &TrainOptions::default()).unwrap();
    assert_eq!(first.checkpoint.meta.step, 3);
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&first.checkpoint, &path).unwrap();
    let mid = load_checkpoint(&path).unwrap();
    let rest = train_stage1(
        &sketches,
        &layout(),
        &small(Stage::One, 6),
        &TrainOptions {
            resume: Some(&mid),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(rest.losses, full.losses[3..]);
    assert_eq!(blocks_under(&rest.checkpoint, "multi_ae"), blocks_under(&full.checkpoint, "multi_ae"));
    assert_eq!(rest.checkpoint.optimizer_state(), full.checkpoint.optimizer_state());
}

#[test]
fn stage_two_keeps_the_sketch_encoder_and_codec_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 6);
    let images: Vec<_> = data.iter().map(|s| s.image.clone()).collect();
    let codec = train_image_ae(&images, &small(Stage::ImageAe, 2), &TrainOptions::default()).unwrap();
    let s1 = train_stage1(&stage1_sketches(&data, SketchSource::All), &layout(), &small(Stage::One, 2), &TrainOptions::default())
        .unwrap();
    let s2 = train_stage2(&data, &s1.checkpoint, &codec.checkpoint, &small(Stage::Two, 3), &TrainOptions::default()).unwrap();
    let ck = &s2.checkpoint;
    assert_eq!(ck.meta.kind, CheckpointKind::Stage2);
    assert_eq!(blocks_under(ck, "multi_ae"), blocks_under(&s1.checkpoint, "multi_ae"));
    assert_eq!(blocks_under(ck, "image_ae"), blocks_under(&codec.checkpoint, "image_ae"));
    assert_eq!(ck.meta.frozen.len(), 2);
    let untrained = untrained_stage2(&small(Stage::Two, 3), &layout()).unwrap();
    assert_ne!(blocks_under(ck, "unet"), blocks_under(&untrained, "unet"));
    assert!(s2.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn stage_checks_reject_mismatched_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 4);
    let sketches = stage1_sketches(&data, SketchSource::Low);
    assert!(matches!(
        train_stage1(&sketches, &layout(), &small(Stage::Two, 1), &TrainOptions::default()),
        Err(Error::InvalidConfig(_))
    ));
    let other = RegionLayout::default_for_canvas(64).unwrap();
    assert!(matches!(
        train_stage1(&sketches, &other, &small(Stage::One, 1), &TrainOptions::default()),
        Err(Error::InvalidInput(_))
    ));
    let s1 = train_stage1(&sketches, &layout(), &small(Stage::One, 1), &TrainOptions::default()).unwrap();
    // A stage-1 checkpoint has no codec.
    assert!(train_stage2(&data, &s1.checkpoint, &s1.checkpoint, &small(Stage::Two, 1), &TrainOptions::default()).is_err());
}

#[test]
fn checkpoints_and_metrics_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 4);
    let sketches = stage1_sketches(&data, SketchSource::Low);
    let ck = dir.path().join("out/s1.ckpt");
    let log = dir.path().join("metrics.jsonl");
    let out = train_stage1(
        &sketches,
        &layout(),
        &small(Stage::One, 2),
        &TrainOptions {
            checkpoint_path: Some(&ck),
            metrics_log: Some(&log),
            resume: None,
        },
    )
    .unwrap();
    assert_eq!(load_checkpoint(&ck).unwrap(), out.checkpoint);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty());
    assert_eq!(lines.last().unwrap()["step"], 2);
}
