use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command as Proc, Output, Stdio};

use sgldm::conditioning::Region;
use sgldm::diffusion::Sampler;
use sgldm::training::{Stage, TrainConfig};
use sgldm_cli::{exit, parse_args, Command};

fn bin() -> Proc {
    let mut p = Proc::new(env!("CARGO_BIN_EXE_sgldm"));
    p.env_remove("SGLDM_CKPT_DIR").env("RUST_LOG", "warn");
    p
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn tiny_config(stage: Stage, dir: &Path, name: &str) -> PathBuf {
    let mut c = TrainConfig::toy(stage);
    c.max_steps = Some(2);
    c.batch_size = 4;
    c.seed = 3;
    c.model.unet = sgldm::unet::UNetConfig::new(8, 1);
    c.model.diffusion.steps = 10;
    let p = dir.join(name);
    std::fs::write(&p, c.to_json()).unwrap();
    p
}

#[test]
fn parses_the_sample_example() {
    let cmd = parse_args([
        "sgldm", "sample", "--sketch", "s.png", "--ckpt", "m.ckpt", "--steps", "50", "--sampler", "ddim", "--seed", "7",
    ])
    .unwrap();
    match cmd {
        Command::Sample { ckpt, sketch, options, .. } => {
            assert_eq!(ckpt, PathBuf::from("m.ckpt"));
            assert_eq!(sketch, PathBuf::from("s.png"));
            assert_eq!(options.steps, 50);
            assert_eq!(options.seed, 7);
            assert_eq!(options.sampler, Sampler::Ddim { eta: 0.0 });
        }
        other => panic!("{other:?}"),
    }
    let cmd = parse_args(["sgldm", "sample", "--sketch", "s.png", "--seed", "1", "--mask", "leye,mouth"]).unwrap();
    let Command::Sample { options, .. } = cmd else { panic!() };
    assert_eq!(options.masked_regions, vec![Region::Leye, Region::Mouth]);
}

#[test]
fn usage_errors() {
    assert_eq!(parse_args(["sgldm"]).unwrap_err().code, exit::USAGE);
    assert_eq!(parse_args(["sgldm", "bogus"]).unwrap_err().code, exit::USAGE);
    assert_eq!(parse_args(["sgldm", "sample", "--sketch", "a", "--nope"]).unwrap_err().code, exit::USAGE);
    let help = parse_args(["sgldm", "--help"]).unwrap_err();
    assert_eq!(help.code, exit::OK);
    assert!(help.message.contains("train-stage2"));
    assert_eq!(
        parse_args(["sgldm", "sample", "--sketch", "a", "--sampler", "ddpm", "--eta", "0.5"]).unwrap_err().code,
        exit::INVALID_INPUT
    );

    let dir = tempfile::tempdir().unwrap();
    let out = run(&[], dir.path());
    assert_eq!(out.status.code(), Some(exit::USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = run(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(exit::OK));
}

#[test]
fn config_files_are_loaded_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(Stage::Two, dir.path(), "toy.json");
    let p = path.to_str().unwrap();
    let Command::Train { config, inputs, .. } = parse_args(["sgldm", "train-stage2", "--config", p]).unwrap() else {
        panic!()
    };
    assert_eq!(config, TrainConfig::load(&path).unwrap());
    assert!(inputs.is_some());
    // Flags override the file.
    let Command::Train { config, .. } =
        parse_args(["sgldm", "train-stage2", "--config", p, "--seed", "9", "--lr", "0.5"]).unwrap()
    else {
        panic!()
    };
    assert_eq!((config.seed, config.optimizer.learning_rate), (9, 0.5));
    // A stage 2 file for a stage 1 command, unknown fields and bad values.
    assert_eq!(parse_args(["sgldm", "train-stage1", "--config", p]).unwrap_err().code, exit::INVALID_INPUT);
    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    json["surprise"] = 1.into();
    std::fs::write(&path, json.to_string()).unwrap();
    assert_eq!(parse_args(["sgldm", "train-stage2", "--config", p]).unwrap_err().code, exit::INVALID_INPUT);
    assert_eq!(
        parse_args(["sgldm", "train-stage2", "--config", "missing.json"]).unwrap_err().code,
        exit::MISSING_ARTIFACT
    );
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if name.starts_with("train-") {
            let c = TrainConfig::load(&path).unwrap();
            let back: TrainConfig = serde_json::from_str(&c.to_json()).unwrap();
            assert_eq!(back, c, "{name}");
            seen += 1;
        }
    }
    assert!(seen >= 6, "{seen}");
}

#[test]
fn missing_checkpoint_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--ckpt", "nope.ckpt", "--out", "r.json", "--seed", "1"], dir.path());
    assert_eq!(out.status.code(), Some(exit::MISSING_ARTIFACT));
    assert!(!dir.path().join("r.json").exists());
    let out = run(&["sample", "--sketch", "s.png", "--ckpt", "nope.ckpt", "--seed", "1"], dir.path());
    assert_eq!(out.status.code(), Some(exit::MISSING_ARTIFACT));
}

#[test]
fn unseeded_dataset_logs_its_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["dataset", "--toy", "6", "--out", "d"])
        .env("RUST_LOG", "warn")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("using seed"));
}

// dataset -> train-ae -> train-stage1 -> train-stage2 -> sample -> eval ->
// serve, on a few toy images with two optimizer steps per stage.
#[test]
fn every_subcommand_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let out = bin().args(args).env("SGLDM_CKPT_DIR", d.join("ck")).current_dir(d).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).to_string()
    };
    ok(&["dataset", "--toy", "12", "--out", "data", "--seed", "4"]);
    let first = std::fs::read(d.join("data/manifest.json")).unwrap();
    ok(&["dataset", "--toy", "12", "--out", "data2", "--seed", "4"]);
    assert_eq!(first, std::fs::read(d.join("data2/manifest.json")).unwrap());

    let ae = tiny_config(Stage::ImageAe, d, "ae.json");
    let s1 = tiny_config(Stage::One, d, "s1.json");
    let s2 = tiny_config(Stage::Two, d, "s2.json");
    ok(&["train-ae", "--config", ae.to_str().unwrap(), "--metrics", "ae.jsonl"]);
    ok(&["train-stage1", "--config", s1.to_str().unwrap()]);
    ok(&["train-stage2", "--config", s2.to_str().unwrap(), "--sketches", "sra"]);
    for f in ["image_ae.ckpt", "stage1.ckpt", "stage2.ckpt"] {
        assert!(d.join("ck").join(f).exists(), "{f}");
    }
    assert!(std::fs::read_to_string(d.join("ae.jsonl")).unwrap().contains("\"stage\""));

    let manifest: serde_json::Value = serde_json::from_slice(&first).unwrap();
    let sketch = manifest["records"][0]["sketches"]["mid"].as_str().unwrap();
    let sketch = d.join("data").join(sketch);
    ok(&["sample", "--sketch", sketch.to_str().unwrap(), "--steps", "3", "--seed", "7", "--out", "a.png"]);
    ok(&["sample", "--sketch", sketch.to_str().unwrap(), "--steps", "3", "--seed", "7", "--out", "b.png", "--size", "64"]);
    let a = image::open(d.join("a.png")).unwrap();
    assert_eq!((a.width(), a.height()), (32, 32));
    assert_eq!(image::open(d.join("b.png")).unwrap().width(), 64);

    ok(&["eval", "--data", "data", "--split", "train", "--steps", "2", "--seed", "1", "--out", "r.json"]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["levels"].as_array().unwrap().len(), 3);

    // Wrong sketch size is invalid input.
    let small = d.join("small.png");
    image::GrayImage::new(8, 8).save(&small).unwrap();
    let out = bin()
        .args(["sample", "--sketch", small.to_str().unwrap(), "--seed", "1"])
        .env("SGLDM_CKPT_DIR", d.join("ck"))
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(exit::INVALID_INPUT));

    let mut child = bin()
        .args(["serve", "--port", "0"])
        .env("SGLDM_CKPT_DIR", d.join("ck"))
        .env("RUST_LOG", "info")
        .current_dir(d)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited").unwrap();
        if let Some(rest) = line.split("listening on ").nth(1) {
            break rest.trim().to_string();
        }
    };
    let mut s = TcpStream::connect(&addr).unwrap();
    write!(s, "GET /healthz HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    let _ = child.wait();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"canvas\":32"), "{resp}");
}
