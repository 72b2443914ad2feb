use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use affspace::checkpoint::Checkpoint;
use affspace::losses::{LabelMap, IGNORE};
use affspace::Tensor;

const TINY: &str = "\
# small network for fast command-line tests
widths=8,8,8,8
dilations=1,2
batch_size=2
snapshot_every=2
total_iters=4
base_lr_seg=0.01
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_affspace"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn affspace")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
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

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(f.path("tiny.cfg"), TINY).unwrap();
        f.gen("data", 3, 3);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn gen(&self, name: &str, seed: u64, classes: usize) -> PathBuf {
        let out = self.path(name);
        ok(&[
            "gen-data",
            "--out",
            s(&out),
            "--seed",
            &seed.to_string(),
            "--classes",
            &classes.to_string(),
            "--size",
            "32x32",
            "--n-source",
            "4",
            "--n-target",
            "4",
            "--n-eval",
            "3",
        ]);
        out
    }

    fn train(&self, out: &str, extra: &[&str]) -> String {
        let mut args = vec![
            "train",
            "--config",
            s(&self.path("tiny.cfg")).to_owned().leak(),
            "--data",
            s(&self.path("data")).to_owned().leak(),
            "--out",
            s(&self.path(out)).to_owned().leak(),
        ];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible_and_validates_arguments() {
    let f = Fixture::new();
    let again = f.gen("again", 3, 3);
    assert_eq!(tree(&f.path("data")), tree(&again));

    let out = run(&["gen-data", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = run(&["gen-data", "--out", s(&f.path("bad")), "--size", "12"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["gen-data", "--out", s(&f.path("bad")), "--classes", "12"]);
    assert_eq!(out.status.code(), Some(2));

    let summary = ok(&["gen-data", "--out", s(&f.path("plain")), "--shift", "none", "--size", "32x32", "--n-source", "2", "--n-target", "2", "--n-eval", "1"]);
    for key in ["hue_rotation=0", "brightness_offset=0", "noise_sigma=0", "texture_frequency=0"] {
        assert!(summary.contains(key), "{summary}");
    }
}

#[test]
fn zero_lambda_cleaning_reproduces_source_only_log() {
    let f = Fixture::new();
    f.train("so", &["--mode", "source-only"]);
    f.train("asc0", &["--mode", "asc", "--lambda", "0"]);
    let a = fs::read(f.path("so/metrics.csv")).unwrap();
    let b = fs::read(f.path("asc0/metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn alignment_reports_affinity_channels_and_survives_lambda_sweep() {
    let f = Fixture::new();
    let out = f.train("asa8", &["--mode", "asa", "--connectivity", "8"]);
    assert!(out.contains("affinity_channels=24"), "{out}");
    let last = out.lines().last().unwrap();
    assert!(last.starts_with("selected ") && last.contains("mean_target_affinity="), "{last}");
    let config = fs::read_to_string(f.path("asa8/config.txt")).unwrap();
    assert!(config.contains("affinity_channels=24"));
    let out = f.train("asa4", &["--mode", "asa", "--connectivity", "4"]);
    assert!(out.contains("affinity_channels=12"), "{out}");
    for (i, l) in ["2e-4", "1e-3", "4e-3"].iter().enumerate() {
        f.train(&format!("sweep{i}"), &["--mode", "asa", "--lambda", l]);
    }
}

#[test]
fn warm_start_is_part_of_the_fingerprint() {
    let f = Fixture::new();
    f.train("warm", &["--mode", "source-only"]);
    let init = f.path("warm/selected.ckpt");
    f.train("cold", &["--mode", "asa"]);
    f.train("hot", &["--mode", "asa", "--init", s(&init)]);
    let fp = |dir: &str| {
        let text = fs::read_to_string(f.path(&format!("{dir}/config.txt"))).unwrap();
        assert_eq!(text.contains("init.sha256="), dir == "hot");
        text.lines().find(|l| l.starts_with("fingerprint=")).unwrap().to_owned()
    };
    assert_ne!(fp("cold"), fp("hot"));

    let ck = f.path("hot/ckpt_2.ckpt");
    let out = run(&["train", "--config", s(&f.path("tiny.cfg")), "--data", s(&f.path("data")),
        "--out", s(&f.path("resumed")), "--mode", "asa", "--resume", s(&ck)]);
    assert_eq!(out.status.code(), Some(5));
    f.train("resumed", &["--mode", "asa", "--init", s(&init), "--resume", s(&ck)]);
    assert_eq!(
        fs::read(f.path("hot/ckpt_4.ckpt")).unwrap(),
        fs::read(f.path("resumed/ckpt_4.ckpt")).unwrap()
    );
}

#[test]
fn unknown_config_keys_are_rejected() {
    let f = Fixture::new();
    fs::write(f.path("bad.cfg"), "learning_rate=0.1\n").unwrap();
    let out = run(&[
        "train",
        "--mode",
        "asc",
        "--config",
        s(&f.path("bad.cfg")),
        "--data",
        s(&f.path("data")),
        "--out",
        s(&f.path("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn eval_reports_chance_for_fresh_models_and_checks_classes() {
    let f = Fixture::new();
    f.train("fresh", &["--mode", "source-only", "--iters", "1", "--set", "base_lr_seg=0"]);
    let ckpt = f.path("fresh/selected.ckpt");
    let report = f.path("r1.csv");
    let stdout = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&f.path("data")), "--split", "eval", "--out", s(&report)]);
    let miou: f64 = stdout.trim().strip_prefix("miou=").unwrap().parse().unwrap();
    assert!(miou > 0.0 && miou < 0.3, "{miou}");
    let report2 = f.path("r2.csv");
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&f.path("data")), "--out", s(&report2)]);
    assert_eq!(fs::read(&report).unwrap(), fs::read(&report2).unwrap());
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("class,iou,dsc\n"));
    assert!(text.contains("\nmiou,") && text.contains("\nmean_affinity,"));

    let other = f.gen("four", 3, 4);
    let out = run(&["eval", "--ckpt", s(&ckpt), "--data", s(&other), "--out", s(&f.path("r3.csv"))]);
    assert_eq!(out.status.code(), Some(5));

    let out = run(&["eval", "--ckpt", s(&f.path("missing.ckpt")), "--data", s(&other), "--out", s(&f.path("r4.csv"))]);
    assert_eq!(out.status.code(), Some(3));
}

fn constant_class_checkpoint(f: &Fixture) -> PathBuf {
    f.train("base", &["--mode", "source-only", "--iters", "1"]);
    let mut ck = Checkpoint::load(f.path("base/selected.ckpt")).unwrap();
    let names: Vec<String> = ck.seg.names().to_vec();
    for (name, t) in names.iter().zip(ck.seg.tensors_mut()) {
        if name.starts_with("aspp.") {
            *t = if name.ends_with("bias") {
                Tensor::new(t.shape().to_vec(), vec![5.0, 0.0, 0.0]).unwrap()
            } else {
                Tensor::zeros(t.shape().to_vec())
            };
        }
    }
    let path = f.path("constant.ckpt");
    ck.save(&path).unwrap();
    path
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&bytes[..15]).to_string();
    let mut parts = text.split_whitespace();
    assert_eq!(parts.next(), Some("P5"));
    let w: usize = parts.next().unwrap().parse().unwrap();
    let h: usize = parts.next().unwrap().parse().unwrap();
    let header = format!("P5\n{w} {h}\n255\n").len();
    (w, h, bytes[header..].to_vec())
}

#[test]
fn affinity_map_exports_pgm_and_raw_values() {
    let f = Fixture::new();
    let ckpt = constant_class_checkpoint(&f);
    let image = f.path("data/eval/0.img.ten");
    let prefix = f.path("map");
    ok(&["affinity-map", "--ckpt", s(&ckpt), "--image", s(&image), "--out", s(&prefix), "--connectivity", "8"]);
    let (w, h, pixels) = read_pgm(&f.path("map.pgm"));
    assert_eq!((w, h), (32, 32));
    assert!(pixels.iter().all(|&p| p == 255));
    let (sw, sh, seg) = read_pgm(&f.path("map.seg.pgm"));
    assert_eq!((sw, sh), (32, 32));
    assert!(seg.iter().all(|&p| p == 0));

    f.train("trained", &["--mode", "source-only"]);
    ok(&["affinity-map", "--ckpt", s(&f.path("trained/selected.ckpt")), "--image", s(&image), "--out", s(&prefix), "--connectivity", "4"]);
    let raw = Tensor::<f32>::load(f.path("map.ten")).unwrap();
    let (_, _, pixels) = read_pgm(&f.path("map.pgm"));
    assert_eq!(raw.shape(), &[32, 32]);
    for (v, p) in raw.data().iter().zip(&pixels) {
        assert_eq!((255.0 * *v as f64 + 0.5).floor() as u8, *p);
    }
    let out = run(&["affinity-map", "--ckpt", s(&ckpt), "--image", s(&f.path("nope.ten")), "--out", s(&prefix)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn self_training_writes_valid_pseudo_labels() {
    let f = Fixture::new();
    let ckpt = constant_class_checkpoint(&f);
    let out = run(&["self-train", "--ckpt", s(&ckpt), "--data", s(&f.path("data")), "--out", s(&f.path("st0")), "--threshold", "1.01"]);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no confident pixels"));

    let stdout = ok(&["self-train", "--ckpt", s(&ckpt), "--data", s(&f.path("data")), "--out", s(&f.path("st")), "--threshold", "0.9", "--iters", "2"]);
    assert!(stdout.contains("miou_delta="), "{stdout}");
    for i in 0..4 {
        let t = Tensor::<f32>::load(f.path(&format!("st/pseudo_data/target/{i}.lab.ten"))).unwrap();
        let labels = LabelMap::from_tensor(&t).unwrap();
        assert!(labels.values().iter().all(|&v| v < 3 || v == IGNORE));
    }
}
