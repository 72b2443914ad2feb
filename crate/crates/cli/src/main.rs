use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use affspace::affinity::{cosine_affinity, Connectivity, NeighborhoodSpec};
use affspace::checkpoint::Checkpoint;
use affspace::data::{read_dataset, write_dataset, Dataset, DatasetConfig, ShiftConfig, Split};
use affspace::losses::{argmax_labels, pseudo_labels, DEFAULT_PSEUDO_THRESHOLD, IGNORE};
use affspace::manifest::Manifest;
use affspace::metrics::evaluate;
use affspace::nets::SegNet;
use affspace::train::{train, Mode, RunOptions, TrainConfig};
use affspace::{Error, Tensor};
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "affspace", version, about = "Affinity-space domain adaptation on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target/eval dataset.
    GenData(GenDataArgs),
    /// Train source-only, ASC or ASA models.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled split.
    Eval(EvalArgs),
    /// Export the cosine affinity map of one image.
    AffinityMap(AffinityMapArgs),
    /// Pseudo-label the target split and retrain on source + pseudo labels.
    SelfTrain(SelfTrainArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64")]
    size: String,
    /// `none`, `default`, or comma-separated `hue=,brightness=,sigma=,freq=`.
    #[arg(long, default_value = "default")]
    shift: String,
    #[arg(long, default_value_t = 200)]
    n_source: usize,
    #[arg(long, default_value_t = 200)]
    n_target: usize,
    #[arg(long, default_value_t = 50)]
    n_eval: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = ["source-only", "asc", "asa"])]
    mode: String,
    /// `key=value` run configuration; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Weight of the adaptation term for the chosen mode.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_parser = ["4", "8"])]
    connectivity: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Start from the segmentation weights of this checkpoint (for example a
    /// source-only warm-up run). Recorded in the run fingerprint.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Resume from a checkpoint written by the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print a metrics row to stderr every N iterations.
    #[arg(long)]
    progress: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "eval", value_parser = ["source", "target", "eval"])]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AffinityMapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "8", value_parser = ["4", "8"])]
    connectivity: String,
}

#[derive(Args)]
struct SelfTrainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PSEUDO_THRESHOLD)]
    threshold: f64,
    /// Retraining iterations (defaults to the checkpoint's run length).
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    progress: Option<usize>,
}

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NAN: u8 = 4;
const EXIT_MISMATCH: u8 = 5;
const EXIT_NO_CONFIDENT: u8 = 6;

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error
            .chain()
            .find_map(|e| e.downcast_ref::<Error>())
            .map(code_for)
            .unwrap_or(EXIT_USAGE);
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: code_for(&e),
            error: e.into(),
        }
    }
}

fn code_for(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::NanLoss { .. } => EXIT_NAN,
        Error::Fingerprint { .. } => EXIT_MISMATCH,
        _ => EXIT_USAGE,
    }
}

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure {
        code,
        error: anyhow!(msg.into()),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::AffinityMap(a) => cmd_affinity_map(a),
        Command::SelfTrain(a) => cmd_self_train(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), Failure> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| fail(EXIT_USAGE, format!("--size must be HxW, got {s:?}")))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| fail(EXIT_USAGE, format!("bad size {s:?}")));
    Ok((parse(h)?, parse(w)?))
}

fn parse_shift(s: &str) -> Result<ShiftConfig, Failure> {
    if let Some(p) = ShiftConfig::preset(s) {
        return Ok(p);
    }
    let mut shift = ShiftConfig::identity();
    for part in s.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| fail(EXIT_USAGE, format!("--shift: expected a preset or key=value list, got {s:?}")))?;
        let v: f64 = v.trim().parse().map_err(|_| fail(EXIT_USAGE, format!("--shift: bad number in {part:?}")))?;
        match k.trim() {
            "hue" => shift.hue_rotation = v,
            "brightness" => shift.brightness_offset = v,
            "sigma" => shift.noise_sigma = v,
            "freq" => shift.texture_frequency = v,
            other => return Err(fail(EXIT_USAGE, format!("--shift: unknown parameter {other:?}"))),
        }
    }
    Ok(shift)
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let (height, width) = parse_size(&a.size)?;
    let cfg = DatasetConfig {
        seed: a.seed,
        classes: a.classes,
        height,
        width,
        shift: parse_shift(&a.shift)?,
        n_source: a.n_source,
        n_target: a.n_target,
        n_eval: a.n_eval,
    };
    cfg.validate()?;
    write_dataset(&a.out, &cfg)?;
    print!("{}", cfg.to_manifest().render());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    Ok(read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?)
}

fn read_config_file(path: &Path) -> Result<Manifest, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure {
        code: EXIT_IO,
        error: anyhow!("{}: {e}", path.display()),
    })?;
    Ok(Manifest::parse(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        for (k, v) in read_config_file(path)?.iter() {
            cfg.set(k, v).with_context(|| format!("in {}", path.display()))?;
        }
    }
    cfg.mode = Mode::parse(&a.mode)?;
    if let Some(l) = a.lambda {
        match cfg.mode {
            Mode::Asa => cfg.weights.lambda_asa = l,
            _ => cfg.weights.lambda_asc = l,
        }
    }
    if let Some(c) = &a.connectivity {
        cfg.connectivity = Connectivity::from_count(c.parse().expect("validated by clap"))?;
    }
    if let Some(n) = a.iters {
        cfg.total_iters = n;
    }
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| fail(EXIT_USAGE, format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = resolve_config(&a)?;
    let data = load_dataset(&a.data)?;
    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let init_seg = a.init.as_ref().map(Checkpoint::load).transpose()?.map(|ck| ck.seg);
    let out = train(
        &data,
        &cfg,
        RunOptions {
            out_dir: Some(a.out.clone()),
            resume,
            init_seg,
            progress_every: a.progress,
            ..Default::default()
        },
    )?;
    let sel = out.selected();
    println!("affinity_channels={}", out.affinity_channels);
    println!(
        "selected {} iteration={} mean_target_affinity={}",
        a.out.join("selected.ckpt").display(),
        sel.iteration,
        sel.mean_target_affinity
    );
    Ok(())
}

fn net_for(ck: &Checkpoint) -> Result<(SegNet, TrainConfig), Failure> {
    let mut train_keys = Manifest::new();
    for (k, v) in ck.config.iter() {
        if TrainConfig::KEYS.contains(&k) {
            train_keys.set(k, v);
        }
    }
    let cfg = TrainConfig::from_manifest(&train_keys)?;
    let net = SegNet::new(cfg.seg_config(ck.num_classes()?))?;
    net.check_params(&ck.seg)?;
    Ok((net, cfg))
}

fn split_of(name: &str) -> Split {
    match name {
        "source" => Split::Source,
        "target" => Split::Target,
        _ => Split::Eval,
    }
}

fn check_classes(ck: &Checkpoint, data: &Dataset) -> CmdResult {
    let (have, want) = (ck.num_classes()?, data.config().classes);
    if have != want {
        return Err(fail(
            EXIT_MISMATCH,
            format!("checkpoint was trained for {have} classes, dataset has {want}"),
        ));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    check_classes(&ck, &data)?;
    let (net, cfg) = net_for(&ck)?;
    let report = evaluate(&net, &ck.seg, &data, split_of(&a.split), &NeighborhoodSpec::new(cfg.connectivity))?;
    fs::write(&a.out, report.to_csv()).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    println!("miou={}", report.miou);
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

/// Binary greyscale PGM.
fn pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// `floor(255 v + 0.5)`, i.e. round half up.
fn to_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_affinity_map(a: AffinityMapArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.ckpt)?;
    let (net, _) = net_for(&ck)?;
    let image = Tensor::<f32>::load(&a.image)?;
    let batch = match image.shape() {
        [3, h, w] => image.reshape(vec![1, 3, *h, *w])?,
        [1, 3, _, _] => image,
        s => return Err(fail(EXIT_USAGE, format!("image must be [3,H,W] or [1,3,H,W], got {s:?}"))),
    };
    let p = net.predict(&ck.seg, &batch)?;
    let connectivity = Connectivity::from_count(a.connectivity.parse().expect("validated by clap"))?;
    let map = cosine_affinity(&p, &NeighborhoodSpec::new(connectivity))?.remove(0);
    let (h, w) = (map.height(), map.width());
    let bytes: Vec<u8> = map.values.data().iter().map(|&v| to_byte(v as f64)).collect();
    write_bytes(&with_suffix(&a.out, ".pgm"), &pgm(w, h, &bytes))?;
    map.values.save(with_suffix(&a.out, ".ten"))?;
    let classes = ck.num_classes()?;
    let labels = argmax_labels(&p)?.remove(0);
    let seg: Vec<u8> = labels
        .values()
        .iter()
        .map(|&l| to_byte(l as f64 / (classes - 1) as f64))
        .collect();
    write_bytes(&with_suffix(&a.out, ".seg.pgm"), &pgm(w, h, &seg))?;
    println!("mean_affinity={}", map.mean());
    Ok(())
}

fn cmd_self_train(a: SelfTrainArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    check_classes(&ck, &data)?;
    let (net, mut cfg) = net_for(&ck)?;
    let spec = NeighborhoodSpec::new(cfg.connectivity);
    let mut pseudo = Vec::with_capacity(data.len(Split::Target));
    for chunk in data.images(Split::Target).chunks(affspace::train::PREDICT_CHUNK) {
        let p = net.predict(&ck.seg, &Tensor::stack(chunk)?)?;
        pseudo.extend(pseudo_labels(&p, a.threshold)?);
    }
    let confident: usize = pseudo.iter().map(|l| l.values().iter().filter(|&&v| v != IGNORE).count()).sum();
    if confident == 0 {
        return Err(fail(
            EXIT_NO_CONFIDENT,
            format!("no confident pixels: no target prediction exceeds threshold {}", a.threshold),
        ));
    }
    let total: usize = pseudo.iter().map(|l| l.values().len()).sum();
    let pseudo_dir = a.out.join("pseudo_data");
    let labelled = read_dataset(&a.data)?.with_target_labels(pseudo.clone())?;
    labelled.write(&pseudo_dir)?;

    let before = evaluate(&net, &ck.seg, &data, Split::Eval, &spec)?;
    cfg.mode = Mode::SourceOnly;
    if let Some(n) = a.iters {
        cfg.total_iters = n;
    }
    let out = train(
        &data,
        &cfg,
        RunOptions {
            out_dir: Some(a.out.clone()),
            init_seg: Some(ck.seg.clone()),
            target_labels: Some(pseudo),
            progress_every: a.progress,
            ..Default::default()
        },
    )?;
    let after = evaluate(&net, &out.last().seg, &data, Split::Eval, &spec)?;
    let delta = after.miou - before.miou;
    let summary = format!(
        "threshold={}\nconfident_fraction={}\nmiou_before={}\nmiou_after={}\nmiou_delta={}\n",
        a.threshold,
        confident as f64 / total as f64,
        before.miou,
        after.miou,
        delta
    );
    write_bytes(&a.out.join("self_train.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}
