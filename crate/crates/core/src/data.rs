//! Synthetic two-domain segmentation benchmark.
//!
//! Scenes are a sky band over a ground band with random rectangles and
//! ellipses of the remaining classes. The source domain renders flat class
//! colours with mild noise; the target domain re-renders the same kind of
//! scene under an appearance shift (hue rotation, brightness offset,
//! sinusoidal texture, extra noise). Labels are unaffected by the shift.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::LabelMap;
use crate::manifest::Manifest;
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;
use crate::Domain;

pub const GROUND: u8 = 0;
pub const SKY: u8 = 1;
pub const SOURCE_NOISE_SIGMA: f64 = 0.02;
/// Peak amplitude of the target-domain sinusoidal texture.
pub const TEXTURE_AMPLITUDE: f64 = 0.12;
/// Per-scene jitter of each class colour channel.
pub const COLOR_JITTER: f64 = 0.06;

const PALETTE: [[f64; 3]; 8] = [
    [0.45, 0.33, 0.20], // ground
    [0.55, 0.75, 0.95], // sky
    [0.80, 0.20, 0.20],
    [0.20, 0.65, 0.25],
    [0.85, 0.80, 0.20],
    [0.55, 0.25, 0.70],
    [0.20, 0.65, 0.75],
    [0.50, 0.50, 0.50],
];

const STREAM_GEOMETRY: u64 = 1;
const STREAM_RENDER: u64 = 2;
const STREAM_EVAL_GEOMETRY: u64 = 3;
const STREAM_EVAL_RENDER: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftConfig {
    pub hue_rotation: f64,
    pub brightness_offset: f64,
    pub noise_sigma: f64,
    pub texture_frequency: f64,
}

impl ShiftConfig {
    pub fn identity() -> Self {
        ShiftConfig {
            hue_rotation: 0.0,
            brightness_offset: 0.0,
            noise_sigma: 0.0,
            texture_frequency: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.hue_rotation, self.brightness_offset, self.noise_sigma, self.texture_frequency]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.noise_sigma < 0.0 || self.brightness_offset.abs() >= 0.5 {
            return Err(Error::InvalidArgument(format!("invalid shift {self:?}")));
        }
        Ok(())
    }

    /// Named presets: `none` and `default`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "none" | "identity" => Some(Self::identity()),
            "default" => Some(Self::default()),
            _ => None,
        }
    }
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            hue_rotation: 0.6,
            brightness_offset: 0.1,
            noise_sigma: 0.05,
            texture_frequency: 8.0,
        }
    }
}

/// Scene geometry plus the per-class base colours chosen for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub labels: LabelMap,
    pub colors: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    pub domain: Domain,
    pub seed: u64,
}

fn check_scene_args(classes: usize, height: usize, width: usize) -> Result<()> {
    if !(3..=PALETTE.len()).contains(&classes) {
        return Err(Error::InvalidArgument(format!("classes must be in 3..=8, got {classes}")));
    }
    if !(32..=256).contains(&height) || !(32..=256).contains(&width) {
        return Err(Error::InvalidArgument(format!("size must be in 32..=256, got {height}x{width}")));
    }
    Ok(())
}

/// Random scene: sky over ground split by a wavy horizon, then 3-8 shapes of
/// the object classes (`2..C`). At least one object pixel survives.
pub fn generate_scene(seed: u64, classes: usize, height: usize, width: usize) -> Result<Scene> {
    check_scene_args(classes, height, width)?;
    let mut rng = rng_for(seed, 0, 0);
    let (h, w) = (height as f64, width as f64);
    let horizon = rng.gen_range(0.35..0.65) * h;
    let amp = rng.gen_range(0.0..0.08) * h;
    let freq = rng.gen_range(0.5..2.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut values = vec![GROUND; height * width];
    for y in 0..height {
        for x in 0..width {
            let hz = horizon + amp * (std::f64::consts::TAU * freq * x as f64 / w + phase).sin();
            if (y as f64) < hz {
                values[y * width + x] = SKY;
            }
        }
    }
    let objects = classes - 2;
    let shapes = rng.gen_range(3..=8);
    loop {
        let mut canvas = values.clone();
        let mut drawn = 0;
        for _ in 0..shapes {
            let class = 2 + rng.gen_range(0..objects) as u8;
            let sh = rng.gen_range(0.12..0.4) * h;
            let sw = rng.gen_range(0.12..0.4) * w;
            let cy = rng.gen_range(0.15..0.9) * h;
            let cx = rng.gen_range(0.0..1.0) * w;
            let ellipse = rng.gen_bool(0.5);
            for y in 0..height {
                for x in 0..width {
                    let dy = (y as f64 + 0.5 - cy) / (sh / 2.0);
                    let dx = (x as f64 + 0.5 - cx) / (sw / 2.0);
                    let inside = if ellipse {
                        dy * dy + dx * dx <= 1.0
                    } else {
                        dy.abs() <= 1.0 && dx.abs() <= 1.0
                    };
                    if inside {
                        canvas[y * width + x] = class;
                        drawn += 1;
                    }
                }
            }
        }
        if drawn > 0 && canvas.iter().any(|&v| v >= 2) {
            values = canvas;
            break;
        }
    }
    let colors = PALETTE[..classes]
        .iter()
        .map(|base| {
            let mut c = *base;
            for v in &mut c {
                *v = (*v + rng.gen_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0);
            }
            c
        })
        .collect();
    Ok(Scene {
        labels: LabelMap::new(height, width, values)?,
        colors,
    })
}

/// Rotate an RGB colour about the grey axis by `angle` radians.
pub fn rotate_hue(rgb: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    let k = (1.0 - c) / 3.0;
    let r3 = (1.0f64 / 3.0).sqrt() * s;
    let m = [
        [c + k, k - r3, k + r3],
        [k + r3, c + k, k - r3],
        [k - r3, k + r3, c + k],
    ];
    let mut out = [0.0; 3];
    for (i, row) in m.iter().enumerate() {
        out[i] = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
    }
    out
}

/// Render a scene in one domain. The target domain applies `shift` on top of
/// the source rendering; labels are copied unchanged.
pub fn render_domain(scene: &Scene, domain: Domain, shift: &ShiftConfig, seed: u64) -> Result<DomainSample> {
    shift.validate()?;
    let (h, w) = (scene.labels.height(), scene.labels.width());
    let mut rng = rng_for(seed, 0, 0);
    let base_noise = Normal::new(0.0, SOURCE_NOISE_SIGMA).expect("positive sigma");
    let colors: Vec<[f64; 3]> = match domain {
        Domain::Source => scene.colors.clone(),
        Domain::Target => scene
            .colors
            .iter()
            .map(|&c| rotate_hue(c, shift.hue_rotation))
            .collect(),
    };
    let texture_angle = rng.gen_range(0.0..std::f64::consts::PI);
    let texture_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ta_s, ta_c) = texture_angle.sin_cos();
    let extra = (domain == Domain::Target && shift.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, shift.noise_sigma).expect("validated sigma"));
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let label = scene.labels.get(y, x) as usize;
            let texture = if domain == Domain::Target && shift.texture_frequency != 0.0 {
                let u = (x as f64 * ta_c + y as f64 * ta_s) / w as f64;
                TEXTURE_AMPLITUDE * (std::f64::consts::TAU * shift.texture_frequency * u + texture_phase).sin()
            } else {
                0.0
            };
            for ch in 0..3 {
                let mut v = colors[label][ch] + base_noise.sample(&mut rng);
                if domain == Domain::Target {
                    v += shift.brightness_offset + texture;
                    if let Some(n) = &extra {
                        v += n.sample(&mut rng);
                    }
                }
                data[ch * h * w + y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(DomainSample {
        image: Tensor::new(vec![3, h, w], data)?,
        labels: scene.labels.clone(),
        domain,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub shift: ShiftConfig,
    pub n_source: usize,
    pub n_target: usize,
    /// Held-out labelled target samples for evaluation.
    pub n_eval: usize,
}

impl DatasetConfig {
    pub fn desk(seed: u64) -> Self {
        DatasetConfig {
            seed,
            classes: 5,
            height: 64,
            width: 64,
            shift: ShiftConfig::default(),
            n_source: 200,
            n_target: 200,
            n_eval: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_scene_args(self.classes, self.height, self.width)?;
        self.shift.validate()?;
        if self.n_source == 0 || self.n_target == 0 {
            return Err(Error::InvalidArgument("both training splits need samples".into()));
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.set("format", "affspace-dataset-v1");
        m.set("seed", self.seed);
        m.set("classes", self.classes);
        m.set("height", self.height);
        m.set("width", self.width);
        m.set("hue_rotation", self.shift.hue_rotation);
        m.set("brightness_offset", self.shift.brightness_offset);
        m.set("noise_sigma", self.shift.noise_sigma);
        m.set("texture_frequency", self.shift.texture_frequency);
        m.set("n_source", self.n_source);
        m.set("n_target", self.n_target);
        m.set("n_eval", self.n_eval);
        m
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        if m.get("format") != Some("affspace-dataset-v1") {
            return Err(Error::format("manifest", "missing or unknown format key"));
        }
        let cfg = DatasetConfig {
            seed: m.require("seed")?,
            classes: m.require("classes")?,
            height: m.require("height")?,
            width: m.require("width")?,
            shift: ShiftConfig {
                hue_rotation: m.require("hue_rotation")?,
                brightness_offset: m.require("brightness_offset")?,
                noise_sigma: m.require("noise_sigma")?,
                texture_frequency: m.require("texture_frequency")?,
            },
            n_source: m.require("n_source")?,
            n_target: m.require("n_target")?,
            n_eval: m.require("n_eval")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Source,
    Target,
    Eval,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Target => "target",
            Split::Eval => "eval",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::Source => Domain::Source,
            Split::Target | Split::Eval => Domain::Target,
        }
    }

    pub const ALL: [Split; 3] = [Split::Source, Split::Target, Split::Eval];
}

/// Generate sample `index` of `split`. Source and target training scenes
/// share geometry seeds, so their label marginals match exactly; renders use
/// independent noise streams.
pub fn generate_sample(cfg: &DatasetConfig, split: Split, index: usize) -> Result<DomainSample> {
    let (geo_stream, render_stream) = match split {
        Split::Source | Split::Target => (STREAM_GEOMETRY, STREAM_RENDER),
        Split::Eval => (STREAM_EVAL_GEOMETRY, STREAM_EVAL_RENDER),
    };
    let scene_seed = derive_seed(cfg.seed, geo_stream, index as u64);
    let scene = generate_scene(scene_seed, cfg.classes, cfg.height, cfg.width)?;
    let domain_tag = match split.domain() {
        Domain::Source => 0,
        Domain::Target => 1,
    };
    let render_seed = derive_seed(cfg.seed, render_stream, ((index as u64) << 1) | domain_tag);
    render_domain(&scene, split.domain(), &cfg.shift, render_seed)
}

/// Counts label reads per split.
#[derive(Debug, Default)]
pub struct LabelReads {
    counts: [AtomicUsize; 3],
}

impl LabelReads {
    pub fn get(&self, split: Split) -> usize {
        self.counts[split as usize].load(Ordering::Relaxed)
    }

    fn bump(&self, split: Split) {
        self.counts[split as usize].fetch_add(1, Ordering::Relaxed);
    }
}

/// An in-memory dataset. Labels are only reachable through
/// [`Dataset::labels`], which counts reads per split.
#[derive(Debug)]
pub struct Dataset {
    config: DatasetConfig,
    images: [Vec<Tensor<f32>>; 3],
    labels: [Vec<LabelMap>; 3],
    reads: LabelReads,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let mut images: [Vec<Tensor<f32>>; 3] = Default::default();
        let mut labels: [Vec<LabelMap>; 3] = Default::default();
        for split in Split::ALL {
            for i in 0..config.split_len(split) {
                let s = generate_sample(config, split, i)?;
                images[split as usize].push(s.image);
                labels[split as usize].push(s.labels);
            }
        }
        Ok(Dataset {
            config: config.clone(),
            images,
            labels,
            reads: LabelReads::default(),
        })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn len(&self, split: Split) -> usize {
        self.images[split as usize].len()
    }

    pub fn image(&self, split: Split, index: usize) -> &Tensor<f32> {
        &self.images[split as usize][index]
    }

    pub fn images(&self, split: Split) -> &[Tensor<f32>] {
        &self.images[split as usize]
    }

    pub fn labels(&self, split: Split, index: usize) -> &LabelMap {
        self.reads.bump(split);
        &self.labels[split as usize][index]
    }

    pub fn label_reads(&self) -> &LabelReads {
        &self.reads
    }

    /// Replace the labels of the target training split (pseudo-labelling).
    pub fn with_target_labels(mut self, labels: Vec<LabelMap>) -> Result<Self> {
        if labels.len() != self.len(Split::Target) {
            return Err(Error::Shape("pseudo-label count does not match target split".into()));
        }
        self.labels[Split::Target as usize] = labels;
        Ok(self)
    }

    fn sample_paths(dir: &Path, split: Split, i: usize) -> (PathBuf, PathBuf) {
        let d = dir.join(split.dir_name());
        (d.join(format!("{i}.img.ten")), d.join(format!("{i}.lab.ten")))
    }

    /// Layout: `manifest.txt` plus `<split>/<i>.img.ten` and
    /// `<split>/<i>.lab.ten` for the source, target and eval splits.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for split in Split::ALL {
            let d = dir.join(split.dir_name());
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            for i in 0..self.len(split) {
                let (img, lab) = Self::sample_paths(dir, split, i);
                self.images[split as usize][i].save(img)?;
                self.labels[split as usize][i].to_tensor::<f32>().save(lab)?;
            }
        }
        let path = dir.join("manifest.txt");
        let mut text = String::from("# synthetic two-domain segmentation dataset\n");
        text.push_str(&self.config.to_manifest().render());
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = read_manifest(dir)?;
        let mut images: [Vec<Tensor<f32>>; 3] = Default::default();
        let mut labels: [Vec<LabelMap>; 3] = Default::default();
        for split in Split::ALL {
            for i in 0..config.split_len(split) {
                let (img_path, lab_path) = Self::sample_paths(dir, split, i);
                let img = Tensor::<f32>::load(&img_path)?;
                if img.shape() != [3, config.height, config.width] {
                    return Err(Error::Shape(format!(
                        "{}: shape {:?} does not match manifest {}x{}",
                        img_path.display(),
                        img.shape(),
                        config.height,
                        config.width
                    )));
                }
                let lab = LabelMap::from_tensor(&Tensor::<f32>::load(&lab_path)?)?;
                if lab.height() != config.height || lab.width() != config.width {
                    return Err(Error::Shape(format!("{}: label shape does not match manifest", lab_path.display())));
                }
                lab.validate(config.classes)?;
                images[split as usize].push(img);
                labels[split as usize].push(lab);
            }
        }
        Ok(Dataset {
            config,
            images,
            labels,
            reads: LabelReads::default(),
        })
    }
}

impl DatasetConfig {
    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Source => self.n_source,
            Split::Target => self.n_target,
            Split::Eval => self.n_eval,
        }
    }
}

pub fn read_manifest(dir: &Path) -> Result<DatasetConfig> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    DatasetConfig::from_manifest(&Manifest::parse(&text)?)
}

/// Convenience wrapper for [`Dataset::generate`] followed by [`Dataset::write`].
pub fn write_dataset(dir: impl AsRef<Path>, config: &DatasetConfig) -> Result<Dataset> {
    let ds = Dataset::generate(config)?;
    ds.write(dir)?;
    Ok(ds)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::read(dir)
}
