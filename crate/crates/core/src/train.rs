//! Training loops: source-only and affinity-space cleaning share one loop
//! (the cleaning weight is zero for source-only); adversarial alignment
//! alternates a generator step and a discriminator step per iteration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::affinity::{affinity_space, cosine_affinity, Connectivity, NeighborhoodSpec};
use crate::checkpoint::{select_model, Checkpoint, DiscState, TrainState};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{LabelMap, LossWeights, DEFAULT_LAMBDA};
use crate::manifest::Manifest;
use crate::nets::{Discriminator, DiscriminatorConfig, ParamSet, SegNet, SegNetConfig};
use crate::optim::{adam_step, poly_lr, sgd_step, AdamState, SgdState};
use crate::rng::{derive_seed, rng_for};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Domain;

const STREAM_SEG_INIT: u64 = 11;
const STREAM_DISC_INIT: u64 = 12;
const STREAM_BATCH: u64 = 13;

/// Images per forward pass when scoring a whole split.
pub const PREDICT_CHUNK: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    SourceOnly,
    Asc,
    Asa,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::SourceOnly => "source-only",
            Mode::Asc => "asc",
            Mode::Asa => "asa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source-only" => Ok(Mode::SourceOnly),
            "asc" => Ok(Mode::Asc),
            "asa" => Ok(Mode::Asa),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?} (source-only, asc, asa)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub total_iters: usize,
    pub batch_size: usize,
    pub base_lr_seg: f64,
    pub lr_power: f64,
    pub momentum_seg: f64,
    pub weight_decay: f64,
    pub adam_lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub connectivity: Connectivity,
    pub snapshot_every: usize,
    pub master_seed: u64,
    pub widths: Vec<usize>,
    pub dilations: Vec<usize>,
    pub output_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = SegNetConfig::desk(2);
        TrainConfig {
            mode: Mode::Asa,
            total_iters: 3000,
            batch_size: 4,
            base_lr_seg: 2.5e-4,
            lr_power: 0.9,
            momentum_seg: 0.9,
            weight_decay: 5e-4,
            adam_lr: 1e-4,
            adam_betas: (0.9, 0.99),
            adam_eps: 1e-8,
            weights: LossWeights {
                lambda_asc: DEFAULT_LAMBDA,
                lambda_asa: DEFAULT_LAMBDA,
            },
            connectivity: Connectivity::Eight,
            snapshot_every: 250,
            master_seed: 0,
            widths: net.widths,
            dilations: net.dilations,
            output_stride: net.output_stride,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "mode",
        "total_iters",
        "batch_size",
        "base_lr_seg",
        "lr_power",
        "momentum_seg",
        "weight_decay",
        "adam_lr",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "lambda_asc",
        "lambda_asa",
        "connectivity",
        "snapshot_every",
        "master_seed",
        "widths",
        "dilations",
        "output_stride",
    ];

    /// Set one field from its `key=value` spelling. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = Mode::parse(value)?,
            "total_iters" => self.total_iters = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "base_lr_seg" => self.base_lr_seg = parse_num(key, value)?,
            "lr_power" => self.lr_power = parse_num(key, value)?,
            "momentum_seg" => self.momentum_seg = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "adam_lr" => self.adam_lr = parse_num(key, value)?,
            "adam_beta1" => self.adam_betas.0 = parse_num(key, value)?,
            "adam_beta2" => self.adam_betas.1 = parse_num(key, value)?,
            "adam_eps" => self.adam_eps = parse_num(key, value)?,
            "lambda_asc" => self.weights.lambda_asc = parse_num(key, value)?,
            "lambda_asa" => self.weights.lambda_asa = parse_num(key, value)?,
            "connectivity" => self.connectivity = Connectivity::from_count(parse_num(key, value)?)?,
            "snapshot_every" => self.snapshot_every = parse_num(key, value)?,
            "master_seed" => self.master_seed = parse_num(key, value)?,
            "widths" => self.widths = parse_list(key, value)?,
            "dilations" => self.dilations = parse_list(key, value)?,
            "output_stride" => self.output_stride = parse_num(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in m.iter() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.set("mode", self.mode.name());
        m.set("total_iters", self.total_iters);
        m.set("batch_size", self.batch_size);
        m.set("base_lr_seg", self.base_lr_seg);
        m.set("lr_power", self.lr_power);
        m.set("momentum_seg", self.momentum_seg);
        m.set("weight_decay", self.weight_decay);
        m.set("adam_lr", self.adam_lr);
        m.set("adam_beta1", self.adam_betas.0);
        m.set("adam_beta2", self.adam_betas.1);
        m.set("adam_eps", self.adam_eps);
        m.set("lambda_asc", self.weights.lambda_asc);
        m.set("lambda_asa", self.weights.lambda_asa);
        m.set("connectivity", self.connectivity.count());
        m.set("snapshot_every", self.snapshot_every);
        m.set("master_seed", self.master_seed);
        m.set("widths", join(&self.widths));
        m.set("dilations", join(&self.dilations));
        m.set("output_stride", self.output_stride);
        m
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.total_iters == 0 || self.batch_size == 0 || self.snapshot_every == 0 {
            return bad("total_iters, batch_size and snapshot_every must be positive");
        }
        if !(self.lr_power > 0.0) || !(self.base_lr_seg >= 0.0) || !(self.adam_lr >= 0.0) {
            return bad("learning rates must be nonnegative and lr_power positive");
        }
        if !(0.0..1.0).contains(&self.momentum_seg)
            || !(0.0..1.0).contains(&self.adam_betas.0)
            || !(0.0..1.0).contains(&self.adam_betas.1)
        {
            return bad("momentum and Adam betas must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("weight_decay must be nonnegative and adam_eps positive");
        }
        self.weights.validate()?;
        self.seg_config(2).validate()
    }

    pub fn seg_config(&self, num_classes: usize) -> SegNetConfig {
        SegNetConfig {
            input_channels: 3,
            num_classes,
            widths: self.widths.clone(),
            dilations: self.dilations.clone(),
            output_stride: self.output_stride,
        }
    }

    /// Loss weights actually applied: source-only zeroes both terms.
    pub fn effective_weights(&self) -> LossWeights {
        match self.mode {
            Mode::SourceOnly => LossWeights {
                lambda_asc: 0.0,
                lambda_asa: 0.0,
            },
            Mode::Asc => LossWeights {
                lambda_asc: self.weights.lambda_asc,
                lambda_asa: 0.0,
            },
            Mode::Asa => LossWeights {
                lambda_asc: 0.0,
                lambda_asa: self.weights.lambda_asa,
            },
        }
    }

    /// Iterations at which checkpoints are taken (never 0; always the last).
    pub fn snapshot_iters(&self) -> Vec<usize> {
        let mut its: Vec<usize> = (1..=self.total_iters / self.snapshot_every)
            .map(|k| k * self.snapshot_every)
            .collect();
        if its.last() != Some(&self.total_iters) {
            its.push(self.total_iters);
        }
        its
    }
}

fn hex(digest: &[u8]) -> String {
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Hex SHA-256 of the rendered run configuration.
pub fn fingerprint(run: &Manifest) -> String {
    hex(&Sha256::digest(run.render().as_bytes()))
}

/// Hex SHA-256 over parameter names and serialized tensors.
pub fn param_digest(params: &ParamSet<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        h.update(t.to_bytes());
    }
    hex(&h.finalize())
}

/// Seed of the batch drawn at `iteration`.
pub fn batch_seed(master_seed: u64, iteration: usize) -> u64 {
    derive_seed(master_seed, STREAM_BATCH, iteration as u64)
}

/// One row of the metrics log. Loss columns are empty on the closing row,
/// and the affinity column is filled at snapshot iterations only.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub iter: usize,
    pub lr: Option<f64>,
    pub seg_loss: Option<f64>,
    pub asc_loss: Option<f64>,
    pub adv_loss: Option<f64>,
    pub d_loss: Option<f64>,
    pub mean_target_affinity: Option<f64>,
}

pub const METRICS_HEADER: &str = "iter,lr,seg_loss,asc_loss,adv_loss,d_loss,mean_target_affinity";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter,
            cell(self.lr),
            cell(self.seg_loss),
            cell(self.asc_loss),
            cell(self.adv_loss),
            cell(self.d_loss),
            cell(self.mean_target_affinity)
        )
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Mean over images of the per-image mean cosine affinity.
pub fn split_mean_affinity(
    net: &SegNet,
    params: &ParamSet<f32>,
    images: &[Tensor<f32>],
    spec: &NeighborhoodSpec,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("affinity of an empty split".into()));
    }
    let mut total = 0.0;
    for chunk in images.chunks(PREDICT_CHUNK) {
        let p = net.predict(params, &Tensor::stack(chunk)?)?;
        total += cosine_affinity(&p, spec)?.iter().map(|m| m.mean()).sum::<f64>();
    }
    Ok(total / images.len() as f64)
}

/// Extra inputs for a run.
#[derive(Debug, Default)]
pub struct RunOptions {
    /// Directory for `metrics.csv`, `ckpt_<iter>.ckpt` and `config.txt`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Starting segmentation parameters instead of a fresh initialisation.
    pub init_seg: Option<ParamSet<f32>>,
    /// Labels for the target training split (self-training only). They add
    /// a supervised target term on top of the selected objective.
    pub target_labels: Option<Vec<LabelMap>>,
    /// Print a progress line to stderr every this many iterations.
    pub progress_every: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: Vec<MetricRow>,
    /// Snapshot checkpoints in iteration order; only the last one carries
    /// optimizer state.
    pub history: Vec<Checkpoint>,
    pub selected: usize,
    pub affinity_channels: usize,
}

impl RunOutput {
    pub fn selected(&self) -> &Checkpoint {
        &self.history[self.selected]
    }

    pub fn last(&self) -> &Checkpoint {
        self.history.last().expect("nonempty history")
    }
}

/// Resolved configuration of a run: training keys plus a dataset summary.
pub fn run_manifest(dataset: &Dataset, cfg: &TrainConfig) -> Manifest {
    let mut m = cfg.to_manifest();
    let data = dataset.config().to_manifest();
    for (k, v) in data.iter() {
        if k != "format" {
            m.set(&format!("data.{k}"), v);
        }
    }
    m.set("classes", dataset.config().classes);
    m
}

struct Loop<'a> {
    data: &'a Dataset,
    cfg: &'a TrainConfig,
    weights: LossWeights,
    net: SegNet,
    disc: Option<Discriminator>,
    spec: NeighborhoodSpec,
    target_labels: Option<&'a [LabelMap]>,
}

struct StepOut {
    seg: f64,
    asc: f64,
    adv: Option<f64>,
    d: Option<f64>,
}

fn nan_error(iteration: usize, seed: u64, src: &[usize], tgt: &[usize], what: &str) -> Error {
    Error::NanLoss {
        iteration,
        batch_seed: seed,
        detail: format!("{what}; source batch {src:?}, target batch {tgt:?}"),
    }
}

impl Loop<'_> {
    fn gather_images(&self, split: Split, idx: &[usize]) -> Result<Tensor<f32>> {
        let imgs: Vec<Tensor<f32>> = idx.iter().map(|&i| self.data.image(split, i).clone()).collect();
        Tensor::stack(&imgs)
    }

    fn step(
        &self,
        iteration: usize,
        seg: &mut ParamSet<f32>,
        sgd: &mut SgdState<f32>,
        disc_state: Option<&mut DiscState>,
        lr: f64,
    ) -> Result<StepOut> {
        let seed = batch_seed(self.cfg.master_seed, iteration);
        let mut rng = rng_for(seed, 0, 0);
        let b = self.cfg.batch_size;
        let (ns, nt) = (self.data.len(Split::Source), self.data.len(Split::Target));
        let src: Vec<usize> = (0..b).map(|_| rng.gen_range(0..ns)).collect();
        let tgt: Vec<usize> = (0..b).map(|_| rng.gen_range(0..nt)).collect();
        let labels: Vec<LabelMap> = src.iter().map(|&i| self.data.labels(Split::Source, i).clone()).collect();
        let xs = self.gather_images(Split::Source, &src)?;
        let xt = self.gather_images(Split::Target, &tgt)?;

        // Generator phase. The discriminator's target-domain loss is recorded
        // on the same tape so its forward pass is shared with the
        // discriminator phase; each phase differentiates only its own
        // parameters.
        let mut tape = Tape::new();
        let seg_vars = seg.record(&mut tape, true);
        let vs = tape.constant(xs);
        let vt = tape.constant(xt);
        let ls = self.net.forward(&mut tape, &seg_vars, vs)?;
        let ps = tape.softmax_channels(ls)?;
        let lt = self.net.forward(&mut tape, &seg_vars, vt)?;
        let pt = tape.softmax_channels(lt)?;
        let mut d_target = None;
        let (mut total, seg_loss, asc, adv) = match (&self.disc, &disc_state) {
            (Some(disc), Some(ds)) => {
                let d_vars = ds.params.record(&mut tape, true);
                let at = tape.build_affinity_space(pt, &self.spec)?;
                let score = disc.forward(&mut tape, &d_vars, at)?;
                let terms = tape.asa_objective(ps, &labels, score, &self.weights)?;
                d_target = Some((tape.discriminator_loss(score, Domain::Target)?, d_vars));
                (terms.total, terms.seg, None, Some(terms.adv))
            }
            _ => {
                let terms = tape.asc_objective(ps, &labels, pt, &self.weights, &self.spec)?;
                let asc = tape.add(terms.asc_source, terms.asc_target)?;
                (terms.total, terms.seg, Some(asc), None)
            }
        };
        if let Some(pseudo) = self.target_labels {
            let batch: Vec<LabelMap> = tgt.iter().map(|&i| pseudo[i].clone()).collect();
            if batch.iter().any(|l| l.ignored() < l.values().len()) {
                let ce = tape.seg_cross_entropy(pt, &batch)?;
                total = tape.add(total, ce)?;
            }
        }
        let scalar = |tape: &Tape<f32>, v: Var| tape.value(v).item() as f64;
        let total_v = scalar(&tape, total);
        if !total_v.is_finite() {
            return Err(nan_error(iteration, seed, &src, &tgt, "generator objective is not finite"));
        }
        let mut grads = tape.backward_wrt(total, &seg_vars)?;
        let g: Vec<Tensor<f32>> = seg_vars.iter().map(|&v| grads.take(v)).collect();
        sgd_step(seg, &g, sgd, lr, self.cfg.momentum_seg, self.cfg.weight_decay)
            .map_err(|_| nan_error(iteration, seed, &src, &tgt, "segmentation update is not finite"))?;
        let mut out = StepOut {
            seg: scalar(&tape, seg_loss),
            asc: asc.map(|v| scalar(&tape, v)).unwrap_or(0.0),
            adv: adv.map(|v| scalar(&tape, v)),
            d: None,
        };

        // Discriminator phase on detached affinity spaces of both domains,
        // scored with the parameters the generator phase saw.
        if let (Some(disc), Some(ds), Some((l_t, gd_vars))) = (&self.disc, disc_state, d_target) {
            let mut tg = tape.backward_wrt(l_t, &gd_vars)?;
            let g_t: Vec<Tensor<f32>> = gd_vars.iter().map(|&v| tg.take(v)).collect();
            let l_t = tape.value(l_t).item();
            let a_s = affinity_space(tape.value(ps), &self.spec)?;
            drop(tape);
            let mut dt = Tape::new();
            let d_vars = ds.params.record(&mut dt, true);
            let in_s = dt.constant(a_s);
            let s_s = disc.forward(&mut dt, &d_vars, in_s)?;
            let l_s = dt.discriminator_loss(s_s, Domain::Source)?;
            let d_v = (dt.value(l_s).item() + l_t) as f64;
            if !d_v.is_finite() {
                return Err(nan_error(iteration, seed, &src, &tgt, "discriminator loss is not finite"));
            }
            let mut dg = dt.backward(l_s)?;
            let g: Vec<Tensor<f32>> = d_vars
                .iter()
                .zip(g_t)
                .map(|(&v, t)| {
                    let s = dg.take(v);
                    let sum = s.data().iter().zip(t.data()).map(|(a, b)| a + b).collect();
                    Tensor::new(s.shape().to_vec(), sum)
                })
                .collect::<Result<_>>()
                .map_err(|_| nan_error(iteration, seed, &src, &tgt, "discriminator gradient is not finite"))?;
            adam_step(&mut ds.params, &g, &mut ds.adam, self.cfg.adam_lr, self.cfg.adam_betas, self.cfg.adam_eps)
                .map_err(|_| nan_error(iteration, seed, &src, &tgt, "discriminator update is not finite"))?;
            out.d = Some(d_v);
        }
        Ok(out)
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Run the loop selected by `cfg.mode`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, opts: RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let classes = dataset.config().classes;
    let net = SegNet::new(cfg.seg_config(classes))?;
    let spec = NeighborhoodSpec::new(cfg.connectivity);
    let affinity_channels = spec.len() * classes;
    let disc = match cfg.mode {
        Mode::Asa => Some(Discriminator::new(DiscriminatorConfig::new(affinity_channels))?),
        _ => None,
    };
    if let Some(pl) = &opts.target_labels {
        if pl.len() != dataset.len(Split::Target) {
            return Err(Error::Shape("target label count does not match the target split".into()));
        }
    }
    let mut run = run_manifest(dataset, cfg);
    if let Some(p) = &opts.init_seg {
        run.set("init.sha256", param_digest(p));
    }
    let fp = fingerprint(&run);

    let (start, mut seg, mut sgd, mut disc_state) = match opts.resume {
        Some(ck) => {
            if ck.fingerprint != fp {
                return Err(Error::Fingerprint {
                    checkpoint: ck.fingerprint,
                    current: fp,
                });
            }
            let state = ck
                .state
                .ok_or_else(|| Error::InvalidArgument("checkpoint carries no optimizer state".into()))?;
            net.check_params(&ck.seg)?;
            if disc.is_some() != state.disc.is_some() {
                return Err(Error::InvalidArgument("checkpoint discriminator state does not match mode".into()));
            }
            (ck.iteration, ck.seg, state.sgd, state.disc)
        }
        None => {
            let seg = match opts.init_seg {
                Some(p) => {
                    net.check_params(&p)?;
                    p
                }
                None => net.init_params(derive_seed(cfg.master_seed, STREAM_SEG_INIT, 0)),
            };
            let sgd = SgdState::new(&seg);
            let ds = disc.as_ref().map(|d| {
                let params = d.init_params(derive_seed(cfg.master_seed, STREAM_DISC_INIT, 0));
                let adam = AdamState::new(&params);
                DiscState { params, adam }
            });
            (0, seg, sgd, ds)
        }
    };
    if start > cfg.total_iters {
        return Err(Error::InvalidArgument(format!("resume iteration {start} beyond total_iters")));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = format!("# resolved run configuration\nfingerprint={fp}\naffinity_channels={affinity_channels}\n");
        text.push_str(&run.render());
        write_file(&dir.join("config.txt"), text.as_bytes())?;
    }

    let lp = Loop {
        data: dataset,
        cfg,
        weights: cfg.effective_weights(),
        net,
        disc,
        spec,
        target_labels: opts.target_labels.as_deref(),
    };
    let target_images = dataset.images(Split::Target);
    let snapshots = cfg.snapshot_iters();
    let mut log = Vec::new();
    let mut history = Vec::new();
    let mut affinity_now = Some(split_mean_affinity(&lp.net, &seg, target_images, &lp.spec)?);
    for it in start..=cfg.total_iters {
        let checkpoint_here = it > start && snapshots.contains(&it);
        if it > start && (checkpoint_here || it % cfg.snapshot_every == 0) {
            affinity_now = Some(split_mean_affinity(&lp.net, &seg, target_images, &lp.spec)?);
        }
        if checkpoint_here {
            let state = TrainState {
                sgd: sgd.clone(),
                disc: disc_state.clone(),
            };
            let ck = Checkpoint {
                iteration: it,
                mean_target_affinity: affinity_now.expect("affinity computed at snapshots"),
                fingerprint: fp.clone(),
                config: run.clone(),
                seg: seg.clone(),
                state: Some(state),
            };
            if let Some(dir) = &opts.out_dir {
                ck.save(dir.join(format!("ckpt_{it}.ckpt")))?;
            }
            if let Some(prev) = history.last_mut() {
                let prev: &mut Checkpoint = prev;
                prev.state = None;
            }
            history.push(ck);
        }
        if it == cfg.total_iters {
            log.push(MetricRow {
                iter: it,
                lr: None,
                seg_loss: None,
                asc_loss: None,
                adv_loss: None,
                d_loss: None,
                mean_target_affinity: affinity_now.take(),
            });
            break;
        }
        let lr = poly_lr(cfg.base_lr_seg, it, cfg.total_iters, cfg.lr_power)?;
        let out = lp.step(it, &mut seg, &mut sgd, disc_state.as_mut(), lr)?;
        let row = MetricRow {
            iter: it,
            lr: Some(lr),
            seg_loss: Some(out.seg),
            asc_loss: Some(out.asc),
            adv_loss: out.adv,
            d_loss: out.d,
            mean_target_affinity: affinity_now.take(),
        };
        if let Some(every) = opts.progress_every {
            if every > 0 && it % every == 0 {
                eprintln!("{}", row.to_csv());
            }
        }
        log.push(row);
    }
    if history.is_empty() {
        return Err(Error::InvalidArgument("run produced no checkpoints".into()));
    }
    let best = select_model(&history)?.iteration;
    let selected = history.iter().position(|c| c.iteration == best).expect("selected from history");
    if let Some(dir) = &opts.out_dir {
        write_file(&dir.join("metrics.csv"), metrics_csv(&log).as_bytes())?;
        history[selected].save(dir.join("selected.ckpt"))?;
    }
    Ok(RunOutput {
        log,
        history,
        selected,
        affinity_channels,
    })
}

/// Affinity-space cleaning (source-only when `mode` is source-only).
pub fn train_asc(dataset: &Dataset, cfg: &TrainConfig) -> Result<RunOutput> {
    if cfg.mode == Mode::Asa {
        return Err(Error::InvalidArgument("train_asc called with mode asa".into()));
    }
    train(dataset, cfg, RunOptions::default())
}

/// Adversarial affinity-space alignment.
pub fn train_asa(dataset: &Dataset, cfg: &TrainConfig) -> Result<RunOutput> {
    if cfg.mode != Mode::Asa {
        return Err(Error::InvalidArgument("train_asa needs mode asa".into()));
    }
    train(dataset, cfg, RunOptions::default())
}
