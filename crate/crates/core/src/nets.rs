//! The segmentation network (dilated trunk, atrous pyramid head, bilinear
//! upsampling) and the fully-convolutional affinity-space discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::ConvGeometry;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "{} names for {} tensors",
                names.len(),
                tensors.len()
            )));
        }
        Ok(ParamSet { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Record every tensor on `tape`, as trainable leaves or as constants.
    pub fn record(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Weight (rank > 1) or bias (rank 1).
pub fn is_weight(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Std of the classifier (pyramid) weights; keeps initial predictions close
/// to uniform.
pub const HEAD_INIT_STD: f64 = 0.01;

fn he_init<T: Real>(specs: &[(String, Vec<usize>)], seed: u64, head_prefix: Option<&str>) -> ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for (name, shape) in specs {
        let t = if shape.len() > 1 {
            let fan_in: usize = shape[1..].iter().product();
            let std = match head_prefix {
                Some(prefix) if name.starts_with(prefix) => HEAD_INIT_STD,
                _ => (2.0 / fan_in as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape.clone(), |_| T::lit(normal.sample(&mut rng)))
        } else {
            Tensor::zeros(shape.clone())
        };
        names.push(name.clone());
        tensors.push(t);
    }
    ParamSet { names, tensors }
}

fn check_names<T: Real>(params: &ParamSet<T>, specs: &[(String, Vec<usize>)]) -> Result<()> {
    if params.len() != specs.len() {
        return Err(Error::Shape(format!(
            "expected {} parameter tensors, got {}",
            specs.len(),
            params.len()
        )));
    }
    for ((name, shape), (pn, pt)) in specs.iter().zip(params.iter()) {
        if name != pn || shape.as_slice() != pt.shape() {
            return Err(Error::Shape(format!(
                "parameter {pn} {:?} does not match {name} {shape:?}",
                pt.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegNetConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    /// Output width of each 3x3 trunk stage.
    pub widths: Vec<usize>,
    /// Dilation rates of the parallel pyramid branches.
    pub dilations: Vec<usize>,
    pub output_stride: usize,
}

impl SegNetConfig {
    pub fn desk(num_classes: usize) -> Self {
        SegNetConfig {
            input_channels: 3,
            num_classes,
            widths: vec![32, 64, 64, 64],
            dilations: vec![1, 2, 4, 6],
            output_stride: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if ![1, 2, 4, 8].contains(&self.output_stride) {
            return bad(format!("output_stride must be 1, 2, 4 or 8, got {}", self.output_stride));
        }
        if self.dilations.is_empty() || self.dilations.windows(2).any(|w| w[0] >= w[1]) || self.dilations[0] == 0 {
            return bad(format!("dilations must be nonempty and strictly increasing: {:?}", self.dilations));
        }
        if self.widths.len() < self.downsamplings() + 1 || self.widths.contains(&0) {
            return bad(format!(
                "{} stages cannot reach output stride {}",
                self.widths.len(),
                self.output_stride
            ));
        }
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        Ok(())
    }

    fn downsamplings(&self) -> usize {
        self.output_stride.trailing_zeros() as usize
    }

    /// Stride of trunk stage `i`: the stages right after the stem halve the
    /// resolution until the output stride is reached.
    fn stage_stride(&self, i: usize) -> usize {
        if i >= 1 && i <= self.downsamplings() {
            2
        } else {
            1
        }
    }

    /// The last trunk stage is dilated when it keeps resolution.
    fn stage_dilation(&self, i: usize) -> usize {
        if i + 1 == self.widths.len() && self.stage_stride(i) == 1 && i > 0 {
            2
        } else {
            1
        }
    }

    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut cin = self.input_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            specs.push((format!("trunk.{i}.weight"), vec![w, cin, 3, 3]));
            specs.push((format!("trunk.{i}.bias"), vec![w]));
            cin = w;
        }
        for (i, _) in self.dilations.iter().enumerate() {
            specs.push((format!("aspp.{i}.weight"), vec![self.num_classes, cin, 3, 3]));
            specs.push((format!("aspp.{i}.bias"), vec![self.num_classes]));
        }
        specs
    }
}

#[derive(Debug, Clone)]
pub struct SegNet {
    config: SegNetConfig,
}

impl SegNet {
    pub fn new(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(SegNet { config })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        he_init(&self.config.param_specs(), seed, Some("aspp."))
    }

    pub fn check_params<T: Real>(&self, params: &ParamSet<T>) -> Result<()> {
        check_names(params, &self.config.param_specs())
    }

    /// Logits `[B,C,H,W]` for images `[B,Cin,H,W]`; `params` are the
    /// recorded parameter vars in [`SegNetConfig::param_specs`] order.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], image: Var) -> Result<Var> {
        let cfg = &self.config;
        let [_, cin, h, w] = *tape.shape(image) else {
            return Err(Error::Shape(format!("image must be [B,C,H,W], got {:?}", tape.shape(image))));
        };
        if cin != cfg.input_channels {
            return Err(Error::Shape(format!("image has {cin} channels, network expects {}", cfg.input_channels)));
        }
        if h % cfg.output_stride != 0 || w % cfg.output_stride != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} not divisible by output stride {}",
                cfg.output_stride
            )));
        }
        if params.len() != cfg.param_specs().len() {
            return Err(Error::Shape("segmentation parameter count mismatch".into()));
        }
        let mut x = image;
        for i in 0..cfg.widths.len() {
            let d = cfg.stage_dilation(i);
            let g = ConvGeometry::new(cfg.stage_stride(i), d, d);
            x = tape.conv2d(x, params[2 * i], params[2 * i + 1], g)?;
            x = tape.relu(x);
        }
        let base = 2 * cfg.widths.len();
        let mut head: Option<Var> = None;
        for (j, &d) in cfg.dilations.iter().enumerate() {
            let branch = tape.conv2d(x, params[base + 2 * j], params[base + 2 * j + 1], ConvGeometry::new(1, d, d))?;
            head = Some(match head {
                None => branch,
                Some(acc) => tape.add(acc, branch)?,
            });
        }
        let logits = head.expect("at least one pyramid branch");
        tape.upsample_bilinear(logits, h, w)
    }

    /// Softmax predictions without recording gradients.
    pub fn predict<T: Real>(&self, params: &ParamSet<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = params.record(&mut tape, false);
        let x = tape.constant(images.clone());
        let logits = self.forward(&mut tape, &vars, x)?;
        let probs = tape.softmax_channels(logits)?;
        Ok(tape.value(probs).clone())
    }
}

/// Five 4x4 stride-2 convolutions with widths (64, 128, 256, 512, 1), each
/// but the last followed by leaky ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub widths: [usize; 5],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub leaky_slope: f64,
}

impl DiscriminatorConfig {
    pub fn new(in_channels: usize) -> Self {
        DiscriminatorConfig {
            in_channels,
            widths: [64, 128, 256, 512, 1],
            kernel: 4,
            stride: 2,
            padding: 1,
            leaky_slope: 0.2,
        }
    }

    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut cin = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            specs.push((format!("disc.{i}.weight"), vec![w, cin, self.kernel, self.kernel]));
            specs.push((format!("disc.{i}.bias"), vec![w]));
            cin = w;
        }
        specs
    }

    /// Closed-form parameter count: sum over layers of `(cin*k*k + 1) * cout`.
    pub fn param_count(&self) -> usize {
        let kk = self.kernel * self.kernel;
        let mut cin = self.in_channels;
        let mut total = 0;
        for &w in &self.widths {
            total += (cin * kk + 1) * w;
            cin = w;
        }
        total
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        if config.in_channels == 0 {
            return Err(Error::InvalidArgument("discriminator needs input channels".into()));
        }
        Ok(Discriminator { config })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        he_init(&self.config.param_specs(), seed, None)
    }

    pub fn check_params<T: Real>(&self, params: &ParamSet<T>) -> Result<()> {
        check_names(params, &self.config.param_specs())
    }

    /// Raw (pre-sigmoid) scores `[B,1,H/32,W/32]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<Var> {
        let cfg = &self.config;
        let [_, c, h, w] = *tape.shape(input) else {
            return Err(Error::Shape(format!("discriminator input must be 4-D, got {:?}", tape.shape(input))));
        };
        if c != cfg.in_channels {
            return Err(Error::Shape(format!("discriminator expects {} channels, got {c}", cfg.in_channels)));
        }
        if h < 32 || w < 32 {
            return Err(Error::Shape(format!("discriminator input {h}x{w} is smaller than 32")));
        }
        let g = ConvGeometry::new(cfg.stride, cfg.padding, 1);
        let mut x = input;
        for i in 0..cfg.widths.len() {
            x = tape.conv2d(x, params[2 * i], params[2 * i + 1], g)?;
            if i + 1 < cfg.widths.len() {
                x = tape.leaky_relu(x, cfg.leaky_slope);
            }
        }
        Ok(x)
    }
}
