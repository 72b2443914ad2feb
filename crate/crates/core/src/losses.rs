//! Segmentation cross-entropy, discriminator and adversarial losses, the two
//! combined training objectives, and confidence-thresholded pseudo-labels.

use crate::affinity::{NeighborhoodSpec, PROB_CLAMP};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;
use crate::Domain;

/// Label value excluded from supervision and evaluation.
pub const IGNORE: u8 = 255;

/// Default weight of both adaptation terms.
pub const DEFAULT_LAMBDA: f64 = 0.001;

/// Default confidence a pseudo-label must strictly exceed.
pub const DEFAULT_PSEUDO_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_asc: f64,
    pub lambda_asa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_asc: DEFAULT_LAMBDA,
            lambda_asa: DEFAULT_LAMBDA,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_asc >= 0.0 && self.lambda_asa >= 0.0) {
            return Err(Error::InvalidArgument(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// `H x W` class indices, with [`IGNORE`] marking unlabelled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(LabelMap { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    /// Every non-ignore value must be below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.values.iter().position(|&v| v != IGNORE && v as usize >= num_classes) {
            Some(i) => Err(Error::InvalidArgument(format!(
                "label {} at pixel {i} is not below {num_classes} classes",
                self.values[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn ignored(&self) -> usize {
        self.values.iter().filter(|&&v| v == IGNORE).count()
    }

    /// Labels as a `[H, W]` tensor of small integers (for `.ten` files).
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_raw(
            vec![self.height, self.width],
            self.values.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let [h, w] = *t.shape() else {
            return Err(Error::Shape(format!("label tensor must be [H,W], got {:?}", t.shape())));
        };
        let values = t
            .data()
            .iter()
            .map(|&v| {
                let f = v.as_f64();
                (f.fract() == 0.0 && (0.0..=255.0).contains(&f)).then_some(f as u8)
            })
            .collect::<Option<Vec<u8>>>()
            .ok_or_else(|| Error::format("label tensor", "values must be integers in 0..=255"))?;
        LabelMap::new(h, w, values)
    }
}

fn check_labels(shape: &[usize], labels: &[LabelMap]) -> Result<(usize, usize, usize, usize)> {
    let [b, c, h, w] = *shape else {
        return Err(Error::Shape(format!("expected [B,C,H,W] predictions, got {shape:?}")));
    };
    if labels.len() != b || labels.iter().any(|l| l.height != h || l.width != w) {
        return Err(Error::Shape(format!("{} label maps do not match predictions {shape:?}", labels.len())));
    }
    for l in labels {
        l.validate(c)?;
    }
    Ok((b, c, h, w))
}

struct CrossEntropyBackward {
    /// Flat index into P of each supervised pixel's true-class probability.
    picks: Vec<usize>,
}

impl<T: Real> Backward<T> for CrossEntropyBackward {
    fn backward(&self, parents: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let p = parents[0].data();
        let mut g = vec![T::zero(); p.len()];
        let scale = -grad[0] / T::lit(self.picks.len() as f64);
        let (lo, hi) = (T::lit(PROB_CLAMP), T::lit(1.0 - PROB_CLAMP));
        for &i in &self.picks {
            if p[i] >= lo && p[i] <= hi {
                g[i] += scale / p[i];
            }
        }
        vec![Some(g)]
    }
}

impl<T: Real> Tape<T> {
    /// Mean negative log-probability of the true class over supervised
    /// pixels of softmax predictions `p`.
    pub fn seg_cross_entropy(&mut self, p: Var, labels: &[LabelMap]) -> Result<Var> {
        let (_, c, h, w) = check_labels(self.shape(p), labels)?;
        let plane = h * w;
        let mut picks = Vec::new();
        for (n, l) in labels.iter().enumerate() {
            for (q, &v) in l.values.iter().enumerate() {
                if v != IGNORE {
                    picks.push((n * c + v as usize) * plane + q);
                }
            }
        }
        if picks.is_empty() {
            return Err(Error::EmptySupervision);
        }
        let data = self.value(p).data();
        let (lo, hi) = (T::lit(PROB_CLAMP), T::lit(1.0 - PROB_CLAMP));
        let total: T = picks.iter().map(|&i| data[i].max(lo).min(hi).ln()).sum();
        let loss = -total / T::lit(picks.len() as f64);
        Ok(self.push("seg_cross_entropy", Tensor::scalar(loss), &[p], Box::new(CrossEntropyBackward { picks })))
    }

    /// Binary cross-entropy of raw discriminator scores against the domain
    /// label (source = 1, target = 0), averaged over score locations.
    pub fn discriminator_loss(&mut self, score: Var, domain: Domain) -> Result<Var> {
        let logits = match domain {
            Domain::Source => score,
            Domain::Target => self.neg(score),
        };
        let prob = self.sigmoid(logits);
        let prob = self.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
        let log = self.log(prob)?;
        let mean = self.mean_all(log);
        Ok(self.neg(mean))
    }

    /// Source-label objective on target scores: `mean(-log sigmoid(score))`.
    pub fn adversarial_loss(&mut self, score_target: Var) -> Result<Var> {
        self.discriminator_loss(score_target, Domain::Source)
    }

    /// `seg(P_s, Y_s) + lambda_asc * asc(P_s) + lambda_asc * asc(P_t)`.
    pub fn asc_objective(
        &mut self,
        p_source: Var,
        labels: &[LabelMap],
        p_target: Var,
        weights: &LossWeights,
        spec: &NeighborhoodSpec,
    ) -> Result<AscTerms> {
        let seg = self.seg_cross_entropy(p_source, labels)?;
        let asc_source = self.asc_loss(p_source, spec)?;
        let asc_target = self.asc_loss(p_target, spec)?;
        let reg = self.add(asc_source, asc_target)?;
        let reg = self.mul_const(reg, weights.lambda_asc);
        let total = self.add(seg, reg)?;
        Ok(AscTerms {
            total,
            seg,
            asc_source,
            asc_target,
        })
    }

    /// `seg(P_s, Y_s) + lambda_asa * adv(score_t)`.
    pub fn asa_objective(
        &mut self,
        p_source: Var,
        labels: &[LabelMap],
        score_target: Var,
        weights: &LossWeights,
    ) -> Result<AsaTerms> {
        let seg = self.seg_cross_entropy(p_source, labels)?;
        let adv = self.adversarial_loss(score_target)?;
        let weighted = self.mul_const(adv, weights.lambda_asa);
        let total = self.add(seg, weighted)?;
        Ok(AsaTerms { total, seg, adv })
    }
}

/// Vars of the cleaning objective and its terms.
#[derive(Debug, Clone, Copy)]
pub struct AscTerms {
    pub total: Var,
    pub seg: Var,
    pub asc_source: Var,
    pub asc_target: Var,
}

/// Vars of the adversarial alignment objective and its terms.
#[derive(Debug, Clone, Copy)]
pub struct AsaTerms {
    pub total: Var,
    pub seg: Var,
    pub adv: Var,
}

/// Per-pixel argmax of `[B,C,H,W]` predictions; ties go to the lowest index.
pub fn argmax_labels<T: Real>(p: &Tensor<T>) -> Result<Vec<LabelMap>> {
    Ok(argmax_with_confidence(p)?
        .into_iter()
        .map(|(labels, _)| labels)
        .collect())
}

fn argmax_with_confidence<T: Real>(p: &Tensor<T>) -> Result<Vec<(LabelMap, Vec<T>)>> {
    let [b, c, h, w] = *p.shape() else {
        return Err(Error::Shape(format!("expected [B,C,H,W] predictions, got {:?}", p.shape())));
    };
    if c > IGNORE as usize {
        return Err(Error::InvalidArgument(format!("{c} classes do not fit a label map")));
    }
    let plane = h * w;
    let d = p.data();
    Ok((0..b)
        .map(|n| {
            let mut labels = vec![0u8; plane];
            let mut conf = vec![T::zero(); plane];
            for q in 0..plane {
                let mut best = 0;
                let mut best_v = d[n * c * plane + q];
                for k in 1..c {
                    let v = d[(n * c + k) * plane + q];
                    if v > best_v {
                        best = k;
                        best_v = v;
                    }
                }
                labels[q] = best as u8;
                conf[q] = best_v;
            }
            (LabelMap { height: h, width: w, values: labels }, conf)
        })
        .collect())
}

/// Argmax class where the top probability strictly exceeds `threshold`,
/// [`IGNORE`] elsewhere.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn pseudo_labels<T: Real>(p: &Tensor<T>, threshold: f64) -> Result<Vec<LabelMap>> {
    let thr = T::lit(threshold);
    Ok(argmax_with_confidence(p)?
        .into_iter()
        .map(|(mut labels, conf)| {
            for (v, &c) in labels.values.iter_mut().zip(&conf) {
                if !(c > thr) {
                    *v = IGNORE;
                }
            }
            labels
        })
        .collect())
}
