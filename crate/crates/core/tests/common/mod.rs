//! Shared fixtures: random instances, gradient cases and brute-force
//! reference implementations of the affinity kernels.
#![allow(dead_code)]

use affspace::affinity::{
    affinity_space, asc_value, binary_kl_vector, cosine_affinity, Connectivity, NeighborhoodSpec,
};
use affspace::losses::{LabelMap, LossWeights, IGNORE};
use affspace::nets::{Discriminator, DiscriminatorConfig};
use affspace::ops::{ConvGeometry, Elementwise, Reduction};
use affspace::{finite_diff_check, Domain, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi))
}

/// Uniform values kept at least `gap` away from every point in `kinks`.
pub fn away_from(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = r.gen_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

/// Random softmax predictions `[B,C,H,W]`.
pub fn random_probs(r: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let logits = uniform(r, &[b, c, h, w], -3.0, 3.0);
    affspace::ops::softmax_channels(&logits).unwrap()
}

pub fn random_labels(r: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Vec<LabelMap> {
    (0..b)
        .map(|_| {
            let mut values: Vec<u8> = (0..h * w).map(|_| r.gen_range(0..c) as u8).collect();
            values[0] = r.gen_range(0..c) as u8;
            for v in values.iter_mut().skip(1) {
                if r.gen_bool(0.2) {
                    *v = IGNORE;
                }
            }
            LabelMap::new(h, w, values).unwrap()
        })
        .collect()
}

/// `sum(out * W)` for a fixed random `W`, turning any op into a scalar.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = uniform(&mut rng(seed ^ 0x5eed), &shape, -1.0, 1.0);
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv)?;
    Ok(tape.sum_all(prod))
}

pub fn spec_for(r: &mut ChaCha8Rng) -> NeighborhoodSpec {
    if r.gen_bool(0.5) {
        NeighborhoodSpec::four()
    } else {
        NeighborhoodSpec::eight()
    }
}

pub type GradCase = (&'static str, fn(u64) -> Result<f64>);

fn check(x: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<f64> {
    finite_diff_check(f, x, FD_STEP)
}

fn elementwise_case(seed: u64, kind: Elementwise, lo: f64, hi: f64, kinks: &[f64]) -> Result<f64> {
    let mut r = rng(seed);
    let x = away_from(&mut r, &[2, 3, 4], lo, hi, kinks, 1e-3);
    check(&x, |t, v| {
        let y = t.elementwise(v, kind)?;
        weighted_sum(t, y, seed)
    })
}

fn conv_case(seed: u64, which: usize) -> Result<f64> {
    let mut r = rng(seed);
    let k = r.gen_range(1..=3);
    let geom = ConvGeometry::new(r.gen_range(1..=2), r.gen_range(0..=2), r.gen_range(1..=2));
    let input = uniform(&mut r, &[2, 2, 6, 6], -1.0, 1.0);
    let weight = uniform(&mut r, &[3, 2, k, k], -1.0, 1.0);
    let bias = uniform(&mut r, &[3], -1.0, 1.0);
    let parts = [input, weight, bias];
    let x = parts[which].clone();
    check(&x, |t, v| {
        let vars: Vec<Var> = (0..3)
            .map(|i| if i == which { v } else { t.constant(parts[i].clone()) })
            .collect();
        let y = t.conv2d(vars[0], vars[1], vars[2], geom)?;
        weighted_sum(t, y, seed)
    })
}

fn probs_of(t: &mut Tape<f64>, logits: Var) -> Result<Var> {
    t.softmax_channels(logits)
}

/// A discriminator with deterministic small-magnitude weights.
pub fn frozen_discriminator(in_channels: usize, seed: u64) -> (Discriminator, affspace::nets::ParamSet<f64>) {
    let d = Discriminator::new(DiscriminatorConfig::new(in_channels)).unwrap();
    let p = d.init_params::<f64>(seed);
    (d, p)
}

fn adversarial_case(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let spec = spec_for(&mut r);
    let c = 2;
    let (disc, params) = frozen_discriminator(spec.len() * c, seed);
    let x = uniform(&mut r, &[1, c, 4, 4], -2.0, 2.0);
    check(&x, |t, v| {
        let logits = t.upsample_bilinear(v, 32, 32)?;
        let p = probs_of(t, logits)?;
        let a = t.build_affinity_space(p, &spec)?;
        let dv = params.record(t, false);
        let score = disc.forward(t, &dv, a)?;
        t.adversarial_loss(score)
    })
}

fn discriminator_case(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let domain = if r.gen_bool(0.5) { Domain::Source } else { Domain::Target };
    let x = uniform(&mut r, &[2, 1, 2, 2], -4.0, 4.0);
    check(&x, |t, v| t.discriminator_loss(v, domain))
}

fn asc_case(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let spec = spec_for(&mut r);
    let x = uniform(&mut r, &[1, 3, 6, 6], -2.0, 2.0);
    check(&x, |t, v| {
        let p = probs_of(t, v)?;
        t.asc_loss(p, &spec)
    })
}

fn cross_entropy_case(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let labels = random_labels(&mut r, 2, 4, 3, 3);
    let x = uniform(&mut r, &[2, 4, 3, 3], -3.0, 3.0);
    check(&x, |t, v| {
        let p = probs_of(t, v)?;
        t.seg_cross_entropy(p, &labels)
    })
}

fn asc_objective_case(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let spec = spec_for(&mut r);
    let labels = random_labels(&mut r, 1, 3, 6, 6);
    let target = uniform(&mut r, &[1, 3, 6, 6], -2.0, 2.0);
    let x = uniform(&mut r, &[1, 3, 6, 6], -2.0, 2.0);
    let weights = LossWeights {
        lambda_asc: r.gen_range(0.1..2.0),
        lambda_asa: 0.0,
    };
    let source_side = r.gen_bool(0.5);
    check(&x, |t, v| {
        let other = t.constant(target.clone());
        let (ls, lt) = if source_side { (v, other) } else { (other, v) };
        let ps = probs_of(t, ls)?;
        let pt = probs_of(t, lt)?;
        Ok(t.asc_objective(ps, &labels, pt, &weights, &spec)?.total)
    })
}

fn affinity_space_case(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let spec = spec_for(&mut r);
    let x = uniform(&mut r, &[1, 3, 4, 5], -2.0, 2.0);
    check(&x, |t, v| {
        let p = probs_of(t, v)?;
        let a = t.build_affinity_space(p, &spec)?;
        weighted_sum(t, a, seed)
    })
}

pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        ("conv2d input", |s| conv_case(s, 0)),
        ("conv2d weight", |s| conv_case(s, 1)),
        ("conv2d bias", |s| conv_case(s, 2)),
        ("relu", |s| elementwise_case(s, Elementwise::Relu, -2.0, 2.0, &[0.0])),
        ("leaky_relu", |s| elementwise_case(s, Elementwise::LeakyRelu(0.2), -2.0, 2.0, &[0.0])),
        ("log", |s| elementwise_case(s, Elementwise::Log, 0.2, 3.0, &[])),
        ("exp", |s| elementwise_case(s, Elementwise::Exp, -2.0, 2.0, &[])),
        ("neg", |s| elementwise_case(s, Elementwise::Neg, -2.0, 2.0, &[])),
        ("add_const", |s| elementwise_case(s, Elementwise::AddConst(0.7), -2.0, 2.0, &[])),
        ("mul_const", |s| elementwise_case(s, Elementwise::MulConst(-1.3), -2.0, 2.0, &[])),
        ("clamp", |s| elementwise_case(s, Elementwise::Clamp(-0.5, 0.8), -2.0, 2.0, &[-0.5, 0.8])),
        ("sigmoid", |s| elementwise_case(s, Elementwise::Sigmoid, -4.0, 4.0, &[])),
        ("add / sub / mul", |seed| {
            let mut r = rng(seed);
            let other = uniform(&mut r, &[3, 4], -2.0, 2.0);
            let x = uniform(&mut r, &[3, 4], -2.0, 2.0);
            check(&x, |t, v| {
                let o = t.constant(other.clone());
                let a = t.add(v, o)?;
                let s = t.sub(a, v)?;
                let s = t.sub(s, o)?;
                let m = t.mul(v, o)?;
                let m = t.mul(m, v)?;
                let y = t.add(m, s)?;
                weighted_sum(t, y, seed)
            })
        }),
        ("softmax_channels", |seed| {
            let x = uniform(&mut rng(seed), &[2, 4, 3, 3], -3.0, 3.0);
            check(&x, |t, v| {
                let p = t.softmax_channels(v)?;
                weighted_sum(t, p, seed)
            })
        }),
        ("upsample_bilinear", |seed| {
            let mut r = rng(seed);
            let (oh, ow) = (r.gen_range(3..9), r.gen_range(3..9));
            let x = uniform(&mut r, &[1, 2, 3, 3], -1.0, 1.0);
            check(&x, |t, v| {
                let y = t.upsample_bilinear(v, oh, ow)?;
                weighted_sum(t, y, seed)
            })
        }),
        ("reduce sum / mean", |seed| {
            let mut r = rng(seed);
            let axes: Vec<usize> = (0..3).filter(|_| r.gen_bool(0.5)).collect();
            let kind = if r.gen_bool(0.5) { Reduction::Sum } else { Reduction::Mean };
            let x = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
            check(&x, |t, v| {
                let y = t.reduce(v, kind, &axes)?;
                weighted_sum(t, y, seed)
            })
        }),
        ("asc_loss", asc_case),
        ("seg_cross_entropy", cross_entropy_case),
        ("asc_objective", asc_objective_case),
        ("build_affinity_space", affinity_space_case),
        ("adversarial_loss", adversarial_case),
        ("discriminator_loss", discriminator_case),
    ]
}

/// Run every gradient case on `instances` seeds; returns `(name, worst error)`.
pub fn run_gradient_suite(instances: u64) -> Vec<(&'static str, f64)> {
    gradient_cases()
        .into_iter()
        .map(|(name, f)| {
            let worst = (0..instances)
                .map(|s| f(1000 + s).unwrap_or_else(|e| panic!("{name}: {e}")))
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

// Brute-force references. Offsets are written out independently of the
// library: up, down, left, right, then the diagonals clockwise from
// up-left.
const OFFSETS: [(i64, i64); 8] = [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, 1), (1, -1)];

fn at(p: &Tensor<f64>, n: usize, k: usize, y: usize, x: usize) -> f64 {
    let s = p.shape();
    p.data()[((n * s[1] + k) * s[2] + y) * s[3] + x]
}

fn inside(y: usize, x: usize, dy: i64, dx: i64, h: usize, w: usize) -> Option<(usize, usize)> {
    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
    (ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64).then_some((ny as usize, nx as usize))
}

fn brute_cos(p: &Tensor<f64>, n: usize, a: (usize, usize), b: (usize, usize)) -> f64 {
    let c = p.shape()[1];
    let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
    for k in 0..c {
        let u = at(p, n, k, a.0, a.1);
        let v = at(p, n, k, b.0, b.1);
        d += u * v;
        na += u * u;
        nb += v * v;
    }
    d / (na.sqrt() * nb.sqrt() + 1e-12)
}

/// Per-pixel mean neighbour cosine, `[B][H*W]`.
pub fn brute_cosine_map(p: &Tensor<f64>, neighbours: usize) -> Vec<Vec<f64>> {
    let s = p.shape();
    let (b, h, w) = (s[0], s[2], s[3]);
    (0..b)
        .map(|n| {
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let mut total = 0.0;
                    let mut count = 0;
                    for &(dy, dx) in &OFFSETS[..neighbours] {
                        if let Some(q) = inside(y, x, dy, dx, h, w) {
                            total += brute_cos(p, n, (y, x), q);
                            count += 1;
                        }
                    }
                    out.push(if count == 0 { 1.0 } else { (total / count as f64).clamp(0.0, 1.0) });
                }
            }
            out
        })
        .collect()
}

pub fn brute_asc(p: &Tensor<f64>, neighbours: usize) -> f64 {
    let s = p.shape();
    let (b, h, w) = (s[0], s[2], s[3]);
    let mut total = 0.0;
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut count = 0;
                for &(dy, dx) in &OFFSETS[..neighbours] {
                    if let Some(q) = inside(y, x, dy, dx, h, w) {
                        acc += 1.0 - brute_cos(p, n, (y, x), q);
                        count += 1;
                    }
                }
                if count > 0 {
                    total += acc / count as f64;
                }
            }
        }
    }
    total / (b * h * w) as f64
}

pub fn brute_kl(px: &[f64], pn: &[f64]) -> Vec<f64> {
    let clamp = |v: f64| v.clamp(1e-7, 1.0 - 1e-7);
    px.iter()
        .zip(pn)
        .map(|(&a, &b)| {
            let (a, b) = (clamp(a), clamp(b));
            a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln()
        })
        .collect()
}

/// `[B, N*C, H, W]` flattened.
pub fn brute_affinity_space(p: &Tensor<f64>, neighbours: usize) -> Vec<f64> {
    let s = p.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0; b * neighbours * c * h * w];
    for n in 0..b {
        for (o, &(dy, dx)) in OFFSETS[..neighbours].iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let Some((ny, nx)) = inside(y, x, dy, dx, h, w) else { continue };
                    let px: Vec<f64> = (0..c).map(|k| at(p, n, k, y, x)).collect();
                    let pn: Vec<f64> = (0..c).map(|k| at(p, n, k, ny, nx)).collect();
                    for (k, v) in brute_kl(&px, &pn).into_iter().enumerate() {
                        out[((n * neighbours * c + o * c + k) * h + y) * w + x] = v;
                    }
                }
            }
        }
    }
    out
}

/// Worst absolute deviation of each kernel from its brute-force reference
/// over `instances` random inputs up to `[2, 5, 4, 4]`:
/// (asc_loss, cosine_affinity, build_affinity_space, binary_kl_vector).
pub fn run_oracle_suite(instances: u64) -> [f64; 4] {
    let mut worst = [0.0f64; 4];
    for seed in 0..instances {
        let mut r = rng(7000 + seed);
        let (b, c, h, w) = (r.gen_range(1..=2), r.gen_range(2..=5), r.gen_range(1..=4), r.gen_range(1..=4));
        let conn = if r.gen_bool(0.5) { Connectivity::Four } else { Connectivity::Eight };
        let spec = NeighborhoodSpec::new(conn);
        let nb = spec.len();
        let p = random_probs(&mut r, b, c, h, w);

        let asc = asc_value(&p, &spec).unwrap();
        worst[0] = worst[0].max((asc - brute_asc(&p, nb)).abs());

        let maps = cosine_affinity(&p, &spec).unwrap();
        for (m, reference) in maps.iter().zip(brute_cosine_map(&p, nb)) {
            for (a, e) in m.values.data().iter().zip(reference) {
                worst[1] = worst[1].max((a - e).abs());
            }
        }

        let a = affinity_space(&p, &spec).unwrap();
        for (x, e) in a.data().iter().zip(brute_affinity_space(&p, nb)) {
            worst[2] = worst[2].max((x - e).abs());
        }

        let px: Vec<f64> = (0..c).map(|_| r.gen_range(0.0..1.0)).collect();
        let pn: Vec<f64> = (0..c).map(|_| r.gen_range(0.0..1.0)).collect();
        for (x, e) in binary_kl_vector(&px, &pn).iter().zip(brute_kl(&px, &pn)) {
            worst[3] = worst[3].max((x - e).abs());
        }
    }
    worst
}
