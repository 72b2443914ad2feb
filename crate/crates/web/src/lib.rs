//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Images cross the boundary as flat RGBA byte buffers so the page can put
//! them straight into `ImageData`.

use affspace::affinity::{asc_value, cosine_affinity, Connectivity, NeighborhoodSpec};
use affspace::data::{generate_scene, render_domain, Scene, ShiftConfig};
use affspace::optim::poly_lr;
use affspace::{Domain, Tensor};
use wasm_bindgen::prelude::*;

const CLASS_VIEW: [[u8; 3]; 8] = [
    [115, 84, 51],
    [140, 191, 242],
    [204, 51, 51],
    [51, 166, 64],
    [217, 204, 51],
    [140, 64, 179],
    [51, 166, 191],
    [128, 128, 128],
];

fn js_err(e: affspace::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn rgba_from_chw(img: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let d = img.data();
    let mut out = Vec::with_capacity(4 * plane);
    for q in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + q] * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

fn grey_rgba(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| {
            let b = (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8;
            [b, b, b, 255]
        })
        .collect()
}

/// Source and target renderings of one random scene plus its label image.
#[wasm_bindgen]
pub struct ScenePair {
    width: usize,
    height: usize,
    source: Vec<u8>,
    target: Vec<u8>,
    labels: Vec<u8>,
}

#[wasm_bindgen]
impl ScenePair {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn source(&self) -> Vec<u8> {
        self.source.clone()
    }

    pub fn target(&self) -> Vec<u8> {
        self.target.clone()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }
}

fn scene(seed: u32, classes: usize, size: usize) -> Result<Scene, JsValue> {
    generate_scene(seed as u64, classes, size, size).map_err(js_err)
}

/// Render scene `seed` in both domains under the given shift.
#[wasm_bindgen]
pub fn render_pair(
    seed: u32,
    classes: usize,
    size: usize,
    hue: f64,
    brightness: f64,
    sigma: f64,
    frequency: f64,
) -> Result<ScenePair, JsValue> {
    let shift = ShiftConfig {
        hue_rotation: hue,
        brightness_offset: brightness,
        noise_sigma: sigma,
        texture_frequency: frequency,
    };
    let sc = scene(seed, classes, size)?;
    let s = render_domain(&sc, Domain::Source, &shift, 2 * seed as u64).map_err(js_err)?;
    let t = render_domain(&sc, Domain::Target, &shift, 2 * seed as u64 + 1).map_err(js_err)?;
    let labels = sc
        .labels
        .values()
        .iter()
        .flat_map(|&l| {
            let [r, g, b] = CLASS_VIEW[l as usize];
            [r, g, b, 255]
        })
        .collect();
    Ok(ScenePair {
        width: size,
        height: size,
        source: rgba_from_chw(&s.image),
        target: rgba_from_chw(&t.image),
        labels,
    })
}

/// Cosine affinity map of a synthetic prediction and its cleaning loss.
#[wasm_bindgen]
pub struct AffinityView {
    rgba: Vec<u8>,
    mean_affinity: f64,
    asc: f64,
}

#[wasm_bindgen]
impl AffinityView {
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    pub fn mean_affinity(&self) -> f64 {
        self.mean_affinity
    }

    pub fn asc(&self) -> f64 {
        self.asc
    }
}

/// Build a prediction from the scene labels (`confidence` on the true class,
/// a fraction `flip` of pixels pushed to a random wrong class) and score it.
pub fn noisy_prediction(labels: &[u8], classes: usize, h: usize, w: usize, confidence: f64, flip: f64, seed: u32) -> Tensor<f64> {
    let plane = h * w;
    let mut state = seed as u64 ^ 0x9E37_79B9_7F4A_7C15;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let rest = (1.0 - confidence) / (classes - 1) as f64;
    let mut data = vec![rest; classes * plane];
    for (q, &l) in labels.iter().enumerate() {
        let mut class = l as usize;
        if next() < flip {
            class = (class + 1 + (next() * (classes - 1) as f64) as usize % (classes - 1)) % classes;
        }
        data[class * plane + q] = confidence;
    }
    Tensor::new(vec![1, classes, h, w], data).expect("finite probabilities")
}

#[wasm_bindgen]
pub fn affinity_view(
    seed: u32,
    classes: usize,
    size: usize,
    confidence: f64,
    flip: f64,
    connectivity: usize,
) -> Result<AffinityView, JsValue> {
    if !(confidence > 1.0 / classes as f64 && confidence <= 1.0) || !(0.0..=1.0).contains(&flip) {
        return Err(JsValue::from_str("confidence must exceed 1/C and flip lie in [0, 1]"));
    }
    let spec = NeighborhoodSpec::new(Connectivity::from_count(connectivity).map_err(js_err)?);
    let sc = scene(seed, classes, size)?;
    let p = noisy_prediction(sc.labels.values(), classes, size, size, confidence, flip, seed);
    let map = cosine_affinity(&p, &spec).map_err(js_err)?.remove(0);
    Ok(AffinityView {
        rgba: grey_rgba(map.values.data()),
        mean_affinity: map.mean(),
        asc: asc_value(&p, &spec).map_err(js_err)?,
    })
}

/// `points` samples of the poly learning-rate schedule over `total` steps.
#[wasm_bindgen]
pub fn poly_curve(base_lr: f64, power: f64, total: usize, points: usize) -> Result<Vec<f64>, JsValue> {
    if points < 2 || total == 0 {
        return Err(JsValue::from_str("need at least two points and a positive step count"));
    }
    (0..points)
        .map(|i| {
            let it = i * total / (points - 1);
            poly_lr(base_lr, it, total, power).map_err(js_err)
        })
        .collect()
}
