//! Two-stage linear-softmax policy: pick an anchor box, zoom, then pick a class
//! from statistics of the executed crop.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spatial::{BBox, CropView, IntensityGrid, Integral};
use crate::trajectory::{render_answer, render_tool_call, AnswerPayload, ToolCall};
use crate::world::{execute_tool_call, LabeledCase};

pub const N_FEATURES: usize = 4;
pub type Features = [f64; N_FEATURES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastMode {
    /// `|inside - ring|`
    Absolute,
    /// `inside - ring`
    Signed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub sizes: Vec<usize>,
    pub stride: usize,
    pub ring: usize,
    pub contrast: ContrastMode,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            sizes: (8..=24).step_by(2).collect(),
            stride: 2,
            ring: 2,
            contrast: ContrastMode::Absolute,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("invalid anchor config: {0}")]
    Config(String),
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(PolicyError::Config("sizes must be non-empty and positive".into()));
        }
        if self.stride == 0 {
            return Err(PolicyError::Config("stride must be positive".into()));
        }
        Ok(())
    }
}

fn starts(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..=extent - size).step_by(stride).collect();
    if *s.last().unwrap() != extent - size {
        s.push(extent - size);
    }
    s
}

/// Square sliding windows ordered by `(size, y, x)`. A final window flush with
/// the far edge is added when the stride does not land on it.
pub fn propose_anchors(dims: (usize, usize), cfg: &AnchorConfig) -> Vec<BBox> {
    let (w, h) = dims;
    let mut sizes = cfg.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let mut out = Vec::new();
    for s in sizes.into_iter().filter(|s| *s <= w.min(h)) {
        for y in starts(h, s, cfg.stride) {
            for x in starts(w, s, cfg.stride) {
                out.push(BBox::new(x as i64, y as i64, (x + s) as i64, (y + s) as i64));
            }
        }
    }
    out
}

fn ring_box(a: &BBox, ring: usize, dims: (usize, usize)) -> BBox {
    let r = ring as i64;
    BBox::new(
        (a.x1 - r).max(0),
        (a.y1 - r).max(0),
        (a.x2 + r).min(dims.0 as i64),
        (a.y2 + r).min(dims.1 as i64),
    )
}

fn phi(inside: f64, ring: f64, mode: ContrastMode) -> Features {
    let contrast = match mode {
        ContrastMode::Absolute => (inside - ring).abs(),
        ContrastMode::Signed => inside - ring,
    };
    [inside, ring, contrast, 1.0]
}

/// `[inside mean, ring mean, contrast, 1]` by direct pixel loops. The ring is
/// the clamped band of width `ring` around the box; with no ring pixels it
/// falls back to the inside mean.
pub fn anchor_features(image: &IntensityGrid, a: &BBox, cfg: &AnchorConfig) -> Features {
    let outer = ring_box(a, cfg.ring, image.dims());
    let (mut s_in, mut n_in, mut s_ring, mut n_ring) = (0.0, 0usize, 0.0, 0usize);
    for y in outer.y1..outer.y2 {
        for x in outer.x1..outer.x2 {
            let p = image.get(x as usize, y as usize);
            if x >= a.x1 && x < a.x2 && y >= a.y1 && y < a.y2 {
                s_in += p;
                n_in += 1;
            } else {
                s_ring += p;
                n_ring += 1;
            }
        }
    }
    let inside = s_in / n_in as f64;
    let ring = if n_ring > 0 { s_ring / n_ring as f64 } else { inside };
    phi(inside, ring, cfg.contrast)
}

/// `[crop mean, crop variance, crop mean - global mean, 1]`.
pub fn crop_features(view: &CropView, global_mean: f64) -> Features {
    let m = view.pixels.mean();
    [m, view.pixels.variance(), m - global_mean, 1.0]
}

/// Per-case anchor features, computed once per sampling pass.
#[derive(Debug, Clone)]
pub struct Scene {
    pub phi: Vec<Features>,
    pub global_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub loc_weights: Features,
    pub cls_weights: Vec<Features>,
}

impl PolicyParams {
    pub fn zeros(n_classes: usize) -> Self {
        PolicyParams { loc_weights: [0.0; N_FEATURES], cls_weights: vec![[0.0; N_FEATURES]; n_classes] }
    }

    pub fn len(&self) -> usize {
        N_FEATURES * (1 + self.cls_weights.len())
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat view: loc weights first, then class rows.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.loc_weights.to_vec();
        for r in &self.cls_weights {
            v.extend_from_slice(r);
        }
        v
    }

    pub fn from_slice(v: &[f64], n_classes: usize) -> Self {
        assert_eq!(v.len(), N_FEATURES * (1 + n_classes));
        let row = |i: usize| -> Features { v[i * N_FEATURES..(i + 1) * N_FEATURES].try_into().unwrap() };
        PolicyParams { loc_weights: row(0), cls_weights: (1..=n_classes).map(row).collect() }
    }

    pub fn axpy(&mut self, a: f64, g: &PolicyParams) {
        for (w, d) in self.loc_weights.iter_mut().zip(&g.loc_weights) {
            *w += a * d;
        }
        for (r, dr) in self.cls_weights.iter_mut().zip(&g.cls_weights) {
            for (w, d) in r.iter_mut().zip(dr) {
                *w += a * d;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_vec().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }
}

fn dot(a: &Features, b: &Features) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax of `logits / t`.
pub fn softmax(logits: &[f64], t: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| ((z - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn log_softmax_at(logits: &[f64], t: f64, i: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| ((z - m) / t).exp()).sum::<f64>().ln();
    (logits[i] - m) / t - lse
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn draw(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left the cumulative sum just below 1
    p.iter().rposition(|x| *x > 0.0).unwrap_or(p.len() - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSample {
    pub chosen_anchor: usize,
    pub chosen_class: usize,
    pub logprob: f64,
    pub emitted_text: String,
    pub crop_features: Features,
}

/// Anchor grid plus label vocabulary for one image size.
#[derive(Debug, Clone)]
pub struct Policy {
    pub anchors: Vec<BBox>,
    pub anchor_cfg: AnchorConfig,
    pub dims: (usize, usize),
    pub class_names: Vec<String>,
    pub attribute: String,
}

impl Policy {
    pub fn new(dims: (usize, usize), anchor_cfg: &AnchorConfig, class_names: &[String], attribute: &str) -> Self {
        Policy {
            anchors: propose_anchors(dims, anchor_cfg),
            anchor_cfg: anchor_cfg.clone(),
            dims,
            class_names: class_names.to_vec(),
            attribute: attribute.to_string(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn check_params(&self, p: &PolicyParams) -> Result<(), PolicyError> {
        if p.cls_weights.len() != self.n_classes() {
            return Err(PolicyError::Shape(format!(
                "{} class rows for {} classes",
                p.cls_weights.len(),
                self.n_classes()
            )));
        }
        if !p.is_finite() {
            return Err(PolicyError::Shape("non-finite weight".into()));
        }
        Ok(())
    }

    /// Anchor features from summed-area tables.
    pub fn scene(&self, image: &IntensityGrid) -> Scene {
        assert_eq!(image.dims(), self.dims, "image size differs from the anchor grid");
        let sums = Integral::new(image);
        let phi = self
            .anchors
            .iter()
            .map(|a| {
                let outer = ring_box(a, self.anchor_cfg.ring, self.dims);
                let s_in = sums.sum(a);
                let n_in = a.area() as f64;
                let n_ring = (outer.area() - a.area()) as f64;
                let inside = s_in / n_in;
                let ring = if n_ring > 0.0 { (sums.sum(&outer) - s_in) / n_ring } else { inside };
                phi(inside, ring, self.anchor_cfg.contrast)
            })
            .collect();
        Scene { phi, global_mean: image.mean() }
    }

    pub fn loc_logits(&self, params: &PolicyParams, scene: &Scene) -> Vec<f64> {
        scene.phi.iter().map(|f| dot(&params.loc_weights, f)).collect()
    }

    pub fn cls_logits(&self, params: &PolicyParams, psi: &Features) -> Vec<f64> {
        params.cls_weights.iter().map(|w| dot(w, psi)).collect()
    }

    pub fn crop_features_at(&self, case: &LabeledCase, scene: &Scene, anchor: usize) -> Features {
        let view = execute_tool_call(case, &ToolCall { bbox: self.anchors[anchor] })
            .expect("generated anchors lie inside the image");
        crop_features(&view, scene.global_mean)
    }

    pub fn logprob(&self, params: &PolicyParams, scene: &Scene, anchor: usize, class: usize, psi: &Features, t: f64) -> f64 {
        log_softmax_at(&self.loc_logits(params, scene), t, anchor)
            + log_softmax_at(&self.cls_logits(params, psi), t, class)
    }

    /// Samples one rollout. `t == 0` decodes greedily at both stages.
    pub fn sample_rollout(&self, params: &PolicyParams, case: &LabeledCase, scene: &Scene, t: f64, rng: &mut impl Rng) -> RolloutSample {
        let loc = self.loc_logits(params, scene);
        let anchor = if t == 0.0 { argmax(&loc) } else { draw(&softmax(&loc, t), rng) };
        let psi = self.crop_features_at(case, scene, anchor);
        let cls = self.cls_logits(params, &psi);
        let class = if t == 0.0 { argmax(&cls) } else { draw(&softmax(&cls, t), rng) };
        self.rollout_for(params, case, scene, anchor, class, t)
    }

    /// The rollout that picks `anchor` then `class`; `logprob` is 0 when `t == 0`.
    pub fn rollout_for(&self, params: &PolicyParams, case: &LabeledCase, scene: &Scene, anchor: usize, class: usize, t: f64) -> RolloutSample {
        let psi = self.crop_features_at(case, scene, anchor);
        let logprob = if t == 0.0 { 0.0 } else { self.logprob(params, scene, anchor, class, &psi, t) };
        RolloutSample {
            chosen_anchor: anchor,
            chosen_class: class,
            logprob,
            emitted_text: self.render(anchor, class, &scene.phi[anchor], &psi),
            crop_features: psi,
        }
    }

    fn render(&self, anchor: usize, class: usize, phi: &Features, psi: &Features) -> String {
        let a = &self.anchors[anchor];
        format!(
            "<think>Region {a:?} differs from its surroundings by {:.3}; zooming in.</think>{}<think>Crop mean {:.3}, variance {:.4}, offset from image mean {:+.3}.</think>{}",
            phi[2],
            render_tool_call(a),
            psi[0],
            psi[1],
            psi[2],
            render_answer(&AnswerPayload::single(&self.attribute, &self.class_names[class])),
        )
    }

    /// Gradient of `log pi(anchor, class)` with respect to all weights.
    pub fn logprob_grad(&self, params: &PolicyParams, sample: &RolloutSample, scene: &Scene, t: f64) -> PolicyParams {
        assert!(t > 0.0, "gradient needs a positive temperature");
        let pl = softmax(&self.loc_logits(params, scene), t);
        let mut g = PolicyParams::zeros(self.n_classes());
        let chosen = &scene.phi[sample.chosen_anchor];
        for i in 0..N_FEATURES {
            let expect: f64 = pl.iter().zip(&scene.phi).map(|(p, f)| p * f[i]).sum();
            g.loc_weights[i] = (chosen[i] - expect) / t;
        }
        let psi = &sample.crop_features;
        let pc = softmax(&self.cls_logits(params, psi), t);
        for (k, row) in g.cls_weights.iter_mut().enumerate() {
            let d = f64::from(u8::from(k == sample.chosen_class)) - pc[k];
            for i in 0..N_FEATURES {
                row[i] = d * psi[i] / t;
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::trajectory::parse_trajectory;
    use crate::world::{generate_dataset, WorldConfig};

    fn world() -> (WorldConfig, Vec<LabeledCase>) {
        let cfg = WorldConfig { n_cases: 4, ..WorldConfig::default() };
        let cases = generate_dataset(&cfg, 9).unwrap();
        (cfg, cases)
    }

    fn policy(cfg: &WorldConfig) -> Policy {
        Policy::new((cfg.width, cfg.height), &AnchorConfig::default(), &cfg.class_names, &cfg.attribute)
    }

    #[test]
    fn anchors_are_deterministic_and_ordered() {
        let cfg = AnchorConfig::default();
        let a = propose_anchors((64, 64), &cfg);
        assert_eq!(a, propose_anchors((64, 64), &cfg));
        assert!(a.windows(2).all(|w| (w[0].width(), w[0].y1, w[0].x1) < (w[1].width(), w[1].y1, w[1].x1)));
        assert!(a.iter().all(|b| b.x1 >= 0 && b.y1 >= 0 && b.x2 <= 64 && b.y2 <= 64));
        assert!(!propose_anchors((16, 16), &cfg).is_empty());
    }

    #[test]
    fn stride_remainder_gets_a_flush_window() {
        let cfg = AnchorConfig { sizes: vec![12], stride: 8, ..AnchorConfig::default() };
        let a = propose_anchors((30, 30), &cfg);
        let xs: Vec<i64> = a.iter().filter(|b| b.y1 == 0).map(|b| b.x1).collect();
        assert_eq!(xs, vec![0, 8, 16, 18]);
    }

    #[test]
    fn features_on_simple_images() {
        let cfg = AnchorConfig::default();
        let flat = IntensityGrid::filled(32, 32, 0.4);
        let f = anchor_features(&flat, &BBox::new(4, 4, 12, 12), &cfg);
        assert!(f[2].abs() < 1e-15);
        assert_eq!(f[3], 1.0);

        let mut img = IntensityGrid::filled(32, 32, 0.55);
        for y in 8..20 {
            for x in 8..20 {
                img.pixels[y * 32 + x] = 0.30;
            }
        }
        let signed = AnchorConfig { contrast: ContrastMode::Signed, ..cfg.clone() };
        let f = anchor_features(&img, &BBox::new(8, 8, 20, 20), &signed);
        assert!((f[2] - (0.30 - 0.55)).abs() < 1e-12);
        let f = anchor_features(&img, &BBox::new(8, 8, 20, 20), &cfg);
        assert!((f[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn integral_features_match_direct_loops() {
        let (wc, cases) = world();
        let p = policy(&wc);
        let scene = p.scene(&cases[0].image);
        for (i, a) in p.anchors.iter().enumerate().step_by(37) {
            let d = anchor_features(&cases[0].image, a, &p.anchor_cfg);
            for k in 0..N_FEATURES {
                assert!((d[k] - scene.phi[i][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let (wc, cases) = world();
        let p = policy(&wc);
        let params = PolicyParams { loc_weights: [3.0, -2.0, 9.0, 0.5], cls_weights: vec![[1.0, 2.0, -3.0, 0.1]; 3] };
        let scene = p.scene(&cases[1].image);
        let s: f64 = softmax(&p.loc_logits(&params, &scene), 0.7).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_weights_give_uniform_anchor_choice() {
        let (wc, cases) = world();
        let p = policy(&wc);
        let scene = p.scene(&cases[0].image);
        let pl = softmax(&p.loc_logits(&PolicyParams::zeros(3), &scene), 0.7);
        let k = p.anchors.len() as f64;
        assert!(pl.iter().all(|x| (x - 1.0 / k).abs() < 1e-15));
    }

    #[test]
    fn greedy_is_repeatable_and_text_is_valid() {
        let (wc, cases) = world();
        let p = policy(&wc);
        let params = PolicyParams { loc_weights: [0.0, 0.0, 5.0, 0.0], cls_weights: vec![[1.0, 0.0, -1.0, 0.0]; 3] };
        let scene = p.scene(&cases[2].image);
        let mut r = rng::stream(0, "t");
        let a = p.sample_rollout(&params, &cases[2], &scene, 0.0, &mut r);
        let b = p.sample_rollout(&params, &cases[2], &scene, 0.0, &mut r);
        assert_eq!(a, b);
        // identical class rows tie; the lowest index wins
        assert_eq!(a.chosen_class, 0);
        let t = parse_trajectory(&a.emitted_text);
        assert!(t.is_valid(), "{:?}", t.parse_status);
        assert_eq!(t.tool_call.unwrap().bbox, p.anchors[a.chosen_anchor]);
    }

    #[test]
    fn uniform_policy_gradient_in_logit_space() {
        // zero weights make the class stage uniform, so with psi = e_0 the
        // gradient on feature 0 is (e_j - 1/K) / T
        let mut img = IntensityGrid::filled(16, 16, 0.0);
        img.pixels[0] = 1.0;
        let cfg = AnchorConfig { sizes: vec![16], ..AnchorConfig::default() };
        let p = Policy::new((16, 16), &cfg, &["a".into(), "b".into()], "k");
        assert_eq!(p.anchors.len(), 1);
        let scene = p.scene(&img);
        let sample = RolloutSample {
            chosen_anchor: 0,
            chosen_class: 1,
            logprob: 0.0,
            emitted_text: String::new(),
            crop_features: [1.0, 0.0, 0.0, 0.0],
        };
        let g = p.logprob_grad(&PolicyParams::zeros(2), &sample, &scene, 0.5);
        assert_eq!(g.loc_weights, [0.0; 4]);
        assert!((g.cls_weights[0][0] - (0.0 - 0.5) / 0.5).abs() < 1e-15);
        assert!((g.cls_weights[1][0] - (1.0 - 0.5) / 0.5).abs() < 1e-15);
        // zero features give zero gradient
        assert_eq!(g.cls_weights[0][1], 0.0);
        assert_eq!(g.cls_weights[1][3], 0.0);
    }

    #[test]
    fn lower_temperature_never_raises_entropy() {
        let logits = [0.3, -1.2, 2.0, 0.0, 0.9];
        let h = |t: f64| -softmax(&logits, t).iter().map(|p| p * p.ln()).sum::<f64>();
        assert!(h(0.3) <= h(0.7) && h(0.7) <= h(1.5));
    }
}
