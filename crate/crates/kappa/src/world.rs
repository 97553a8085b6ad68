//! Synthetic lesion world: labeled cases `(I, b, y, c)` with physically realized
//! ambiguity, and the crop tool executed against them.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::spatial::{self, BBox, CropView, IntensityGrid, SpatialError};
use crate::trajectory::ToolCall;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    pub n_cases: usize,
    pub attribute: String,
    pub class_names: Vec<String>,
    pub class_centers: Vec<f64>,
    pub background: f64,
    pub noise_sigma: f64,
    pub min_side: usize,
    pub max_side: usize,
    pub ambiguous_fraction: f64,
    pub band_lo: f64,
    pub band_hi: f64,
    /// Half-width of the window around a class center used for confident cases.
    pub center_jitter: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            width: 64,
            height: 64,
            n_cases: 1000,
            attribute: "echo".into(),
            class_names: vec!["Anechoic".into(), "Hypoechoic".into(), "Hyperechoic".into()],
            class_centers: vec![0.10, 0.30, 0.80],
            background: 0.55,
            noise_sigma: 0.05,
            min_side: 8,
            max_side: 24,
            ambiguous_fraction: 0.3,
            band_lo: 0.18,
            band_hi: 0.22,
            center_jitter: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    Config(String),
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::Config(m));
        if self.class_names.is_empty() || self.class_names.len() != self.class_centers.len() {
            return bad("class_names and class_centers must be non-empty and of equal length".into());
        }
        if self.class_names.iter().any(|n| n.is_empty()) {
            return bad("class names must be non-empty".into());
        }
        if self.attribute.is_empty() {
            return bad("attribute must be non-empty".into());
        }
        if self.min_side < 1 || self.min_side > self.max_side {
            return bad(format!("lesion sides [{}, {}] are not a valid range", self.min_side, self.max_side));
        }
        // strictly inside: one pixel of margin on every side
        if self.max_side + 2 > self.width.min(self.height) {
            return bad(format!("lesions up to {} px do not fit strictly inside {}x{}", self.max_side, self.width, self.height));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return bad("ambiguous_fraction must lie in [0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.center_jitter >= 0.0) {
            return bad("noise_sigma and center_jitter must be non-negative".into());
        }
        if !(0.0 <= self.band_lo && self.band_lo <= self.band_hi && self.band_hi <= 1.0) {
            return bad(format!("band [{}, {}] is not inside [0, 1]", self.band_lo, self.band_hi));
        }
        for (name, &c) in self.class_names.iter().zip(&self.class_centers) {
            let (lo, hi) = (c - self.center_jitter, c + self.center_jitter);
            if lo < 0.0 || hi > 1.0 {
                return bad(format!("window around {name} leaves [0, 1]"));
            }
            if self.band_lo <= hi && lo <= self.band_hi {
                return bad(format!(
                    "ambiguity band [{}, {}] overlaps the {name} window [{lo}, {hi}]",
                    self.band_lo, self.band_hi
                ));
            }
        }
        Ok(())
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Lowest index wins an exact tie.
    pub fn nearest_class(&self, mean: f64) -> usize {
        let mut best = 0;
        for (k, c) in self.class_centers.iter().enumerate() {
            if (mean - c).abs() < (mean - self.class_centers[best]).abs() {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub lesion_mean: f64,
    pub noise_sigma: f64,
    pub band: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCase {
    pub id: String,
    pub image: IntensityGrid,
    pub lesion: BBox,
    pub label: String,
    /// 1 when annotators agree, 0 when the case is ambiguous.
    pub confidence: u8,
    pub gen: GenParams,
}

impl LabeledCase {
    pub fn lesion_mean(&self) -> f64 {
        spatial::crop(&self.image, &self.lesion)
            .map(|c| c.pixels.mean())
            .unwrap_or(f64::NAN)
    }
}

fn lesion_patch(side: usize, mean: f64, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, sigma).expect("sigma validated");
    let mut p: Vec<f64> = (0..side * side).map(|_| mean + noise.sample(rng)).collect();
    // pin the patch mean to `mean` while staying inside [0, 1]
    for _ in 0..64 {
        let shift = mean - p.iter().sum::<f64>() / p.len() as f64;
        if shift.abs() < 1e-13 {
            break;
        }
        for v in p.iter_mut() {
            *v = (*v + shift).clamp(0.0, 1.0);
        }
    }
    p
}

pub fn generate_dataset(cfg: &WorldConfig, seed: u64) -> Result<Vec<LabeledCase>, WorldError> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "world");
    let n = cfg.n_cases;
    let n_amb = (n as f64 * cfg.ambiguous_fraction).round() as usize;
    let mut flags: Vec<u8> = (0..n).map(|i| u8::from(i >= n_amb)).collect();
    flags.shuffle(&mut rng);

    let bg_noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
    let mut cases = Vec::with_capacity(n);
    for (i, &c) in flags.iter().enumerate() {
        let side = rng.random_range(cfg.min_side..=cfg.max_side);
        let x = rng.random_range(1..cfg.width - side);
        let y = rng.random_range(1..cfg.height - side);
        let (mean, k) = if c == 1 {
            let k = rng.random_range(0..cfg.class_centers.len());
            let m = cfg.class_centers[k] + rng.random_range(-cfg.center_jitter..=cfg.center_jitter);
            (m, k)
        } else {
            let m = rng.random_range(cfg.band_lo..=cfg.band_hi);
            (m, cfg.nearest_class(m))
        };

        let mut pixels: Vec<f64> = (0..cfg.width * cfg.height)
            .map(|_| (cfg.background + bg_noise.sample(&mut rng)).clamp(0.0, 1.0))
            .collect();
        let patch = lesion_patch(side, mean, cfg.noise_sigma, &mut rng);
        for r in 0..side {
            let row = (y + r) * cfg.width + x;
            pixels[row..row + side].copy_from_slice(&patch[r * side..(r + 1) * side]);
        }

        cases.push(LabeledCase {
            id: format!("case-{i:05}"),
            image: IntensityGrid::new(cfg.width, cfg.height, pixels),
            lesion: BBox::new(x as i64, y as i64, (x + side) as i64, (y + side) as i64),
            label: cfg.class_names[k].clone(),
            confidence: c,
            gen: GenParams {
                lesion_mean: mean,
                noise_sigma: cfg.noise_sigma,
                band: (cfg.band_lo, cfg.band_hi),
            },
        });
    }
    Ok(cases)
}

pub fn execute_tool_call(case: &LabeledCase, tc: &ToolCall) -> Result<CropView, SpatialError> {
    let b = tc.bbox.normalize()?;
    spatial::crop(&case.image, &b)
}

/// Wire form of one case inside a case file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub lesion: BBox,
    pub label: String,
    pub confidence: u8,
}

impl From<&LabeledCase> for CaseRecord {
    fn from(c: &LabeledCase) -> Self {
        CaseRecord {
            id: c.id.clone(),
            width: c.image.width,
            height: c.image.height,
            pixels: c.image.pixels.clone(),
            lesion: c.lesion,
            label: c.label.clone(),
            confidence: c.confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CaseError {
    #[error("case {id}: {msg}")]
    Invalid { id: String, msg: String },
}

impl CaseRecord {
    pub fn into_case(self, cfg: &WorldConfig) -> Result<LabeledCase, CaseError> {
        let bad = |msg: &str| CaseError::Invalid { id: self.id.clone(), msg: msg.to_string() };
        if self.pixels.len() != self.width * self.height {
            return Err(bad("pixel count does not match width x height"));
        }
        if self.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(bad("pixel outside [0, 1]"));
        }
        if self.confidence > 1 {
            return Err(bad("confidence must be 0 or 1"));
        }
        let lesion = self.lesion;
        if !lesion.is_normalized()
            || lesion.x1 < 0
            || lesion.y1 < 0
            || lesion.x2 > self.width as i64
            || lesion.y2 > self.height as i64
        {
            return Err(bad("lesion box is not inside the image"));
        }
        let image = IntensityGrid::new(self.width, self.height, self.pixels);
        let lesion_mean = spatial::crop(&image, &lesion).map(|c| c.pixels.mean()).unwrap_or(f64::NAN);
        Ok(LabeledCase {
            id: self.id,
            image,
            lesion,
            label: self.label,
            confidence: self.confidence,
            gen: GenParams {
                lesion_mean,
                noise_sigma: cfg.noise_sigma,
                band: (cfg.band_lo, cfg.band_hi),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> WorldConfig {
        WorldConfig { n_cases: n, ..WorldConfig::default() }
    }

    #[test]
    fn seeded_generation_is_bit_identical() {
        let a = generate_dataset(&small(10), 7).unwrap();
        let b = generate_dataset(&small(10), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(10), 8).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn quota_is_exact() {
        let cases = generate_dataset(&small(1000), 3).unwrap();
        assert_eq!(cases.iter().filter(|c| c.confidence == 0).count(), 300);
        let none = generate_dataset(&WorldConfig { ambiguous_fraction: 0.0, ..small(50) }, 3).unwrap();
        assert!(none.iter().all(|c| c.confidence == 1));
    }

    #[test]
    fn lesion_statistics_match_labels() {
        let cfg = small(400);
        for c in generate_dataset(&cfg, 11).unwrap() {
            let m = c.lesion_mean();
            let side = c.lesion.width() as f64;
            assert!(c.lesion.x1 >= 1 && c.lesion.y1 >= 1);
            assert!(c.lesion.x2 <= 63 && c.lesion.y2 <= 63);
            assert!(c.image.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            let center = cfg.class_centers[cfg.class_index(&c.label).unwrap()];
            if c.confidence == 1 {
                assert!((m - center).abs() <= 0.02 + 3.0 * cfg.noise_sigma / side, "{m} vs {center}");
            } else {
                assert!(m >= cfg.band_lo - 1e-9 && m <= cfg.band_hi + 1e-9, "{m}");
                assert_eq!(cfg.nearest_class(m), cfg.class_index(&c.label).unwrap());
            }
        }
    }

    #[test]
    fn band_overlapping_a_center_window_is_rejected() {
        let cfg = WorldConfig { band_lo: 0.25, band_hi: 0.29, ..WorldConfig::default() };
        assert!(matches!(generate_dataset(&cfg, 1), Err(WorldError::Config(_))));
    }

    #[test]
    fn tool_call_crops() {
        let c = &generate_dataset(&small(1), 5).unwrap()[0];
        let v = execute_tool_call(c, &ToolCall { bbox: c.lesion }).unwrap();
        assert_eq!(v.region, c.lesion);
        let full = execute_tool_call(c, &ToolCall { bbox: c.image.full_box() }).unwrap();
        assert_eq!(full.pixels, c.image);
        let out = execute_tool_call(c, &ToolCall { bbox: BBox::new(100, 100, 120, 120) });
        assert_eq!(out, Err(SpatialError::FullyOutside));
    }

    #[test]
    fn case_record_round_trip() {
        let cfg = small(3);
        for c in generate_dataset(&cfg, 2).unwrap() {
            let json = serde_json::to_string(&CaseRecord::from(&c)).unwrap();
            let back: CaseRecord = serde_json::from_str(&json).unwrap();
            let d = back.into_case(&cfg).unwrap();
            assert_eq!(d.image, c.image);
            assert_eq!((d.lesion, &d.label, d.confidence), (c.lesion, &c.label, c.confidence));
        }
    }
}
