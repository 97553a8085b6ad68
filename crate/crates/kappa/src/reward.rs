//! Group consensus, the push-pull alignment reward, composite rollout rewards
//! and group-relative advantages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spatial;
use crate::trajectory::{format_reward, Trajectory};
use crate::world::LabeledCase;

/// An extracted answer. Malformed rollouts contribute `Invalid`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Value(String),
    Invalid,
}

impl Answer {
    pub fn value(&self) -> Option<&str> {
        match self {
            Answer::Value(v) => Some(v),
            Answer::Invalid => None,
        }
    }

    pub fn from_trajectory(t: &Trajectory, attribute: &str) -> Answer {
        match t.answer.as_ref().and_then(|a| a.get(attribute)) {
            Some(v) if t.is_valid() => Answer::Value(v.to_string()),
            _ => Answer::Invalid,
        }
    }
}

impl std::fmt::Display for Answer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Answer::Value(v) => f.write_str(v),
            Answer::Invalid => f.write_str("<invalid>"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    PerGroup,
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    Uncertainty,
    AccuracyOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub delta: f64,
    pub lambda_loc: f64,
    pub lambda_acc: f64,
    pub lambda_fmt: f64,
    pub lambda_align: f64,
    pub norm_mode: NormMode,
    pub reward_mode: RewardMode,
    pub target_attribute: String,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            group_size: 8,
            temperature: 0.7,
            delta: 0.75,
            lambda_loc: 0.1,
            lambda_acc: 0.3,
            lambda_fmt: 0.1,
            lambda_align: 0.5,
            norm_mode: NormMode::PerBatch,
            reward_mode: RewardMode::Uncertainty,
            target_attribute: "echo".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("empty rollout group")]
    EmptyGroup,
    #[error("invalid reward config: {0}")]
    Config(String),
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let bad = |m: &str| Err(RewardError::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad("delta must lie in (0, 1]");
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be positive");
        }
        let l = [self.lambda_loc, self.lambda_acc, self.lambda_fmt, self.lambda_align];
        if l.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return bad("lambda weights must be finite and non-negative");
        }
        if self.target_attribute.is_empty() {
            return bad("target_attribute must be non-empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub answers: Vec<Answer>,
    pub consensus: Answer,
    pub count: usize,
    pub kappa: f64,
    pub xi: u8,
}

impl GroupSummary {
    /// Sorted `(answer, count)` pairs.
    pub fn histogram(&self) -> Vec<(Answer, usize)> {
        histogram(&self.answers)
    }
}

pub fn histogram(answers: &[Answer]) -> Vec<(Answer, usize)> {
    let mut h = BTreeMap::new();
    for a in answers {
        *h.entry(a.clone()).or_insert(0usize) += 1;
    }
    h.into_iter().collect()
}

/// Mode of the answers; ties go to the lexicographically smallest value, and
/// `Invalid` is the consensus only when nothing else was answered.
pub fn summarize_group(answers: &[Answer], y: &str) -> Result<GroupSummary, RewardError> {
    if answers.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    let hist = histogram(answers);
    let valid = hist.iter().filter(|(a, _)| *a != Answer::Invalid);
    // histogram is in lexicographic order and ties keep the earlier entry
    let best = valid.fold(None::<(&Answer, usize)>, |acc, (a, n)| match acc {
        Some((_, m)) if m >= *n => acc,
        _ => Some((a, *n)),
    });
    let (consensus, count) = match best {
        Some((a, n)) => (a.clone(), n),
        None => (Answer::Invalid, answers.len()),
    };
    let xi = u8::from(consensus.value() == Some(y));
    Ok(GroupSummary {
        answers: answers.to_vec(),
        consensus,
        count,
        kappa: count as f64 / answers.len() as f64,
        xi,
    })
}

pub fn alignment_reward(s: &GroupSummary, c: u8, cfg: &RewardConfig) -> f64 {
    let confident = s.kappa >= cfg.delta;
    let r = if c == 1 { confident && s.xi == 1 } else { !confident };
    if r {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_loc: f64,
    pub r_acc: f64,
    pub r_fmt: f64,
    pub r_group: f64,
    pub total: f64,
    pub advantage: f64,
}

/// Totals are kept on a dyadic grid so that adding a group-constant term and
/// re-centering is exact in floating point.
pub const REWARD_QUANTUM: f64 = 1.0 / (1u64 << 40) as f64;

fn quantize(x: f64) -> i128 {
    (x / REWARD_QUANTUM).round() as i128
}

fn dequantize(q: i128) -> f64 {
    q as f64 * REWARD_QUANTUM
}

/// Sum of reward terms snapped to `REWARD_QUANTUM`.
pub fn combine(terms: &[f64]) -> f64 {
    dequantize(terms.iter().map(|t| quantize(*t)).sum())
}

/// IoU of the clamped predicted box against the lesion; 0 on any geometric failure.
pub fn localization_reward(t: &Trajectory, case: &LabeledCase) -> f64 {
    if !t.is_valid() {
        return 0.0;
    }
    let Some(tc) = t.tool_call else { return 0.0 };
    tc.bbox
        .normalize()
        .and_then(|b| spatial::clamp_to_image(&b, case.image.dims()))
        .and_then(|b| spatial::iou(&b, &case.lesion))
        .unwrap_or(0.0)
}

pub fn rollout_reward(t: &Trajectory, case: &LabeledCase, s: &GroupSummary, cfg: &RewardConfig) -> RewardBreakdown {
    let r_loc = localization_reward(t, case);
    let answer = Answer::from_trajectory(t, &cfg.target_attribute);
    let r_acc = if answer.value() == Some(case.label.as_str()) { 1.0 } else { 0.0 };
    let r_fmt = format_reward(t);
    let (r_group, total) = match cfg.reward_mode {
        RewardMode::Uncertainty => {
            let g = alignment_reward(s, case.confidence, cfg);
            let gate = if case.confidence == 1 { 1.0 } else { 0.0 };
            let total = combine(&[
                cfg.lambda_loc * r_loc,
                gate * cfg.lambda_acc * r_acc,
                cfg.lambda_fmt * r_fmt,
                cfg.lambda_align * g,
            ]);
            (g, total)
        }
        RewardMode::AccuracyOnly => (
            0.0,
            combine(&[cfg.lambda_loc * r_loc, cfg.lambda_acc * r_acc, cfg.lambda_fmt * r_fmt]),
        ),
    };
    RewardBreakdown { r_loc, r_acc, r_fmt, r_group, total, advantage: 0.0 }
}

/// `(R - mean) / (std + 1e-8)` with population std; all zero when std is 0.
///
/// Centering happens on integer multiples of `REWARD_QUANTUM`, which makes the
/// result invariant to adding the same grid value to every input.
pub fn group_advantages(totals: &[f64]) -> Vec<f64> {
    let n = totals.len();
    if n == 0 {
        return Vec::new();
    }
    if totals.iter().any(|t| !t.is_finite() || t.abs() > 1e6) {
        return float_advantages(totals);
    }
    let q: Vec<i128> = totals.iter().map(|t| quantize(*t)).collect();
    let sum: i128 = q.iter().sum();
    let nn = n as i128;
    let d: Vec<i128> = q.iter().map(|x| nn * x - sum).collect();
    if d.iter().all(|x| *x == 0) {
        return vec![0.0; n];
    }
    let scale = REWARD_QUANTUM / n as f64;
    let dev: Vec<f64> = d.iter().map(|x| *x as f64 * scale).collect();
    let std = (dev.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    dev.iter().map(|x| x / (std + 1e-8)).collect()
}

fn float_advantages(totals: &[f64]) -> Vec<f64> {
    let n = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / n;
    let std = (totals.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n).sqrt();
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; totals.len()];
    }
    totals.iter().map(|t| (t - mean) / (std + 1e-8)).collect()
}

/// Advantages for a batch of groups under the given normalization.
pub fn batch_advantages(groups: &[Vec<f64>], mode: NormMode) -> Vec<Vec<f64>> {
    match mode {
        NormMode::PerGroup => groups.iter().map(|g| group_advantages(g)).collect(),
        NormMode::PerBatch => {
            let flat: Vec<f64> = groups.iter().flatten().copied().collect();
            let adv = group_advantages(&flat);
            let mut out = Vec::with_capacity(groups.len());
            let mut at = 0;
            for g in groups {
                out.push(adv[at..at + g.len()].to_vec());
                at += g.len();
            }
            out
        }
    }
}

/// One line of the reward log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub case_id: String,
    pub rollout_idx: usize,
    pub r_loc: f64,
    pub r_acc: f64,
    pub r_fmt: f64,
    pub r_group: f64,
    pub total: f64,
    pub advantage: f64,
}

impl RewardRecord {
    pub fn new(case_id: &str, rollout_idx: usize, r: &RewardBreakdown) -> Self {
        RewardRecord {
            case_id: case_id.to_string(),
            rollout_idx,
            r_loc: r.r_loc,
            r_acc: r.r_acc,
            r_fmt: r.r_fmt,
            r_group: r.r_group,
            total: r.total,
            advantage: r.advantage,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ans(s: &str) -> Vec<Answer> {
        s.chars()
            .map(|c| if c == '_' { Answer::Invalid } else { Answer::Value(c.to_string()) })
            .collect()
    }

    #[test]
    fn summary_examples() {
        let s = summarize_group(&ans("AAAAAABB"), "A").unwrap();
        assert_eq!((s.consensus.value(), s.kappa, s.xi), (Some("A"), 0.75, 1));
        let s = summarize_group(&ans("AAAAAAAA"), "B").unwrap();
        assert_eq!((s.consensus.value(), s.kappa, s.xi), (Some("A"), 1.0, 0));
        let s = summarize_group(&ans("AABBCCDD"), "C").unwrap();
        assert_eq!((s.consensus.value(), s.kappa, s.xi), (Some("A"), 0.25, 0));
        assert_eq!(summarize_group(&[], "A"), Err(RewardError::EmptyGroup));
    }

    #[test]
    fn invalid_never_wins_against_a_value() {
        let s = summarize_group(&ans("_____AAB"), "A").unwrap();
        assert_eq!((s.consensus.value(), s.count), (Some("A"), 2));
        let s = summarize_group(&ans("__BB"), "B").unwrap();
        assert_eq!(s.consensus.value(), Some("B"));
        let s = summarize_group(&ans("____"), "A").unwrap();
        assert_eq!((s.consensus.clone(), s.kappa, s.xi), (Answer::Invalid, 1.0, 0));
    }

    #[test]
    fn alignment_truth_table() {
        let cfg = RewardConfig::default();
        let sum = |k: f64, xi: u8| GroupSummary {
            answers: vec![],
            consensus: Answer::Value("A".into()),
            count: 0,
            kappa: k,
            xi,
        };
        assert_eq!(alignment_reward(&sum(0.75, 1), 1, &cfg), 1.0);
        assert_eq!(alignment_reward(&sum(1.0, 0), 1, &cfg), 0.0);
        assert_eq!(alignment_reward(&sum(1.0, 1), 0, &cfg), 0.0);
        assert_eq!(alignment_reward(&sum(0.5, 1), 0, &cfg), 1.0);
    }

    #[test]
    fn advantage_examples() {
        let a = group_advantages(&[1., 0., 1., 0., 1., 0., 1., 0.]);
        let e = 0.5 / (0.5 + 1e-8);
        for (i, x) in a.iter().enumerate() {
            assert!((x - if i % 2 == 0 { e } else { -e }).abs() < 1e-15);
        }
        assert_eq!(group_advantages(&[0.3; 5]), vec![0.0; 5]);
        let base = group_advantages(&[1., 0., 1., 0.]);
        let shifted = group_advantages(&[1.5, 0.5, 1.5, 0.5]);
        assert_eq!(base, shifted);
    }

    #[test]
    fn combine_is_exact_for_grid_values() {
        let t = combine(&[0.1 * 0.37, 0.3, 0.1]);
        assert!((t - (0.037 + 0.3 + 0.1)).abs() < 3.0 * REWARD_QUANTUM);
        assert_eq!(combine(&[t, 0.5]) - 0.5, t);
    }
}
