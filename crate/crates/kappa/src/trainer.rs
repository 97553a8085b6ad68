//! On-policy GRPO loop, evaluation passes and the three-arm ablation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{build_report, render_table, CalibrationReport, SampleEval};
use crate::policy::{Policy, PolicyParams, RolloutSample};
use crate::reward::{
    batch_advantages, combine, histogram, localization_reward, rollout_reward, summarize_group, Answer,
    GroupSummary, NormMode, RewardBreakdown, RewardConfig, RewardMode,
};
use crate::rng::{self, StreamKey};
use crate::trajectory::{parse_trajectory, Trajectory};
use crate::warm::{supervised_init, InitConfig, WarmError};
use crate::world::LabeledCase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Decays linearly to zero over the run.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Evaluate the monitor set every this many steps; 0 disables.
    pub eval_every: usize,
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 24.0,
            lr_schedule: LrSchedule::Linear,
            batch_size: 32,
            epochs: 10,
            max_steps: 300,
            seed: 0,
            eval_every: 0,
            max_grad_norm: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bins: usize,
    pub delta: f64,
    pub group_size: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { bins: 10, delta: 0.75, group_size: 8, temperature: 0.7, seed: 0 }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training cases")]
    NoCases,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("gradient norm {norm:.3e} exceeds the limit at step {step}")]
    Divergence { step: usize, norm: f64 },
    #[error("alignment term changed a per-group advantage at step {step}")]
    CancellationViolated { step: usize },
    #[error("case {0} has a label outside the vocabulary")]
    UnknownLabel(String),
    #[error(transparent)]
    Warm(#[from] WarmError),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::Config("learning_rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of optimization steps for `n` cases.
    pub fn total_steps(&self, n: usize) -> usize {
        let b = self.batch_size.min(n).max(1);
        (self.epochs * (n / b)).min(self.max_steps)
    }
}

/// One rollout as scored during training.
#[derive(Debug, Clone)]
pub struct ScoredRollout {
    pub sample: RolloutSample,
    pub trajectory: Trajectory,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone)]
pub struct ScoredGroup {
    pub case_id: String,
    pub confidence: u8,
    pub summary: GroupSummary,
    pub rollouts: Vec<ScoredRollout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub acc: Option<f64>,
    pub align: f64,
    pub ece: f64,
    pub entropy_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub learning_rate: f64,
    pub mean_reward: f64,
    pub mean_kappa_c1: Option<f64>,
    pub mean_kappa_c0: Option<f64>,
    pub advantage_variance: f64,
    pub grad_norm: f64,
    pub eval: Option<EvalSnapshot>,
}

pub type TrainTrace = Vec<TraceRecord>;

pub struct TrainContext<'a> {
    pub policy: &'a Policy,
    pub reward: &'a RewardConfig,
    pub train: &'a TrainConfig,
    /// Held-out cases evaluated every `eval_every` steps.
    pub monitor: Option<(&'a [LabeledCase], &'a EvalConfig)>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn score_group(
    ctx: &TrainContext<'_>,
    params: &PolicyParams,
    case: &LabeledCase,
    step: usize,
) -> (ScoredGroup, Vec<PolicyParams>) {
    let (policy, cfg) = (ctx.policy, ctx.reward);
    let scene = policy.scene(&case.image);
    let key = StreamKey::new(ctx.train.seed, "rollout").u64(step as u64).str(&case.id);
    let mut samples = Vec::with_capacity(cfg.group_size);
    let mut trajectories = Vec::with_capacity(cfg.group_size);
    let mut grads = Vec::with_capacity(cfg.group_size);
    for g in 0..cfg.group_size {
        let mut r = key.clone().u64(g as u64).rng();
        let s = policy.sample_rollout(params, case, &scene, cfg.temperature, &mut r);
        grads.push(policy.logprob_grad(params, &s, &scene, cfg.temperature));
        trajectories.push(parse_trajectory(&s.emitted_text));
        samples.push(s);
    }
    let answers: Vec<Answer> = trajectories.iter().map(|t| Answer::from_trajectory(t, &cfg.target_attribute)).collect();
    let summary = summarize_group(&answers, &case.label).expect("group size validated");
    let rollouts = samples
        .into_iter()
        .zip(trajectories)
        .map(|(sample, trajectory)| {
            let reward = rollout_reward(&trajectory, case, &summary, cfg);
            ScoredRollout { sample, trajectory, reward }
        })
        .collect();
    (
        ScoredGroup { case_id: case.id.clone(), confidence: case.confidence, summary, rollouts },
        grads,
    )
}

/// Runs GRPO from `init`. `sink` sees every scored batch after advantages are set.
pub fn train(
    cases: &[LabeledCase],
    init: PolicyParams,
    ctx: &TrainContext<'_>,
    mut sink: Option<&mut dyn FnMut(usize, &[ScoredGroup])>,
) -> Result<(PolicyParams, TrainTrace), TrainError> {
    if cases.is_empty() {
        return Err(TrainError::NoCases);
    }
    let (cfg, rcfg) = (ctx.train, ctx.reward);
    cfg.validate()?;
    rcfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    ctx.policy.check_params(&init).map_err(|e| TrainError::Config(e.to_string()))?;
    if let Some(c) = cases.iter().find(|c| !ctx.policy.class_names.contains(&c.label)) {
        return Err(TrainError::UnknownLabel(c.id.clone()));
    }

    let b = cfg.batch_size.min(cases.len());
    let per_epoch = cases.len() / b;
    let total = cfg.total_steps(cases.len());
    let mut params = init;
    let mut trace = Vec::with_capacity(total);
    let mut order: Vec<usize> = Vec::new();

    for step in 0..total {
        let pos = (step % per_epoch) * b;
        if pos == 0 {
            use rand::seq::SliceRandom;
            order = (0..cases.len()).collect();
            order.shuffle(&mut StreamKey::new(cfg.seed, "order").u64((step / per_epoch) as u64).rng());
        }
        let batch: Vec<&LabeledCase> = order[pos..pos + b].iter().map(|&i| &cases[i]).collect();
        let (mut groups, grads): (Vec<ScoredGroup>, Vec<Vec<PolicyParams>>) =
            batch.par_iter().map(|c| score_group(ctx, &params, c, step)).unzip();

        let totals: Vec<Vec<f64>> = groups.iter().map(|g| g.rollouts.iter().map(|r| r.reward.total).collect()).collect();
        let adv = batch_advantages(&totals, rcfg.norm_mode);
        if rcfg.norm_mode == NormMode::PerGroup && rcfg.reward_mode == RewardMode::Uncertainty {
            let without: Vec<Vec<f64>> = groups
                .iter()
                .map(|g| {
                    g.rollouts
                        .iter()
                        .map(|r| combine(&[r.reward.total, -rcfg.lambda_align * r.reward.r_group]))
                        .collect()
                })
                .collect();
            let adv_without = batch_advantages(&without, NormMode::PerGroup);
            let same = adv.iter().flatten().zip(adv_without.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(TrainError::CancellationViolated { step });
            }
        }

        let mut grad = PolicyParams::zeros(ctx.policy.n_classes());
        let scale = 1.0 / (b * rcfg.group_size) as f64;
        for ((g, a), gr) in groups.iter_mut().zip(&adv).zip(&grads) {
            for ((r, ai), gi) in g.rollouts.iter_mut().zip(a).zip(gr) {
                r.reward.advantage = *ai;
                grad.axpy(ai * scale, gi);
            }
        }
        let norm = grad.norm();
        if !norm.is_finite() || norm > cfg.max_grad_norm {
            return Err(TrainError::Divergence { step, norm });
        }
        let lr = match cfg.lr_schedule {
            LrSchedule::Constant => cfg.learning_rate,
            LrSchedule::Linear => cfg.learning_rate * (1.0 - step as f64 / total as f64),
        };
        params.axpy(lr, &grad);

        let all_adv: Vec<f64> = adv.iter().flatten().copied().collect();
        let adv_mean = all_adv.iter().sum::<f64>() / all_adv.len() as f64;
        let eval = match ctx.monitor {
            Some((held, ecfg)) if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 => {
                let r = evaluate(held, &params, ctx.policy, ecfg, &rcfg.target_attribute).1;
                Some(EvalSnapshot { acc: r.acc, align: r.align, ece: r.ece, entropy_gap: r.entropy_gap })
            }
            _ => None,
        };
        trace.push(TraceRecord {
            step,
            learning_rate: lr,
            mean_reward: mean(totals.iter().flatten().copied()).unwrap_or(0.0),
            mean_kappa_c1: mean(groups.iter().filter(|g| g.confidence == 1).map(|g| g.summary.kappa)),
            mean_kappa_c0: mean(groups.iter().filter(|g| g.confidence == 0).map(|g| g.summary.kappa)),
            advantage_variance: all_adv.iter().map(|a| (a - adv_mean) * (a - adv_mean)).sum::<f64>() / all_adv.len() as f64,
            grad_norm: norm,
            eval,
        });
        if let Some(s) = sink.as_mut() {
            s(step, &groups);
        }
    }
    Ok((params, trace))
}

fn evaluate_case(case: &LabeledCase, params: &PolicyParams, policy: &Policy, cfg: &EvalConfig, attribute: &str) -> SampleEval {
    let scene = policy.scene(&case.image);
    let key = StreamKey::new(cfg.seed, "eval").str(&case.id);
    let mut answers = Vec::with_capacity(cfg.group_size);
    let mut iou_sum = 0.0;
    for g in 0..cfg.group_size {
        let s = policy.sample_rollout(params, case, &scene, cfg.temperature, &mut key.clone().u64(g as u64).rng());
        let t = parse_trajectory(&s.emitted_text);
        iou_sum += localization_reward(&t, case);
        answers.push(Answer::from_trajectory(&t, attribute));
    }
    let summary = summarize_group(&answers, &case.label).expect("group size validated");
    let greedy = policy.sample_rollout(params, case, &scene, 0.0, &mut rng::stream(0, "greedy"));
    let gt = parse_trajectory(&greedy.emitted_text);
    SampleEval {
        case_id: case.id.clone(),
        consensus_pred: summary.consensus.clone(),
        confidence: summary.kappa,
        correct: summary.xi,
        clinician_c: case.confidence,
        answer_histogram: histogram(&answers),
        mean_pred_iou: iou_sum / cfg.group_size as f64,
        greedy_correct: u8::from(Answer::from_trajectory(&gt, attribute).value() == Some(case.label.as_str())),
        greedy_iou: localization_reward(&gt, case),
    }
}

/// Sampled evaluation pass plus greedy decode, reduced in case order.
pub fn evaluate(
    cases: &[LabeledCase],
    params: &PolicyParams,
    policy: &Policy,
    cfg: &EvalConfig,
    attribute: &str,
) -> (Vec<SampleEval>, CalibrationReport) {
    let samples: Vec<SampleEval> = cases.par_iter().map(|c| evaluate_case(c, params, policy, cfg, attribute)).collect();
    let report = build_report(&samples, cfg.delta, cfg.bins);
    (samples, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    NoRl,
    AccuracyOnly,
    Uncertainty,
}

impl Arm {
    pub fn label(&self) -> &'static str {
        match self {
            Arm::NoRl => "no-rl",
            Arm::AccuracyOnly => "accuracy-only",
            Arm::Uncertainty => "uncertainty",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub report: CalibrationReport,
    pub params: PolicyParams,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<ArmResult>,
}

impl AblationReport {
    pub fn arm(&self, arm: Arm) -> &ArmResult {
        self.arms.iter().find(|a| a.arm == arm).expect("all arms present")
    }

    pub fn table(&self) -> String {
        let rows: Vec<(&str, &CalibrationReport)> = self.arms.iter().map(|a| (a.arm.label(), &a.report)).collect();
        render_table(&rows)
    }

    /// Directional claims: the uncertainty arm hesitates on ambiguous cases,
    /// is better calibrated and aligned, and loses at most two points of accuracy.
    pub fn checks(&self, min_gap: f64, acc_slack: f64) -> Vec<Check> {
        let u = &self.arm(Arm::Uncertainty).report;
        let a = &self.arm(Arm::AccuracyOnly).report;
        let f = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
        vec![
            Check {
                name: "gap".into(),
                passed: u.entropy_gap.is_some_and(|g| g >= min_gap),
                detail: format!("uncertainty gap {} >= {min_gap}", f(u.entropy_gap)),
            },
            Check {
                name: "ece".into(),
                passed: u.ece < a.ece,
                detail: format!("ece {:.4} < {:.4}", u.ece, a.ece),
            },
            Check {
                name: "align".into(),
                passed: u.align > a.align,
                detail: format!("align {:.4} > {:.4}", u.align, a.align),
            },
            Check {
                name: "acc".into(),
                passed: matches!((u.acc, a.acc), (Some(x), Some(y)) if x >= y - acc_slack),
                detail: format!("acc {} >= {} - {acc_slack}", f(u.acc), f(a.acc)),
            },
        ]
    }
}

/// Shared warm start, then one training run per RL arm; every arm is scored on
/// the same held-out cases with the same evaluation seed.
pub fn ablation_suite(
    train_cases: &[LabeledCase],
    eval_cases: &[LabeledCase],
    policy: &Policy,
    reward: &RewardConfig,
    init_cfg: &InitConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
) -> Result<AblationReport, TrainError> {
    let init = supervised_init(train_cases, policy, init_cfg, reward.temperature)?;
    let attr = &reward.target_attribute;
    let mut arms = vec![ArmResult {
        arm: Arm::NoRl,
        report: evaluate(eval_cases, &init, policy, eval_cfg, attr).1,
        params: init.clone(),
        steps: 0,
    }];
    for (arm, mode) in [(Arm::AccuracyOnly, RewardMode::AccuracyOnly), (Arm::Uncertainty, RewardMode::Uncertainty)] {
        let rcfg = RewardConfig { reward_mode: mode, ..reward.clone() };
        let ctx = TrainContext { policy, reward: &rcfg, train: train_cfg, monitor: None };
        let (params, trace) = train(train_cases, init.clone(), &ctx, None)?;
        arms.push(ArmResult {
            arm,
            report: evaluate(eval_cases, &params, policy, eval_cfg, attr).1,
            params,
            steps: trace.len(),
        });
    }
    Ok(AblationReport { arms })
}
