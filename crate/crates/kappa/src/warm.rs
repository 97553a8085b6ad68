//! Supervised initialization, the stand-in for fine-tuning on annotated
//! rationales before RL.
//!
//! The localizer maximizes the probability mass on anchors that overlap the
//! lesion well (IoU at or above a threshold, or the single best anchor). The
//! classifier maximizes the label likelihood on crops taken at those anchors.
//! Both objectives carry a small L2 penalty and are solved with L-BFGS.

use std::sync::Mutex;

use argmin::core::{CostFunction, Error as ArgminError, Executor, Gradient};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{softmax, Features, Policy, PolicyParams, N_FEATURES};
use crate::spatial::iou;
use crate::world::LabeledCase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Leading training cases used for the fit.
    pub cases: usize,
    /// Fit only on cases whose annotators agree.
    pub confident_only: bool,
    pub iou_threshold: f64,
    pub l2_loc: f64,
    pub l2_cls: f64,
    pub max_iters: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            cases: 300,
            confident_only: true,
            iou_threshold: 0.5,
            l2_loc: 1e-4,
            l2_cls: 1e-5,
            max_iters: 1000,
        }
    }
}

#[derive(Debug, Error)]
pub enum WarmError {
    #[error("no cases available for the supervised fit")]
    NoCases,
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("optimizer failed: {0}")]
    Optimizer(String),
}

struct LocProblem {
    phi: Vec<Vec<Features>>,
    good: Vec<Vec<bool>>,
    t: f64,
    l2: f64,
}

impl LocProblem {
    fn eval(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let per_case: Vec<(f64, Features)> = self
            .phi
            .par_iter()
            .zip(&self.good)
            .map(|(phi, good)| {
                let z: Vec<f64> = phi.iter().map(|f| f.iter().zip(w).map(|(a, b)| a * b).sum()).collect();
                let p = softmax(&z, self.t);
                let pg: f64 = p.iter().zip(good).filter(|(_, g)| **g).map(|(x, _)| x).sum();
                // d(-log P(good))/dw = (E_p[phi] - E_q[phi]) / T, q = p restricted to good
                let mut g = [0.0; N_FEATURES];
                for ((pi, f), gd) in p.iter().zip(phi).zip(good) {
                    let q = if *gd { pi / pg } else { 0.0 };
                    for i in 0..N_FEATURES {
                        g[i] += (pi - q) * f[i] / self.t;
                    }
                }
                (-pg.ln(), g)
            })
            .collect();
        let n = per_case.len() as f64;
        let mut cost = self.l2 * w.iter().map(|x| x * x).sum::<f64>();
        let mut grad: Vec<f64> = w.iter().map(|x| 2.0 * self.l2 * x).collect();
        for (c, g) in &per_case {
            cost += c / n;
            for i in 0..N_FEATURES {
                grad[i] += g[i] / n;
            }
        }
        (cost, grad)
    }
}

struct ClsProblem {
    psi: Vec<Features>,
    y: Vec<usize>,
    n_classes: usize,
    t: f64,
    l2: f64,
}

impl ClsProblem {
    fn eval(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let params = PolicyParams::from_slice(&[&[0.0; N_FEATURES][..], w].concat(), self.n_classes);
        let n = self.psi.len() as f64;
        let mut cost = self.l2 * w.iter().map(|x| x * x).sum::<f64>();
        let mut grad: Vec<f64> = w.iter().map(|x| 2.0 * self.l2 * x).collect();
        for (psi, &y) in self.psi.iter().zip(&self.y) {
            let z: Vec<f64> = params.cls_weights.iter().map(|r| r.iter().zip(psi).map(|(a, b)| a * b).sum()).collect();
            let p = softmax(&z, self.t);
            cost -= p[y].ln() / n;
            for k in 0..self.n_classes {
                let d = p[k] - f64::from(u8::from(k == y));
                for i in 0..N_FEATURES {
                    grad[k * N_FEATURES + i] += d * psi[i] / self.t / n;
                }
            }
        }
        (cost, grad)
    }
}

trait Objective {
    fn eval(&self, w: &[f64]) -> (f64, Vec<f64>);
}

impl Objective for LocProblem {
    fn eval(&self, w: &[f64]) -> (f64, Vec<f64>) {
        LocProblem::eval(self, w)
    }
}

impl Objective for ClsProblem {
    fn eval(&self, w: &[f64]) -> (f64, Vec<f64>) {
        ClsProblem::eval(self, w)
    }
}

/// The line search asks for cost and gradient at the same point separately;
/// both come from one pass, so the last result is kept.
struct Memo<O> {
    inner: O,
    last: Mutex<Option<(Vec<f64>, (f64, Vec<f64>))>>,
}

impl<O: Objective> Memo<O> {
    fn new(inner: O) -> Self {
        Memo { inner, last: Mutex::new(None) }
    }

    fn eval(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let mut last = self.last.lock().expect("memo lock");
        if let Some((p, r)) = last.as_ref() {
            if p.as_slice() == w {
                return r.clone();
            }
        }
        let r = self.inner.eval(w);
        *last = Some((w.to_vec(), r.clone()));
        r
    }
}

impl<O: Objective> CostFunction for Memo<O> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, w: &Vec<f64>) -> Result<f64, ArgminError> {
        Ok(self.eval(w).0)
    }
}

impl<O: Objective> Gradient for Memo<O> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, w: &Vec<f64>) -> Result<Vec<f64>, ArgminError> {
        Ok(self.eval(w).1)
    }
}

fn minimize<O: Objective>(problem: O, dim: usize, max_iters: u64) -> Result<Vec<f64>, WarmError> {
    let problem = Memo::new(problem);
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
        .with_tolerance_grad(1e-9)
        .and_then(|s| s.with_tolerance_cost(1e-14))
        .map_err(|e| WarmError::Optimizer(e.to_string()))?;
    let res = Executor::new(problem, solver)
        .configure(|s| s.param(vec![0.0; dim]).max_iters(max_iters))
        .run()
        .map_err(|e| WarmError::Optimizer(e.to_string()))?;
    res.state
        .best_param
        .ok_or_else(|| WarmError::Optimizer("no parameter returned".into()))
}

/// Indices of anchors counted as correct localizations for `case`.
pub fn good_anchors(policy: &Policy, case: &LabeledCase, threshold: f64) -> Vec<usize> {
    let ious: Vec<f64> = policy.anchors.iter().map(|a| iou(a, &case.lesion).unwrap_or(0.0)).collect();
    let best = ious.iter().cloned().fold(0.0, f64::max);
    (0..ious.len()).filter(|&i| ious[i] >= threshold || ious[i] == best).collect()
}

pub fn supervised_init(
    cases: &[LabeledCase],
    policy: &Policy,
    cfg: &InitConfig,
    temperature: f64,
) -> Result<PolicyParams, WarmError> {
    let pool: Vec<&LabeledCase> = cases
        .iter()
        .take(cfg.cases)
        .filter(|c| !cfg.confident_only || c.confidence == 1)
        .collect();
    if pool.is_empty() {
        return Err(WarmError::NoCases);
    }
    let prepared: Vec<(Vec<Features>, Vec<usize>, Vec<Features>)> = pool
        .par_iter()
        .map(|c| {
            let scene = policy.scene(&c.image);
            let good = good_anchors(policy, c, cfg.iou_threshold);
            let psi = good.iter().map(|&a| policy.crop_features_at(c, &scene, a)).collect();
            (scene.phi, good, psi)
        })
        .collect();

    let mut loc = LocProblem { phi: Vec::new(), good: Vec::new(), t: temperature, l2: cfg.l2_loc };
    let mut cls = ClsProblem { psi: Vec::new(), y: Vec::new(), n_classes: policy.n_classes(), t: temperature, l2: cfg.l2_cls };
    for (c, (phi, good, psi)) in pool.iter().zip(prepared) {
        let y = policy
            .class_names
            .iter()
            .position(|n| *n == c.label)
            .ok_or_else(|| WarmError::UnknownLabel(c.label.clone()))?;
        let mut mask = vec![false; phi.len()];
        for &a in &good {
            mask[a] = true;
        }
        loc.phi.push(phi);
        loc.good.push(mask);
        cls.y.extend(std::iter::repeat(y).take(psi.len()));
        cls.psi.extend(psi);
    }

    let wl = minimize(loc, N_FEATURES, cfg.max_iters)?;
    let wc = minimize(cls, N_FEATURES * policy.n_classes(), cfg.max_iters)?;
    Ok(PolicyParams::from_slice(&[wl, wc].concat(), policy.n_classes()))
}
