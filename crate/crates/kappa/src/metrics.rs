//! Evaluation metrics: greedy accuracy, mIoU, selection accuracy, alignment,
//! expected calibration error and the entropy gap.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::Answer;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("no sample reaches the confidence threshold")]
    NoSelectedSamples,
    #[error("entropy gap needs both c=0 and c=1 samples")]
    SubsetEmpty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub case_id: String,
    pub consensus_pred: Answer,
    /// Consensus share of the evaluation group.
    pub confidence: f64,
    pub correct: u8,
    pub clinician_c: u8,
    pub answer_histogram: Vec<(Answer, usize)>,
    pub mean_pred_iou: f64,
    pub greedy_correct: u8,
    pub greedy_iou: f64,
}

impl SampleEval {
    /// Natural-log entropy of the answer histogram.
    pub fn entropy(&self) -> f64 {
        entropy(&self.answer_histogram)
    }
}

pub fn entropy(hist: &[(Answer, usize)]) -> f64 {
    let n: usize = hist.iter().map(|(_, c)| c).sum();
    hist.iter()
        .filter(|(_, c)| *c > 0)
        .map(|(_, c)| {
            let p = *c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn selection_accuracy(samples: &[SampleEval], delta: f64) -> Result<f64, MetricError> {
    mean(samples.iter().filter(|s| s.confidence >= delta).map(|s| s.correct as f64))
        .ok_or(MetricError::NoSelectedSamples)
}

pub fn alignment_score(samples: &[SampleEval], delta: f64) -> f64 {
    mean(samples.iter().map(|s| f64::from(u8::from(s.confidence >= delta) == s.clinician_c))).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_conf: f64,
    pub mean_acc: f64,
}

/// Equal-width bins `[lo, hi)`, the last one closed at 1.
pub fn expected_calibration_error(samples: &[SampleEval], m: usize) -> (f64, Vec<CalibrationBin>) {
    let m = m.max(1);
    let n = samples.len();
    let mut ece = 0.0;
    let mut bins = Vec::with_capacity(m);
    for b in 0..m {
        let lo = b as f64 / m as f64;
        let hi = (b + 1) as f64 / m as f64;
        let last = b + 1 == m;
        let members: Vec<&SampleEval> = samples
            .iter()
            .filter(|s| s.confidence >= lo && (s.confidence < hi || (last && s.confidence <= hi)))
            .collect();
        let count = members.len();
        let (mean_conf, mean_acc) = if count == 0 {
            (0.0, 0.0)
        } else {
            (
                members.iter().map(|s| s.confidence).sum::<f64>() / count as f64,
                members.iter().map(|s| s.correct as f64).sum::<f64>() / count as f64,
            )
        };
        if count > 0 {
            ece += count as f64 / n as f64 * (mean_acc - mean_conf).abs();
        }
        bins.push(CalibrationBin { lo, hi, count, mean_conf, mean_acc });
    }
    (ece, bins)
}

pub fn entropy_gap(samples: &[SampleEval]) -> Result<f64, MetricError> {
    let h0 = mean(samples.iter().filter(|s| s.clinician_c == 0).map(SampleEval::entropy));
    let h1 = mean(samples.iter().filter(|s| s.clinician_c == 1).map(SampleEval::entropy));
    match (h0, h1) {
        (Some(a), Some(b)) => Ok(a - b),
        _ => Err(MetricError::SubsetEmpty),
    }
}

/// `None` marks a metric that is undefined on this sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub acc: Option<f64>,
    pub miou: f64,
    pub sacc: Option<f64>,
    pub align: f64,
    pub ece: f64,
    pub entropy_gap: Option<f64>,
    pub n_selected: usize,
    pub delta: f64,
    pub bins: Vec<CalibrationBin>,
    pub mean_conf_c1: Option<f64>,
    pub mean_conf_c0: Option<f64>,
}

pub fn build_report(samples: &[SampleEval], delta: f64, m: usize) -> CalibrationReport {
    let (ece, bins) = expected_calibration_error(samples, m);
    CalibrationReport {
        n: samples.len(),
        acc: mean(samples.iter().filter(|s| s.clinician_c == 1).map(|s| s.greedy_correct as f64)),
        miou: mean(samples.iter().map(|s| s.mean_pred_iou)).unwrap_or(0.0),
        sacc: selection_accuracy(samples, delta).ok(),
        align: alignment_score(samples, delta),
        ece,
        entropy_gap: entropy_gap(samples).ok(),
        n_selected: samples.iter().filter(|s| s.confidence >= delta).count(),
        delta,
        bins,
        mean_conf_c1: mean(samples.iter().filter(|s| s.clinician_c == 1).map(|s| s.confidence)),
        mean_conf_c0: mean(samples.iter().filter(|s| s.clinician_c == 0).map(|s| s.confidence)),
    }
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

/// Aligned text table, one row per named report.
pub fn render_table(rows: &[(&str, &CalibrationReport)]) -> String {
    let bins = rows.first().map(|(_, r)| r.bins.len()).unwrap_or(0);
    let mut out = format!("# ECE over {bins} equal-width bins; entropy in nats\n");
    let header = ["arm", "Acc", "mIoU", "SAcc", "Align", "ECE", "Gap"];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|(name, r)| {
            [
                name.to_string(),
                cell(r.acc),
                cell(Some(r.miou)),
                cell(r.sacc),
                cell(Some(r.align)),
                cell(Some(r.ece)),
                cell(r.entropy_gap),
            ]
        })
        .collect();
    let width: Vec<usize> = (0..7)
        .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        let mut s = format!("{:<w$}", cells[0], w = width[0]);
        for (c, w) in cells.iter().zip(&width).skip(1) {
            s.push_str(&format!("  {c:>w$}", w = w));
        }
        s.push('\n');
        s
    };
    out.push_str(&line(header.to_vec()));
    for r in &body {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(conf: f64, correct: u8, c: u8) -> SampleEval {
        SampleEval {
            case_id: String::new(),
            consensus_pred: Answer::Value("A".into()),
            confidence: conf,
            correct,
            clinician_c: c,
            answer_histogram: vec![(Answer::Value("A".into()), 8)],
            mean_pred_iou: 0.0,
            greedy_correct: correct,
            greedy_iou: 0.0,
        }
    }

    fn with_hist(mut x: SampleEval, h: &[(&str, usize)]) -> SampleEval {
        x.answer_histogram = h.iter().map(|(a, n)| (Answer::Value(a.to_string()), *n)).collect();
        x
    }

    #[test]
    fn selection_accuracy_examples() {
        assert_eq!(selection_accuracy(&[s(1.0, 1, 1), s(0.5, 0, 1)], 0.75), Ok(1.0));
        assert_eq!(selection_accuracy(&[s(1.0, 1, 1), s(1.0, 1, 1)], 0.75), Ok(1.0));
        assert_eq!(selection_accuracy(&[s(0.5, 1, 1)], 0.75), Err(MetricError::NoSelectedSamples));
    }

    #[test]
    fn alignment_examples() {
        assert_eq!(alignment_score(&[s(1.0, 1, 1), s(0.5, 0, 0)], 0.75), 1.0);
        assert_eq!(alignment_score(&[s(1.0, 1, 0)], 0.75), 0.0);
        assert_eq!(alignment_score(&[s(0.75, 1, 1)], 0.75), 1.0);
    }

    #[test]
    fn ece_examples() {
        assert_eq!(expected_calibration_error(&vec![s(1.0, 1, 1); 3], 10).0, 0.0);
        assert_eq!(expected_calibration_error(&[s(1.0, 0, 1)], 10).0, 1.0);
        let (e, bins) = expected_calibration_error(&[s(0.75, 1, 1), s(0.75, 0, 1)], 10);
        assert!((e - 0.25).abs() < 1e-12);
        assert_eq!(bins[7].count, 2);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 2);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(s(1.0, 1, 1).entropy(), 0.0);
        let two = with_hist(s(0.5, 1, 0), &[("A", 4), ("B", 4)]);
        assert!((two.entropy() - 2f64.ln()).abs() < 1e-12);
        let gap = entropy_gap(&[two.clone(), two, s(1.0, 1, 1), s(1.0, 1, 1)]).unwrap();
        assert!((gap - 2f64.ln()).abs() < 1e-12);
        assert_eq!(entropy_gap(&[s(1.0, 1, 1)]), Err(MetricError::SubsetEmpty));
    }

    #[test]
    fn report_marks_undefined_metrics() {
        let r = build_report(&[s(0.5, 0, 1)], 0.75, 10);
        assert_eq!((r.sacc, r.entropy_gap), (None, None));
        let t = render_table(&[("x", &r)]);
        assert!(t.contains("n/a"));
        let header = t.lines().nth(1).unwrap();
        let pos = |k: &str| header.find(k).unwrap();
        assert!(pos("SAcc") < pos("Align") && pos("Align") < pos("ECE") && pos("ECE") < pos("Gap"));
    }
}
