//! Out-of-distribution detection. The exact-miss rule needs no OOD samples:
//! an instance whose code matches no class code is flagged. The threshold
//! rules flag an instance when its max-class probability is at or below a
//! threshold, tuned either for max F1 or from a small OOD sample.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bitcode::{BitCode, Codebook};
use crate::decode::DecodeIndex;
use crate::diffcore::DenseMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodRule {
    ExactMiss,
    TunedThreshold,
    ConservativeThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OodVerdict {
    pub instance_id: usize,
    pub is_ood: bool,
    pub rule: OodRule,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Flags codes that decode to no class.
#[derive(Debug, Clone)]
pub struct ExactMissDetector {
    index: DecodeIndex,
}

impl ExactMissDetector {
    pub fn new(codebook: &Codebook) -> Self {
        Self {
            index: DecodeIndex::new(codebook),
        }
    }

    pub fn from_index(index: DecodeIndex) -> Self {
        Self { index }
    }

    pub fn is_ood(&self, code: &BitCode) -> Result<bool> {
        Ok(self.index.exact_decode(code)?.is_empty())
    }

    pub fn verdict(&self, instance_id: usize, code: &BitCode) -> Result<OodVerdict> {
        Ok(OodVerdict {
            instance_id,
            is_ood: self.is_ood(code)?,
            rule: OodRule::ExactMiss,
            score: None,
        })
    }
}

/// One-off check; build an [`ExactMissDetector`] for repeated queries.
pub fn exact_miss_detect(codebook: &Codebook, code: &BitCode) -> Result<bool> {
    ExactMissDetector::new(codebook).is_ood(code)
}

/// Score threshold: `score <= threshold` means OOD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub threshold: f64,
    pub calibration_samples: usize,
}

impl ThresholdModel {
    pub fn is_ood(&self, score: f64) -> bool {
        score <= self.threshold
    }

    pub fn verdicts(&self, rule: OodRule, scores: &[f64]) -> Vec<OodVerdict> {
        scores
            .iter()
            .enumerate()
            .map(|(instance_id, &s)| OodVerdict {
                instance_id,
                is_ood: self.is_ood(s),
                rule,
                score: Some(s),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
}

impl F1Score {
    /// OOD is the positive class. Precision is 0 with no positive
    /// predictions, recall 0 with no positives present.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            true_negatives: tn,
        }
    }
}

/// Compare verdicts with `(instance_id, is_ood)` ground truth, position by position.
pub fn evaluate_f1(verdicts: &[OodVerdict], ground_truth: &[(usize, bool)]) -> Result<F1Score> {
    if verdicts.len() != ground_truth.len() {
        return Err(Error::len("verdicts/ground truth", verdicts.len(), ground_truth.len()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (v, &(id, truth)) in verdicts.iter().zip(ground_truth) {
        if v.instance_id != id {
            return Err(Error::Validation(format!(
                "verdict for instance {} aligned with ground truth for instance {id}",
                v.instance_id
            )));
        }
        match (v.is_ood, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(F1Score::from_counts(tp, fp, fn_, tn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Validation(format!("{name} scores are empty")));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("{name} score {bad}")));
    }
    Ok(())
}

/// F1 at every candidate threshold, ascending: midpoints between consecutive
/// distinct observed scores, then the largest score (everything flagged).
pub fn f1_sweep(in_scores: &[f64], ood_scores: &[f64]) -> Result<Vec<SweepPoint>> {
    check_scores("in-distribution", in_scores)?;
    check_scores("OOD", ood_scores)?;
    let mut pooled: Vec<(f64, bool)> = in_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_ood = ood_scores.len();
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pooled.len() {
        let value = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == value {
            if pooled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = if i < pooled.len() {
            value + (pooled[i].0 - value) / 2.0
        } else {
            value
        };
        let score = F1Score::from_counts(tp, fp, total_ood - tp, in_scores.len() - fp);
        points.push(SweepPoint {
            threshold,
            precision: score.precision,
            recall: score.recall,
            f1: score.f1,
        });
    }
    Ok(points)
}

/// Threshold with the best F1 on a labeled validation set; the lowest wins ties.
pub fn tune_threshold_max_f1(in_scores: &[f64], ood_scores: &[f64]) -> Result<ThresholdModel> {
    let sweep = f1_sweep(in_scores, ood_scores)?;
    let mut best = sweep[0];
    for p in &sweep[1..] {
        if p.f1 > best.f1 {
            best = *p;
        }
    }
    Ok(ThresholdModel {
        threshold: best.threshold.clamp(0.0, 1.0),
        calibration_samples: in_scores.len() + ood_scores.len(),
    })
}

/// Mean plus one population standard deviation of the OOD scores.
pub fn conservative_threshold(ood_scores: &[f64]) -> Result<ThresholdModel> {
    check_scores("OOD", ood_scores)?;
    let n = ood_scores.len() as f64;
    let mean = ood_scores.iter().sum::<f64>() / n;
    let var = ood_scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(ThresholdModel {
        threshold: (mean + var.sqrt()).clamp(0.0, 1.0),
        calibration_samples: ood_scores.len(),
    })
}

/// Largest softmax probability of each row.
pub fn max_softmax_probability(scores: &DenseMatrix) -> Vec<f64> {
    scores
        .row_iter()
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            1.0 / row.iter().map(|s| (s - m).exp()).sum::<f64>()
        })
        .collect()
}

/// Max-class probability for a code model: softmax over negated Hamming distances.
pub fn hamming_max_probability(distances: &[u32]) -> f64 {
    let m = distances.iter().copied().min().unwrap_or(0);
    1.0 / distances
        .iter()
        .map(|&d| (-(f64::from(d - m))).exp())
        .sum::<f64>()
}

pub fn verdicts_jsonl(verdicts: &[OodVerdict]) -> String {
    let mut out = String::new();
    for v in verdicts {
        out.push_str(&serde_json::to_string(v).expect("verdict serializes"));
        out.push('\n');
    }
    out
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("threshold,precision,recall,f1\n");
    for p in points {
        writeln!(out, "{},{},{},{}", p.threshold, p.precision, p.recall, p.f1).expect("string write");
    }
    out
}
