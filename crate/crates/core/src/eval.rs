//! Frame-level ranking metrics and video-level binary outcomes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::granularity::{segment_range, SEGMENTS};
use crate::model::{score_volume, SegmentScores, TeGConfig, TeGParams};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Segment `i` covers frames `⌊i·N/T⌋..⌊(i+1)·N/T⌋`.
pub fn expand_scores_to_frames(scores: &SegmentScores, num_frames: usize) -> Result<Vec<f64>> {
    let t = scores.len();
    if t == 0 {
        return Err(Error::contract("no segment scores to expand"));
    }
    if num_frames < t.max(SEGMENTS) {
        return Err(Error::contract(format!(
            "{num_frames} frames cannot hold {} segments",
            t.max(SEGMENTS)
        )));
    }
    let mut out = Vec::with_capacity(num_frames);
    for (i, &s) in scores.scores.iter().enumerate() {
        out.extend(std::iter::repeat_n(s, segment_range(i, t, num_frames).len()));
    }
    Ok(out)
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("scores contain NaN"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::contract("labels must be 0 or 1"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counted as half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC-AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    // Walk from the lowest score up, counting negatives already passed.
    let mut wins = 0.0;
    let mut neg_below = 0.0;
    for group in tie_groups(scores).iter().rev() {
        let p = group.iter().filter(|&&i| labels[i] == 1).count() as f64;
        let n = group.len() as f64 - p;
        wins += p * (neg_below + 0.5 * n);
        neg_below += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Mean over positives of the precision among items scoring at least as
/// high as that positive.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive".into()));
    }
    let mut seen = 0usize;
    let mut hits = 0usize;
    let mut total = 0.0;
    for group in tie_groups(scores) {
        let p = group.iter().filter(|&&i| labels[i] == 1).count();
        seen += group.len();
        hits += p;
        total += p as f64 * hits as f64 / seen as f64;
    }
    Ok(total / pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryOutcome {
    pub predicted_normal: usize,
    pub predicted_abnormal: usize,
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
    pub accuracy: f64,
    /// `2TP / (2TP + FP + FN)`; zero when there is nothing to find or flag.
    pub f1: f64,
    /// `f1` truncated to two decimals, the convention of printed result tables.
    pub f1_table: f64,
}

impl BinaryOutcome {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Result<Self> {
        let total = tp + fp + tn + fn_;
        if total == 0 {
            return Err(Error::contract("binary outcome over zero videos"));
        }
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        Ok(Self {
            predicted_normal: tn + fn_,
            predicted_abnormal: tp + fp,
            true_positive: tp,
            false_positive: fp,
            true_negative: tn,
            false_negative: fn_,
            accuracy: (tp + tn) as f64 / total as f64,
            f1,
            f1_table: (f1 * 100.0 + 1e-9).floor() / 100.0,
        })
    }
}

/// A video is flagged when its max segment score reaches `threshold`.
pub fn binary_confusion_metrics(max_scores: &[f64], threshold: f64, truths: &[u8]) -> Result<BinaryOutcome> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!("threshold {threshold} outside (0, 1)")));
    }
    check_inputs(max_scores, truths)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &y) in max_scores.iter().zip(truths) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    BinaryOutcome::from_counts(tp, fp, tn, fn_)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScoreTrace {
    pub video_id: String,
    pub scores: Vec<f64>,
    pub truth: Vec<u8>,
}

impl FrameScoreTrace {
    pub fn new(video_id: impl Into<String>, scores: Vec<f64>, truth: Vec<u8>) -> Result<Self> {
        let video_id = video_id.into();
        if scores.len() != truth.len() {
            return Err(Error::contract(format!(
                "trace {video_id}: {} scores for {} truth frames",
                scores.len(),
                truth.len()
            )));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::contract(format!("trace {video_id}: scores outside [0, 1]")));
        }
        Ok(Self { video_id, scores, truth })
    }
}

/// Frame-level AUC and AP over the concatenation of all traces.
pub fn frame_level_metrics(traces: &[FrameScoreTrace]) -> Result<(f64, f64)> {
    let scores: Vec<f64> = traces.iter().flat_map(|t| t.scores.iter().copied()).collect();
    let truth: Vec<u8> = traces.iter().flat_map(|t| t.truth.iter().copied()).collect();
    Ok((roc_auc(&scores, &truth)?, average_precision(&scores, &truth)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub videos: usize,
    pub predicted_normal: usize,
    pub predicted_abnormal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub all: BinaryOutcome,
    /// Abnormal videos of classes present in training, plus all normal videos.
    pub seen: Option<BinaryOutcome>,
    /// Abnormal videos of classes absent from training, plus all normal videos.
    pub unseen: Option<BinaryOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub ap: f64,
    pub threshold: f64,
    pub videos: usize,
    pub frames: usize,
    pub binary: Breakdown,
    pub per_class: BTreeMap<String, ClassCounts>,
    pub f1_convention: String,
}

/// Scores every video and returns the per-video frame traces.
pub fn score_dataset(params: &TeGParams, config: &TeGConfig, dataset: &Dataset) -> Result<Vec<(SegmentScores, FrameScoreTrace)>> {
    dataset
        .records
        .iter()
        .zip(&dataset.labels)
        .map(|(r, l)| {
            let scores = score_volume(&r.volume, params, config)?;
            let frames = expand_scores_to_frames(&scores, l.frames)?;
            let truth = l.frame_truth.clone().unwrap_or_else(|| vec![l.y; l.frames]);
            let trace = FrameScoreTrace::new(l.video_id.clone(), frames, truth)?;
            Ok((scores, trace))
        })
        .collect()
}

/// Frame-level AUC of a model on a labelled dataset.
pub fn dataset_auc(params: &TeGParams, config: &TeGConfig, dataset: &Dataset) -> Result<f64> {
    let traces: Vec<FrameScoreTrace> = score_dataset(params, config, dataset)?.into_iter().map(|(_, t)| t).collect();
    let scores: Vec<f64> = traces.iter().flat_map(|t| t.scores.iter().copied()).collect();
    let truth: Vec<u8> = traces.iter().flat_map(|t| t.truth.iter().copied()).collect();
    roc_auc(&scores, &truth)
}

pub fn evaluate(
    params: &TeGParams,
    config: &TeGConfig,
    dataset: &Dataset,
    threshold: f64,
    seen_classes: &[String],
) -> Result<(EvalReport, Vec<FrameScoreTrace>)> {
    let scored = score_dataset(params, config, dataset)?;
    let traces: Vec<FrameScoreTrace> = scored.iter().map(|(_, t)| t.clone()).collect();
    let (auc, ap) = frame_level_metrics(&traces)?;
    let maxes: Vec<f64> = scored.iter().map(|(s, _)| s.max()).collect();
    let ys: Vec<u8> = dataset.labels.iter().map(|l| l.y).collect();

    let subset = |keep: &dyn Fn(usize) -> bool| -> Result<Option<BinaryOutcome>> {
        let idx: Vec<usize> = (0..ys.len()).filter(|&i| keep(i)).collect();
        if !idx.iter().any(|&i| ys[i] == 1) {
            return Ok(None);
        }
        let s: Vec<f64> = idx.iter().map(|&i| maxes[i]).collect();
        let y: Vec<u8> = idx.iter().map(|&i| ys[i]).collect();
        binary_confusion_metrics(&s, threshold, &y).map(Some)
    };
    let is_seen = |i: usize| seen_classes.iter().any(|c| *c == dataset.labels[i].anomaly_class);
    let binary = Breakdown {
        all: binary_confusion_metrics(&maxes, threshold, &ys)?,
        seen: subset(&|i| ys[i] == 0 || is_seen(i))?,
        unseen: subset(&|i| ys[i] == 0 || !is_seen(i))?,
    };

    let mut per_class: BTreeMap<String, ClassCounts> = BTreeMap::new();
    for (l, &m) in dataset.labels.iter().zip(&maxes) {
        let c = per_class.entry(l.anomaly_class.clone()).or_insert(ClassCounts {
            videos: 0,
            predicted_normal: 0,
            predicted_abnormal: 0,
        });
        c.videos += 1;
        if m >= threshold {
            c.predicted_abnormal += 1;
        } else {
            c.predicted_normal += 1;
        }
    }

    let report = EvalReport {
        auc,
        ap,
        threshold,
        videos: dataset.len(),
        frames: traces.iter().map(|t| t.scores.len()).sum(),
        binary,
        per_class,
        f1_convention: "f1 = 2TP/(2TP+FP+FN) per video with max-segment-score >= threshold; \
                        f1_table truncates to two decimals; on an all-abnormal set precision is 1"
            .into(),
    };
    Ok((report, traces))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pairwise oracle.
    fn auc_oracle(s: &[f64], y: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1 && y[j] == 0 {
                    pairs += 1.0;
                    wins += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    /// Precision at the threshold of every positive.
    fn ap_oracle(s: &[f64], y: &[u8]) -> f64 {
        let mut total = 0.0;
        let mut pos = 0.0;
        for i in 0..s.len() {
            if y[i] == 1 {
                pos += 1.0;
                let above: Vec<usize> = (0..s.len()).filter(|&j| s[j] >= s[i]).collect();
                let hits = above.iter().filter(|&&j| y[j] == 1).count();
                total += hits as f64 / above.len() as f64;
            }
        }
        total / pos
    }

    #[test]
    fn expand_cases() {
        let s = SegmentScores {
            scores: (0..32).map(f64::from).collect(),
        };
        let f = expand_scores_to_frames(&s, 64).unwrap();
        assert_eq!(f.len(), 64);
        assert!(f.chunks(2).enumerate().all(|(i, c)| c == [i as f64, i as f64]));
        let f = expand_scores_to_frames(&s, 100).unwrap();
        assert_eq!(f.len(), 100);
        let lens: Vec<usize> = (0..32).map(|i| f.iter().filter(|&&v| v == i as f64).count()).collect();
        assert!(lens.iter().all(|&l| l == 3 || l == 4));
        assert_eq!(lens.iter().sum::<usize>(), 100);
        let c = SegmentScores { scores: vec![0.3; 32] };
        assert!(expand_scores_to_frames(&c, 77).unwrap().iter().all(|&v| v == 0.3));
        assert!(expand_scores_to_frames(&c, 31).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[0.9, 0.1, 0.2], &[1, 0, 0]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.3, 0.1, 0.7], &[1, 1, 1]).unwrap(), 1.0);
        assert!(matches!(average_precision(&[0.1], &[0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn metrics_match_oracles_exhaustively() {
        // Both metrics depend only on the label sequence along the score
        // ranking and on where ties occur. Enumerate every labelling and
        // every tie pattern, then present items in a scrambled order.
        for n in 1..=8usize {
            for mask in 0..1u32 << n {
                for ties in 0..1u32 << (n - 1) {
                    let mut level = 0.0;
                    let mut s = vec![0.0; n];
                    for i in 1..n {
                        if (ties >> (i - 1)) & 1 == 1 {
                            level += 1.0;
                        }
                        s[i] = level / n as f64;
                    }
                    let y: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
                    let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
                    let (s, y): (Vec<f64>, Vec<u8>) = if n % 5 == 0 {
                        (s, y)
                    } else {
                        (perm.iter().map(|&i| s[i]).collect(), perm.iter().map(|&i| y[i]).collect())
                    };
                    let pos = y.iter().filter(|&&v| v == 1).count();
                    if pos > 0 {
                        assert!((average_precision(&s, &y).unwrap() - ap_oracle(&s, &y)).abs() < 1e-12);
                    }
                    if pos > 0 && pos < n {
                        assert!((roc_auc(&s, &y).unwrap() - auc_oracle(&s, &y)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn auc_invariants() {
        let y = [0u8, 1, 1, 0, 1, 0, 0, 1, 1];
        let s = [0.11, 0.8, 0.3, 0.35, 0.92, 0.05, 0.6, 0.41, 0.2];
        let a = roc_auc(&s, &y).unwrap();
        let cubed: Vec<f64> = s.iter().map(|v| v * v * v + 2.0).collect();
        assert_eq!(roc_auc(&cubed, &y).unwrap(), a);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert!((roc_auc(&neg, &y).unwrap() + a - 1.0).abs() < 1e-15);
    }

    #[test]
    fn binary_table_rows() {
        let row = |n: usize, hit: usize| {
            let scores: Vec<f64> = (0..n).map(|i| if i < hit { 0.9 } else { 0.1 }).collect();
            binary_confusion_metrics(&scores, 0.5, &vec![1; n]).unwrap()
        };
        let seen = row(18, 15);
        assert_eq!((seen.predicted_abnormal, seen.predicted_normal), (15, 3));
        assert!((seen.accuracy - 15.0 / 18.0).abs() < 1e-15);
        assert!((seen.f1 - 30.0 / 33.0).abs() < 1e-15);
        assert_eq!(seen.f1_table, 0.90);
        let unseen = row(91, 72);
        assert!((unseen.f1 - 144.0 / 163.0).abs() < 1e-15);
        assert_eq!(unseen.f1_table, 0.88);
        let all = row(109, 87);
        assert!((all.f1 - 174.0 / 196.0).abs() < 1e-15);
        assert_eq!(all.f1_table, 0.88);
    }

    #[test]
    fn binary_threshold_is_inclusive_and_validated() {
        let o = binary_confusion_metrics(&[0.5, 0.49], 0.5, &[1, 0]).unwrap();
        assert_eq!((o.true_positive, o.true_negative), (1, 1));
        assert_eq!(o.accuracy, 1.0);
        assert!(binary_confusion_metrics(&[0.5], 1.0, &[1]).is_err());
        assert!(binary_confusion_metrics(&[], 0.5, &[]).is_err());
    }

    #[test]
    fn trace_validation() {
        assert!(FrameScoreTrace::new("v", vec![0.1, 0.2], vec![0]).is_err());
        assert!(FrameScoreTrace::new("v", vec![1.5], vec![0]).is_err());
    }
}
