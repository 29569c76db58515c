//! Proposal generation, non-maximum suppression and mAP@tIoU.
//!
//! Everything is measured in snippets; seconds only appear at export.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Half-open snippet interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return invalid(format!("empty segment [{start}, {end})"));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Temporal intersection over union.
pub fn tiou(a: Segment, b: Segment) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// A scored, classified segment of one video. Classes are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub video: String,
    pub segment: Segment,
    pub class: usize,
    pub score: f64,
}

/// An annotated action instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video: String,
    pub segment: Segment,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalConfig {
    /// Thresholds on `A_t · P(class | snippet)`.
    pub thresholds: Vec<f64>,
    /// A class is localized only when its video-level probability exceeds this.
    pub class_gate: f64,
    /// Flank width as a fraction of the segment length.
    pub flank_ratio: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            class_gate: 0.1,
            flank_ratio: 0.25,
        }
    }
}

/// Maximal runs of `scores[t] >= threshold`.
pub fn threshold_runs(scores: &[f64], threshold: f64) -> Vec<Segment> {
    let mut runs = Vec::new();
    let mut start = None;
    for (t, &s) in scores.iter().enumerate() {
        match (s >= threshold, start) {
            (true, None) => start = Some(t),
            (false, Some(s0)) => {
                runs.push(Segment { start: s0, end: t });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s0) = start {
        runs.push(Segment { start: s0, end: scores.len() });
    }
    runs
}

/// Mean score inside the segment minus the mean over its two flanks.
pub fn outer_inner_contrast(scores: &[f64], seg: Segment, flank_ratio: f64) -> f64 {
    let mean = |s: &[f64]| {
        if s.is_empty() {
            0.0
        } else {
            s.iter().sum::<f64>() / s.len() as f64
        }
    };
    let inner = mean(&scores[seg.start..seg.end]);
    let flank = ((seg.len() as f64 * flank_ratio).round() as usize).max(1);
    let left = seg.start.saturating_sub(flank);
    let right = (seg.end + flank).min(scores.len());
    let outer: Vec<f64> = scores[left..seg.start]
        .iter()
        .chain(&scores[seg.end..right])
        .copied()
        .collect();
    inner - mean(&outer)
}

/// Multi-threshold proposals for one video.
///
/// `attention` has length `W`; `class_probs` is `W` rows of per-snippet class
/// probabilities (background last); `video_probs` is the aggregated video
/// prediction over the same classes.
pub fn generate_proposals(
    video: &str,
    attention: &[f64],
    class_probs: &[Vec<f64>],
    video_probs: &[f64],
    num_classes: usize,
    config: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    if attention.is_empty() {
        return invalid("cannot localize in an empty attention sequence");
    }
    if class_probs.len() != attention.len() {
        return invalid(format!(
            "attention covers {} snippets but class scores cover {}",
            attention.len(),
            class_probs.len()
        ));
    }
    if let Some(th) = config.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return invalid(format!("threshold {th} outside (0, 1)"));
    }
    let mut out = Vec::new();
    for class in (0..num_classes).filter(|&c| video_probs[c] > config.class_gate) {
        let scores: Vec<f64> = attention
            .iter()
            .zip(class_probs)
            .map(|(a, p)| a * p[class])
            .collect();
        for &th in &config.thresholds {
            for seg in threshold_runs(&scores, th) {
                out.push(Proposal {
                    video: video.to_string(),
                    segment: seg,
                    class,
                    score: outer_inner_contrast(&scores, seg, config.flank_ratio)
                        + video_probs[class],
                });
            }
        }
    }
    Ok(out)
}

fn by_score_desc(a: &Proposal, b: &Proposal) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score)
}

/// Greedy hard NMS within each (video, class); result sorted by score.
pub fn nms(proposals: &[Proposal], iou_threshold: f64) -> Vec<Proposal> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(by_score_desc);
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        let suppressed = kept.iter().any(|k| {
            k.video == p.video && k.class == p.class && tiou(k.segment, p.segment) >= iou_threshold
        });
        if !suppressed {
            kept.push(p);
        }
    }
    kept
}

/// All-point interpolated AP for one class; `None` when the class has no
/// ground truth.
pub fn average_precision(
    proposals: &[Proposal],
    truth: &[GroundTruth],
    class: usize,
    iou_threshold: f64,
) -> Option<f64> {
    let gts: Vec<&GroundTruth> = truth.iter().filter(|g| g.class == class).collect();
    if gts.is_empty() {
        return None;
    }
    let mut preds: Vec<&Proposal> = proposals.iter().filter(|p| p.class == class).collect();
    preds.sort_by(|a, b| by_score_desc(a, b));

    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(preds.len());
    let mut is_tp = Vec::with_capacity(preds.len());
    for (rank, p) in preds.iter().enumerate() {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, gt)| !matched[*g] && gt.video == p.video)
            .map(|(g, gt)| (g, tiou(p.segment, gt.segment)))
            .filter(|(_, o)| *o >= iou_threshold)
            .fold(None, |acc: Option<(usize, f64)>, (g, o)| match acc {
                Some((_, bo)) if bo >= o => acc,
                _ => Some((g, o)),
            });
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
        }
        is_tp.push(best.is_some());
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    // monotone envelope from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sum: f64 = precision
        .iter()
        .zip(&is_tp)
        .filter(|(_, hit)| **hit)
        .fold(0.0, |acc, (p, _)| acc + p);
    Some(sum / gts.len() as f64)
}

/// Mean AP over classes that have ground truth; 0 if none do.
pub fn mean_average_precision(
    proposals: &[Proposal],
    truth: &[GroundTruth],
    num_classes: usize,
    iou_threshold: f64,
) -> f64 {
    let aps: Vec<f64> = (0..num_classes)
        .filter_map(|c| average_precision(proposals, truth, c, iou_threshold))
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().fold(0.0, |a, b| a + b) / aps.len() as f64
    }
}

/// The t-IoU thresholds reported by [`MetricReport`].
pub const REPORT_THRESHOLDS: [f64; 7] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];

/// mAP at each reported threshold plus the three conventional averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map: Vec<(f64, f64)>,
}

impl MetricReport {
    pub fn compute(proposals: &[Proposal], truth: &[GroundTruth], num_classes: usize) -> Self {
        let map = REPORT_THRESHOLDS
            .iter()
            .map(|&th| (th, mean_average_precision(proposals, truth, num_classes, th)))
            .collect();
        Self { map }
    }

    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.map
            .iter()
            .find(|(th, _)| (th - threshold).abs() < 1e-9)
            .map(|(_, v)| *v)
    }

    /// Mean mAP over thresholds in `[lo, hi]`.
    pub fn average(&self, lo: f64, hi: f64) -> f64 {
        let vals: Vec<f64> = self
            .map
            .iter()
            .filter(|(th, _)| *th >= lo - 1e-9 && *th <= hi + 1e-9)
            .map(|(_, v)| *v)
            .collect();
        vals.iter().fold(0.0, |a, b| a + b) / vals.len().max(1) as f64
    }

    /// Plain-text table in percent: one column per threshold, then the
    /// AVG(0.1-0.5), AVG(0.3-0.7) and AVG(0.1-0.7) columns.
    pub fn to_table(&self) -> String {
        let mut head = String::from("mAP@tIoU(%)");
        let mut row = String::from("           ");
        for (th, v) in &self.map {
            head.push_str(&format!(" | {th:>5.1}"));
            row.push_str(&format!(" | {:>5.1}", v * 100.0));
        }
        for (lo, hi) in [(0.1, 0.5), (0.3, 0.7), (0.1, 0.7)] {
            head.push_str(&format!(" | AVG({lo:.1}-{hi:.1})"));
            row.push_str(&format!(" | {:>12.1}", self.average(lo, hi) * 100.0));
        }
        format!("{head}\n{row}\n")
    }
}
