//! Inference and evaluation over a manifest.

use rayon::prelude::*;

use super::manifest::{LoadedVideo, Manifest};
use crate::error::{invalid, Result};
use crate::localization::{generate_proposals, nms, MetricReport, Proposal, ProposalConfig};
use crate::model::{forward, Ablation, ModelParams};
use crate::numerics::{topk_indices, Tensor};
use crate::objectives::topk_count;

/// Model outputs needed downstream for one video.
#[derive(Debug, Clone)]
pub struct VideoPrediction {
    pub id: String,
    /// Video-level distribution over `T + 1` classes (background last).
    pub video_probs: Vec<f64>,
    pub attention: Vec<f64>,
    /// Per-snippet class distributions, `W` rows of `T + 1`.
    pub snippet_probs: Vec<Vec<f64>>,
}

impl VideoPrediction {
    /// Action classes whose video-level probability clears `gate`; the
    /// argmax action class if none does.
    pub fn predicted_labels(&self, gate: f64) -> Vec<usize> {
        let t = self.video_probs.len() - 1;
        let mut out: Vec<usize> = (0..t).filter(|&c| self.video_probs[c] > gate).collect();
        if out.is_empty() {
            let best = (0..t)
                .max_by(|&a, &b| self.video_probs[a].total_cmp(&self.video_probs[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            out.push(best);
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InferSettings<'a> {
    pub ablation: Ablation,
    pub topk_ratio: f64,
    pub proposals: &'a ProposalConfig,
    pub nms_iou: f64,
}

pub fn predict_video(params: &ModelParams, video: &LoadedVideo, s: &InferSettings<'_>) -> Result<VideoPrediction> {
    let dims = params.dims();
    let d = video.flow.shape()[0];
    if d != dims.feature_dim {
        return invalid(format!(
            "video {}: features have D = {d} but the checkpoint was trained with D = {}",
            video.id, dims.feature_dim
        ));
    }
    let out = forward(params, &video.flow, &video.rgb, s.ablation)?;
    let (w, _) = out.cas.dims2()?;
    let idx = topk_indices(&out.attention, topk_count(w, s.topk_ratio))?;
    let t1 = dims.num_classes + 1;
    let mut mean = vec![0.0; t1];
    for &i in &idx {
        for (m, z) in mean.iter_mut().zip(out.cas.row(i)) {
            *m += z / idx.len() as f64;
        }
    }
    let video_probs = Tensor::vector(mean).softmax_rows()?.into_data();
    let snippet_probs = out.cas.softmax_rows()?;
    Ok(VideoPrediction {
        id: video.id.clone(),
        video_probs,
        attention: out.attention,
        snippet_probs: (0..w).map(|i| snippet_probs.row(i).to_vec()).collect(),
    })
}

pub fn predict(params: &ModelParams, videos: &[LoadedVideo], s: &InferSettings<'_>) -> Result<Vec<VideoPrediction>> {
    videos.par_iter().map(|v| predict_video(params, v, s)).collect()
}

/// Proposals for every video after per-class NMS, sorted by descending score.
pub fn localize(predictions: &[VideoPrediction], num_classes: usize, s: &InferSettings<'_>) -> Result<Vec<Proposal>> {
    let mut all = Vec::new();
    for p in predictions {
        let props = generate_proposals(
            &p.id,
            &p.attention,
            &p.snippet_probs,
            &p.video_probs,
            num_classes,
            s.proposals,
        )?;
        all.extend(nms(&props, s.nms_iou));
    }
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(all)
}

pub fn infer(params: &ModelParams, videos: &[LoadedVideo], s: &InferSettings<'_>) -> Result<(Vec<VideoPrediction>, Vec<Proposal>)> {
    let preds = predict(params, videos, s)?;
    let props = localize(&preds, params.dims().num_classes, s)?;
    Ok((preds, props))
}

/// Share of videos whose predicted label set equals the annotated one.
pub fn video_accuracy(predictions: &[VideoPrediction], videos: &[LoadedVideo], gate: f64) -> f64 {
    if videos.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(videos)
        .filter(|(p, v)| {
            let mut truth = v.labels.clone();
            truth.sort_unstable();
            truth.dedup();
            p.predicted_labels(gate) == truth
        })
        .count();
    hits as f64 / videos.len() as f64
}

pub fn evaluate(proposals: &[Proposal], manifest: &Manifest, num_classes: usize) -> MetricReport {
    MetricReport::compute(proposals, &manifest.ground_truth(), num_classes)
}
