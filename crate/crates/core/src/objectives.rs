//! Training objectives: top-k video aggregation with cross-entropy, the
//! uncertainty-scheduled complementarity loss between attention and the
//! background probability, and the uncertainty-weighted Dirichlet loss on
//! snippet evidence.

use crate::error::{invalid, Result};
use crate::model::{Ablation, GraphOutput};
use crate::numerics::{topk_indices, Tape, Tensor, Var};

/// Floor inside logarithms and evidence ratios.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the complementarity loss.
    pub lambda1: f64,
    /// Weight of the evidential loss.
    pub lambda2: f64,
    /// Amplitude of the uncertainty schedule.
    pub delta: f64,
    /// Total epochs `H` of the schedule.
    pub total_epochs: usize,
    /// Fraction of snippets used by top-k aggregation.
    pub topk_ratio: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.8,
            lambda2: 1.0,
            delta: 0.7,
            total_epochs: 1,
            topk_ratio: 0.125,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return invalid("loss weights must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return invalid(format!("schedule amplitude {} outside [0, 1]", self.delta));
        }
        if self.total_epochs == 0 {
            return invalid("total epochs must be at least 1");
        }
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return invalid(format!("top-k ratio {} outside (0, 1]", self.topk_ratio));
        }
        Ok(())
    }
}

/// `L = max(1, floor(W · ratio))`, never more than `W`.
pub fn topk_count(snippets: usize, ratio: f64) -> usize {
    ((snippets as f64 * ratio).floor() as usize).clamp(1, snippets.max(1))
}

/// Mean CAS row over the `L` snippets with the highest attention, softmaxed
/// into a video-level distribution over `T + 1` classes.
pub fn topk_aggregate(tape: &mut Tape, cas: Var, attention: &[f64], l: usize) -> Result<Var> {
    let (w, _) = tape.value(cas).dims2()?;
    if attention.len() != w {
        return invalid(format!("attention has {} entries for {w} snippets", attention.len()));
    }
    if l == 0 || l > w {
        return invalid(format!("top-k size {l} outside 1..={w}"));
    }
    let idx = topk_indices(attention, l)?;
    let rows = tape.gather_rows(cas, &idx)?;
    let mean = tape.mean_rows(rows)?;
    tape.softmax_rows(mean)
}

/// Normalized multi-hot target over `T + 1` classes with the background at 0.
pub fn video_target(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return invalid("video has no labels");
    }
    let mut p = vec![0.0; num_classes + 1];
    for &c in labels {
        if c >= num_classes {
            return invalid(format!("label {c} outside 0..{num_classes}"));
        }
        p[c] = 1.0;
    }
    let n: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= n);
    Ok(p)
}

/// Cross-entropy `-Σ p_j ln max(p̂_j, 1e-12)`.
pub fn classification_loss(tape: &mut Tape, predicted: Var, target: &[f64]) -> Result<Var> {
    if tape.shape(predicted) != [target.len()] {
        return invalid(format!(
            "prediction shape {:?} vs target length {}",
            tape.shape(predicted),
            target.len()
        ));
    }
    let logp = tape.log(predicted, LOG_FLOOR)?;
    let p = tape.leaf(Tensor::vector(target.to_vec()))?;
    let prod = tape.mul(logp, p)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0)
}

/// `Δ · tanh(σ(h) φ(rank)) + 1` with `σ(h) = 2h/H − 1` and `φ(r) = 2r/W − 1`.
pub fn schedule_weight(epoch: usize, total_epochs: usize, rank: usize, snippets: usize, delta: f64) -> Result<f64> {
    if epoch == 0 || epoch > total_epochs {
        return invalid(format!("epoch {epoch} outside 1..={total_epochs}"));
    }
    if rank == 0 || rank > snippets {
        return invalid(format!("rank {rank} outside 1..={snippets}"));
    }
    let sigma = 2.0 * epoch as f64 / total_epochs as f64 - 1.0;
    let phi = 2.0 * rank as f64 / snippets as f64 - 1.0;
    Ok(delta * (sigma * phi).tanh() + 1.0)
}

/// 1-based position of each snippet when uncertainties are sorted in
/// descending order; ties keep the original order.
pub fn uncertainty_ranks(thetas: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..thetas.len()).collect();
    order.sort_by(|&a, &b| thetas[b].total_cmp(&thetas[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; thetas.len()];
    for (pos, &t) in order.iter().enumerate() {
        ranks[t] = pos + 1;
    }
    ranks
}

/// Per-snippet schedule weights for the complementarity loss.
pub fn schedule_weights(thetas: &[f64], epoch: usize, total_epochs: usize, delta: f64) -> Result<Vec<f64>> {
    let w = thetas.len();
    uncertainty_ranks(thetas)
        .into_iter()
        .map(|r| schedule_weight(epoch, total_epochs, r, w, delta))
        .collect()
}

/// `Σ_t weight_t · |1 − A_t − P(background | t)|`.
pub fn uef_loss(tape: &mut Tape, attention: Var, cas: Var, weights: &[f64]) -> Result<Var> {
    let (w, cols) = tape.value(cas).dims2()?;
    if tape.shape(attention) != [w] || weights.len() != w {
        return invalid(format!(
            "complementarity loss over {w} snippets got attention {:?} and {} weights",
            tape.shape(attention),
            weights.len()
        ));
    }
    let probs = tape.softmax_rows(cas)?;
    let bg = tape.slice_cols(probs, cols - 1, cols)?;
    let bg = tape.reshape(bg, vec![w])?;
    let sum = tape.add(attention, bg)?;
    let gap = tape.affine(sum, -1.0, 1.0)?;
    let gap = tape.abs(gap)?;
    let wv = tape.leaf(Tensor::vector(weights.to_vec()))?;
    let weighted = tape.mul(gap, wv)?;
    tape.sum(weighted)
}

/// Uncertainty-weighted evidential loss
/// `Σ_i (1 − U_i) Σ_j w_ij (ln S_i − ln α_ij)` with `w_ij ∝ p_j / e_ij`.
///
/// `target` is the per-snippet label over the `T` action classes, shared by
/// every snippet of the video.
pub fn hge_loss(tape: &mut Tape, evidence: Var, target: &[f64]) -> Result<Var> {
    let (w, t) = tape.value(evidence).dims2()?;
    if target.len() != t {
        return invalid(format!("target has {} classes, evidence has {t}", target.len()));
    }
    if target.iter().any(|p| *p < 0.0) || target.iter().sum::<f64>() <= 0.0 {
        return invalid("evidential target must be non-negative with positive mass");
    }
    let floored = tape.clamp_min(evidence, LOG_FLOOR)?;
    let p = tape.leaf(Tensor::vector(target.to_vec()))?;
    let p = tape.broadcast_cols(p, w)?;
    let ratio = tape.div(p, floored)?;
    let ratio_sum = tape.sum_cols(ratio)?;
    let ratio_sum = tape.broadcast_rows(ratio_sum, t)?;
    let weights = tape.div(ratio, ratio_sum)?;

    let alpha = tape.affine(evidence, 1.0, 1.0)?;
    let strength = tape.sum_cols(alpha)?;
    let log_s = tape.log(strength, LOG_FLOOR)?;
    let log_s = tape.broadcast_rows(log_s, t)?;
    let log_a = tape.log(alpha, LOG_FLOOR)?;
    let gap = tape.sub(log_s, log_a)?;
    let per_class = tape.mul(weights, gap)?;
    let per_snippet = tape.sum_cols(per_class)?;

    let classes = tape.leaf(Tensor::filled(&[w], t as f64))?;
    let uncertainty = tape.div(classes, strength)?;
    let certainty = tape.affine(uncertainty, -1.0, 1.0)?;
    let weighted = tape.mul(certainty, per_snippet)?;
    tape.sum(weighted)
}

/// Component losses of one objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub cla: f64,
    pub uef: f64,
    pub hge: f64,
}

impl LossParts {
    pub fn total(&self, cfg: &LossConfig) -> f64 {
        self.cla + cfg.lambda1 * self.uef + cfg.lambda2 * self.hge
    }
}

/// Tape handles for the loss of one video.
#[derive(Debug, Clone, Copy)]
pub struct VideoLoss {
    pub total: Var,
    pub cla: Var,
    pub uef: Var,
    pub hge: Option<Var>,
}

impl VideoLoss {
    pub fn parts(&self, tape: &Tape) -> LossParts {
        let v = |x: Var| tape.value(x).data()[0];
        LossParts {
            cla: v(self.cla),
            uef: v(self.uef),
            hge: self.hge.map_or(0.0, v),
        }
    }
}

/// Assembles `L_cla + λ1 L_uef + λ2 L_hge` for one video.
///
/// `thetas` are the fused per-snippet uncertainties; they only set the
/// schedule ranks. Without evidential fusion the schedule is flat and the
/// evidential loss is dropped.
pub fn video_objective(
    tape: &mut Tape,
    out: &GraphOutput,
    labels: &[usize],
    thetas: &[f64],
    cfg: &LossConfig,
    epoch: usize,
    ablation: Ablation,
) -> Result<VideoLoss> {
    let (w, cols) = tape.value(out.cas).dims2()?;
    let num_classes = cols - 1;
    let target = video_target(labels, num_classes)?;

    let attention = tape.value(out.attention).data().to_vec();
    let pred = topk_aggregate(tape, out.cas, &attention, topk_count(w, cfg.topk_ratio))?;
    let cla = classification_loss(tape, pred, &target)?;

    let weights = if ablation.guef {
        schedule_weights(thetas, epoch, cfg.total_epochs, cfg.delta)?
    } else {
        vec![1.0; w]
    };
    let uef = uef_loss(tape, out.attention, out.cas, &weights)?;
    let weighted_uef = tape.scale(uef, cfg.lambda1)?;
    let mut total = tape.add(cla, weighted_uef)?;

    let hge = if ablation.guef {
        let h = hge_loss(tape, out.evidence, &target[..num_classes])?;
        let weighted = tape.scale(h, cfg.lambda2)?;
        total = tape.add(total, weighted)?;
        Some(h)
    } else {
        None
    };
    Ok(VideoLoss { total, cla, uef, hge })
}
