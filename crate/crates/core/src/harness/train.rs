//! Mini-batch training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::RunConfig;
use super::formats::write_checkpoint;
use super::manifest::LoadedVideo;
use crate::error::{invalid, Error, Result};
use crate::model::{forward_graph, fuse_snippet_evidence, Ablation, ModelParams};
use crate::numerics::{Tape, Tensor};
use crate::objectives::{video_objective, LossConfig, LossParts};

/// Adam with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Number of passes over the training set implied by the run length.
pub fn total_epochs(iterations: usize, batch_size: usize, videos: usize) -> usize {
    (iterations * batch_size).div_ceil(videos.max(1)).max(1)
}

/// Endless sequence of per-epoch shuffles, tagged with the 1-based epoch.
struct EpochStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl EpochStream {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            rng,
            order: (0..n).collect(),
            pos: n,
            epoch: 0,
        }
    }

    fn next(&mut self) -> (usize, usize) {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        self.pos += 1;
        (self.order[self.pos - 1], self.epoch)
    }
}

fn gather_columns(x: &Tensor, idx: &[usize]) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(r * idx.len());
    for i in 0..r {
        data.extend(idx.iter().map(|&j| x.data()[i * c + j]));
    }
    Tensor::matrix(r, idx.len(), data).expect("indices are in range")
}

/// Sorted uniform sample of `cap` snippet indices, or `None` if `w <= cap`.
pub fn subsample_indices(rng: &mut ChaCha8Rng, w: usize, cap: usize) -> Option<Vec<usize>> {
    if w <= cap {
        return None;
    }
    let mut idx = rand::seq::index::sample(rng, w, cap).into_vec();
    idx.sort_unstable();
    Some(idx)
}

/// Loss and parameter gradients for a single video.
#[derive(Debug, Clone)]
pub struct VideoStep {
    pub parts: LossParts,
    pub total: f64,
    pub grads: Vec<Tensor>,
    pub masses_checked: usize,
}

/// Builds the graph for one video, evaluates the objective and backpropagates.
#[allow(clippy::too_many_arguments)]
pub fn video_step(
    params: &ModelParams,
    flow: &Tensor,
    rgb: &Tensor,
    labels: &[usize],
    epoch: usize,
    loss_cfg: &LossConfig,
    ablation: Ablation,
    check_masses: bool,
) -> Result<VideoStep> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape)?;
    let fv = tape.leaf(flow.clone())?;
    let rv = tape.leaf(rgb.clone())?;
    let out = forward_graph(&mut tape, &p, fv, rv, ablation)?;
    let w = flow.shape()[1];

    let mut masses_checked = 0;
    let thetas = if ablation.guef {
        let fused = fuse_snippet_evidence(tape.value(out.evidence), tape.value(out.reweighted))?;
        if check_masses {
            for m in &fused {
                m.check_normalized()?;
            }
            masses_checked = fused.len();
        }
        fused.iter().map(|m| m.theta()).collect()
    } else {
        vec![0.5; w]
    };

    let loss = video_objective(&mut tape, &out, labels, &thetas, loss_cfg, epoch, ablation)?;
    let total = tape.value(loss.total).data()[0];
    let grads = tape.backward(loss.total)?;
    let grads = p
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
        .collect();
    Ok(VideoStep {
        parts: loss.parts(&tape),
        total,
        grads,
        masses_checked,
    })
}

/// Batch-averaged losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub parts: LossParts,
    pub total: f64,
}

impl IterationLog {
    pub fn line(&self) -> String {
        format!(
            "iter={} cla={:.12e} uef={:.12e} hge={:.12e} total={:.12e}",
            self.iteration, self.parts.cla, self.parts.uef, self.parts.hge, self.total
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<IterationLog>,
    /// Fused masses verified when `check_masses` is on.
    pub masses_checked: usize,
}

/// Where training writes its side effects.
pub struct TrainSinks<'a> {
    pub log: &'a mut dyn Write,
    pub checkpoint_dir: Option<&'a Path>,
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("step_{iteration:06}.ckpt")
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn is_non_finite(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

pub fn train(cfg: &RunConfig, videos: &[LoadedVideo], sinks: TrainSinks<'_>) -> Result<TrainOutcome> {
    let params = ModelParams::init_with_prior(cfg.model_dims()?, cfg.seed, cfg.classifier_prior());
    train_from(cfg, params, videos, sinks)
}

/// Like [`train`], starting from the given parameters.
pub fn train_from(
    cfg: &RunConfig,
    mut params: ModelParams,
    videos: &[LoadedVideo],
    sinks: TrainSinks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if videos.is_empty() {
        return invalid("no training videos");
    }
    let dims = cfg.model_dims()?;
    for v in videos {
        if v.labels.is_empty() {
            return invalid(format!("training video {} has no labels", v.id));
        }
        if let Some(c) = v.labels.iter().find(|c| **c >= cfg.num_classes) {
            return invalid(format!("video {}: label {c} out of range for {} classes", v.id, cfg.num_classes));
        }
        if v.flow.shape()[0] != dims.feature_dim {
            return invalid(format!(
                "video {}: features have {} channels but the model expects {}",
                v.id,
                v.flow.shape()[0],
                dims.feature_dim
            ));
        }
    }

    if params.dims() != dims {
        return invalid(format!("initial parameters have dims {:?}, config asks for {dims:?}", params.dims()));
    }
    let mut adam = Adam::new(cfg.learning_rate, &params);
    let epochs = total_epochs(cfg.iterations, cfg.batch_size, videos.len());
    let loss_cfg = cfg.loss_config(epochs);
    let ablation = cfg.ablation();
    let mut root = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_7EA1);
    let mut stream = EpochStream::new(videos.len(), ChaCha8Rng::from_rng(&mut root));
    let mut sub_rng = ChaCha8Rng::from_rng(&mut root);

    let mut history = Vec::with_capacity(cfg.iterations);
    let mut masses_checked = 0;
    for iteration in 1..=cfg.iterations {
        let mut batch: Vec<(usize, usize, Option<Vec<usize>>)> = (0..cfg.batch_size)
            .map(|_| {
                let (i, epoch) = stream.next();
                let w = videos[i].flow.shape()[1];
                (i, epoch, subsample_indices(&mut sub_rng, w, cfg.max_snippets))
            })
            .collect();
        batch.sort_by(|a, b| videos[a.0].id.cmp(&videos[b.0].id));

        let steps: Vec<Result<VideoStep>> = batch
            .par_iter()
            .map(|(i, epoch, idx)| {
                let v = &videos[*i];
                let (flow, rgb) = match idx {
                    Some(idx) => (gather_columns(&v.flow, idx), gather_columns(&v.rgb, idx)),
                    None => (v.flow.clone(), v.rgb.clone()),
                };
                video_step(&params, &flow, &rgb, &v.labels, *epoch, &loss_cfg, ablation, cfg.check_masses)
            })
            .collect();

        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut parts = LossParts::default();
        let mut total = 0.0;
        for ((i, _, _), step) in batch.iter().zip(steps) {
            let non_finite = || Error::NonFiniteLoss {
                iteration,
                video: videos[*i].id.clone(),
            };
            let step = step.map_err(|e| if is_non_finite(&e) { non_finite() } else { e })?;
            if !step.total.is_finite() {
                return Err(non_finite());
            }
            for (acc, g) in grads.iter_mut().zip(&step.grads) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
            parts.cla += scale * step.parts.cla;
            parts.uef += scale * step.parts.uef;
            parts.hge += scale * step.parts.hge;
            total += scale * step.total;
            masses_checked += step.masses_checked;
        }
        adam.step(&mut params, &grads);

        let record = IterationLog { iteration, parts, total };
        writeln!(sinks.log, "{}", record.line())?;
        history.push(record);
        if let Some(dir) = sinks.checkpoint_dir {
            if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 {
                write_checkpoint(&dir.join(checkpoint_name(iteration)), &params)?;
            }
        }
    }
    if let Some(dir) = sinks.checkpoint_dir {
        write_checkpoint(&dir.join(FINAL_CHECKPOINT), &params)?;
    }
    Ok(TrainOutcome {
        params,
        history,
        masses_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_count_rounds_up() {
        assert_eq!(total_epochs(5000, 10, 200), 250);
        assert_eq!(total_epochs(7, 10, 40), 2);
        assert_eq!(total_epochs(0, 10, 40), 1);
    }

    #[test]
    fn epoch_stream_visits_each_video_once_per_epoch() {
        let mut s = EpochStream::new(5, ChaCha8Rng::seed_from_u64(1));
        let first: Vec<(usize, usize)> = (0..5).map(|_| s.next()).collect();
        let mut ids: Vec<usize> = first.iter().map(|p| p.0).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert!(first.iter().all(|p| p.1 == 1));
        assert_eq!(s.next().1, 2);
    }

    #[test]
    fn subsampling_keeps_order_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(subsample_indices(&mut rng, 10, 10).is_none());
        let idx = subsample_indices(&mut rng, 100, 20).unwrap();
        assert_eq!(idx.len(), 20);
        assert!(idx.windows(2).all(|p| p[0] < p[1]));
        assert!(*idx.last().unwrap() < 100);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let dims = crate::model::ModelDims::new(4, 2, 2, 4).unwrap();
        let mut params = ModelParams::init(dims, 0);
        let before = params.clone();
        let grads: Vec<Tensor> = params.tensors().iter().map(|t| t.map(|_| 3.0)).collect();
        let mut adam = Adam::new(0.01, &params);
        adam.step(&mut params, &grads);
        for (a, b) in params.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x - 0.01).abs() < 1e-8);
            }
        }
    }
}
