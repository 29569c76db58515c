//! Analytic versus central-difference gradients of every loss term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::model::{forward_graph, fuse_snippet_evidence, Ablation, ModelDims, ModelParams};
use crate::numerics::{relative_error, Tape, Tensor};
use crate::objectives::{video_objective, LossConfig, LossParts};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seeds: Vec<u64>,
    pub snippets: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            snippets: 8,
            num_classes: 3,
            feature_dim: 6,
            heads: 2,
            hidden: 8,
            step: 1e-5,
            floor: 1e-6,
            tolerance: 1e-4,
        }
    }
}

pub const TERMS: [&str; 4] = ["cla", "uef", "hge", "total"];

/// Worst relative error per loss term over all seeds and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_error: [f64; 4],
    pub checked: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_error.iter().all(|e| *e < self.tolerance)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (name, e) in TERMS.iter().zip(&self.max_error) {
            let verdict = if *e < self.tolerance { "ok" } else { "FAIL" };
            s.push_str(&format!("{name:<6} max_rel_err={e:.3e} {verdict}\n"));
        }
        s.push_str(&format!("checked {} partial derivatives per term\n", self.checked));
        s
    }
}

struct Problem {
    params: ModelParams,
    flow: Tensor,
    rgb: Tensor,
    labels: Vec<usize>,
    thetas: Vec<f64>,
    loss: LossConfig,
}

fn random_tensor(rng: &mut ChaCha8Rng, d: usize, w: usize) -> Tensor {
    let data = (0..d * w).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(d, w, data).expect("shape matches")
}

impl Problem {
    fn new(cfg: &GradcheckConfig, seed: u64) -> Result<Self> {
        let dims = ModelDims::new(cfg.feature_dim, cfg.num_classes, cfg.heads, cfg.hidden)?;
        let params = ModelParams::init(dims, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E37_79B9));
        let flow = random_tensor(&mut rng, cfg.feature_dim, cfg.snippets);
        let rgb = random_tensor(&mut rng, cfg.feature_dim, cfg.snippets);
        let first = rng.random_range(0..cfg.num_classes);
        let mut labels = vec![first];
        let second = rng.random_range(0..cfg.num_classes);
        if second != first {
            labels.push(second);
        }
        let loss = LossConfig {
            total_epochs: 4,
            ..LossConfig::default()
        };
        let mut p = Self {
            params,
            flow,
            rgb,
            labels,
            thetas: Vec::new(),
            loss,
        };
        // The schedule ranks are a step function of the parameters; freeze them
        // at the base point so both gradient estimates see the same weights.
        p.thetas = p.thetas_at(&p.params)?;
        Ok(p)
    }

    fn thetas_at(&self, params: &ModelParams) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let f = tape.leaf(self.flow.clone())?;
        let r = tape.leaf(self.rgb.clone())?;
        let out = forward_graph(&mut tape, &bound, f, r, Ablation::default())?;
        let fused = fuse_snippet_evidence(tape.value(out.evidence), tape.value(out.reweighted))?;
        Ok(fused.iter().map(|m| m.theta()).collect())
    }

    fn eval(&self, params: &ModelParams) -> Result<(Tape, Vec<crate::numerics::Var>, crate::objectives::VideoLoss)> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let f = tape.leaf(self.flow.clone())?;
        let r = tape.leaf(self.rgb.clone())?;
        let out = forward_graph(&mut tape, &bound, f, r, Ablation::default())?;
        // Epoch 3 of 4 gives a non-flat schedule.
        let loss = video_objective(&mut tape, &out, &self.labels, &self.thetas, &self.loss, 3, Ablation::default())?;
        Ok((tape, bound.vars().to_vec(), loss))
    }

    fn values(&self, params: &ModelParams) -> Result<[f64; 4]> {
        let (tape, _, loss) = self.eval(params)?;
        let parts: LossParts = loss.parts(&tape);
        Ok([parts.cla, parts.uef, parts.hge, tape.value(loss.total).data()[0]])
    }
}

/// Runs the check for every seed, probing every model parameter.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut max_error = [0.0f64; 4];
    let mut checked = 0;
    for &seed in &cfg.seeds {
        let problem = Problem::new(cfg, seed)?;
        let (tape, vars, loss) = problem.eval(&problem.params)?;
        let outputs = [Some(loss.cla), Some(loss.uef), loss.hge, Some(loss.total)];
        let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(4);
        for out in outputs {
            let out = out.expect("evidential loss is active in the full model");
            let g = tape.backward(out)?;
            analytic.push(
                vars.iter()
                    .zip(problem.params.tensors())
                    .flat_map(|(v, t)| g.get_or_zeros(*v, t.shape()).into_data())
                    .collect(),
            );
        }

        let mut probe = problem.params.clone();
        let mut flat = 0;
        for ti in 0..probe.tensors().len() {
            for i in 0..probe.tensors()[ti].numel() {
                let orig = probe.tensors()[ti].data()[i];
                probe.tensors_mut()[ti].data_mut()[i] = orig + cfg.step;
                let plus = problem.values(&probe)?;
                probe.tensors_mut()[ti].data_mut()[i] = orig - cfg.step;
                let minus = problem.values(&probe)?;
                probe.tensors_mut()[ti].data_mut()[i] = orig;
                for k in 0..4 {
                    let numeric = (plus[k] - minus[k]) / (2.0 * cfg.step);
                    let e = relative_error(analytic[k][flat], numeric, cfg.floor);
                    max_error[k] = max_error[k].max(e);
                }
                flat += 1;
            }
        }
        checked += flat;
    }
    Ok(GradcheckReport {
        max_error,
        checked,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_default_seeds_pass() {
        let cfg = GradcheckConfig::default();
        let report = run(&cfg).unwrap();
        assert!(report.passed(), "{}", report.to_table());
    }
}
