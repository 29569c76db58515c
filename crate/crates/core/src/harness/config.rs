//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | required | master seed (may come from `--seed`) |
//! | `feature_dim` | 16 | channels per stream `D` |
//! | `num_classes` | 3 | action classes `T` |
//! | `heads` | 4 | attention heads |
//! | `hidden` | 32 | hidden conv width |
//! | `kernel` | 3 | hidden conv kernel width |
//! | `max_snippets` | 320 | per-video snippet cap during training |
//! | `learning_rate` | 5e-5 | Adam step size |
//! | `iterations` | 5000 | optimizer steps |
//! | `batch_size` | 10 | videos per step |
//! | `lambda1` | 0.8 | complementarity loss weight |
//! | `lambda2` | 1.0 | evidential loss weight |
//! | `delta` | 0.7 | schedule amplitude |
//! | `topk_ratio` | 0.125 | fraction of snippets in top-k aggregation |
//! | `thresholds` | 0.1,...,0.9 | proposal thresholds |
//! | `class_gate` | 0.1 | video-level class gate |
//! | `nms_iou` | 0.5 | NMS overlap threshold |
//! | `init_action_bias` | -3.0 | initial classifier bias of each action class |
//! | `init_background_bias` | 4.0 | initial classifier bias of the background class |
//! | `checkpoint_every` | 0 | extra checkpoints every K steps (0 = only final) |
//! | `disable_guef` | false | ablate evidential fusion |
//! | `disable_hmha` | false | ablate hybrid attention |
//! | `check_masses` | false | assert normalization of every fused mass |
//! | `train_videos` | 40 | synthetic training videos |
//! | `test_videos` | 20 | synthetic test videos |
//! | `snippets` | 50 | synthetic snippets per video |
//! | `noise` | 0.5 | synthetic feature noise |
//! | `distractor` | 1.5 | synthetic background distractor amplitude |
//! | `distractor_fraction` | 0.25 | share of channels hit by distractors |
//! | `min_segment` | 4 | shortest planted segment |
//! | `max_segment` | 10 | longest planted segment |
//! | `fps` | 25 | nominal frame rate written to manifests |

use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::localization::ProposalConfig;
use crate::model::{Ablation, ClassifierPrior, ModelDims};
use crate::objectives::LossConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub heads: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub max_snippets: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub delta: f64,
    pub topk_ratio: f64,
    pub thresholds: Vec<f64>,
    pub class_gate: f64,
    pub nms_iou: f64,
    pub init_action_bias: f64,
    pub init_background_bias: f64,
    pub checkpoint_every: usize,
    pub disable_guef: bool,
    pub disable_hmha: bool,
    pub check_masses: bool,
    pub synth: SynthConfig,
}

/// Synthetic dataset shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub train_videos: usize,
    pub test_videos: usize,
    pub snippets: usize,
    pub noise: f64,
    pub distractor: f64,
    pub distractor_fraction: f64,
    pub min_segment: usize,
    pub max_segment: usize,
    pub fps: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_videos: 40,
            test_videos: 20,
            snippets: 50,
            noise: 0.5,
            distractor: 1.5,
            distractor_fraction: 0.25,
            min_segment: 4,
            max_segment: 10,
            fps: 25.0,
        }
    }
}

impl RunConfig {
    /// Defaults for everything except the seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            feature_dim: 16,
            num_classes: 3,
            heads: 4,
            hidden: 32,
            kernel: 3,
            max_snippets: 320,
            learning_rate: 5e-5,
            iterations: 5000,
            batch_size: 10,
            lambda1: 0.8,
            lambda2: 1.0,
            delta: 0.7,
            topk_ratio: 0.125,
            thresholds: ProposalConfig::default().thresholds,
            class_gate: 0.1,
            nms_iou: 0.5,
            init_action_bias: ClassifierPrior::default().action,
            init_background_bias: ClassifierPrior::default().background,
            checkpoint_every: 0,
            disable_guef: false,
            disable_hmha: false,
            check_masses: false,
            synth: SynthConfig::default(),
        }
    }

    /// Parses `key = value` text. `seed_override` wins over a `seed` key; one
    /// of the two must be present.
    pub fn parse(text: &str, seed_override: Option<u64>, origin: &Path) -> Result<Self> {
        let mut cfg = Self::with_seed(0);
        let mut seed = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value, &mut seed).map_err(|e| err(e.to_string()))?;
        }
        cfg.seed = seed_override
            .or(seed)
            .ok_or_else(|| Error::Invalid("a seed is required (config key `seed` or --seed)".into()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, seed_override, path)
    }

    fn set(&mut self, key: &str, value: &str, seed: &mut Option<u64>) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Invalid(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => invalid(format!("{key}: expected a boolean, got {v:?}")),
            }
        }
        match key {
            "seed" => *seed = Some(num(key, value)?),
            "feature_dim" => self.feature_dim = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "kernel" => self.kernel = num(key, value)?,
            "max_snippets" => self.max_snippets = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "topk_ratio" => self.topk_ratio = num(key, value)?,
            "thresholds" => {
                self.thresholds = value
                    .split(',')
                    .map(|v| num(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "class_gate" => self.class_gate = num(key, value)?,
            "nms_iou" => self.nms_iou = num(key, value)?,
            "init_action_bias" => self.init_action_bias = num(key, value)?,
            "init_background_bias" => self.init_background_bias = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "disable_guef" => self.disable_guef = flag(key, value)?,
            "disable_hmha" => self.disable_hmha = flag(key, value)?,
            "check_masses" => self.check_masses = flag(key, value)?,
            "train_videos" => self.synth.train_videos = num(key, value)?,
            "test_videos" => self.synth.test_videos = num(key, value)?,
            "snippets" => self.synth.snippets = num(key, value)?,
            "noise" => self.synth.noise = num(key, value)?,
            "distractor" => self.synth.distractor = num(key, value)?,
            "distractor_fraction" => self.synth.distractor_fraction = num(key, value)?,
            "min_segment" => self.synth.min_segment = num(key, value)?,
            "max_segment" => self.synth.max_segment = num(key, value)?,
            "fps" => self.synth.fps = num(key, value)?,
            other => return invalid(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("num_classes", self.num_classes),
            ("heads", self.heads),
            ("hidden", self.hidden),
            ("max_snippets", self.max_snippets),
            ("batch_size", self.batch_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return invalid(format!("{k} must be positive"));
        }
        if !(self.init_action_bias.is_finite() && self.init_background_bias.is_finite()) {
            return invalid("initial biases must be finite");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning_rate must be positive");
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return invalid("thresholds must be a non-empty list inside (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return invalid("nms_iou must lie in [0, 1]");
        }
        self.model_dims()?;
        self.loss_config(1).validate()
    }

    pub fn model_dims(&self) -> Result<ModelDims> {
        ModelDims::new(self.feature_dim, self.num_classes, self.heads, self.hidden)?.with_kernel(self.kernel)
    }

    pub fn classifier_prior(&self) -> ClassifierPrior {
        ClassifierPrior {
            action: self.init_action_bias,
            background: self.init_background_bias,
        }
    }

    pub fn loss_config(&self, total_epochs: usize) -> LossConfig {
        LossConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            delta: self.delta,
            total_epochs,
            topk_ratio: self.topk_ratio,
        }
    }

    pub fn proposal_config(&self) -> ProposalConfig {
        ProposalConfig {
            thresholds: self.thresholds.clone(),
            class_gate: self.class_gate,
            ..ProposalConfig::default()
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            hmha: !self.disable_hmha,
            guef: !self.disable_guef,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_comments() {
        let text = "# run\nseed = 3\nlearning_rate = 1e-3 # faster\nthresholds = 0.2, 0.4\ndisable_guef = true\nsnippets=60\n";
        let cfg = RunConfig::parse(text, None, Path::new("x.cfg")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.thresholds, vec![0.2, 0.4]);
        assert!(cfg.disable_guef);
        assert_eq!(cfg.synth.snippets, 60);
        assert_eq!(cfg.batch_size, 10);
        assert_eq!(cfg.max_snippets, 320);

        let cfg = RunConfig::parse(text, Some(9), Path::new("x.cfg")).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(RunConfig::parse("iterations = 3", None, Path::new("x")).is_err());
        assert!(RunConfig::parse("", Some(1), Path::new("x")).is_ok());
    }

    #[test]
    fn rejects_bad_lines() {
        let err = RunConfig::parse("seed=1\nbogus = 2", None, Path::new("c.cfg")).unwrap_err();
        assert!(err.to_string().contains("c.cfg:2"), "{err}");
        assert!(RunConfig::parse("seed=1\nnoequals", None, Path::new("c")).is_err());
        assert!(RunConfig::parse("seed=1\ndelta=2", None, Path::new("c")).is_err());
        assert!(RunConfig::parse("seed=1\nthresholds=0,0.5", None, Path::new("c")).is_err());
        assert!(RunConfig::parse("seed=1\nkernel=2", None, Path::new("c")).is_err());
    }
}
