//! Synthetic two-stream videos with planted action segments.
//!
//! Every class owns one mean vector per stream. Action snippets draw from
//! their class mean plus isotropic noise. Background snippets draw from a
//! shared background mean plus the same noise, and additionally carry
//! distractor noise on a random subset of channels chosen per video.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{RunConfig, SynthConfig};
use super::formats::write_features;
use super::manifest::{Manifest, SegmentRecord, VideoRecord};
use crate::error::{invalid, Result};
use crate::numerics::Tensor;

pub const MAX_SEGMENTS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub id: String,
    pub flow: Tensor,
    pub rgb: Tensor,
    pub labels: Vec<usize>,
    pub segments: Vec<SegmentRecord>,
}

/// Per-stream means: `[stream][class]`, with the background mean last.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamMeans {
    pub flow: Vec<Vec<f64>>,
    pub rgb: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub means: StreamMeans,
    pub train: Vec<SynthVideo>,
    pub test: Vec<SynthVideo>,
}

pub fn validate(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.synth;
    if cfg.num_classes < 2 {
        return invalid("synthetic data needs at least 2 classes");
    }
    if s.snippets < 10 {
        return invalid("synthetic videos need at least 10 snippets");
    }
    if s.min_segment == 0 || s.min_segment > s.max_segment {
        return invalid("segment lengths must satisfy 1 <= min_segment <= max_segment");
    }
    // Worst case: three longest segments separated by one background snippet.
    let worst = MAX_SEGMENTS * s.max_segment + MAX_SEGMENTS - 1;
    if worst > s.snippets {
        return invalid(format!(
            "{MAX_SEGMENTS} segments of length {} do not fit in {} snippets",
            s.max_segment, s.snippets
        ));
    }
    let rates = [("noise", s.noise), ("distractor", s.distractor)];
    if let Some((k, _)) = rates.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
        return invalid(format!("{k} must be a non-negative number"));
    }
    if !(0.0..=1.0).contains(&s.distractor_fraction) {
        return invalid("distractor_fraction must lie in [0, 1]");
    }
    if s.fps.is_nan() || s.fps <= 0.0 {
        return invalid("fps must be positive");
    }
    if s.train_videos == 0 {
        return invalid("train_videos must be positive");
    }
    Ok(())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_means(rng: &mut ChaCha8Rng, classes: usize, d: usize) -> Vec<Vec<f64>> {
    (0..=classes)
        .map(|_| (0..d).map(|_| normal(rng)).collect())
        .collect()
}

/// Non-overlapping segments separated by at least one background snippet.
fn plant_segments(rng: &mut ChaCha8Rng, s: &SynthConfig, classes: usize) -> Vec<SegmentRecord> {
    let k = rng.random_range(1..=MAX_SEGMENTS);
    let lens: Vec<usize> = (0..k)
        .map(|_| rng.random_range(s.min_segment..=s.max_segment))
        .collect();
    let free = s.snippets - lens.iter().sum::<usize>() - (k - 1);
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(k);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (i, (len, cut)) in lens.iter().zip(&cuts).enumerate() {
        cursor += cut - prev_cut + usize::from(i > 0);
        prev_cut = *cut;
        out.push(SegmentRecord {
            start: cursor,
            end: cursor + len,
            class: rng.random_range(0..classes),
        });
        cursor += len;
    }
    out
}

fn synth_video(rng: &mut ChaCha8Rng, id: String, cfg: &RunConfig, means: &StreamMeans) -> SynthVideo {
    let s = &cfg.synth;
    let (d, w, t) = (cfg.feature_dim, s.snippets, cfg.num_classes);
    let segments = plant_segments(rng, s, t);
    let mut owner = vec![t; w];
    for seg in &segments {
        owner[seg.start..seg.end].fill(seg.class);
    }
    let mut channels: Vec<usize> = (0..d).collect();
    channels.shuffle(rng);
    let hit = (s.distractor_fraction * d as f64).round() as usize;
    let mut distracted = vec![false; d];
    for &c in &channels[..hit] {
        distracted[c] = true;
    }

    let mut stream = |centers: &[Vec<f64>]| {
        let mut data = vec![0.0; d * w];
        for ch in 0..d {
            for (j, &o) in owner.iter().enumerate() {
                let mut v = centers[o][ch] + s.noise * normal(rng);
                if o == t && distracted[ch] {
                    v += s.distractor * normal(rng);
                }
                data[ch * w + j] = v;
            }
        }
        Tensor::matrix(d, w, data).expect("shape matches by construction")
    };
    let flow = stream(&means.flow);
    let rgb = stream(&means.rgb);

    let mut labels: Vec<usize> = segments.iter().map(|s| s.class).collect();
    labels.sort_unstable();
    labels.dedup();
    SynthVideo { id, flow, rgb, labels, segments }
}

pub fn generate(cfg: &RunConfig) -> Result<SynthDataset> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = StreamMeans {
        flow: draw_means(&mut rng, cfg.num_classes, cfg.feature_dim),
        rgb: draw_means(&mut rng, cfg.num_classes, cfg.feature_dim),
    };
    let s = &cfg.synth;
    let train = (0..s.train_videos)
        .map(|i| synth_video(&mut rng, format!("train_{i:04}"), cfg, &means))
        .collect();
    let test = (0..s.test_videos)
        .map(|i| synth_video(&mut rng, format!("test_{i:04}"), cfg, &means))
        .collect();
    Ok(SynthDataset { means, train, test })
}

/// Writes `features/*.bin`, `train.jsonl` and `test.jsonl` under `dir`.
pub fn write_dataset(data: &SynthDataset, dir: &Path, fps: f64) -> Result<(Manifest, Manifest)> {
    std::fs::create_dir_all(dir.join("features"))?;
    let write_split = |videos: &[SynthVideo], name: &str| -> Result<Manifest> {
        let mut records = Vec::with_capacity(videos.len());
        for v in videos {
            let rgb = Path::new("features").join(format!("{}.rgb.bin", v.id));
            let flow = Path::new("features").join(format!("{}.flow.bin", v.id));
            write_features(&dir.join(&rgb), &v.rgb)?;
            write_features(&dir.join(&flow), &v.flow)?;
            records.push(VideoRecord {
                id: v.id.clone(),
                rgb,
                flow,
                labels: v.labels.clone(),
                segments: v.segments.clone(),
                fps,
            });
        }
        let m = Manifest {
            root: dir.to_path_buf(),
            videos: records,
        };
        m.save(&dir.join(name))?;
        Ok(m)
    };
    let train = write_split(&data.train, "train.jsonl")?;
    let test = write_split(&data.test, "test.jsonl")?;
    Ok((train, test))
}

pub fn synthesize(cfg: &RunConfig, dir: &Path) -> Result<(Manifest, Manifest)> {
    let data = generate(cfg)?;
    write_dataset(&data, dir, cfg.synth.fps)
}
