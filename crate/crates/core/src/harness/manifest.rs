//! JSON-lines manifests and proposal files.
//!
//! Manifest line:
//!
//! ```json
//! {"id":"train_000","rgb":"features/train_000.rgb.bin","flow":"features/train_000.flow.bin",
//!  "labels":[0,2],"segments":[{"start":3,"end":9,"class":0}],"fps":25.0}
//! ```
//!
//! Feature paths are resolved relative to the manifest's directory. Classes
//! are 0-based; segments are half-open snippet ranges.
//!
//! Proposal line:
//!
//! ```json
//! {"video":"test_004","start":12,"end":19,"class":1,"score":1.42,"start_sec":7.68,"end_sec":12.16}
//! ```

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::formats::read_features;
use crate::error::{invalid, Error, Result};
use crate::localization::{GroundTruth, Proposal, Segment};
use crate::numerics::Tensor;

/// Frames per snippet.
pub const FRAMES_PER_SNIPPET: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub rgb: PathBuf,
    pub flow: PathBuf,
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub segments: Vec<SegmentRecord>,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub videos: Vec<VideoRecord>,
}

/// Features and labels of one video, ready for the model.
#[derive(Debug, Clone)]
pub struct LoadedVideo {
    pub id: String,
    pub flow: Tensor,
    pub rgb: Tensor,
    pub labels: Vec<usize>,
}

impl Manifest {
    pub fn parse(text: &str, root: &Path, origin: &Path) -> Result<Self> {
        let mut videos = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message,
            };
            let rec: VideoRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            if !seen.insert(rec.id.clone()) {
                return Err(err(format!("duplicate video id {:?}", rec.id)));
            }
            if let Some(s) = rec.segments.iter().find(|s| s.start >= s.end) {
                return Err(err(format!("empty segment [{}, {})", s.start, s.end)));
            }
            videos.push(rec);
        }
        Ok(Self { root: root.to_path_buf(), videos })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, root, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for v in &self.videos {
            out.push_str(&serde_json::to_string(v).map_err(|e| Error::Invalid(e.to_string()))?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Reads both streams of every video and checks they agree on `W`.
    pub fn load_videos(&self) -> Result<Vec<LoadedVideo>> {
        self.videos
            .iter()
            .map(|v| {
                let rgb = read_features(&self.resolve(&v.rgb))?;
                let flow = read_features(&self.resolve(&v.flow))?;
                if rgb.shape() != flow.shape() {
                    return invalid(format!(
                        "video {}: rgb {:?} and flow {:?} disagree",
                        v.id,
                        rgb.shape(),
                        flow.shape()
                    ));
                }
                Ok(LoadedVideo {
                    id: v.id.clone(),
                    flow,
                    rgb,
                    labels: v.labels.clone(),
                })
            })
            .collect()
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.videos
            .iter()
            .flat_map(|v| {
                v.segments.iter().map(move |s| GroundTruth {
                    video: v.id.clone(),
                    segment: Segment { start: s.start, end: s.end },
                    class: s.class,
                })
            })
            .collect()
    }

    pub fn fps(&self, video: &str) -> Option<f64> {
        self.videos.iter().find(|v| v.id == video).map(|v| v.fps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProposalRecord {
    video: String,
    start: usize,
    end: usize,
    class: usize,
    score: f64,
    #[serde(default)]
    start_sec: f64,
    #[serde(default)]
    end_sec: f64,
}

/// Writes one JSON line per proposal, with seconds at the video's nominal fps.
pub fn write_proposals(mut w: impl Write, proposals: &[Proposal], manifest: &Manifest) -> Result<()> {
    for p in proposals {
        let fps = manifest.fps(&p.video).unwrap_or(25.0);
        let sec = |s: usize| s as f64 * FRAMES_PER_SNIPPET / fps;
        let rec = ProposalRecord {
            video: p.video.clone(),
            start: p.segment.start,
            end: p.segment.end,
            class: p.class,
            score: p.score,
            start_sec: sec(p.segment.start),
            end_sec: sec(p.segment.end),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).map_err(|e| Error::Invalid(e.to_string()))?)?;
    }
    Ok(())
}

pub fn read_proposals(r: impl BufRead, origin: &Path) -> Result<Vec<Proposal>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            message,
        };
        let rec: ProposalRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let segment = Segment::new(rec.start, rec.end).map_err(|e| err(e.to_string()))?;
        out.push(Proposal {
            video: rec.video,
            segment,
            class: rec.class,
            score: rec.score,
        });
    }
    Ok(out)
}
