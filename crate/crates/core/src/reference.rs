//! Brute-force reference implementations.
//!
//! Each function here recomputes a quantity by plain enumeration, sharing no
//! code with the production path it is compared against.

use crate::error::{Error, Result};
use crate::evidential::{BeliefMass, CONFLICT_EPS};
use crate::localization::{GroundTruth, Proposal};

/// A focal element: a subset of the frame as a bitmask, tagged when it is the
/// multiplet Θ (needed to keep `{p_1}` and Θ apart when `T = 1`).
#[derive(Clone, Copy, PartialEq, Eq)]
struct Focal {
    mask: u64,
    multiplet: bool,
}

fn focal_elements(m: &BeliefMass) -> Vec<(Focal, f64)> {
    let t = m.num_classes();
    let full = if t == 64 { u64::MAX } else { (1u64 << t) - 1 };
    let mut out: Vec<(Focal, f64)> = m
        .singletons()
        .iter()
        .enumerate()
        .map(|(k, &v)| (Focal { mask: 1 << k, multiplet: false }, v))
        .collect();
    out.push((Focal { mask: full, multiplet: true }, m.theta()));
    out
}

/// Classic Dempster's rule enumerated over every pair of focal elements.
pub fn oracle_combine(m1: &BeliefMass, m2: &BeliefMass) -> Result<BeliefMass> {
    let t = m1.num_classes();
    if t != m2.num_classes() || t > 64 {
        return Err(Error::Shape {
            op: "oracle combination",
            left: vec![t],
            right: vec![m2.num_classes()],
        });
    }
    let mut joint: Vec<(Focal, f64)> = Vec::new();
    let mut empty = 0.0;
    for (a, ma) in focal_elements(m1) {
        for (b, mb) in focal_elements(m2) {
            let inter = a.mask & b.mask;
            let product = ma * mb;
            if inter == 0 {
                empty += product;
                continue;
            }
            let f = Focal { mask: inter, multiplet: a.multiplet && b.multiplet };
            match joint.iter_mut().find(|(g, _)| *g == f) {
                Some((_, acc)) => *acc += product,
                None => joint.push((f, product)),
            }
        }
    }
    if empty >= 1.0 - CONFLICT_EPS {
        return Err(Error::TotalConflict { conflict: empty });
    }
    let mut singletons = vec![0.0; t];
    let mut theta = 0.0;
    for (f, v) in joint {
        let v = v / (1.0 - empty);
        if f.multiplet {
            theta += v;
        } else {
            assert_eq!(f.mask.count_ones(), 1, "only singletons and Θ can arise");
            singletons[f.mask.trailing_zeros() as usize] += v;
        }
    }
    BeliefMass::new(singletons, theta)
}

fn overlap(a: (usize, usize), b: (usize, usize)) -> f64 {
    // count snippets one at a time
    let lo = a.0.min(b.0);
    let hi = a.1.max(b.1);
    let (mut inter, mut union) = (0usize, 0usize);
    for t in lo..hi {
        let ina = t >= a.0 && t < a.1;
        let inb = t >= b.0 && t < b.1;
        inter += (ina && inb) as usize;
        union += (ina || inb) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// All-pairs NMS: a proposal survives iff no higher-ranked survivor of the
/// same video and class overlaps it at `threshold` or more.
pub fn brute_nms(proposals: &[Proposal], threshold: f64) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    // insertion sort by score, stable
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && proposals[order[j]].score > proposals[order[j - 1]].score {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut alive = vec![true; order.len()];
    for i in 0..order.len() {
        for j in 0..i {
            let (a, b) = (&proposals[order[i]], &proposals[order[j]]);
            if alive[j]
                && a.video == b.video
                && a.class == b.class
                && overlap(
                    (a.segment.start, a.segment.end),
                    (b.segment.start, b.segment.end),
                ) >= threshold
            {
                alive[i] = false;
            }
        }
    }
    order
        .into_iter()
        .zip(alive)
        .filter(|(_, keep)| *keep)
        .map(|(i, _)| proposals[i].clone())
        .collect()
}

/// Average precision recomputed from scratch: matching replayed greedily in
/// rank order, then precision re-derived for every prefix of the ranking.
pub fn brute_average_precision(
    proposals: &[Proposal],
    truth: &[GroundTruth],
    class: usize,
    threshold: f64,
) -> Option<f64> {
    let gts: Vec<&GroundTruth> = truth.iter().filter(|g| g.class == class).collect();
    if gts.is_empty() {
        return None;
    }
    let mut ranked: Vec<&Proposal> = proposals.iter().filter(|p| p.class == class).collect();
    for i in 1..ranked.len() {
        let mut j = i;
        while j > 0 && ranked[j].score > ranked[j - 1].score {
            ranked.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut used = vec![false; gts.len()];
    let mut hit = Vec::with_capacity(ranked.len());
    for p in &ranked {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.video != p.video {
                continue;
            }
            let o = overlap(
                (p.segment.start, p.segment.end),
                (gt.segment.start, gt.segment.end),
            );
            if o >= threshold && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        hit.push(best.is_some());
    }
    let precision_at = |n: usize| {
        let tp = hit[..=n].iter().filter(|h| **h).count();
        tp as f64 / (n + 1) as f64
    };
    let mut total = 0.0;
    for k in 0..hit.len() {
        if hit[k] {
            let best_later = (k..hit.len()).map(precision_at).fold(0.0, f64::max);
            total += best_later;
        }
    }
    Some(total / gts.len() as f64)
}

/// Mean over classes with ground truth of [`brute_average_precision`].
pub fn brute_mean_ap(
    proposals: &[Proposal],
    truth: &[GroundTruth],
    num_classes: usize,
    threshold: f64,
) -> f64 {
    let aps: Vec<f64> = (0..num_classes)
        .filter_map(|c| brute_average_precision(proposals, truth, c, threshold))
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}
