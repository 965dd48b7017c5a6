//! Pose metrics: MPJPE, AP/mAP, recall and PCP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;

pub const MAP_THRESHOLDS_MM: [f64; 6] = [25.0, 50.0, 75.0, 100.0, 125.0, 150.0];
pub const RECALL_RADIUS_MM: f64 = 500.0;

pub fn mpjpe(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted joints against {} ground-truth joints",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum::<f64>() / gt.len() as f64)
}

/// Scored hypotheses and ground truth of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    pub predictions: Vec<(Vec<Point3>, f64)>,
    pub ground_truth: Vec<Vec<Point3>>,
}

/// Outcome of one prediction after greedy matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPrediction {
    pub score: f64,
    /// `(frame, gt)` of the nearest ground truth and its MPJPE.
    pub nearest: Option<((usize, usize), f64)>,
    pub true_positive: bool,
}

/// Greedy score-descending matching: each prediction takes its nearest ground
/// truth and counts as a true positive when that distance is below the
/// threshold and the ground truth is still free. Equal scores keep input order.
pub fn match_predictions(frames: &[Frame], threshold_mm: f64) -> Result<Vec<MatchedPrediction>> {
    let mut order: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| (0..fr.predictions.len()).map(move |p| (f, p)))
        .collect();
    order.sort_by(|a, b| {
        let sa = frames[a.0].predictions[a.1].1;
        let sb = frames[b.0].predictions[b.1].1;
        sb.total_cmp(&sa)
    });
    let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.ground_truth.len()]).collect();
    let mut out = Vec::with_capacity(order.len());
    for (f, p) in order {
        let (pose, score) = &frames[f].predictions[p];
        let mut nearest: Option<(usize, f64)> = None;
        for (g, gt) in frames[f].ground_truth.iter().enumerate() {
            let d = mpjpe(pose, gt)?;
            if nearest.is_none_or(|(_, bd)| d < bd) {
                nearest = Some((g, d));
            }
        }
        let tp = match nearest {
            Some((g, d)) if d < threshold_mm && !taken[f][g] => {
                taken[f][g] = true;
                true
            }
            _ => false,
        };
        out.push(MatchedPrediction {
            score: *score,
            nearest: nearest.map(|(g, d)| ((f, g), d)),
            true_positive: tp,
        });
    }
    Ok(out)
}

fn total_gt(frames: &[Frame]) -> usize {
    frames.iter().map(|f| f.ground_truth.len()).sum()
}

/// Non-interpolated average precision: `Σ_k (r(k) − r(k−1))·p(k)`.
pub fn ap_at(frames: &[Frame], threshold_mm: f64) -> Result<f64> {
    let n_gt = total_gt(frames);
    if n_gt == 0 {
        return Ok(0.0);
    }
    let matched = match_predictions(frames, threshold_mm)?;
    let mut tp = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (k, m) in matched.iter().enumerate() {
        if m.true_positive {
            tp += 1;
        }
        let recall = tp as f64 / n_gt as f64;
        let precision = tp as f64 / (k + 1) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

pub fn mean_ap(frames: &[Frame]) -> Result<f64> {
    let mut s = 0.0;
    for t in MAP_THRESHOLDS_MM {
        s += ap_at(frames, t)?;
    }
    Ok(s / MAP_THRESHOLDS_MM.len() as f64)
}

/// Fraction of ground truths matched at the threshold.
pub fn recall_at(frames: &[Frame], threshold_mm: f64) -> Result<f64> {
    let n_gt = total_gt(frames);
    if n_gt == 0 {
        return Ok(0.0);
    }
    let tp = match_predictions(frames, threshold_mm)?
        .iter()
        .filter(|m| m.true_positive)
        .count();
    Ok(tp as f64 / n_gt as f64)
}

/// Mean MPJPE over the true positives at the recall radius; `None` without any.
pub fn matched_mpjpe(frames: &[Frame]) -> Result<Option<f64>> {
    let matched = match_predictions(frames, RECALL_RADIUS_MM)?;
    let d: Vec<f64> = matched
        .iter()
        .filter(|m| m.true_positive)
        .map(|m| m.nearest.expect("true positive has a match").1)
        .collect();
    Ok(if d.is_empty() {
        None
    } else {
        Some(d.iter().sum::<f64>() / d.len() as f64)
    })
}

/// Percentage of correct parts as a fraction: a limb is correct when the mean
/// of its endpoint errors is strictly below half its ground-truth length.
pub fn pcp(pred: &[Point3], gt: &[Point3], limbs: &[[usize; 2]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} joints", pred.len(), gt.len())));
    }
    if limbs.is_empty() {
        return Err(Error::ShapeMismatch("empty limb table".into()));
    }
    let mut correct = 0usize;
    for &[a, b] in limbs {
        if a >= gt.len() || b >= gt.len() {
            return Err(Error::ShapeMismatch(format!("limb ({a}, {b}) outside {} joints", gt.len())));
        }
        let length = (gt[a] - gt[b]).norm();
        if !(length > 0.0) {
            return Err(Error::ZeroLengthLimb(a, b));
        }
        let err = 0.5 * ((pred[a] - gt[a]).norm() + (pred[b] - gt[b]).norm());
        if err < 0.5 * length {
            correct += 1;
        }
    }
    Ok(correct as f64 / limbs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Undefined (`None`) when nothing matched.
    pub mpjpe_mm: Option<f64>,
    pub ap: Vec<(f64, f64)>,
    pub map: f64,
    pub recall: f64,
    /// Per ground-truth actor, frames concatenated.
    pub pcp_per_actor: Vec<f64>,
    pub pcp_mean: f64,
    pub num_predictions: usize,
    pub num_ground_truth: usize,
}

impl EvalReport {
    pub fn ap_at(&self, threshold_mm: f64) -> Option<f64> {
        self.ap.iter().find(|(t, _)| *t == threshold_mm).map(|(_, a)| *a)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// One header row and one value row.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["mpjpe_mm".to_string()];
        let mut row = vec![self.mpjpe_mm.map_or("nan".to_string(), |v| format!("{v:.6}"))];
        for (t, a) in &self.ap {
            header.push(format!("ap{}", *t as i64));
            row.push(format!("{a:.6}"));
        }
        header.extend(["map", "recall500", "pcp", "num_predictions", "num_ground_truth"].map(String::from));
        row.push(format!("{:.6}", self.map));
        row.push(format!("{:.6}", self.recall));
        row.push(format!("{:.6}", self.pcp_mean));
        row.push(self.num_predictions.to_string());
        row.push(self.num_ground_truth.to_string());
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

/// Full report over pooled frames; PCP uses each actor's best prediction.
pub fn evaluate(frames: &[Frame], limbs: &[[usize; 2]]) -> Result<EvalReport> {
    let mut ap = Vec::with_capacity(MAP_THRESHOLDS_MM.len());
    for t in MAP_THRESHOLDS_MM {
        ap.push((t, ap_at(frames, t)?));
    }
    let map = ap.iter().map(|(_, a)| a).sum::<f64>() / ap.len() as f64;
    let mut pcp_per_actor = Vec::new();
    for f in frames {
        for gt in &f.ground_truth {
            let mut best: Option<(f64, &Vec<Point3>)> = None;
            for (p, _) in &f.predictions {
                let d = mpjpe(p, gt)?;
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, p));
                }
            }
            pcp_per_actor.push(match best {
                Some((_, p)) => pcp(p, gt, limbs)?,
                None => 0.0,
            });
        }
    }
    let pcp_mean = if pcp_per_actor.is_empty() {
        0.0
    } else {
        pcp_per_actor.iter().sum::<f64>() / pcp_per_actor.len() as f64
    };
    Ok(EvalReport {
        mpjpe_mm: matched_mpjpe(frames)?,
        ap,
        map,
        recall: recall_at(frames, RECALL_RADIUS_MM)?,
        pcp_per_actor,
        pcp_mean,
        num_predictions: frames.iter().map(|f| f.predictions.len()).sum(),
        num_ground_truth: total_gt(frames),
    })
}
