//! Joint-token lifecycle: initialisation, scoring, filtering and NMS.

use std::sync::OnceLock;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::ssm::sigmoid;

pub const NUM_JOINTS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skeleton {
    pub names: Vec<String>,
    pub joints: Vec<[f64; 3]>,
    pub limbs: Vec<[usize; 2]>,
}

impl Skeleton {
    pub fn points(&self) -> Vec<Point3> {
        self.joints.iter().map(|j| Point3::new(j[0], j[1], j[2])).collect()
    }

    pub fn limb_length(&self, limb: usize) -> f64 {
        let [a, b] = self.limbs[limb];
        (Point3::from(self.joints[a]) - Point3::from(self.joints[b])).norm()
    }
}

/// The canonical 15-joint T-pose, feet on the ground plane at the origin.
pub fn tpose() -> &'static Skeleton {
    static TEMPLATE: OnceLock<Skeleton> = OnceLock::new();
    TEMPLATE.get_or_init(|| serde_json::from_str(include_str!("../data/tpose.json")).expect("bundled template parses"))
}

/// Axis-aligned rectangle on the ground plane, in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundBounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl GroundBounds {
    pub fn centered(width: f64, depth: f64) -> Self {
        Self {
            min: [-width / 2.0, -depth / 2.0],
            max: [width / 2.0, depth / 2.0],
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointToken {
    /// J×L visual term, one row per joint.
    pub visual: Array2<f64>,
    /// Joint positions in world millimetres.
    pub geometry: Vec<Point3>,
    pub person_embed: Array1<f64>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub tokens: Vec<JointToken>,
    pub capacity: usize,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn select(&self, keep: &[usize]) -> TokenSet {
        TokenSet {
            tokens: keep.iter().map(|&i| self.tokens[i].clone()).collect(),
            capacity: self.capacity,
        }
    }

    fn scores(&self) -> Result<Vec<f64>> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| t.score.ok_or(Error::UnscoredToken(i)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenInit {
    pub count: usize,
    pub bounds: GroundBounds,
    /// Jitter amplitude as a fraction of the grid pitch.
    pub jitter: f64,
    pub seed: u64,
}

/// Jittered grid of person centres covering the bounds, in row-major cell order.
pub fn grid_centres(count: usize, bounds: &GroundBounds, jitter: f64, seed: u64) -> Vec<[f64; 2]> {
    let width = bounds.max[0] - bounds.min[0];
    let depth = bounds.max[1] - bounds.min[1];
    let cols = if width <= 0.0 || depth <= 0.0 {
        (count as f64).sqrt().ceil() as usize
    } else {
        ((count as f64 * width / depth).sqrt().ceil() as usize).clamp(1, count)
    };
    let rows = count.div_ceil(cols);
    let pitch = [width / cols as f64, depth / rows as f64];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..count)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let mut p = [
                bounds.min[0] + (c as f64 + 0.5) * pitch[0],
                bounds.min[1] + (r as f64 + 0.5) * pitch[1],
            ];
            for k in 0..2 {
                let u: f64 = rng.random_range(-0.5..0.5);
                p[k] += u * jitter * pitch[k];
            }
            p
        })
        .collect()
}

/// T-pose geometry translated to a ground-plane centre.
pub fn tpose_at(centre: [f64; 2]) -> Vec<Point3> {
    tpose_joints_at(centre, NUM_JOINTS)
}

/// The first `joints` template joints translated to a ground-plane centre.
pub fn tpose_joints_at(centre: [f64; 2], joints: usize) -> Vec<Point3> {
    tpose()
        .points()
        .into_iter()
        .take(joints)
        .map(|p| p + Point3::new(centre[0], centre[1], 0.0))
        .collect()
}

/// Sample `init.count` tokens; visual terms are `person_embed + joint_embeds[j]`.
///
/// The joint count is the number of rows of `joint_embeds`; smaller counts use
/// the leading joints of the template.
pub fn init_tokens(init: &TokenInit, joint_embeds: &Array2<f64>) -> Result<TokenSet> {
    if init.count == 0 {
        return Err(Error::InvalidConfig("token count must be at least 1".into()));
    }
    let joints = joint_embeds.nrows();
    if joints == 0 || joints > NUM_JOINTS {
        return Err(Error::ShapeMismatch(format!(
            "joint embedding table has {joints} rows, expected 1..={NUM_JOINTS}"
        )));
    }
    let dim = joint_embeds.ncols();
    let centres = grid_centres(init.count, &init.bounds, init.jitter, init.seed);
    let embeds = person_embeddings(init.count, dim, init.seed);
    let tokens = centres
        .iter()
        .zip(embeds.rows())
        .map(|(&c, s)| {
            let visual = joint_embeds + &s;
            JointToken {
                visual,
                geometry: tpose_joints_at(c, joints),
                person_embed: s.to_owned(),
                score: None,
            }
        })
        .collect();
    Ok(TokenSet {
        tokens,
        capacity: init.count,
    })
}

/// Standard-normal person embeddings, one row per token.
pub fn person_embeddings(count: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    Array2::from_shape_simple_fn((count, dim), || rng.sample(StandardNormal))
}

/// Two-logit joint classifier: `L×2` weights and a bias pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weight: Array2<f64>,
    pub bias: [f64; 2],
}

/// Positive probability per joint, then the mean over joints; stores and returns the scores.
pub fn score_tokens(tokens: &mut TokenSet, classifier: &Classifier) -> Vec<f64> {
    tokens
        .tokens
        .iter_mut()
        .map(|t| {
            let logits = t.visual.dot(&classifier.weight.column(0)) + classifier.bias[0];
            let s = logits.mapv(sigmoid).mean().unwrap_or(0.0);
            t.score = Some(s);
            s
        })
        .collect()
}

/// Indices with score ≥ ε, in order.
pub fn filter_indices(scores: &[f64], epsilon: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&i| scores[i] >= epsilon).collect()
}

pub fn filter_tokens(tokens: &TokenSet, epsilon: f64) -> Result<TokenSet> {
    Ok(tokens.select(&filter_indices(&tokens.scores()?, epsilon)))
}

pub fn mean_joint_distance(a: &[Point3], b: &[Point3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64
}

/// Greedy NMS by descending score; returns kept indices in visiting order.
pub fn nms_indices(poses: &[Vec<Point3>], scores: &[f64], radius_mm: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..poses.len()).collect();
    // Stable sort keeps lower indices first among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| mean_joint_distance(&poses[i], &poses[k]) >= radius_mm)
        {
            kept.push(i);
        }
    }
    kept
}

pub fn nms_poses(tokens: &TokenSet, radius_mm: f64) -> Result<TokenSet> {
    let scores = tokens.scores()?;
    let poses: Vec<Vec<Point3>> = tokens.tokens.iter().map(|t| t.geometry.clone()).collect();
    Ok(tokens.select(&nms_indices(&poses, &scores, radius_mm)))
}

#[derive(Serialize, Deserialize)]
struct PoseDump {
    joints: Vec<[f64; 3]>,
}

/// `{"joints":[[x,y,z],...]}`
pub fn pose_to_json(pose: &[Point3]) -> String {
    serde_json::to_string(&PoseDump {
        joints: pose.iter().map(|p| [p.x, p.y, p.z]).collect(),
    })
    .expect("finite pose serialises")
}

pub fn pose_from_json(text: &str) -> Result<Vec<Point3>> {
    let dump: PoseDump = serde_json::from_str(text)?;
    Ok(dump.joints.into_iter().map(Point3::from).collect())
}
