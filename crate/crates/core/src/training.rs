//! Ground-truth assignment, losses and the optimisation loop.

use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::eval::{self, Frame};
use crate::geometry::{project, CameraRig, Point2, Point3};
use crate::pipeline::{forward, initial_tokens, run_pipeline, LayerTrace, ModelParams, ParamSet, SceneInputs};
use crate::sim::{generate_scene, Scene, SceneConfig};
use crate::tokens::{filter_indices, mean_joint_distance, nms_indices};

/// Ground-truth humans of one frame, truncated to the model's joints.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSet {
    pub humans: Vec<Vec<Point3>>,
}

impl GroundTruthSet {
    pub fn from_actors(actors: &[Vec<Point3>], joints: usize) -> Self {
        Self {
            humans: actors.iter().map(|a| a[..joints].to_vec()).collect(),
        }
    }

    /// `[human][view][joint]` projections, recomputed from the rig.
    pub fn projections(&self, rig: &CameraRig) -> Vec<Vec<Vec<Option<Point2>>>> {
        self.humans
            .iter()
            .map(|h| {
                rig.views
                    .iter()
                    .map(|v| h.iter().map(|p| project(v, p).ok()).collect())
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// Ground-truth index of every positive token.
    pub positive: Vec<Option<usize>>,
}

impl Assignment {
    pub fn labels(&self) -> Vec<f64> {
        self.positive.iter().map(|p| if p.is_some() { 1.0 } else { 0.0 }).collect()
    }

    pub fn positives_of(&self, gt: usize) -> Vec<usize> {
        (0..self.positive.len()).filter(|&i| self.positive[i] == Some(gt)).collect()
    }
}

/// Greedy in ground-truth order: each human claims its `w` nearest unclaimed
/// anchors by mean joint distance, ties to the lower token index.
pub fn match_gt(anchors: &[Vec<Point3>], gts: &GroundTruthSet, w: usize) -> Result<Assignment> {
    if w == 0 {
        return Err(Error::InvalidConfig("positives per ground truth must be at least 1".into()));
    }
    let needed = w * gts.humans.len();
    if anchors.len() < needed {
        return Err(Error::InsufficientTokens {
            needed,
            available: anchors.len(),
        });
    }
    let mut positive = vec![None; anchors.len()];
    for (z, h) in gts.humans.iter().enumerate() {
        let mut cand: Vec<(f64, usize)> = (0..anchors.len())
            .filter(|&i| positive[i].is_none())
            .map(|i| (mean_joint_distance(&anchors[i], h), i))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in cand.iter().take(w) {
            positive[i] = Some(z);
        }
    }
    Ok(Assignment { positive })
}

fn layer_pose_terms(
    g: &mut Graph,
    layer: &LayerTrace,
    assignment: &Assignment,
    gts: &GroundTruthSet,
    projections: &[Vec<Vec<Option<Point2>>>],
    rig: &CameraRig,
    joints: usize,
    margin: f64,
) -> (Var, Var) {
    let n = layer.token_ids.len();
    let views = rig.len();
    let mut t3 = Array2::zeros((n * joints, 3));
    let mut w3 = Array2::zeros((n * joints, 3));
    let mut t2 = Array2::zeros((n * views * joints, 2));
    let mut w2 = Array2::zeros((n * views * joints, 2));
    for (i, &id) in layer.token_ids.iter().enumerate() {
        let Some(z) = assignment.positive[id] else { continue };
        for j in 0..joints {
            let p = gts.humans[z][j];
            for c in 0..3 {
                t3[(i * joints + j, c)] = p[c];
                w3[(i * joints + j, c)] = 1.0;
            }
            for t in 0..views {
                let r = (i * views + t) * joints + j;
                if let Some(uv) = projections[z][t][j] {
                    if layer.valid[r] && rig.views[t].within_bounds(&uv, margin) {
                        t2[(r, 0)] = uv.x;
                        t2[(r, 1)] = uv.y;
                        w2[(r, 0)] = 1.0;
                        w2[(r, 1)] = 1.0;
                    }
                }
            }
        }
    }
    let l3 = g.weighted_l1(layer.geometry, &t3, &w3);
    let l2 = g.weighted_l1(layer.estimates, &t2, &w2);
    (l3, l2)
}

/// Summed over layers: L1 on positive geometry plus per-view L1 on the 2D estimates.
pub fn pose_loss(
    g: &mut Graph,
    layers: &[LayerTrace],
    assignment: &Assignment,
    gts: &GroundTruthSet,
    rig: &CameraRig,
    joints: usize,
    margin: f64,
) -> Var {
    let projections = gts.projections(rig);
    let mut total = g.constant(Array2::zeros((1, 1)));
    for layer in layers {
        let (l3, l2) = layer_pose_terms(g, layer, assignment, gts, &projections, rig, joints, margin);
        total = g.add(total, l3);
        total = g.add(total, l2);
    }
    total
}

/// Binary cross-entropy of both classifier logits against `(y, 1 − y)`,
/// averaged over tokens and joints and summed over layers.
pub fn classification_loss(g: &mut Graph, layers: &[LayerTrace], assignment: &Assignment, joints: usize) -> Var {
    let labels = assignment.labels();
    let mut total = g.constant(Array2::zeros((1, 1)));
    for layer in layers {
        let n = layer.token_ids.len();
        let mut target = Array2::zeros((n * joints, 2));
        for (i, &id) in layer.token_ids.iter().enumerate() {
            for j in 0..joints {
                target[(i * joints + j, 0)] = labels[id];
                target[(i * joints + j, 1)] = 1.0 - labels[id];
            }
        }
        let weight = Array2::from_elem((n * joints, 2), 1.0 / (2 * n * joints) as f64);
        let l = g.weighted_bce_logits(layer.logits, &target, &weight);
        total = g.add(total, l);
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of the classification term.
    pub cls_weight: f64,
    /// Positive tokens per ground-truth human.
    pub positives_per_gt: usize,
    /// Distinct synthetic training scenes, cycled through by step.
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Seed offset separating validation scenes from training scenes.
    pub val_seed_offset: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            steps_per_epoch: 100,
            learning_rate: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            cls_weight: 1.0,
            positives_per_gt: 1,
            train_scenes: 500,
            val_scenes: 4,
            val_seed_offset: 1_000_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.steps_per_epoch == 0 {
            return bad("steps_per_epoch must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !(self.cls_weight >= 0.0) {
            return bad("learning_rate and cls_weight must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.positives_per_gt == 0 {
            return bad("positives_per_gt must be at least 1");
        }
        if self.train_scenes == 0 {
            return bad("train_scenes must be at least 1");
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.steps.div_ceil(self.steps_per_epoch)
    }
}

/// First and second moment estimates of every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Array2<f64>> = params.values().iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Array2<f64>], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (k, p) in params.values_mut().iter_mut().enumerate() {
            let g = &grads[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub pose_loss: f64,
    pub cls_loss: f64,
    /// NaN without validation scenes or matches.
    #[serde(with = "nan_as_null")]
    pub val_mpjpe_mm: f64,
    #[serde(with = "nan_as_null")]
    pub ap25: f64,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,pose_loss,cls_loss,val_mpjpe_mm,ap25\n");
    for m in log {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            m.epoch, m.pose_loss, m.cls_loss, m.val_mpjpe_mm, m.ap25
        ));
    }
    s
}

/// A scene ready for the pipeline together with its ground truth.
#[derive(Clone)]
pub struct PreparedScene {
    pub inputs: SceneInputs,
    pub actors: Vec<Vec<Point3>>,
}

impl From<Scene> for PreparedScene {
    fn from(s: Scene) -> Self {
        Self {
            inputs: SceneInputs {
                rig: s.rig,
                pyramids: Arc::new(s.pyramids),
            },
            actors: s.actors,
        }
    }
}

/// Training scenes: a fixed list, or synthetic scenes rendered on demand.
pub enum TrainData {
    Fixed(Vec<PreparedScene>),
    Synthetic { config: SceneConfig, count: usize },
}

impl TrainData {
    fn len(&self) -> usize {
        match self {
            TrainData::Fixed(s) => s.len(),
            TrainData::Synthetic { count, .. } => *count,
        }
    }

    fn scene(&self, i: usize) -> Result<PreparedScene> {
        match self {
            TrainData::Fixed(s) => Ok(s[i].clone()),
            TrainData::Synthetic { config, .. } => {
                let cfg = SceneConfig {
                    rng_seed: config.rng_seed.wrapping_add(i as u64),
                    ..config.clone()
                };
                Ok(generate_scene(&cfg)?.into())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub pose: f64,
    pub cls: f64,
}

impl StepLosses {
    pub fn total(&self, cls_weight: f64) -> f64 {
        self.pose + cls_weight * self.cls
    }
}

/// Losses of one scene and, with `grad`, their parameter gradients.
pub fn scene_losses(
    model: &ModelParams,
    scene: &PreparedScene,
    cfg: &TrainConfig,
    grad: bool,
) -> Result<(StepLosses, Option<Vec<Array2<f64>>>)> {
    let c = &model.config;
    let tokens = initial_tokens(model)?;
    let anchors: Vec<Vec<Point3>> = tokens.tokens.iter().map(|t| t.geometry.clone()).collect();
    let gts = GroundTruthSet::from_actors(&scene.actors, c.num_joints);
    let assignment = match_gt(&anchors, &gts, cfg.positives_per_gt)?;
    let mut g = Graph::new(grad);
    let pv = model.params.register(&mut g);
    let result = forward(&mut g, &pv, model, &scene.inputs, &tokens, false)?;
    let pose = pose_loss(&mut g, &result.layers, &assignment, &gts, &scene.inputs.rig, c.num_joints, c.view_margin);
    let cls = classification_loss(&mut g, &result.layers, &assignment, c.num_joints);
    let losses = StepLosses {
        pose: g.value(pose)[(0, 0)],
        cls: g.value(cls)[(0, 0)],
    };
    if !losses.pose.is_finite() || !losses.cls.is_finite() {
        return Err(Error::DivergenceDetected { step: 0 });
    }
    if !grad {
        return Ok((losses, None));
    }
    let weighted = g.scale(cls, cfg.cls_weight);
    let total = g.add(pose, weighted);
    let grads = g.backward(total);
    let out = pv
        .vars
        .iter()
        .zip(model.params.values())
        .map(|(&v, p)| grads.get_or_zeros(v, p.dim()))
        .collect();
    Ok((losses, Some(out)))
}

/// Final-layer predictions of every validation scene as metric frames.
pub fn predict_frames(model: &ModelParams, scenes: &[PreparedScene]) -> Result<Vec<Frame>> {
    let j = model.config.num_joints;
    scenes
        .par_iter()
        .map(|s| {
            let out = run_pipeline(&s.inputs, model)?;
            Ok(Frame {
                predictions: out.predictions(),
                ground_truth: GroundTruthSet::from_actors(&s.actors, j).humans,
            })
        })
        .collect()
}

/// Frames built from every layer's hypotheses with the inference filter and
/// NMS applied, `[layer][scene]`. The last layer equals [`predict_frames`].
pub fn frames_by_layer(model: &ModelParams, scenes: &[PreparedScene]) -> Result<Vec<Vec<Frame>>> {
    let c = &model.config;
    let per_scene: Vec<Vec<Frame>> = scenes
        .par_iter()
        .map(|s| {
            let out = run_pipeline(&s.inputs, model)?;
            let gt = GroundTruthSet::from_actors(&s.actors, c.num_joints).humans;
            Ok(out
                .layers
                .iter()
                .map(|l| {
                    let keep = filter_indices(&l.scores, c.epsilon);
                    let poses: Vec<Vec<Point3>> = keep.iter().map(|&i| l.poses[i].clone()).collect();
                    let scores: Vec<f64> = keep.iter().map(|&i| l.scores[i]).collect();
                    let kept = nms_indices(&poses, &scores, c.nms_radius_mm);
                    Frame {
                        predictions: kept.iter().map(|&i| (poses[i].clone(), scores[i])).collect(),
                        ground_truth: gt.clone(),
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let layers = per_scene.iter().map(|f| f.len()).min().unwrap_or(0);
    Ok((0..layers)
        .map(|m| per_scene.iter().map(|f| f[m].clone()).collect())
        .collect())
}

pub fn validate_model(model: &ModelParams, scenes: &[PreparedScene]) -> Result<(f64, f64)> {
    if scenes.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let frames = predict_frames(model, scenes)?;
    let mpjpe = eval::matched_mpjpe(&frames)?.unwrap_or(f64::NAN);
    Ok((mpjpe, eval::ap_at(&frames, 25.0)?))
}

/// Resumable optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelParams,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub log: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(model: ModelParams) -> Self {
        Self {
            adam: AdamState::new(&model.params),
            model,
            epochs_done: 0,
            log: Vec::new(),
        }
    }
}

/// Run epochs until `cfg.steps` steps have been taken in total. Step `k`
/// trains on scene `k mod len`; a zero learning rate leaves parameters unchanged.
pub fn train(
    mut state: TrainState,
    cfg: &TrainConfig,
    data: &TrainData,
    val: &[PreparedScene],
    mut on_epoch: impl FnMut(&TrainState),
) -> Result<TrainState> {
    cfg.validate()?;
    state.model.config.validate()?;
    if data.len() == 0 {
        return Err(Error::InvalidConfig("at least one training scene is required".into()));
    }
    let total_epochs = cfg.epochs();
    while state.epochs_done < total_epochs {
        let epoch = state.epochs_done;
        let start = epoch * cfg.steps_per_epoch;
        let end = (start + cfg.steps_per_epoch).min(cfg.steps);
        let (mut pose_sum, mut cls_sum) = (0.0, 0.0);
        for step in start..end {
            let scene = data.scene(step % data.len())?;
            let (losses, grads) = scene_losses(&state.model, &scene, cfg, true)
                .map_err(|e| match e {
                    Error::DivergenceDetected { .. } => Error::DivergenceDetected { step },
                    other => other,
                })?;
            let grads = grads.expect("gradients requested");
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::DivergenceDetected { step });
            }
            pose_sum += losses.pose;
            cls_sum += losses.cls;
            if cfg.learning_rate > 0.0 {
                state.adam.update(&mut state.model.params, &grads, cfg);
            }
        }
        let n = (end - start).max(1) as f64;
        let (val_mpjpe_mm, ap25) = validate_model(&state.model, val)?;
        state.log.push(EpochMetrics {
            epoch,
            pose_loss: pose_sum / n,
            cls_loss: cls_sum / n,
            val_mpjpe_mm,
            ap25,
        });
        state.epochs_done += 1;
        on_epoch(&state);
    }
    Ok(state)
}
