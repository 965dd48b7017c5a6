//! Projective state-space blocks and the progressive regression over joint tokens.
//!
//! Row layouts used throughout:
//! - per-joint rows `i·J + j` for token `i`, joint `j`;
//! - per-view rows `(i·T + t)·J + j`, so one token's `T·J` view tokens are
//!   contiguous and ordered view-major with the joint chain inside.

mod features;
mod params;

use std::rc::Rc;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use features::{sample_bilinear, sample_bilinear_jacobian, FeatureLevel, FeaturePyramid};
pub use params::{layer_key, ModelParams, ParamSet, ParamVars};

use crate::autodiff::{Graph, RowMap, Var};
use crate::error::{Error, Result};
use crate::geometry::{project_with_jacobian, solve_dlt, BoundObservation, CameraRig, Point2, Point3, SVD_GAP_EPSILON};
use crate::scanning::{backward_batch, build_gtbs_orders, forward_batch, BidirectionalParams, Grouping, ScanOrder};
use crate::ssm::SelectiveProjections;
use crate::tokens::{filter_indices, init_tokens, nms_indices, GroundBounds, JointToken, TokenInit, TokenSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    #[default]
    Pss,
    ProjAttentionOnly,
    CrossAttention,
    Mean,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 4] = [
        BlockVariant::Pss,
        BlockVariant::ProjAttentionOnly,
        BlockVariant::CrossAttention,
        BlockVariant::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockVariant::Pss => "pss",
            BlockVariant::ProjAttentionOnly => "proj_attention_only",
            BlockVariant::CrossAttention => "cross_attention",
            BlockVariant::Mean => "mean",
        }
    }
}

/// Where the scan sits relative to projective attention inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    #[default]
    AttentionFirst,
    ScanFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub num_layers: usize,
    pub num_tokens: usize,
    pub num_joints: usize,
    pub feature_dim: usize,
    pub epsilon: f64,
    pub block_variant: BlockVariant,
    pub block_order: BlockOrder,
    /// Deformable points per scale.
    pub points: usize,
    pub scales: usize,
    pub state_dim: usize,
    /// Channel count inside the scan.
    pub scan_dim: usize,
    pub ffn_dim: usize,
    pub head_dim: usize,
    /// Pixel scale of the 2D residual head output.
    pub offset_scale_px: f64,
    pub grouping: Grouping,
    /// Stop gradients through the geometry handed from one layer to the next.
    pub detach_anchors: bool,
    pub nms_radius_mm: f64,
    pub token_bounds: GroundBounds,
    pub token_jitter: f64,
    pub token_seed: u64,
    /// Anchors outside this multiple of the image extent are masked.
    pub view_margin: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_tokens: 1024,
            num_joints: crate::tokens::NUM_JOINTS,
            feature_dim: 256,
            epsilon: 0.1,
            block_variant: BlockVariant::Pss,
            block_order: BlockOrder::AttentionFirst,
            points: 4,
            scales: 3,
            state_dim: 16,
            scan_dim: 256,
            ffn_dim: 512,
            head_dim: 256,
            offset_scale_px: 16.0,
            grouping: Grouping::JointMajor,
            detach_anchors: true,
            nms_radius_mm: 500.0,
            token_bounds: GroundBounds::centered(8000.0, 8000.0),
            token_jitter: 0.5,
            token_seed: 0,
            view_margin: 1.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1");
        }
        if self.num_tokens == 0 {
            return bad("num_tokens must be at least 1");
        }
        if self.num_joints == 0 || self.num_joints > crate::tokens::NUM_JOINTS {
            return bad("num_joints must be between 1 and 15");
        }
        if [self.feature_dim, self.points, self.scales, self.state_dim, self.scan_dim, self.ffn_dim, self.head_dim]
            .contains(&0)
        {
            return bad("dimensions must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        if !(self.offset_scale_px > 0.0) || !(self.view_margin >= 1.0) || !(self.nms_radius_mm >= 0.0) {
            return bad("offset_scale_px > 0, view_margin >= 1 and nms_radius_mm >= 0 required");
        }
        if !(0.0..=1.0).contains(&self.token_jitter) {
            return bad("token_jitter must lie in [0, 1]");
        }
        let b = &self.token_bounds;
        if !(b.max[0] >= b.min[0] && b.max[1] >= b.min[1]) {
            return bad("token_bounds max must not be below min");
        }
        Ok(())
    }
}

/// Inputs of one multi-view frame.
#[derive(Clone)]
pub struct SceneInputs {
    pub rig: CameraRig,
    pub pyramids: Arc<Vec<FeaturePyramid>>,
}

impl SceneInputs {
    pub fn validate(&self, config: &PipelineConfig) -> Result<()> {
        if self.pyramids.len() != self.rig.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} pyramids for {} views",
                self.pyramids.len(),
                self.rig.len()
            )));
        }
        for p in self.pyramids.iter() {
            p.validate()?;
            if p.levels.len() != config.scales || p.channels() != config.feature_dim {
                return Err(Error::ShapeMismatch(format!(
                    "pyramid has {} levels of {} channels, model expects {} of {}",
                    p.levels.len(),
                    p.channels(),
                    config.scales,
                    config.feature_dim
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer values kept on the tape for the losses.
pub struct LayerTrace {
    /// Indices into the initial token set.
    pub token_ids: Vec<usize>,
    /// Updated geometry, `n·J × 3`.
    pub geometry: Var,
    /// Refined 2D estimates `u + Δu`, per-view rows × 2.
    pub estimates: Var,
    pub confidence: Var,
    pub valid: Vec<bool>,
    /// Classifier logits, `n·J × 2`.
    pub logits: Var,
    pub scores: Vec<f64>,
    /// Joints that kept their previous geometry.
    pub flagged: Vec<bool>,
}

pub struct ForwardResult {
    pub layers: Vec<LayerTrace>,
    /// Indices into the initial set that survive the final filter and NMS.
    pub final_ids: Vec<usize>,
}

/// Token set used by every run of a model.
pub fn initial_tokens(model: &ModelParams) -> Result<TokenSet> {
    let c = &model.config;
    init_tokens(
        &TokenInit {
            count: c.num_tokens,
            bounds: c.token_bounds,
            jitter: c.token_jitter,
            seed: c.token_seed,
        },
        model.params.get("joint_embed"),
    )
}

struct Dims {
    n: usize,
    t: usize,
    j: usize,
}

impl Dims {
    fn view_rows(&self) -> usize {
        self.n * self.t * self.j
    }

    /// Per-view row → per-joint row.
    fn joint_of_view_row(&self, r: usize) -> usize {
        let j = r % self.j;
        let i = r / (self.t * self.j);
        i * self.j + j
    }
}

fn geometry_matrix(poses: &[&[Point3]]) -> Array2<f64> {
    let j = poses.first().map_or(0, |p| p.len());
    let mut m = Array2::zeros((poses.len() * j, 3));
    for (i, p) in poses.iter().enumerate() {
        for (k, q) in p.iter().enumerate() {
            m[(i * j + k, 0)] = q.x;
            m[(i * j + k, 1)] = q.y;
            m[(i * j + k, 2)] = q.z;
        }
    }
    m
}

pub fn poses_from_matrix(m: &Array2<f64>, joints: usize) -> Vec<Vec<Point3>> {
    (0..m.nrows() / joints)
        .map(|i| {
            (0..joints)
                .map(|k| {
                    let r = i * joints + k;
                    Point3::new(m[(r, 0)], m[(r, 1)], m[(r, 2)])
                })
                .collect()
        })
        .collect()
}

/// Anchors `u_t = project(view t, k_j)` for every per-view row, plus the validity mask.
fn project_anchors(g: &mut Graph, geometry: Var, rig: &CameraRig, dims: &Dims, margin: f64) -> (Var, Vec<bool>) {
    let kv = g.value(geometry);
    let rows = dims.view_rows();
    let mut value = Array2::zeros((rows, 2));
    let mut valid = vec![false; rows];
    let mut jacobians = Vec::with_capacity(rows);
    for r in 0..rows {
        let t = (r / dims.j) % dims.t;
        let k = dims.joint_of_view_row(r);
        let view = &rig.views[t];
        let p = Point3::new(kv[(k, 0)], kv[(k, 1)], kv[(k, 2)]);
        let projected = if p.iter().all(|c| c.is_finite()) {
            project_with_jacobian(view, &p).ok()
        } else {
            None
        };
        match projected {
            Some((uv, jac)) if view.within_bounds(&uv, margin) => {
                value[(r, 0)] = uv.x;
                value[(r, 1)] = uv.y;
                valid[r] = true;
                jacobians.push(Some(jac));
            }
            _ => {
                value[(r, 0)] = view.width as f64 / 2.0;
                value[(r, 1)] = view.height as f64 / 2.0;
                jacobians.push(None);
            }
        }
    }
    let nj = kv.nrows();
    let (jj, tt) = (dims.j, dims.t);
    let var = g.custom(value, &[geometry], move |gr, _| {
        let mut gk = Array2::zeros((nj, 3));
        for (r, jac) in jacobians.iter().enumerate() {
            if let Some(jac) = jac {
                let k = (r / (tt * jj)) * jj + r % jj;
                for c in 0..3 {
                    gk[(k, c)] += jac[(0, c)] * gr[(r, 0)] + jac[(1, c)] * gr[(r, 1)];
                }
            }
        }
        vec![(geometry, gk)]
    });
    (var, valid)
}

/// Attention-weighted deformable bilinear samples around each anchor.
///
/// `offsets` are in grid units of each level, `weights` are normalised per row.
fn deformable_sample(
    g: &mut Graph,
    anchors: Var,
    offsets: Var,
    weights: Var,
    pyramids: &Arc<Vec<FeaturePyramid>>,
    dims: &Dims,
    points: usize,
) -> Var {
    let (av, ov, wv) = (g.value(anchors), g.value(offsets), g.value(weights));
    let rows = av.nrows();
    let channels = pyramids[0].channels();
    let scales = pyramids[0].levels.len();
    let mut value = Array2::zeros((rows, channels));
    for r in 0..rows {
        let t = (r / dims.j) % dims.t;
        let pyr = &pyramids[t];
        let out = value.row_mut(r).into_slice().unwrap();
        for s in 0..scales {
            let level = &pyr.levels[s];
            for q in 0..points {
                let i = s * points + q;
                let x = av[(r, 0)] / level.stride + ov[(r, 2 * i)];
                let y = av[(r, 1)] / level.stride + ov[(r, 2 * i + 1)];
                features::sample_into(level, x, y, wv[(r, i)], out);
            }
        }
    }
    let pyramids = Arc::clone(pyramids);
    let (jj, tt) = (dims.j, dims.t);
    g.custom(value, &[anchors, offsets, weights], move |gr, graph| {
        let (av, ov, wv) = (graph.value(anchors), graph.value(offsets), graph.value(weights));
        let mut ga = Array2::zeros(av.dim());
        let mut go = Array2::zeros(ov.dim());
        let mut gw = Array2::zeros(wv.dim());
        for r in 0..av.nrows() {
            let t = (r / jj) % tt;
            let pyr = &pyramids[t];
            let grow = gr.row(r);
            let gslice = grow.as_slice().unwrap();
            for s in 0..scales {
                let level = &pyr.levels[s];
                for q in 0..points {
                    let i = s * points + q;
                    let x = av[(r, 0)] / level.stride + ov[(r, 2 * i)];
                    let y = av[(r, 1)] / level.stride + ov[(r, 2 * i + 1)];
                    let (val, dx, dy) = features::sample_vjp(level, x, y, gslice);
                    let w = wv[(r, i)];
                    gw[(r, i)] += val;
                    go[(r, 2 * i)] += w * dx;
                    go[(r, 2 * i + 1)] += w * dy;
                    ga[(r, 0)] += w * dx / level.stride;
                    ga[(r, 1)] += w * dy / level.stride;
                }
            }
        }
        vec![(anchors, ga), (offsets, go), (weights, gw)]
    })
}

/// Confidence-weighted triangulation of every joint from its refined 2D estimates.
/// Joints with fewer than two usable views keep `previous`.
fn triangulate_joints(
    g: &mut Graph,
    estimates: Var,
    confidence: Var,
    previous: Var,
    rig: &CameraRig,
    dims: &Dims,
) -> (Var, Vec<bool>) {
    let (uv, cv, pv) = (g.value(estimates), g.value(confidence), g.value(previous));
    let nj = pv.nrows();
    let mut value = pv.clone();
    let mut flagged = vec![false; nj];
    let mut solutions = Vec::with_capacity(nj);
    for k in 0..nj {
        let (i, j) = (k / dims.j, k % dims.j);
        let obs: Vec<BoundObservation<'_>> = (0..dims.t)
            .map(|t| {
                let r = (i * dims.t + t) * dims.j + j;
                BoundObservation {
                    view: &rig.views[t],
                    position: Point2::new(uv[(r, 0)], uv[(r, 1)]),
                    confidence: cv[(r, 0)].clamp(0.0, 1.0),
                }
            })
            .collect();
        match solve_dlt(&obs) {
            Ok(sol) if sol.point.iter().all(|c| c.is_finite() && c.abs() < 1e8) => {
                for c in 0..3 {
                    value[(k, c)] = sol.point[c];
                }
                solutions.push(Some(sol));
            }
            _ => {
                flagged[k] = true;
                solutions.push(None);
            }
        }
    }
    let (jj, tt) = (dims.j, dims.t);
    let rows = uv.nrows();
    let var = g.custom(value, &[estimates, confidence, previous], move |gr, _| {
        let mut gu = Array2::zeros((rows, 2));
        let mut gc = Array2::zeros((rows, 1));
        let mut gp = Array2::zeros((nj, 3));
        for (k, sol) in solutions.iter().enumerate() {
            let gk = nalgebra::Vector3::new(gr[(k, 0)], gr[(k, 1)], gr[(k, 2)]);
            match sol {
                Some(sol) => {
                    if sol.singular_gap() <= SVD_GAP_EPSILON {
                        continue;
                    }
                    let (i, j) = (k / jj, k % jj);
                    for (t, (g_u, g_c)) in sol.backprop(&gk).into_iter().enumerate() {
                        let r = (i * tt + t) * jj + j;
                        gu[(r, 0)] += g_u.x;
                        gu[(r, 1)] += g_u.y;
                        gc[(r, 0)] += g_c;
                    }
                }
                None => {
                    for c in 0..3 {
                        gp[(k, c)] = gk[c];
                    }
                }
            }
        }
        vec![(estimates, gu), (confidence, gc), (previous, gp)]
    });
    (var, flagged)
}

fn row_to_vec(a: &Array2<f64>) -> Array1<f64> {
    a.row(0).to_owned()
}

fn vec_to_row(a: Array1<f64>) -> Array2<f64> {
    a.insert_axis(ndarray::Axis(0))
}

const SCAN_PROJ_KEYS: [&str; 6] = ["delta_w", "delta_b", "b_w", "b_b", "c_w", "c_b"];

fn projections(values: &[&Array2<f64>]) -> SelectiveProjections {
    SelectiveProjections {
        w_delta: values[0].clone(),
        b_delta: row_to_vec(values[1]),
        w_b: values[2].clone(),
        b_b: row_to_vec(values[3]),
        w_c: values[4].clone(),
        b_c: row_to_vec(values[5]),
    }
}

fn projection_grads(p: SelectiveProjections) -> [Array2<f64>; 6] {
    [
        p.w_delta,
        vec_to_row(p.b_delta),
        p.w_b,
        vec_to_row(p.b_b),
        p.w_c,
        vec_to_row(p.b_c),
    ]
}

/// Bidirectional selective scan over each token's per-view sequence.
fn scan_op(g: &mut Graph, seq: Var, a: Var, d: Var, fwd: [Var; 6], bwd: [Var; 6], order: &ScanOrder) -> Result<Var> {
    let vals = |g: &Graph, vs: &[Var; 6]| projections(&vs.iter().map(|&v| g.value(v)).collect::<Vec<_>>());
    let params = BidirectionalParams {
        a: g.value(a).clone(),
        d: row_to_vec(g.value(d)),
        forward: vals(g, &fwd),
        backward: vals(g, &bwd),
    };
    let (y, cache) = forward_batch(&params, g.value(seq), order)?;
    let mut parents = vec![seq, a, d];
    parents.extend_from_slice(&fwd);
    parents.extend_from_slice(&bwd);
    Ok(g.custom(y, &parents, move |gr, _| {
        let grads = backward_batch(&params, &cache, gr);
        let mut out = vec![(seq, grads.x), (a, grads.a), (d, vec_to_row(grads.d))];
        for (v, gv) in fwd.iter().zip(projection_grads(grads.forward)) {
            out.push((*v, gv));
        }
        for (v, gv) in bwd.iter().zip(projection_grads(grads.backward)) {
            out.push((*v, gv));
        }
        out
    }))
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Var {
    let y = g.matmul(x, w);
    match b {
        Some(b) => g.add_row(y, b),
        None => y,
    }
}

struct Block<'a> {
    pv: &'a ParamVars,
    layer: usize,
}

impl Block<'_> {
    fn p(&self, key: &str) -> Var {
        self.pv.get(&layer_key(self.layer, key))
    }

    fn dir(&self, dir: &str) -> [Var; 6] {
        SCAN_PROJ_KEYS.map(|k| self.p(&format!("{dir}.{k}")))
    }
}

/// Maps between the per-joint and per-view row spaces for one layer.
struct RowMaps {
    /// per-view row → its per-joint row.
    spread: Vec<usize>,
    /// Masked mean over views, per joint.
    view_mean: Rc<RowMap>,
    /// Joints with no valid view.
    unseen: Vec<bool>,
    /// joint index of each per-view row.
    joint_of_row: Rc<Vec<usize>>,
    mask_col: Array2<f64>,
}

fn row_maps(dims: &Dims, valid: &[bool]) -> RowMaps {
    let rows = dims.view_rows();
    let nj = dims.n * dims.j;
    let spread: Vec<usize> = (0..rows).map(|r| dims.joint_of_view_row(r)).collect();
    let mut entries = vec![Vec::new(); nj];
    for r in 0..rows {
        if valid[r] {
            entries[spread[r]].push(r);
        }
    }
    let unseen = entries.iter().map(|e| e.is_empty()).collect();
    let entries = entries
        .into_iter()
        .map(|rs| {
            let w = 1.0 / rs.len().max(1) as f64;
            rs.into_iter().map(|r| (r, w)).collect()
        })
        .collect();
    RowMaps {
        spread,
        view_mean: Rc::new(RowMap {
            input_rows: rows,
            entries,
        }),
        unseen,
        joint_of_row: Rc::new((0..rows).map(|r| r % dims.j).collect()),
        mask_col: Array2::from_shape_fn((rows, 1), |(r, _)| if valid[r] { 1.0 } else { 0.0 }),
    }
}

/// Deformable sampling around the anchors, masked per view row.
#[allow(clippy::too_many_arguments)]
fn sample_views(
    g: &mut Graph,
    b: &Block<'_>,
    config: &PipelineConfig,
    query: Var,
    anchors: Var,
    maps: &RowMaps,
    mask: Var,
    scene: &SceneInputs,
    dims: &Dims,
) -> Var {
    let sp = config.scales * config.points;
    let rows = dims.view_rows();
    let (off_v, att_v) = if config.block_variant == BlockVariant::Mean && b.layer > 0 {
        (
            g.constant(Array2::zeros((rows, 2 * sp))),
            g.constant(Array2::from_elem((rows, sp), 1.0 / sp as f64)),
        )
    } else {
        let off = linear(g, query, b.p("off_w"), Some(b.p("off_b")));
        let logits = linear(g, query, b.p("att_w"), Some(b.p("att_b")));
        let att = g.softmax_groups(logits, sp);
        (g.gather_rows(off, &maps.spread), g.gather_rows(att, &maps.spread))
    };
    let f = deformable_sample(g, anchors, off_v, att_v, &scene.pyramids, dims, config.points);
    g.mul_col(f, mask)
}

struct BlockOutput {
    visual: Var,
    view_tokens: Var,
}

/// Visual update and per-view joint features of one block.
#[allow(clippy::too_many_arguments)]
fn block_forward(
    g: &mut Graph,
    b: &Block<'_>,
    config: &PipelineConfig,
    x0: Var,
    anchors: Var,
    maps: &RowMaps,
    mask: Var,
    scene: &SceneInputs,
    dims: &Dims,
) -> Result<BlockOutput> {
    let plain_mean = config.block_variant == BlockVariant::Mean && b.layer > 0;
    let attend = |g: &mut Graph, query: Var| sample_views(g, b, config, query, anchors, maps, mask, scene, dims);
    let scan = |g: &mut Graph, x: Var, fm: Option<Var>| -> Result<(Var, Var)> {
        let xg = g.gather_rows(x, &maps.spread);
        let mut seq = g.matmul(xg, b.p("scan_in_w"));
        if let Some(fm) = fm {
            let s2 = g.matmul(fm, b.p("scan_feat_w"));
            seq = g.add(seq, s2);
        }
        let a_exp = g.exp(b.p("a_log"));
        let a = g.scale(a_exp, -1.0);
        let order = build_gtbs_orders(dims.t, dims.j, config.grouping);
        let z = scan_op(g, seq, a, b.p("d_skip"), b.dir("fwd"), b.dir("bwd"), &order)?;
        let zo = g.matmul(z, b.p("scan_out_w"));
        let zo = g.mul_col(zo, mask);
        let pooled = g.row_combine(zo, Rc::clone(&maps.view_mean));
        let ln = g.layer_norm(pooled, b.p("ln_g"), b.p("ln_b"));
        let update = ffn(g, b, ln);
        let out = g.add(x, update);
        Ok((out, zo))
    };
    let project_in = |g: &mut Graph, x: Var, fm: Var| -> Var {
        let pooled = g.row_combine(fm, Rc::clone(&maps.view_mean));
        let upd = linear(g, pooled, b.p("out_w"), Some(b.p("out_b")));
        if plain_mean {
            upd
        } else {
            g.add(x, upd)
        }
    };

    match config.block_variant {
        BlockVariant::Pss if config.block_order == BlockOrder::ScanFirst => {
            let (x1, zo) = scan(g, x0, None)?;
            let fm = attend(g, x1);
            let x2 = project_in(g, x1, fm);
            let e = g.add(fm, zo);
            Ok(BlockOutput {
                visual: x2,
                view_tokens: e,
            })
        }
        BlockVariant::Pss => {
            let fm = attend(g, x0);
            let x1 = project_in(g, x0, fm);
            let (x2, zo) = scan(g, x1, Some(fm))?;
            let e = g.add(fm, zo);
            Ok(BlockOutput {
                visual: x2,
                view_tokens: e,
            })
        }
        BlockVariant::ProjAttentionOnly | BlockVariant::Mean => {
            let fm = attend(g, x0);
            let x1 = project_in(g, x0, fm);
            Ok(BlockOutput {
                visual: x1,
                view_tokens: fm,
            })
        }
        BlockVariant::CrossAttention => {
            let fm = attend(g, x0);
            let x1 = project_in(g, x0, fm);
            let q = g.matmul(x1, b.p("q_w"));
            let k = g.matmul(fm, b.p("k_w"));
            let v = g.matmul(fm, b.p("v_w"));
            let key_mask: Vec<bool> = maps.mask_col.iter().map(|&m| m > 0.0).collect();
            let ca = g.group_attention(q, k, v, dims.j, dims.t * dims.j, Rc::new(key_mask));
            let ln = g.layer_norm(ca, b.p("ln_g"), b.p("ln_b"));
            let upd = ffn(g, b, ln);
            let x2 = g.add(x1, upd);
            Ok(BlockOutput {
                visual: x2,
                view_tokens: fm,
            })
        }
    }
}

fn ffn(g: &mut Graph, b: &Block<'_>, x: Var) -> Var {
    let h = linear(g, x, b.p("ffn_w1"), Some(b.p("ffn_b1")));
    let h = g.silu(h);
    linear(g, h, b.p("ffn_w2"), Some(b.p("ffn_b2")))
}

struct LayerStep {
    visual: Var,
    trace: LayerTrace,
}

/// One refinement layer: block update, 2D residuals, confidences and triangulation.
#[allow(clippy::too_many_arguments)]
fn refine_layer(
    g: &mut Graph,
    pv: &ParamVars,
    config: &PipelineConfig,
    layer: usize,
    scene: &SceneInputs,
    visual: Var,
    geometry: Var,
    token_ids: Vec<usize>,
) -> Result<LayerStep> {
    let dims = Dims {
        n: token_ids.len(),
        t: scene.rig.len(),
        j: config.num_joints,
    };
    let b = Block { pv, layer };
    let anchor_source = if config.detach_anchors { g.detach(geometry) } else { geometry };
    let (anchors, valid) = project_anchors(g, anchor_source, &scene.rig, &dims, config.view_margin);
    let maps = row_maps(&dims, &valid);
    let mask = g.constant(maps.mask_col.clone());
    let out = block_forward(g, &b, config, visual, anchors, &maps, mask, scene, &dims)?;

    let xg = g.gather_rows(out.visual, &maps.spread);
    let head_in = g.concat_cols(&[xg, out.view_tokens]);
    let hidden = linear(g, head_in, b.p("head_w1"), Some(b.p("head_b1")));
    let hidden = g.silu(hidden);
    let raw = g.grouped_matmul(hidden, b.p("head_w2"), Rc::clone(&maps.joint_of_row));
    let bias = g.gather_rows(b.p("head_b2"), &maps.joint_of_row);
    let raw = g.add(raw, bias);
    let du = g.slice_cols(raw, 0, 2);
    let du = g.scale(du, config.offset_scale_px);
    let estimates = g.add(anchors, du);
    let c_logit = g.slice_cols(raw, 2, 3);
    let c = g.sigmoid(c_logit);
    let confidence = g.mul_col(c, mask);
    let (new_geometry, mut flagged) = triangulate_joints(g, estimates, confidence, geometry, &scene.rig, &dims);
    for (f, u) in flagged.iter_mut().zip(&maps.unseen) {
        *f |= *u;
    }

    let logits = linear(g, out.visual, b.p("cls_w"), Some(b.p("cls_b")));
    let lv = g.value(logits);
    let scores = (0..dims.n)
        .map(|i| (0..dims.j).map(|j| crate::ssm::sigmoid(lv[(i * dims.j + j, 0)])).sum::<f64>() / dims.j as f64)
        .collect();
    Ok(LayerStep {
        visual: out.visual,
        trace: LayerTrace {
            token_ids,
            geometry: new_geometry,
            estimates,
            confidence,
            valid,
            logits,
            scores,
            flagged,
        },
    })
}

/// Run all layers on the tape. With `filter` set, tokens scoring below ε are
/// dropped after every layer and NMS runs after the last one.
pub fn forward(
    g: &mut Graph,
    pv: &ParamVars,
    model: &ModelParams,
    scene: &SceneInputs,
    tokens: &TokenSet,
    filter: bool,
) -> Result<ForwardResult> {
    let config = &model.config;
    scene.validate(config)?;
    let n = tokens.len();
    let j = config.num_joints;
    let mut person = Array2::zeros((n * j, config.feature_dim));
    for (i, tok) in tokens.tokens.iter().enumerate() {
        for k in 0..j {
            person.row_mut(i * j + k).assign(&tok.person_embed);
        }
    }
    let person = g.constant(person);
    let joint_idx: Vec<usize> = (0..n * j).map(|r| r % j).collect();
    let joints = g.gather_rows(pv.get("joint_embed"), &joint_idx);
    let mut visual = g.add(person, joints);
    let poses: Vec<&[Point3]> = tokens.tokens.iter().map(|t| t.geometry.as_slice()).collect();
    let mut geometry = g.constant(geometry_matrix(&poses));
    let mut ids: Vec<usize> = (0..n).collect();
    let mut layers = Vec::with_capacity(config.num_layers);
    for m in 0..config.num_layers {
        if ids.is_empty() {
            break;
        }
        let step = refine_layer(g, pv, config, m, scene, visual, geometry, ids.clone())?;
        let trace = step.trace;
        let mut keep: Vec<usize> = (0..ids.len()).collect();
        if filter {
            keep = filter_indices(&trace.scores, config.epsilon);
            if m + 1 == config.num_layers {
                let all = poses_from_matrix(g.value(trace.geometry), j);
                let kept_poses: Vec<Vec<Point3>> = keep.iter().map(|&i| all[i].clone()).collect();
                let kept_scores: Vec<f64> = keep.iter().map(|&i| trace.scores[i]).collect();
                keep = nms_indices(&kept_poses, &kept_scores, config.nms_radius_mm)
                    .into_iter()
                    .map(|i| keep[i])
                    .collect();
            }
        }
        let rows: Vec<usize> = keep.iter().flat_map(|&i| (0..j).map(move |k| i * j + k)).collect();
        let all_kept = keep.len() == ids.len() && keep.iter().enumerate().all(|(a, &b)| a == b);
        if all_kept {
            visual = step.visual;
            geometry = trace.geometry;
        } else {
            visual = g.gather_rows(step.visual, &rows);
            geometry = g.gather_rows(trace.geometry, &rows);
        }
        ids = keep.iter().map(|&i| ids[i]).collect();
        layers.push(trace);
    }
    Ok(ForwardResult {
        layers,
        final_ids: ids,
    })
}

/// Values of one layer after inference.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSnapshot {
    pub token_ids: Vec<usize>,
    pub poses: Vec<Vec<Point3>>,
    pub scores: Vec<f64>,
    pub estimates: Array2<f64>,
    pub confidence: Array2<f64>,
    pub valid: Vec<bool>,
    pub flagged: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub layers: Vec<LayerSnapshot>,
    /// Final scored hypotheses after filtering and NMS.
    pub tokens: TokenSet,
}

impl PipelineOutput {
    pub fn predictions(&self) -> Vec<(Vec<Point3>, f64)> {
        self.tokens
            .tokens
            .iter()
            .map(|t| (t.geometry.clone(), t.score.unwrap_or(0.0)))
            .collect()
    }
}

/// Inference: initialise tokens, refine through all layers with filtering, NMS at the end.
pub fn run_pipeline(scene: &SceneInputs, model: &ModelParams) -> Result<PipelineOutput> {
    let tokens = initial_tokens(model)?;
    let mut g = Graph::new(false);
    let pv = model.params.register(&mut g);
    let result = forward(&mut g, &pv, model, scene, &tokens, true)?;
    let j = model.config.num_joints;
    let layers: Vec<LayerSnapshot> = result
        .layers
        .iter()
        .map(|l| LayerSnapshot {
            token_ids: l.token_ids.clone(),
            poses: poses_from_matrix(g.value(l.geometry), j),
            scores: l.scores.clone(),
            estimates: g.value(l.estimates).clone(),
            confidence: g.value(l.confidence).clone(),
            valid: l.valid.clone(),
            flagged: l.flagged.clone(),
        })
        .collect();
    let mut final_tokens = Vec::new();
    if let Some(last) = layers.last() {
        for &id in &result.final_ids {
            let pos = last.token_ids.iter().position(|&x| x == id).expect("final id in last layer");
            final_tokens.push(JointToken {
                visual: Array2::zeros((0, 0)),
                geometry: last.poses[pos].clone(),
                person_embed: tokens.tokens[id].person_embed.clone(),
                score: Some(last.scores[pos]),
            });
        }
    }
    Ok(PipelineOutput {
        layers,
        tokens: TokenSet {
            tokens: final_tokens,
            capacity: tokens.capacity,
        },
    })
}

/// Per-view outputs of the projective attention for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Anchor positions in image pixels, per-view rows.
    pub anchors: Array2<f64>,
    pub valid: Vec<bool>,
    /// Sampled feature of every view row; zero where masked.
    pub view_features: Array2<f64>,
    /// Mean of the valid view features, per-joint rows.
    pub features: Array2<f64>,
}

struct Standalone {
    g: Graph,
    pv: ParamVars,
    dims: Dims,
    visual: Var,
    anchors: Var,
    maps: RowMaps,
    mask: Var,
}

fn standalone(
    model: &ModelParams,
    layer: usize,
    scene: &SceneInputs,
    visual: &Array2<f64>,
    geometry: &[Vec<Point3>],
) -> Result<Standalone> {
    let config = &model.config;
    scene.validate(config)?;
    if layer >= config.num_layers {
        return Err(Error::InvalidConfig(format!("layer {layer} of {}", config.num_layers)));
    }
    let dims = Dims {
        n: geometry.len(),
        t: scene.rig.len(),
        j: config.num_joints,
    };
    if geometry.iter().any(|p| p.len() != dims.j) || visual.dim() != (dims.n * dims.j, config.feature_dim) {
        return Err(Error::ShapeMismatch(format!(
            "{} tokens of {} joints with {}-dim features",
            dims.n, dims.j, config.feature_dim
        )));
    }
    if geometry.iter().flatten().any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::InvalidConfig("token geometry must be finite".into()));
    }
    let mut g = Graph::new(false);
    let pv = model.params.register(&mut g);
    let poses: Vec<&[Point3]> = geometry.iter().map(|p| p.as_slice()).collect();
    let geo = g.constant(geometry_matrix(&poses));
    let (anchors, valid) = project_anchors(&mut g, geo, &scene.rig, &dims, config.view_margin);
    let maps = row_maps(&dims, &valid);
    if let Some(k) = maps.unseen.iter().position(|&u| u) {
        return Err(Error::AllViewsMasked { joint: k % dims.j });
    }
    let mask = g.constant(maps.mask_col.clone());
    let visual = g.constant(visual.clone());
    Ok(Standalone {
        g,
        pv,
        dims,
        visual,
        anchors,
        maps,
        mask,
    })
}

/// Projective attention of layer `layer` for tokens with the given visual
/// features (per-joint rows) and geometry.
pub fn projective_attention(
    model: &ModelParams,
    layer: usize,
    scene: &SceneInputs,
    visual: &Array2<f64>,
    geometry: &[Vec<Point3>],
) -> Result<AttentionOutput> {
    let mut s = standalone(model, layer, scene, visual, geometry)?;
    let b = Block { pv: &s.pv, layer };
    let fm = sample_views(&mut s.g, &b, &model.config, s.visual, s.anchors, &s.maps, s.mask, scene, &s.dims);
    let pooled = s.g.row_combine(fm, Rc::clone(&s.maps.view_mean));
    Ok(AttentionOutput {
        anchors: s.g.value(s.anchors).clone(),
        valid: s.maps.mask_col.iter().map(|&m| m > 0.0).collect(),
        view_features: s.g.value(fm).clone(),
        features: s.g.value(pooled).clone(),
    })
}

/// Visual-feature update of one block, per-joint rows. Runs whichever
/// variant the model is configured with.
pub fn pss_block_forward(
    model: &ModelParams,
    layer: usize,
    scene: &SceneInputs,
    visual: &Array2<f64>,
    geometry: &[Vec<Point3>],
) -> Result<Array2<f64>> {
    let mut s = standalone(model, layer, scene, visual, geometry)?;
    let b = Block { pv: &s.pv, layer };
    let out = block_forward(
        &mut s.g,
        &b,
        &model.config,
        s.visual,
        s.anchors,
        &s.maps,
        s.mask,
        scene,
        &s.dims,
    )?;
    Ok(s.g.value(out.visual).clone())
}
