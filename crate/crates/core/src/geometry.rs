//! Pinhole projection and confidence-weighted algebraic (DLT) triangulation.
//!
//! World coordinates are millimetres, image coordinates are pixels. Each
//! camera is a 3×4 projection matrix mapping homogeneous world points to
//! homogeneous pixels, with positive third coordinate in front of the camera.
//!
//! Triangulation stacks two rows per view, each scaled by the view's
//! confidence, and takes the eigenvector of the smallest eigenvalue of the
//! normal matrix. Rows are normalised per view (pixel scale and depth-row
//! norm) and the world is expressed in metres internally; neither changes the
//! solution for exact observations.

use std::collections::HashSet;

use nalgebra::{Matrix2x3, Matrix3x2, Matrix3x4, Matrix4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;
pub type Point2 = Vector2<f64>;

/// Homogeneous-depth cutoff below which a projection is rejected.
pub const DEPTH_EPSILON: f64 = 1e-6;
/// Relative singular-value gap below which the triangulated point is not differentiable.
pub const SVD_GAP_EPSILON: f64 = 1e-10;
/// Relative size of the second singular value below which the stacked system is rank deficient.
const RANK_TOLERANCE: f64 = 1e-7;
/// Millimetres per internal world unit used while solving.
const WORLD_SCALE: f64 = 1000.0;

/// One calibrated view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub id: u32,
    pub projection: Matrix3x4<f64>,
    pub width: u32,
    pub height: u32,
}

impl CameraView {
    pub fn new(id: u32, projection: Matrix3x4<f64>, width: u32, height: u32) -> Self {
        Self {
            id,
            projection,
            width,
            height,
        }
    }

    /// Camera centre in world millimetres (right null vector of the projection).
    pub fn center(&self) -> Option<Point3> {
        let m = self.projection.fixed_view::<3, 3>(0, 0).into_owned();
        let t = self.projection.column(3).into_owned();
        m.try_inverse().map(|inv| -(inv * t))
    }

    /// Whether an anchor lies inside the image rectangle grown by `factor` about its centre.
    pub fn within_bounds(&self, p: &Point2, factor: f64) -> bool {
        let (w, h) = (self.width as f64, self.height as f64);
        let mx = 0.5 * (factor - 1.0) * w;
        let my = 0.5 * (factor - 1.0) * h;
        p.x >= -mx && p.x <= w + mx && p.y >= -my && p.y <= h + my
    }

    fn pixel_scale(&self) -> f64 {
        2.0 / (self.width as f64 + self.height as f64).max(1.0)
    }
}

/// A set of calibrated views with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub views: Vec<CameraView>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigFile {
    views: Vec<ViewFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewFile {
    id: u32,
    #[serde(rename = "P")]
    p: Vec<f64>,
    w: u32,
    h: u32,
}

impl CameraRig {
    pub fn new(views: Vec<CameraView>) -> Result<Self> {
        let rig = Self { views };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for v in &self.views {
            if !ids.insert(v.id) {
                return Err(Error::InvalidRig(format!("duplicate view id {}", v.id)));
            }
            if v.projection.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidRig(format!("view {} has non-finite entries", v.id)));
            }
            let sv = v.projection.singular_values();
            let max = sv.max();
            if !(max > 0.0) || sv.min() <= 1e-12 * max {
                return Err(Error::InvalidRig(format!("view {} projection is not rank 3", v.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn view(&self, id: u32) -> Option<&CameraView> {
        self.views.iter().find(|v| v.id == id)
    }

    /// Serialise to `{"views":[{"id":..,"P":[12 row-major],"w":..,"h":..}]}`.
    pub fn to_json(&self) -> String {
        let file = RigFile {
            views: self
                .views
                .iter()
                .map(|v| ViewFile {
                    id: v.id,
                    p: (0..3)
                        .flat_map(|r| (0..4).map(move |c| (r, c)))
                        .map(|(r, c)| v.projection[(r, c)])
                        .collect(),
                    w: v.width,
                    h: v.height,
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("rig serialisation cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RigFile = serde_json::from_str(text)?;
        let views = file
            .views
            .into_iter()
            .map(|v| {
                if v.p.len() != 12 {
                    return Err(Error::InvalidRig(format!(
                        "view {} has {} projection entries, expected 12",
                        v.id,
                        v.p.len()
                    )));
                }
                Ok(CameraView::new(v.id, Matrix3x4::from_row_slice(&v.p), v.w, v.h))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(views)
    }
}

impl Serialize for CameraRig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let value: serde_json::Value =
            serde_json::from_str(&self.to_json()).map_err(serde::ser::Error::custom)?;
        value.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraRig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(d)?;
        CameraRig::from_json(&value.to_string()).map_err(serde::de::Error::custom)
    }
}

/// A 2D detection of one point in one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewObservation {
    pub view_id: u32,
    pub position: Point2,
    pub confidence: f64,
}

impl ViewObservation {
    pub fn new(view_id: u32, position: Point2, confidence: f64) -> Self {
        Self {
            view_id,
            position,
            confidence,
        }
    }
}

/// Homogeneous image point of a world point (no division).
pub fn project_homogeneous(view: &CameraView, p: &Point3) -> Vector3<f64> {
    view.projection * Vector4::new(p.x, p.y, p.z, 1.0)
}

/// Project a world point to pixels.
pub fn project(view: &CameraView, p: &Point3) -> Result<Point2> {
    let h = project_homogeneous(view, p);
    if !(h.z > DEPTH_EPSILON) {
        return Err(Error::DegenerateDepth {
            w: h.z,
            limit: DEPTH_EPSILON,
        });
    }
    Ok(Point2::new(h.x / h.z, h.y / h.z))
}

/// Projection together with its derivative with respect to the world point.
pub fn project_with_jacobian(view: &CameraView, p: &Point3) -> Result<(Point2, Matrix2x3<f64>)> {
    let h = project_homogeneous(view, p);
    if !(h.z > DEPTH_EPSILON) {
        return Err(Error::DegenerateDepth {
            w: h.z,
            limit: DEPTH_EPSILON,
        });
    }
    let u = Point2::new(h.x / h.z, h.y / h.z);
    let pm = &view.projection;
    let mut jac = Matrix2x3::zeros();
    for c in 0..3 {
        jac[(0, c)] = (pm[(0, c)] - u.x * pm[(2, c)]) / h.z;
        jac[(1, c)] = (pm[(1, c)] - u.y * pm[(2, c)]) / h.z;
    }
    Ok((u, jac))
}

/// Mean pixel distance between the projections of `p` and the observations.
pub fn reprojection_error(p: &Point3, observations: &[ViewObservation], rig: &CameraRig) -> Result<f64> {
    if observations.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for obs in observations {
        let view = lookup(rig, obs.view_id)?;
        total += (project(view, p)? - obs.position).norm();
    }
    Ok(total / observations.len() as f64)
}

fn lookup(rig: &CameraRig, id: u32) -> Result<&CameraView> {
    rig.view(id)
        .ok_or_else(|| Error::InvalidRig(format!("observation references unknown view {id}")))
}

/// Observation bound to its camera, as consumed by the solver.
#[derive(Debug, Clone, Copy)]
pub struct BoundObservation<'a> {
    pub view: &'a CameraView,
    pub position: Point2,
    pub confidence: f64,
}

fn bind<'a>(observations: &[ViewObservation], rig: &'a CameraRig) -> Result<Vec<BoundObservation<'a>>> {
    observations
        .iter()
        .map(|o| {
            if !(0.0..=1.0).contains(&o.confidence) {
                return Err(Error::InvalidConfig(format!(
                    "confidence {} outside [0, 1]",
                    o.confidence
                )));
            }
            Ok(BoundObservation {
                view: lookup(rig, o.view_id)?,
                position: o.position,
                confidence: o.confidence,
            })
        })
        .collect()
}

/// Per-observation row data of the normalised DLT system.
struct DltRows {
    /// Unweighted rows (u·p3 − p1, v·p3 − p2), normalised, world in metres.
    raw: Vec<[Vector4<f64>; 2]>,
    /// Derivative of each raw row with respect to its pixel coordinate (k·p3).
    d_pixel: Vec<Vector4<f64>>,
    weights: Vec<f64>,
}

impl DltRows {
    fn build(obs: &[BoundObservation<'_>]) -> Self {
        let scale = Matrix4::from_diagonal(&Vector4::new(WORLD_SCALE, WORLD_SCALE, WORLD_SCALE, 1.0));
        let mut raw = Vec::with_capacity(obs.len());
        let mut d_pixel = Vec::with_capacity(obs.len());
        let mut weights = Vec::with_capacity(obs.len());
        for o in obs {
            let pm = &o.view.projection;
            let n3 = pm.fixed_view::<1, 3>(2, 0).norm().max(f64::MIN_POSITIVE);
            let k = o.view.pixel_scale() / n3;
            let p1 = scale * pm.row(0).transpose() * k;
            let p2 = scale * pm.row(1).transpose() * k;
            let p3 = scale * pm.row(2).transpose() * k;
            raw.push([p3 * o.position.x - p1, p3 * o.position.y - p2]);
            d_pixel.push(p3);
            weights.push(o.confidence);
        }
        Self {
            raw,
            d_pixel,
            weights,
        }
    }

    fn normal_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        for (rows, &c) in self.raw.iter().zip(&self.weights) {
            for r in rows {
                let a = r * c;
                m += a * a.transpose();
            }
        }
        m
    }
}

/// The solved system: eigen-decomposition of the normal matrix plus the row data.
pub struct DltSolution {
    rows: DltRows,
    /// Eigenvalues ascending.
    eigenvalues: [f64; 4],
    /// Eigenvectors as columns, matching `eigenvalues`.
    eigenvectors: Matrix4<f64>,
    pub point: Point3,
}

impl DltSolution {
    fn null_vector(&self) -> Vector4<f64> {
        self.eigenvectors.column(0).into_owned()
    }

    /// Relative gap between the two smallest singular values.
    pub fn singular_gap(&self) -> f64 {
        let s0 = self.eigenvalues[0].max(0.0).sqrt();
        let s1 = self.eigenvalues[1].max(0.0).sqrt();
        let smax = self.eigenvalues[3].max(0.0).sqrt();
        (s1 - s0) / smax.max(f64::MIN_POSITIVE)
    }

    /// Pseudo-inverse of (M − λ₀I) restricted to the complement of the null vector.
    fn shifted_pinv(&self) -> Matrix4<f64> {
        let mut p = Matrix4::zeros();
        for i in 1..4 {
            let vi = self.eigenvectors.column(i);
            p += vi * vi.transpose() / (self.eigenvalues[i] - self.eigenvalues[0]);
        }
        p
    }

    /// Gradient of d(point)/dv mapped to the null vector, given an upstream point gradient.
    fn null_vector_grad(&self, grad_point: &Vector3<f64>) -> Vector4<f64> {
        let v = self.null_vector();
        let gy = grad_point * WORLD_SCALE;
        let w = v[3];
        Vector4::new(
            gy.x / w,
            gy.y / w,
            gy.z / w,
            -(gy.x * v[0] + gy.y * v[1] + gy.z * v[2]) / (w * w),
        )
    }

    /// Vector-Jacobian product: gradients of a scalar with respect to every
    /// observation's pixel position and confidence, given its gradient with
    /// respect to the triangulated point.
    pub fn backprop(&self, grad_point: &Vector3<f64>) -> Vec<(Point2, f64)> {
        let v = self.null_vector();
        let gv = self.null_vector_grad(grad_point);
        let gm = -(self.shifted_pinv() * gv) * v.transpose();
        let g = gm + gm.transpose();
        self.rows
            .raw
            .iter()
            .zip(&self.rows.d_pixel)
            .zip(&self.rows.weights)
            .map(|((rows, dp), &c)| {
                let ga_x = g * (rows[0] * c);
                let ga_y = g * (rows[1] * c);
                let gu = Point2::new(ga_x.dot(&(dp * c)), ga_y.dot(&(dp * c)));
                let gc = ga_x.dot(&rows[0]) + ga_y.dot(&rows[1]);
                (gu, gc)
            })
            .collect()
    }

    fn point_tangent(&self, dv: &Vector4<f64>) -> Vector3<f64> {
        let v = self.null_vector();
        let w = v[3];
        Vector3::new(
            (dv[0] * w - v[0] * dv[3]) / (w * w),
            (dv[1] * w - v[1] * dv[3]) / (w * w),
            (dv[2] * w - v[2] * dv[3]) / (w * w),
        ) * WORLD_SCALE
    }

    /// Forward-mode derivative of the point along a perturbation of one unweighted row pair.
    fn tangent_for_rows(&self, idx: usize, d_rows: [Vector4<f64>; 2]) -> Vector3<f64> {
        let v = self.null_vector();
        let c = self.rows.weights[idx];
        let mut dm_v = Vector4::zeros();
        for (r, dr) in self.rows.raw[idx].iter().zip(d_rows.iter()) {
            let a = r * c;
            let da = dr * c;
            dm_v += da * a.dot(&v) + a * da.dot(&v);
        }
        let dv = -(self.shifted_pinv() * dm_v);
        self.point_tangent(&dv)
    }
}

/// Symmetric 4×4 eigen-decomposition by cyclic Jacobi rotations.
/// Returns eigenvalues ascending with matching eigenvector columns.
fn symmetric_eigen4(m: &Matrix4<f64>) -> ([f64; 4], Matrix4<f64>) {
    let mut a = *m;
    let mut v = Matrix4::identity();
    for _sweep in 0..64 {
        let off: f64 = (0..4)
            .flat_map(|i| ((i + 1)..4).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        let diag: f64 = (0..4).map(|i| a[(i, i)] * a[(i, i)]).sum();
        if off <= 1e-36 * diag || off == 0.0 {
            break;
        }
        for p in 0..3 {
            for q in (p + 1)..4 {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..4 {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.map(|i| a[(i, i)]);
    let mut vectors = Matrix4::zeros();
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    (values, vectors)
}

/// Solve the weighted DLT system for already-bound observations.
pub fn solve_dlt(obs: &[BoundObservation<'_>]) -> Result<DltSolution> {
    let positive = obs.iter().filter(|o| o.confidence > 0.0).count();
    if positive < 2 {
        return Err(Error::InsufficientViews { found: positive });
    }
    let rows = DltRows::build(obs);
    let m = rows.normal_matrix();
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularSystem);
    }
    let (values, vectors) = symmetric_eigen4(&m);
    let smax = values[3].max(0.0).sqrt();
    let s1 = values[1].max(0.0).sqrt();
    if !(smax > 0.0) || s1 <= RANK_TOLERANCE * smax {
        return Err(Error::SingularSystem);
    }
    let v = vectors.column(0);
    if v[3].abs() <= 1e-12 * v.norm() {
        return Err(Error::SingularSystem);
    }
    let point = Point3::new(v[0] / v[3], v[1] / v[3], v[2] / v[3]) * WORLD_SCALE;
    Ok(DltSolution {
        rows,
        eigenvalues: values,
        eigenvectors: vectors,
        point,
    })
}

/// Confidence-weighted algebraic triangulation.
pub fn triangulate_algebraic(observations: &[ViewObservation], rig: &CameraRig) -> Result<Point3> {
    let bound = bind(observations, rig)?;
    Ok(solve_dlt(&bound)?.point)
}

/// Derivatives of the triangulated point with respect to each observation.
#[derive(Debug, Clone)]
pub struct TriangulationJacobian {
    pub point: Point3,
    /// ∂X/∂u_t, one 3×2 block per observation.
    pub d_position: Vec<Matrix3x2<f64>>,
    /// ∂X/∂c_t, one column per observation.
    pub d_confidence: Vec<Vector3<f64>>,
}

/// Analytic Jacobian of [`triangulate_algebraic`] via implicit differentiation
/// of the eigen-system of the normal equations.
pub fn triangulation_jacobian(observations: &[ViewObservation], rig: &CameraRig) -> Result<TriangulationJacobian> {
    let bound = bind(observations, rig)?;
    let sol = solve_dlt(&bound)?;
    let gap = sol.singular_gap();
    if gap <= SVD_GAP_EPSILON {
        return Err(Error::NonDifferentiablePoint { gap });
    }
    let mut d_position = Vec::with_capacity(bound.len());
    let mut d_confidence = Vec::with_capacity(bound.len());
    let zero = Vector4::zeros();
    for i in 0..bound.len() {
        let dp = sol.rows.d_pixel[i];
        let dx = sol.tangent_for_rows(i, [dp, zero]);
        let dy = sol.tangent_for_rows(i, [zero, dp]);
        let mut block = Matrix3x2::zeros();
        block.set_column(0, &dx);
        block.set_column(1, &dy);
        d_position.push(block);
        d_confidence.push(tangent_for_weight(&sol, i));
    }
    Ok(TriangulationJacobian {
        point: sol.point,
        d_position,
        d_confidence,
    })
}

fn tangent_for_weight(sol: &DltSolution, idx: usize) -> Vector3<f64> {
    let v = sol.null_vector();
    let c = sol.rows.weights[idx];
    let mut dm_v = Vector4::zeros();
    for r in &sol.rows.raw[idx] {
        // M contains c²·r·rᵀ, so dM/dc = 2c·r·rᵀ.
        dm_v += r * (2.0 * c * r.dot(&v));
    }
    let dv = -(sol.shifted_pinv() * dm_v);
    sol.point_tangent(&dv)
}
