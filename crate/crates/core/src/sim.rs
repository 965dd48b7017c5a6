//! Synthetic multi-camera scenes: posed actors, a camera ring and rendered
//! keypoint feature pyramids.

use nalgebra::{Matrix3, Matrix3x4, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, CameraRig, CameraView, Point2, Point3};
use crate::pipeline::{FeatureLevel, FeaturePyramid};
use crate::tokens::{tpose, NUM_JOINTS};

const CAMERA_STREAM: u64 = 1;
const ACTOR_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_actors: usize,
    pub num_cameras: usize,
    /// Capture volume `[x, y, z]` in mm, centred on the origin in x and y.
    pub space_size: [f64; 3],
    /// Actor centres are kept this far inside the volume.
    pub actor_margin_mm: f64,
    pub min_actor_separation_mm: f64,
    pub camera_radius_mm: [f64; 2],
    pub camera_height_mm: [f64; 2],
    pub focal_px: [f64; 2],
    pub image_size: [u32; 2],
    pub strides: Vec<f64>,
    pub channels: usize,
    pub heatmap_sigma_px: f64,
    /// Support radius of the displacement channels at the finest level.
    pub displacement_radius_px: f64,
    /// Bound of the uniform per-joint perturbation.
    pub joint_perturbation_mm: f64,
    pub max_yaw_rad: f64,
    pub feature_noise: f64,
    pub keypoint_jitter_px: f64,
    /// Probability that a joint is missing from one view's heatmaps.
    pub occlusion_prob: f64,
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_actors: 2,
            num_cameras: 5,
            space_size: [8000.0, 8000.0, 2000.0],
            actor_margin_mm: 1000.0,
            min_actor_separation_mm: 1000.0,
            camera_radius_mm: [4500.0, 5500.0],
            camera_height_mm: [1500.0, 2500.0],
            focal_px: [300.0, 380.0],
            image_size: [320, 240],
            strides: vec![4.0, 8.0],
            channels: 64,
            heatmap_sigma_px: 3.0,
            displacement_radius_px: 24.0,
            joint_perturbation_mm: 60.0,
            max_yaw_rad: std::f64::consts::PI,
            feature_noise: 0.02,
            keypoint_jitter_px: 0.5,
            occlusion_prob: 0.05,
            rng_seed: 0,
        }
    }
}

/// Channels rendered per view before zero padding.
pub fn rendered_channels(joints: usize) -> usize {
    3 * joints + 5
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_cameras < 2 {
            return bad("at least two cameras are required");
        }
        if self.space_size.iter().any(|&s| !(s > 0.0)) {
            return bad("space_size entries must be positive");
        }
        let half = [self.space_size[0] / 2.0, self.space_size[1] / 2.0];
        if !(self.actor_margin_mm >= 0.0) || self.actor_margin_mm >= half[0].min(half[1]) {
            return bad("actor_margin_mm must leave room inside the space");
        }
        if self.space_size[2] < 1700.0 {
            return bad("space height must contain a standing skeleton");
        }
        for (name, r) in [
            ("camera_radius_mm", self.camera_radius_mm),
            ("camera_height_mm", self.camera_height_mm),
            ("focal_px", self.focal_px),
        ] {
            if !(r[0] > 0.0 && r[1] >= r[0]) {
                return Err(Error::InvalidConfig(format!("{name} must be an increasing positive range")));
            }
        }
        if self.image_size.contains(&0) {
            return bad("image_size must be positive");
        }
        if self.strides.is_empty() || self.strides.iter().any(|&s| !(s >= 1.0)) {
            return bad("strides must be a non-empty list of values >= 1");
        }
        if self.channels == 0 {
            return bad("channels must be positive");
        }
        if !(self.heatmap_sigma_px > 0.0) || !(self.displacement_radius_px > 0.0) {
            return bad("heatmap_sigma_px and displacement_radius_px must be positive");
        }
        if !(self.joint_perturbation_mm >= 0.0) || !(self.max_yaw_rad >= 0.0) {
            return bad("perturbation bounds must be non-negative");
        }
        if !(self.feature_noise >= 0.0) || !(self.keypoint_jitter_px >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return bad("occlusion_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub rig: CameraRig,
    /// Ground-truth skeletons, 15 joints each, in mm.
    pub actors: Vec<Vec<Point3>>,
    pub pyramids: Vec<FeaturePyramid>,
}

/// Pinhole camera at `centre` looking at `target` with z up.
pub fn look_at(id: u32, centre: Point3, target: Point3, focal: f64, width: u32, height: u32) -> CameraView {
    let forward = (target - centre).normalize();
    let right = forward.cross(&Vector3::z()).normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let t = -(r * centre);
    let k = Matrix3::new(
        focal,
        0.0,
        width as f64 / 2.0,
        0.0,
        focal,
        height as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    rt.set_column(3, &t);
    CameraView::new(id, k * rt, width, height)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Cameras evenly spread on a ring with a random phase, radius and height.
pub fn camera_ring(cfg: &SceneConfig) -> Result<CameraRig> {
    let mut rng = stream(cfg.rng_seed, CAMERA_STREAM);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let views = (0..cfg.num_cameras)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * i as f64 / cfg.num_cameras as f64;
            let radius = range(&mut rng, cfg.camera_radius_mm);
            let height = range(&mut rng, cfg.camera_height_mm);
            let focal = range(&mut rng, cfg.focal_px);
            let target = Point3::new(rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0), 900.0);
            look_at(
                i as u32,
                Point3::new(radius * a.cos(), radius * a.sin(), height),
                target,
                focal,
                cfg.image_size[0],
                cfg.image_size[1],
            )
        })
        .collect();
    CameraRig::new(views)
}

/// Actor skeletons placed on the ground plane of the capture space.
pub fn sample_actors(cfg: &SceneConfig) -> Vec<Vec<Point3>> {
    let mut rng = stream(cfg.rng_seed, ACTOR_STREAM);
    let template = tpose().points();
    let hx = cfg.space_size[0] / 2.0 - cfg.actor_margin_mm;
    let hy = cfg.space_size[1] / 2.0 - cfg.actor_margin_mm;
    let mut centres: Vec<[f64; 2]> = Vec::new();
    let mut actors = Vec::with_capacity(cfg.num_actors);
    for _ in 0..cfg.num_actors {
        let mut c = [0.0, 0.0];
        for _ in 0..100 {
            c = [rng.random_range(-hx..=hx), rng.random_range(-hy..=hy)];
            let clear = centres
                .iter()
                .all(|o| ((o[0] - c[0]).powi(2) + (o[1] - c[1]).powi(2)).sqrt() >= cfg.min_actor_separation_mm);
            if clear {
                break;
            }
        }
        centres.push(c);
        let yaw = if cfg.max_yaw_rad > 0.0 {
            rng.random_range(-cfg.max_yaw_rad..=cfg.max_yaw_rad)
        } else {
            0.0
        };
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
        let b = cfg.joint_perturbation_mm;
        let pose = template
            .iter()
            .map(|p| {
                let mut q = rot * p;
                if b > 0.0 {
                    q.x += rng.random_range(-b..=b);
                    q.y += rng.random_range(-b..=b);
                    q.z += rng.random_range(-b..=b);
                }
                q.z = q.z.clamp(0.0, cfg.space_size[2]);
                q + Vector3::new(c[0], c[1], 0.0)
            })
            .collect();
        actors.push(pose);
    }
    actors
}

struct Keypoints {
    /// `[actor][joint]`, None when behind the camera or occluded.
    joints: Vec<Vec<Option<Point2>>>,
    centres: Vec<Option<Point2>>,
}

fn gaussian(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn render_level(cfg: &SceneConfig, kp: &Keypoints, stride: f64, scale: usize, noise: &mut ChaCha8Rng) -> FeatureLevel {
    let [w, h] = cfg.image_size;
    let gw = ((w as f64 - 1.0) / stride).floor() as usize + 1;
    let gh = ((h as f64 - 1.0) / stride).floor() as usize + 1;
    let mut level = FeatureLevel::zeros(stride, gh, gw, cfg.channels);
    let j = NUM_JOINTS;
    let sigma = cfg.heatmap_sigma_px.max(stride);
    let rho = cfg.displacement_radius_px * (1u64 << scale) as f64;
    let mut full = vec![0.0; rendered_channels(j)];
    for y in 0..gh {
        for x in 0..gw {
            let p = Point2::new(x as f64 * stride, y as f64 * stride);
            full.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..j {
                let mut best: Option<(f64, Point2)> = None;
                let mut heat = 0.0f64;
                for a in &kp.joints {
                    if let Some(mu) = a[k] {
                        let d2 = (mu - p).norm_squared();
                        heat = heat.max(gaussian(d2, sigma));
                        if best.is_none_or(|(bd, _)| d2 < bd) {
                            best = Some((d2, mu));
                        }
                    }
                }
                full[k] = heat;
                if let Some((d2, mu)) = best {
                    let g = gaussian(d2, rho);
                    full[j + 2 * k] = g * (mu.x - p.x) / rho;
                    full[j + 2 * k + 1] = g * (mu.y - p.y) / rho;
                }
            }
            let mut best: Option<(f64, Point2)> = None;
            let mut heat = 0.0f64;
            for mu in kp.centres.iter().flatten() {
                let d2 = (mu - p).norm_squared();
                heat = heat.max(gaussian(d2, sigma));
                if best.is_none_or(|(bd, _)| d2 < bd) {
                    best = Some((d2, *mu));
                }
            }
            full[3 * j] = heat;
            if let Some((d2, mu)) = best {
                let g = gaussian(d2, rho);
                full[3 * j + 1] = g * (mu.x - p.x) / rho;
                full[3 * j + 2] = g * (mu.y - p.y) / rho;
            }
            full[3 * j + 3] = 2.0 * p.x / w as f64 - 1.0;
            full[3 * j + 4] = 2.0 * p.y / h as f64 - 1.0;
            let node = level.node_mut(x, y);
            for (c, v) in node.iter_mut().enumerate() {
                let base = full.get(c).copied().unwrap_or(0.0);
                *v = if cfg.feature_noise > 0.0 {
                    base + cfg.feature_noise * noise.sample::<f64, _>(StandardNormal)
                } else {
                    base
                };
            }
        }
    }
    level
}

/// Render one view's pyramid for the given actors.
pub fn render_view(cfg: &SceneConfig, view: &CameraView, actors: &[Vec<Point3>], noise: &mut ChaCha8Rng) -> FeaturePyramid {
    let jitter = cfg.keypoint_jitter_px;
    let observe = |p: &Point3, noise: &mut ChaCha8Rng| -> Option<Point2> {
        let uv = project(view, p).ok()?;
        if jitter > 0.0 {
            let dx: f64 = noise.sample(StandardNormal);
            let dy: f64 = noise.sample(StandardNormal);
            Some(Point2::new(uv.x + jitter * dx, uv.y + jitter * dy))
        } else {
            Some(uv)
        }
    };
    let mut joints = Vec::with_capacity(actors.len());
    let mut centres = Vec::with_capacity(actors.len());
    for a in actors {
        let mut row: Vec<Option<Point2>> = a.iter().map(|p| observe(p, noise)).collect();
        let c = a.iter().fold(Vector3::zeros(), |s, p| s + p) / a.len() as f64;
        centres.push(observe(&c, noise));
        if cfg.occlusion_prob > 0.0 {
            for v in row.iter_mut() {
                if noise.random_bool(cfg.occlusion_prob) {
                    *v = None;
                }
            }
        }
        joints.push(row);
    }
    let kp = Keypoints { joints, centres };
    FeaturePyramid {
        levels: cfg
            .strides
            .iter()
            .enumerate()
            .map(|(s, &stride)| render_level(cfg, &kp, stride, s, noise))
            .collect(),
    }
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let rig = camera_ring(cfg)?;
    let actors = sample_actors(cfg);
    let pyramids = rig
        .views
        .iter()
        .enumerate()
        .map(|(t, view)| {
            let mut noise = stream(cfg.rng_seed, NOISE_STREAM);
            noise.set_word_pos(t as u128 * (1u128 << 40));
            render_view(cfg, view, &actors, &mut noise)
        })
        .collect();
    Ok(Scene { rig, actors, pyramids })
}

/// `count` scenes with consecutive seeds starting at `cfg.rng_seed`.
pub fn generate_scenes(cfg: &SceneConfig, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| {
            let c = SceneConfig {
                rng_seed: cfg.rng_seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            generate_scene(&c)
        })
        .collect()
}
