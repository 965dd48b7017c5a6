//! Finite-difference checks of every analytic derivative in the model.

use std::sync::Arc;

use mvssm_core::autodiff::Graph;
use mvssm_core::geometry::{project, triangulation_jacobian, triangulate_algebraic, CameraRig, Point2, Point3, ViewObservation};
use mvssm_core::pipeline::{
    forward, initial_tokens, sample_bilinear, sample_bilinear_jacobian, BlockVariant, FeatureLevel, FeaturePyramid,
    ModelParams, PipelineConfig, SceneInputs,
};
use mvssm_core::sim::look_at;
use mvssm_core::ssm::{selective_scan, selective_scan_backward, SelectiveGrads, SelectiveParams, SelectiveProjections};
use mvssm_core::tokens::GroundBounds;
use nalgebra::Vector2;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracles::{random_point, random_rig};

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Richardson-extrapolated central difference of `f` at zero. Near-degenerate
/// rigs amplify roundoff, so the steps stay wide and truncation is cancelled.
fn derivative(f: impl Fn(f64) -> Point3, h: f64) -> Point3 {
    let central = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    (central(h / 2.0) * 4.0 - central(h)) / 3.0
}

/// Worst relative error of the triangulation Jacobian over noisy instances.
pub fn triangulation(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let t = rng.random_range(2..=5);
        let rig = random_rig(&mut rng, t);
        let x = random_point(&mut rng);
        let obs: Vec<ViewObservation> = rig
            .views
            .iter()
            .map(|v| {
                let n = Vector2::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
                ViewObservation::new(v.id, project(v, &x).unwrap() + n, rng.random_range(0.3..0.95))
            })
            .collect();
        let jac = triangulation_jacobian(&obs, &rig).unwrap();
        let solve = |o: &[ViewObservation]| triangulate_algebraic(o, &rig).unwrap();
        for i in 0..obs.len() {
            let mut an = Vec::new();
            let mut fd = Vec::new();
            for k in 0..2 {
                let d = derivative(
                    |s| {
                        let mut o = obs.clone();
                        o[i].position[k] += s;
                        solve(&o)
                    },
                    1e-2,
                );
                fd.extend(d.iter());
                an.extend(jac.d_position[i].column(k).iter());
            }
            worst = worst.max(rel_err(&an, &fd));
            let d = derivative(
                |s| {
                    let mut o = obs.clone();
                    o[i].confidence += s;
                    solve(&o)
                },
                1e-2,
            );
            let an: Vec<f64> = jac.d_confidence[i].iter().copied().collect();
            let fd: Vec<f64> = d.iter().copied().collect();
            // Confidence derivatives vanish when all views agree; judge those absolutely.
            let diff: f64 = an.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = an.iter().map(|a| a * a).sum::<f64>().sqrt();
            worst = worst.max(diff / norm.max(1e-3));
        }
    }
    worst
}

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-s..s))
}

fn vec1(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(-s..s))
}

pub fn random_selective(rng: &mut ChaCha8Rng, l: usize, n: usize) -> SelectiveParams {
    SelectiveParams {
        a: mat(rng, l, n, 1.0).mapv(|v| -(v.abs() * 2.0 + 0.05)),
        d: vec1(rng, l, 1.0),
        proj: SelectiveProjections {
            w_delta: mat(rng, l, l, 0.5),
            b_delta: vec1(rng, l, 0.5),
            w_b: mat(rng, l, n, 0.7),
            b_b: vec1(rng, n, 0.3),
            w_c: mat(rng, l, n, 0.7),
            b_c: vec1(rng, n, 0.3),
        },
    }
}

fn selective_slices(p: &mut SelectiveParams) -> Vec<&mut [f64]> {
    vec![
        p.a.as_slice_mut().unwrap(),
        p.d.as_slice_mut().unwrap(),
        p.proj.w_delta.as_slice_mut().unwrap(),
        p.proj.b_delta.as_slice_mut().unwrap(),
        p.proj.w_b.as_slice_mut().unwrap(),
        p.proj.b_b.as_slice_mut().unwrap(),
        p.proj.w_c.as_slice_mut().unwrap(),
        p.proj.b_c.as_slice_mut().unwrap(),
    ]
}

fn grad_slices(g: &SelectiveGrads) -> Vec<&[f64]> {
    vec![
        g.a.as_slice().unwrap(),
        g.d.as_slice().unwrap(),
        g.proj.w_delta.as_slice().unwrap(),
        g.proj.b_delta.as_slice().unwrap(),
        g.proj.w_b.as_slice().unwrap(),
        g.proj.b_b.as_slice().unwrap(),
        g.proj.w_c.as_slice().unwrap(),
        g.proj.b_c.as_slice().unwrap(),
    ]
}

/// Worst relative error of the selective-scan backward pass, per tensor.
pub fn selective(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(402);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (l, n, len) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=10));
        let sel = random_selective(&mut rng, l, n);
        let x = mat(&mut rng, len, l, 1.0);
        let up = mat(&mut rng, len, l, 1.0);
        let loss = |s: &SelectiveParams, x: &Array2<f64>| (selective_scan(s, x).unwrap() * &up).sum();
        let grads = selective_scan_backward(&sel, &x, &up).unwrap();
        let h = 1e-6;

        let mut fd = Vec::new();
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            fd.push((loss(&sel, &xp) - loss(&sel, &xm)) / (2.0 * h));
        }
        worst = worst.max(rel_err(grads.x.as_slice().unwrap(), &fd));

        let analytic = grad_slices(&grads);
        for (k, an) in analytic.iter().enumerate() {
            let mut fd = Vec::new();
            for i in 0..an.len() {
                let mut plus = sel.clone();
                let mut minus = sel.clone();
                selective_slices(&mut plus)[k][i] += h;
                selective_slices(&mut minus)[k][i] -= h;
                fd.push((loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h));
            }
            worst = worst.max(rel_err(an, &fd));
        }
    }
    worst
}

fn random_level(rng: &mut ChaCha8Rng, stride: f64, h: usize, w: usize, c: usize) -> FeatureLevel {
    let mut level = FeatureLevel::zeros(stride, h, w, c);
    for v in level.data.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    level
}

/// Worst relative error of the bilinear sampling Jacobian.
pub fn bilinear(points: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(403);
    let level = random_level(&mut rng, 4.0, 7, 9, 5);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let p = Point2::new(rng.random_range(0.1..7.9), rng.random_range(0.1..5.9));
        let (dx, dy) = sample_bilinear_jacobian(&level, &p);
        let h = 1e-6;
        let diff = |a: Point2, b: Point2| -> Vec<f64> {
            let (sa, sb) = (sample_bilinear(&level, &a), sample_bilinear(&level, &b));
            sa.iter().zip(&sb).map(|(u, v)| (u - v) / (2.0 * h)).collect()
        };
        let mut fd = diff(Point2::new(p.x + h, p.y), Point2::new(p.x - h, p.y));
        fd.extend(diff(Point2::new(p.x, p.y + h), Point2::new(p.x, p.y - h)));
        let an: Vec<f64> = dx.iter().chain(dy.iter()).copied().collect();
        worst = worst.max(rel_err(&an, &fd));
    }
    worst
}

fn tiny_config(variant: BlockVariant) -> PipelineConfig {
    PipelineConfig {
        num_layers: 2,
        num_tokens: 4,
        num_joints: 3,
        feature_dim: 8,
        block_variant: variant,
        points: 2,
        scales: 2,
        state_dim: 3,
        scan_dim: 4,
        ffn_dim: 8,
        head_dim: 8,
        detach_anchors: false,
        token_bounds: GroundBounds::centered(1200.0, 1200.0),
        ..PipelineConfig::default()
    }
}

fn tiny_scene(seed: u64, config: &PipelineConfig) -> SceneInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = (0..2)
        .map(|i| {
            let a = std::f64::consts::PI * i as f64 + 0.3;
            let centre = Point3::new(4000.0 * a.cos(), 4000.0 * a.sin(), 1800.0);
            look_at(i as u32, centre, Point3::new(0.0, 0.0, 900.0), 300.0, 320, 240)
        })
        .collect();
    let rig = CameraRig::new(views).unwrap();
    let pyramids = rig
        .views
        .iter()
        .map(|v| FeaturePyramid {
            levels: (0..config.scales)
                .map(|s| {
                    let stride = 8.0 * (1 << s) as f64;
                    let h = (v.height as f64 / stride) as usize + 1;
                    let w = (v.width as f64 / stride) as usize + 1;
                    random_level(&mut rng, stride, h, w, config.feature_dim)
                })
                .collect(),
        })
        .collect();
    SceneInputs {
        rig,
        pyramids: Arc::new(pyramids),
    }
}

fn weighted_sum(g: &mut Graph, x: mvssm_core::autodiff::Var, seed: u64) -> mvssm_core::autodiff::Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = g.value(x).dim();
    let w = g.constant(mat(&mut rng, r, c, 1.0));
    let p = g.mul(x, w);
    g.sum(p)
}

/// A fixed linear functional of every layer's geometry, estimates and logits.
fn pipeline_loss(model: &ModelParams, scene: &SceneInputs, grad: bool) -> (f64, Option<Vec<Array2<f64>>>) {
    let tokens = initial_tokens(model).unwrap();
    let mut g = Graph::new(grad);
    let pv = model.params.register(&mut g);
    let result = forward(&mut g, &pv, model, scene, &tokens, false).unwrap();
    let mut total = g.constant(Array2::zeros((1, 1)));
    for (m, layer) in result.layers.iter().enumerate() {
        let seed = 100 + m as u64 * 10;
        let a = weighted_sum(&mut g, layer.geometry, seed);
        let a = g.scale(a, 1e-2);
        let b = weighted_sum(&mut g, layer.estimates, seed + 1);
        let c = weighted_sum(&mut g, layer.logits, seed + 2);
        let c = g.scale(c, 10.0);
        for v in [a, b, c] {
            total = g.add(total, v);
        }
    }
    let value = g.value(total)[(0, 0)];
    if !grad {
        return (value, None);
    }
    let grads = g.backward(total);
    let out = pv
        .vars
        .iter()
        .zip(model.params.values())
        .map(|(&v, p)| grads.get_or_zeros(v, p.dim()))
        .collect();
    (value, Some(out))
}

/// Worst per-tensor relative error of end-to-end parameter gradients, the
/// tensor it occurred in, and the number of tensors that carried gradient.
pub fn pipeline(variant: BlockVariant, seed: u64, filter: fn(&str) -> bool) -> (f64, String, usize) {
    let config = tiny_config(variant);
    let model = ModelParams::init(&config, seed).unwrap();
    let scene = tiny_scene(seed + 1, &config);
    let grads = pipeline_loss(&model, &scene, true).1.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    // Small steps drown small gradients in roundoff of the summed loss; large
    // ones can straddle a bilinear kink. A correct tensor agrees at one of them.
    let steps = [1e-5, 1e-4];
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut checked = 0;
    for (k, name) in model.params.names().iter().enumerate() {
        if !filter(name) {
            continue;
        }
        let n = model.params.values()[k].len();
        let picks: Vec<usize> = if n <= 6 { (0..n).collect() } else { (0..6).map(|_| rng.random_range(0..n)).collect() };
        let an: Vec<f64> = picks.iter().map(|&i| grads[k].as_slice().unwrap()[i]).collect();
        let fd_at = |h: f64| -> Vec<f64> {
            picks
                .iter()
                .map(|&idx| {
                    let mut plus = model.clone();
                    plus.params.values_mut()[k].as_slice_mut().unwrap()[idx] += h;
                    let mut minus = model.clone();
                    minus.params.values_mut()[k].as_slice_mut().unwrap()[idx] -= h;
                    (pipeline_loss(&plus, &scene, false).0 - pipeline_loss(&minus, &scene, false).0) / (2.0 * h)
                })
                .collect()
        };
        let fds: Vec<Vec<f64>> = steps.iter().map(|&h| fd_at(h)).collect();
        let scale = an.iter().chain(&fds[0]).fold(0.0f64, |m, v| m.max(v.abs()));
        if scale < 1e-7 {
            continue;
        }
        let e = fds.iter().map(|fd| rel_err(&an, fd)).fold(f64::INFINITY, f64::min);
        if e >= worst {
            worst = e;
            worst_name = name.clone();
        }
        checked += 1;
    }
    (worst, worst_name, checked)
}
