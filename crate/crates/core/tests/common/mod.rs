#![allow(dead_code)]

use mvssm_core::geometry::{CameraRig, CameraView, Point3};
use nalgebra::{Matrix3, Matrix3x4, Vector3};
use rand::Rng;

pub fn look_at(id: u32, center: Point3, target: Point3, focal: f64, w: u32, h: u32) -> CameraView {
    let forward = (target - center).normalize();
    let up = Vector3::new(0.0, 0.0, 1.0);
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let t = -(r * center);
    let k = Matrix3::new(focal, 0.0, w as f64 / 2.0, 0.0, focal, h as f64 / 2.0, 0.0, 0.0, 1.0);
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    rt.set_column(3, &t);
    CameraView::new(id, k * rt, w, h)
}

/// Cameras on a circle around the origin looking at a point above it.
pub fn ring(n: usize, radius: f64) -> CameraRig {
    let views = (0..n)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64 + 0.3;
            look_at(
                i as u32,
                Point3::new(radius * a.cos(), radius * a.sin(), 1800.0),
                Point3::new(0.0, 0.0, 900.0),
                300.0,
                320,
                240,
            )
        })
        .collect();
    CameraRig::new(views).unwrap()
}

/// Randomly placed cameras all facing a region around the origin.
pub fn random_rig<R: Rng>(rng: &mut R, n: usize) -> CameraRig {
    let views = (0..n)
        .map(|i| {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r: f64 = rng.random_range(3000.0..7000.0);
            let z: f64 = rng.random_range(500.0..3000.0);
            let target = Point3::new(
                rng.random_range(-300.0..300.0),
                rng.random_range(-300.0..300.0),
                rng.random_range(600.0..1200.0),
            );
            let f = rng.random_range(200.0..800.0);
            look_at(i as u32, Point3::new(r * a.cos(), r * a.sin(), z), target, f, 640, 480)
        })
        .collect();
    CameraRig::new(views).unwrap()
}

pub fn random_point<R: Rng>(rng: &mut R) -> Point3 {
    Point3::new(
        rng.random_range(-800.0..800.0),
        rng.random_range(-800.0..800.0),
        rng.random_range(0.0..1800.0),
    )
}
