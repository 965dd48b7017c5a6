//! Independent reference implementations used by the acceptance checks.

use mvssm_core::eval::Frame;
use mvssm_core::geometry::{CameraRig, Point3, ViewObservation};
use mvssm_core::sim::look_at;
use mvssm_core::ssm::SelectiveParams;
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Taylor series with scaling and squaring.
pub fn expm_taylor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.abs().row_sum().max();
    let s = if norm > 0.25 { (norm / 0.25).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(s);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..30 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Gauss-Legendre nodes and weights on [-1, 1].
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

/// `(exp(ΔA), ∫₀^Δ exp(As) ds · B)` by series and composite quadrature.
pub fn zoh_oracle(a: &DMatrix<f64>, b: &DVector<f64>, delta: f64) -> (DMatrix<f64>, DVector<f64>) {
    let nodes = gauss_legendre(16);
    let panels = 8;
    let h = delta / panels as f64;
    let mut integral = DVector::zeros(b.len());
    for p in 0..panels {
        let lo = p as f64 * h;
        for &(x, w) in &nodes {
            let s = lo + 0.5 * h * (x + 1.0);
            integral += expm_taylor(&(a * s)) * b * (0.5 * h * w);
        }
    }
    (expm_taylor(&(a * delta)), integral)
}

/// Per-step recurrence with the closed-form diagonal hold.
pub fn naive_selective(sel: &SelectiveParams, x: &Array2<f64>) -> Array2<f64> {
    let (len, l) = x.dim();
    let n = sel.a.ncols();
    let mut y = Array2::zeros((len, l));
    for ch in 0..l {
        let mut h = vec![0.0; n];
        for t in 0..len {
            let row = x.row(t);
            let lin = |w: &Array2<f64>, b: f64, col: usize| (0..l).map(|k| row[k] * w[(k, col)]).sum::<f64>() + b;
            let pre = lin(&sel.proj.w_delta, sel.proj.b_delta[ch], ch);
            let delta = (1.0 + pre.exp()).ln();
            let mut out = sel.d[ch] * row[ch];
            for s in 0..n {
                let a = sel.a[(ch, s)];
                let b = lin(&sel.proj.w_b, sel.proj.b_b[s], s);
                let c = lin(&sel.proj.w_c, sel.proj.b_c[s], s);
                h[s] = (delta * a).exp() * h[s] + (delta * a).exp_m1() / a * b * row[ch];
                out += c * h[s];
            }
            y[(t, ch)] = out;
        }
    }
    y
}

/// Cameras at random positions around the working volume.
pub fn random_rig(rng: &mut ChaCha8Rng, n: usize) -> CameraRig {
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

pub fn random_point(rng: &mut ChaCha8Rng) -> Point3 {
    Point3::new(
        rng.random_range(-800.0..800.0),
        rng.random_range(-800.0..800.0),
        rng.random_range(0.0..1800.0),
    )
}

/// Pinhole projection written out by hand.
pub fn project_by_hand(rig: &CameraRig, view: u32, x: &Point3) -> (f64, f64) {
    let p = rig.view(view).unwrap().projection;
    let h: Vec<f64> = (0..3)
        .map(|r| p[(r, 0)] * x.x + p[(r, 1)] * x.y + p[(r, 2)] * x.z + p[(r, 3)])
        .collect();
    (h[0] / h[2], h[1] / h[2])
}

/// Normalised weighted DLT stacked in full and solved by SVD.
pub fn svd_triangulate(obs: &[ViewObservation], rig: &CameraRig) -> Point3 {
    let mut a = DMatrix::<f64>::zeros(2 * obs.len(), 4);
    for (i, o) in obs.iter().enumerate() {
        let view = rig.view(o.view_id).unwrap();
        let mut p = view.projection;
        for r in 0..3 {
            for c in 0..3 {
                p[(r, c)] *= 1000.0;
            }
        }
        let n3 = (0..3).map(|c| view.projection[(2, c)].powi(2)).sum::<f64>().sqrt();
        let k = 2.0 / (view.width + view.height) as f64 / n3;
        for c in 0..4 {
            a[(2 * i, c)] = o.confidence * k * (o.position.x * p[(2, c)] - p[(0, c)]);
            a[(2 * i + 1, c)] = o.confidence * k * (o.position.y * p[(2, c)] - p[(1, c)]);
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.unwrap();
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .unwrap();
    let v = vt.row(idx);
    Point3::new(v[0] / v[3], v[1] / v[3], v[2] / v[3]) * 1000.0
}

pub fn oracle_mpjpe(a: &[Point3], b: &[Point3]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        let d = [a[k].x - b[k].x, a[k].y - b[k].y, a[k].z - b[k].z];
        s += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    }
    s / a.len() as f64
}

/// Precision-recall curve enumerated one prediction at a time, highest
/// score first, ties resolved by input order.
pub fn oracle_ap(frames: &[Frame], thr: f64) -> f64 {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (f, fr) in frames.iter().enumerate() {
        for (p, (_, s)) in fr.predictions.iter().enumerate() {
            all.push((*s, f, p));
        }
    }
    let n_gt: usize = frames.iter().map(|f| f.ground_truth.len()).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut used = vec![false; all.len()];
    let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.ground_truth.len()]).collect();
    let mut hits = Vec::new();
    for _ in 0..all.len() {
        let mut pick = None;
        for (i, e) in all.iter().enumerate() {
            if !used[i] && pick.is_none_or(|k: usize| e.0 > all[k].0) {
                pick = Some(i);
            }
        }
        let i = pick.unwrap();
        used[i] = true;
        let (_, f, p) = all[i];
        let pose = &frames[f].predictions[p].0;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in frames[f].ground_truth.iter().enumerate() {
            let d = oracle_mpjpe(pose, gt);
            if best.is_none_or(|b| d < b.1) {
                best = Some((g, d));
            }
        }
        let hit = matches!(best, Some((g, d)) if d < thr && !taken[f][g]);
        if hit {
            taken[f][best.unwrap().0] = true;
        }
        hits.push(hit);
    }
    let mut ap = 0.0;
    for k in 0..hits.len() {
        let tp_k = hits[..=k].iter().filter(|h| **h).count() as f64;
        let tp_prev = hits[..k].iter().filter(|h| **h).count() as f64;
        ap += (tp_k - tp_prev) / n_gt as f64 * (tp_k / (k + 1) as f64);
    }
    ap
}

pub fn oracle_pcp(pred: &[Point3], gt: &[Point3], limbs: &[[usize; 2]]) -> f64 {
    let ok = limbs
        .iter()
        .filter(|l| {
            let e = (oracle_mpjpe(&[pred[l[0]]], &[gt[l[0]]]) + oracle_mpjpe(&[pred[l[1]]], &[gt[l[1]]])) / 2.0;
            e < oracle_mpjpe(&[gt[l[0]]], &[gt[l[1]]]) / 2.0
        })
        .count();
    ok as f64 / limbs.len() as f64
}
