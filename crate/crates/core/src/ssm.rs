//! Continuous-to-discrete state-space machinery and the selective scan.
//!
//! The continuous system `h' = A h + B x`, `y = C h + D x` is discretised with
//! the zero-order hold: `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) − I)·ΔB`. The second
//! factor is `Δ·φ₁(ΔA)·B` with `φ₁(z) = (eᶻ − 1)/z`, evaluated by its power
//! series near zero so singular `A` is handled.
//!
//! The selective scan computes `(Δ_t, B_t, C_t)` from every input token and
//! runs one independent recurrence per feature channel with a diagonal state
//! matrix. Channels are never mixed inside the scan.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this magnitude of ΔA the φ₁ power series is used.
pub const SERIES_THRESHOLD: f64 = 1e-3;
const SERIES_TERMS: usize = 6;

/// Linear time-invariant SSM parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub d: f64,
    pub delta: f64,
}

impl SsmParams {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: DVector<f64>, d: f64, delta: f64) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n || b.len() != n || c.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "A {}x{}, B {}, C {}",
                a.nrows(),
                a.ncols(),
                b.len(),
                c.len()
            )));
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::InvalidConfig(format!("step size must be positive, got {delta}")));
        }
        let finite = a.iter().chain(b.iter()).chain(c.iter()).all(|x| x.is_finite()) && d.is_finite();
        if !finite {
            return Err(Error::InvalidConfig("SSM parameters must be finite".into()));
        }
        Ok(Self { a, b, c, d, delta })
    }

    /// Diagonal-A constructor.
    pub fn diagonal(a: &[f64], b: &[f64], c: &[f64], d: f64, delta: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(a)),
            DVector::from_column_slice(b),
            DVector::from_column_slice(c),
            d,
            delta,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.a.nrows();
        (0..n).all(|i| (0..n).all(|j| i == j || self.a[(i, j)] == 0.0))
    }
}

/// Latent state of an LTI scan.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmState {
    pub h: DVector<f64>,
}

impl SsmState {
    pub fn zeros(n: usize) -> Self {
        Self { h: DVector::zeros(n) }
    }
}

/// φ₁(z) = (eᶻ − 1)/z.
pub fn phi1(z: f64) -> f64 {
    if z.abs() < SERIES_THRESHOLD {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..SERIES_TERMS {
            term *= z / (k + 1) as f64;
            sum += term;
        }
        sum
    } else {
        z.exp_m1() / z
    }
}

/// ψ(z) = dφ₁/dz = (z·eᶻ − eᶻ + 1)/z².
fn phi1_prime(z: f64) -> f64 {
    if z.abs() < 0.05 {
        // Σ_{k≥1} k·z^{k−1}/(k+1)!
        let mut sum = 0.0;
        let mut pow = 1.0;
        let mut fact = 2.0;
        for k in 1..12 {
            sum += k as f64 * pow / fact;
            pow *= z;
            fact *= (k + 2) as f64;
        }
        sum
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a degree-13 Padé approximant.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    const THETA13: f64 = 5.371920351148152;
    let n = a.nrows();
    let norm = one_norm(a);
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let a = a / 2f64.powi(squarings);
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 * B[13] + &a4 * B[11] + &a2 * B[9]) + &a6 * B[7] + &a4 * B[5] + &a2 * B[3] + &ident * B[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * B[12] + &a4 * B[10] + &a2 * B[8]) + &a6 * B[6] + &a4 * B[4] + &a2 * B[2] + &ident * B[0];
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.lu().solve(&p).expect("Padé denominator is non-singular for scaled input");
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

/// Zero-order-hold discretisation, returning `(Ā, B̄)`.
pub fn discretize_zoh(params: &SsmParams) -> (DMatrix<f64>, DVector<f64>) {
    let n = params.state_dim();
    let dt = params.delta;
    if params.is_diagonal() {
        let mut abar = DMatrix::zeros(n, n);
        let mut bbar = DVector::zeros(n);
        for i in 0..n {
            let z = dt * params.a[(i, i)];
            abar[(i, i)] = z.exp();
            bbar[i] = dt * phi1(z) * params.b[i];
        }
        return (abar, bbar);
    }
    let z = &params.a * dt;
    if one_norm(&z) < SERIES_THRESHOLD {
        let ident = DMatrix::<f64>::identity(n, n);
        let mut abar = ident.clone();
        let mut phi = ident.clone();
        let mut power = ident;
        let mut fact = 1.0;
        for k in 1..SERIES_TERMS {
            power = &power * &z;
            fact *= k as f64;
            abar += &power / fact;
            phi += &power / (fact * (k + 1) as f64);
        }
        let bbar = phi * &params.b * dt;
        return (abar, bbar);
    }
    // Van Loan block exponential: exp([[ΔA, ΔB], [0, 0]]) = [[Ā, B̄], [0, 1]].
    let mut block = DMatrix::zeros(n + 1, n + 1);
    block.view_mut((0, 0), (n, n)).copy_from(&z);
    block.view_mut((0, n), (n, 1)).copy_from(&(&params.b * dt));
    let e = expm(&block);
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, 1)).column(0).into_owned(),
    )
}

/// LTI recurrence `h_t = Ā h_{t−1} + B̄ x_t`, `y_t = C h_t + D x_t`.
pub fn scan_recurrent(params: &SsmParams, x: &[f64], h0: &SsmState) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptySequence);
    }
    if h0.h.len() != params.state_dim() {
        return Err(Error::LengthMismatch {
            expected: params.state_dim(),
            found: h0.h.len(),
        });
    }
    let (abar, bbar) = discretize_zoh(params);
    let mut h = h0.h.clone();
    Ok(x
        .iter()
        .map(|&xt| {
            h = &abar * &h + &bbar * xt;
            params.c.dot(&h) + params.d * xt
        })
        .collect())
}

/// Input-dependent projections producing `Δ_t`, `B_t` and `C_t` from a token.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveProjections {
    /// L×L, pre-softplus step size.
    pub w_delta: Array2<f64>,
    pub b_delta: Array1<f64>,
    /// L×N input matrix projection.
    pub w_b: Array2<f64>,
    pub b_b: Array1<f64>,
    /// L×N output matrix projection.
    pub w_c: Array2<f64>,
    pub b_c: Array1<f64>,
}

impl SelectiveProjections {
    pub fn zeros(channels: usize, state: usize) -> Self {
        Self {
            w_delta: Array2::zeros((channels, channels)),
            b_delta: Array1::zeros(channels),
            w_b: Array2::zeros((channels, state)),
            b_b: Array1::zeros(state),
            w_c: Array2::zeros((channels, state)),
            b_c: Array1::zeros(state),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_delta.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.w_b.ncols()
    }
}

/// Selective scan parameters: shared diagonal state matrix and skip, plus projections.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveParams {
    /// L×N, one diagonal state matrix per channel.
    pub a: Array2<f64>,
    pub d: Array1<f64>,
    pub proj: SelectiveProjections,
}

impl SelectiveParams {
    pub fn channels(&self) -> usize {
        self.a.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.a.ncols()
    }

    pub(crate) fn check(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        check_shapes(&self.a, &self.d, &self.proj, x)
    }
}

pub(crate) fn check_shapes(
    a: &Array2<f64>,
    d: &Array1<f64>,
    proj: &SelectiveProjections,
    x: &ArrayView2<'_, f64>,
) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::EmptySequence);
    }
    let (l, n) = a.dim();
    let ok = d.len() == l
        && proj.w_delta.dim() == (l, l)
        && proj.b_delta.len() == l
        && proj.w_b.dim() == (l, n)
        && proj.b_b.len() == n
        && proj.w_c.dim() == (l, n)
        && proj.b_c.len() == n
        && x.ncols() == l;
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "selective scan with {l} channels and state {n} given tokens of width {}",
            x.ncols()
        )))
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Intermediate values of one selective scan, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ScanCache {
    x: Array2<f64>,
    pre_delta: Array2<f64>,
    delta: Array2<f64>,
    b: Array2<f64>,
    c: Array2<f64>,
    /// States after each step, `len × (L·N)` row-major in (channel, state).
    states: Array2<f64>,
}

/// Gradients of a selective scan with respect to its input and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveGrads {
    pub x: Array2<f64>,
    pub a: Array2<f64>,
    pub d: Array1<f64>,
    pub proj: SelectiveProjections,
}

impl SelectiveGrads {
    pub(crate) fn zeros(len: usize, channels: usize, state: usize) -> Self {
        Self {
            x: Array2::zeros((len, channels)),
            a: Array2::zeros((channels, state)),
            d: Array1::zeros(channels),
            proj: SelectiveProjections::zeros(channels, state),
        }
    }

    pub(crate) fn accumulate_params(&mut self, other: &SelectiveGrads) {
        self.a += &other.a;
        self.d += &other.d;
        self.proj.w_delta += &other.proj.w_delta;
        self.proj.b_delta += &other.proj.b_delta;
        self.proj.w_b += &other.proj.w_b;
        self.proj.b_b += &other.proj.b_b;
        self.proj.w_c += &other.proj.w_c;
        self.proj.b_c += &other.proj.b_c;
    }
}

/// Forward selective scan over one sequence (`len × L`), keeping the cache.
pub(crate) fn scan_forward(
    a: &Array2<f64>,
    d: &Array1<f64>,
    proj: &SelectiveProjections,
    x: ArrayView2<'_, f64>,
) -> (Array2<f64>, ScanCache) {
    let (len, l) = x.dim();
    let n = a.ncols();
    let mut pre_delta = x.dot(&proj.w_delta);
    pre_delta += &proj.b_delta;
    let delta = pre_delta.mapv(softplus);
    let mut bt = x.dot(&proj.w_b);
    bt += &proj.b_b;
    let mut ct = x.dot(&proj.w_c);
    ct += &proj.b_c;
    let mut h = vec![0.0; l * n];
    let mut states = Array2::zeros((len, l * n));
    let mut y = Array2::zeros((len, l));
    for t in 0..len {
        for ch in 0..l {
            let dt = delta[(t, ch)];
            let xt = x[(t, ch)];
            let mut acc = 0.0;
            for s in 0..n {
                let z = dt * a[(ch, s)];
                let hv = &mut h[ch * n + s];
                *hv = z.exp() * *hv + dt * phi1(z) * bt[(t, s)] * xt;
                acc += ct[(t, s)] * *hv;
            }
            y[(t, ch)] = acc + d[ch] * xt;
        }
        states.row_mut(t).as_slice_mut().unwrap().copy_from_slice(&h);
    }
    (
        y,
        ScanCache {
            x: x.to_owned(),
            pre_delta,
            delta,
            b: bt,
            c: ct,
            states,
        },
    )
}

/// Reverse-mode pass of [`scan_forward`].
pub(crate) fn scan_backward(
    a: &Array2<f64>,
    d: &Array1<f64>,
    proj: &SelectiveProjections,
    cache: &ScanCache,
    grad_out: ArrayView2<'_, f64>,
) -> SelectiveGrads {
    let (len, l) = cache.x.dim();
    let n = a.ncols();
    let mut grads = SelectiveGrads::zeros(len, l, n);
    let mut g_delta = Array2::<f64>::zeros((len, l));
    let mut g_b = Array2::<f64>::zeros((len, n));
    let mut g_c = Array2::<f64>::zeros((len, n));
    let mut gh = vec![0.0; l * n];
    for t in (0..len).rev() {
        let h_now = cache.states.row(t);
        for ch in 0..l {
            let gy = grad_out[(t, ch)];
            grads.d[ch] += gy * cache.x[(t, ch)];
            grads.x[(t, ch)] += gy * d[ch];
            for s in 0..n {
                g_c[(t, s)] += gy * h_now[ch * n + s];
                gh[ch * n + s] += gy * cache.c[(t, s)];
            }
        }
        for ch in 0..l {
            let dt = cache.delta[(t, ch)];
            let xt = cache.x[(t, ch)];
            for s in 0..n {
                let g = gh[ch * n + s];
                if g == 0.0 {
                    continue;
                }
                let av = a[(ch, s)];
                let z = dt * av;
                let abar = z.exp();
                let phi = phi1(z);
                let bv = cache.b[(t, s)];
                let h_prev = if t > 0 { cache.states[(t - 1, ch * n + s)] } else { 0.0 };
                g_delta[(t, ch)] += g * (h_prev * abar * av + abar * bv * xt);
                grads.a[(ch, s)] += g * (h_prev * abar * dt + bv * xt * dt * dt * phi1_prime(z));
                g_b[(t, s)] += g * dt * phi * xt;
                grads.x[(t, ch)] += g * dt * phi * bv;
                gh[ch * n + s] = g * abar;
            }
        }
    }
    let g_pre = &g_delta * &cache.pre_delta.mapv(sigmoid);
    grads.x += &g_pre.dot(&proj.w_delta.t());
    grads.x += &g_b.dot(&proj.w_b.t());
    grads.x += &g_c.dot(&proj.w_c.t());
    let xt = cache.x.t();
    grads.proj.w_delta = xt.dot(&g_pre);
    grads.proj.b_delta = g_pre.sum_axis(Axis(0));
    grads.proj.w_b = xt.dot(&g_b);
    grads.proj.b_b = g_b.sum_axis(Axis(0));
    grads.proj.w_c = xt.dot(&g_c);
    grads.proj.b_c = g_c.sum_axis(Axis(0));
    grads
}

/// Selective scan over a sequence of `len × L` tokens.
pub fn selective_scan(sel: &SelectiveParams, x: &Array2<f64>) -> Result<Array2<f64>> {
    sel.check(&x.view())?;
    Ok(scan_forward(&sel.a, &sel.d, &sel.proj, x.view()).0)
}

/// Gradients of `Σ upstream ⊙ selective_scan(sel, x)` with respect to all inputs.
pub fn selective_scan_backward(sel: &SelectiveParams, x: &Array2<f64>, upstream: &Array2<f64>) -> Result<SelectiveGrads> {
    sel.check(&x.view())?;
    if upstream.dim() != x.dim() {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?} vs tokens {:?}",
            upstream.dim(),
            x.dim()
        )));
    }
    let (_, cache) = scan_forward(&sel.a, &sel.d, &sel.proj, x.view());
    Ok(scan_backward(&sel.a, &sel.d, &sel.proj, &cache, upstream.view()))
}

/// Run many equal-length sequences stacked row-wise (`count·len × L`).
pub(crate) fn scan_forward_batch(
    a: &Array2<f64>,
    d: &Array1<f64>,
    proj: &SelectiveProjections,
    x: &Array2<f64>,
    len: usize,
) -> (Array2<f64>, Vec<ScanCache>) {
    let count = x.nrows() / len;
    let results: Vec<(Array2<f64>, ScanCache)> = (0..count)
        .into_par_iter()
        .map(|i| scan_forward(a, d, proj, x.slice(ndarray::s![i * len..(i + 1) * len, ..])))
        .collect();
    let mut y = Array2::zeros(x.dim());
    let mut caches = Vec::with_capacity(count);
    for (i, (yi, ci)) in results.into_iter().enumerate() {
        y.slice_mut(ndarray::s![i * len..(i + 1) * len, ..]).assign(&yi);
        caches.push(ci);
    }
    (y, caches)
}

pub(crate) fn scan_backward_batch(
    a: &Array2<f64>,
    d: &Array1<f64>,
    proj: &SelectiveProjections,
    caches: &[ScanCache],
    grad_out: &Array2<f64>,
    len: usize,
) -> SelectiveGrads {
    let per_seq: Vec<SelectiveGrads> = caches
        .par_iter()
        .enumerate()
        .map(|(i, c)| scan_backward(a, d, proj, c, grad_out.slice(ndarray::s![i * len..(i + 1) * len, ..])))
        .collect();
    let (l, n) = a.dim();
    let mut total = SelectiveGrads::zeros(grad_out.nrows(), l, n);
    for (i, g) in per_seq.iter().enumerate() {
        total.x.slice_mut(ndarray::s![i * len..(i + 1) * len, ..]).assign(&g.x);
        total.accumulate_params(g);
    }
    total
}
