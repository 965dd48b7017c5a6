//! A small reverse-mode tape over dense row-major matrices.
//!
//! Every value is an `Array2<f64>`; vectors are `1×n` rows and scalars `1×1`.
//! A node only records a backward closure when one of its parents requires a
//! gradient, so constants and detached values cost nothing on the way back.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::ssm::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Backward = Box<dyn Fn(&Array2<f64>, &Graph) -> Vec<(Var, Array2<f64>)>>;

struct Node {
    value: Array2<f64>,
    requires_grad: bool,
    backward: Option<Backward>,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// Gradients indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with zeros substituted when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

/// Sparse linear map between row spaces: `out[i] = Σ w · in[src]`.
#[derive(Debug, Clone, Default)]
pub struct RowMap {
    pub input_rows: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl RowMap {
    pub fn gather(input_rows: usize, idx: impl IntoIterator<Item = usize>) -> Self {
        Self {
            input_rows,
            entries: idx.into_iter().map(|i| vec![(i, 1.0)]).collect(),
        }
    }
}

impl Graph {
    pub fn new(grad_enabled: bool) -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, false, None)
    }

    pub fn param(&mut self, value: Array2<f64>) -> Var {
        let rg = self.grad_enabled;
        self.push(value, rg, None)
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Array2<f64>, requires_grad: bool, backward: Option<Backward>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register an operation with a hand-written backward pass.
    ///
    /// `backward` receives the output gradient and returns gradient
    /// contributions for any subset of `parents`.
    pub fn custom<F>(&mut self, value: Array2<f64>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Array2<f64>, &Graph) -> Vec<(Var, Array2<f64>)> + 'static,
    {
        let rg = self.grad_enabled && parents.iter().any(|&p| self.requires_grad(p));
        let bw: Option<Backward> = if rg { Some(Box::new(backward)) } else { None };
        self.push(value, rg, bw)
    }

    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.value(output).raw_dim();
        grads[output.0] = Some(Array2::ones(shape));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                for (p, gp) in bw(&g, self) {
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    match &mut grads[p.0] {
                        Some(acc) => *acc += &gp,
                        slot => *slot = Some(gp),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.custom(value, &[a, b], move |g, gr| {
            let mut out = Vec::with_capacity(2);
            if gr.requires_grad(a) {
                out.push((a, g.dot(&gr.value(b).t())));
            }
            if gr.requires_grad(b) {
                out.push((b, gr.value(a).t().dot(g)));
            }
            out
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.custom(value, &[a, b], move |g, _| vec![(a, g.clone()), (b, g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.custom(value, &[a, b], move |g, _| vec![(a, g.clone()), (b, -g)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.custom(value, &[a, b], move |g, gr| {
            vec![(a, g * gr.value(b)), (b, g * gr.value(a))]
        })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.custom(value, &[a], move |g, _| vec![(a, g * k)])
    }

    /// `a + row` with a `1×n` row broadcast over all rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.custom(value, &[a, row], move |g, _| {
            vec![(a, g.clone()), (row, g.sum_axis(Axis(0)).insert_axis(Axis(0)))]
        })
    }

    /// Scale each row of `a` by the matching entry of the `R×1` column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let value = self.value(a) * self.value(c);
        self.custom(value, &[a, c], move |g, gr| {
            let mut out = Vec::with_capacity(2);
            if gr.requires_grad(a) {
                out.push((a, g * gr.value(c)));
            }
            if gr.requires_grad(c) {
                out.push((c, (g * gr.value(a)).sum_axis(Axis(1)).insert_axis(Axis(1))));
            }
            out
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let y = value.clone();
        self.custom(value, &[a], move |g, _| vec![(a, g * &y)])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let y = value.clone();
        self.custom(value, &[a], move |g, _| vec![(a, g * &y.mapv(|s| s * (1.0 - s)))])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        let value = x.mapv(|v| v * sigmoid(v));
        self.custom(value, &[a], move |g, _| {
            let d = x.mapv(|v| {
                let s = sigmoid(v);
                s * (1.0 + v * (1.0 - s))
            });
            vec![(a, g * &d)]
        })
    }

    /// Row-wise layer normalisation with `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mean = xv.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let centred = xv - &mean;
        let var = centred.mapv(|v| v * v).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let inv = var.mapv(|v| 1.0 / (v + EPS).sqrt());
        let xhat = &centred * &inv;
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.custom(value, &[x, gamma, beta], move |g, gr| {
            let gamma_v = gr.value(gamma);
            let gxhat = g * gamma_v;
            let m1 = gxhat.sum_axis(Axis(1)).insert_axis(Axis(1)) / n;
            let m2 = (&gxhat * &xhat).sum_axis(Axis(1)).insert_axis(Axis(1)) / n;
            let gx = (&gxhat - &m1 - &xhat * &m2) * &inv;
            vec![
                (x, gx),
                (gamma, (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0))),
                (beta, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            ]
        })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).ncols()).collect();
        let parts = parts.to_vec();
        let ps = parts.clone();
        self.custom(value, &ps, move |g, _| {
            let mut start = 0;
            parts
                .iter()
                .zip(&widths)
                .map(|(&p, &w)| {
                    let gp = g.slice(s![.., start..start + w]).to_owned();
                    start += w;
                    (p, gp)
                })
                .collect()
        })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let shape = self.value(a).dim();
        self.custom(value, &[a], move |g, _| {
            let mut ga = Array2::zeros(shape);
            ga.slice_mut(s![.., start..end]).assign(g);
            vec![(a, ga)]
        })
    }

    /// General sparse row combination; see [`RowMap`].
    pub fn row_combine(&mut self, a: Var, map: Rc<RowMap>) -> Var {
        let av = self.value(a);
        assert_eq!(av.nrows(), map.input_rows, "row map expects {} rows", map.input_rows);
        let cols = av.ncols();
        let mut value = Array2::zeros((map.entries.len(), cols));
        for (i, entries) in map.entries.iter().enumerate() {
            let mut row = value.row_mut(i);
            for &(src, w) in entries {
                row.scaled_add(w, &av.row(src));
            }
        }
        self.custom(value, &[a], move |g, _| {
            let mut ga = Array2::zeros((map.input_rows, cols));
            for (i, entries) in map.entries.iter().enumerate() {
                for &(src, w) in entries {
                    ga.row_mut(src).scaled_add(w, &g.row(i));
                }
            }
            vec![(a, ga)]
        })
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let rows = self.value(a).nrows();
        self.row_combine(a, Rc::new(RowMap::gather(rows, idx.iter().copied())))
    }

    /// `out[r] = x[r] · W[group[r]]` with `W` stacked as `(G·H)×O`.
    pub fn grouped_matmul(&mut self, x: Var, w: Var, groups: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let h = xv.ncols();
        let o = wv.ncols();
        let mut value = Array2::zeros((xv.nrows(), o));
        for (r, &gi) in groups.iter().enumerate() {
            let wg = wv.slice(s![gi * h..(gi + 1) * h, ..]);
            value.row_mut(r).assign(&xv.row(r).dot(&wg));
        }
        self.custom(value, &[x, w], move |g, gr| {
            let xv = gr.value(x);
            let wv = gr.value(w);
            let mut gx = Array2::zeros(xv.dim());
            let mut gw = Array2::zeros(wv.dim());
            for (r, &gi) in groups.iter().enumerate() {
                let wg = wv.slice(s![gi * h..(gi + 1) * h, ..]);
                gx.row_mut(r).assign(&wg.dot(&g.row(r)));
                let mut block = gw.slice_mut(s![gi * h..(gi + 1) * h, ..]);
                for k in 0..h {
                    block.row_mut(k).scaled_add(xv[(r, k)], &g.row(r));
                }
            }
            vec![(x, gx), (w, gw)]
        })
    }

    /// Softmax within consecutive column blocks of width `group`.
    pub fn softmax_groups(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.ncols() % group, 0);
        let mut value = av.clone();
        for mut row in value.rows_mut() {
            for chunk in row.as_slice_mut().unwrap().chunks_mut(group) {
                let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in chunk.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in chunk.iter_mut() {
                    *v /= z;
                }
            }
        }
        let y = value.clone();
        self.custom(value, &[a], move |g, _| {
            let mut ga = Array2::zeros(y.dim());
            for r in 0..y.nrows() {
                for c0 in (0..y.ncols()).step_by(group) {
                    let dot: f64 = (c0..c0 + group).map(|c| g[(r, c)] * y[(r, c)]).sum();
                    for c in c0..c0 + group {
                        ga[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                    }
                }
            }
            vec![(a, ga)]
        })
    }

    /// Masked scaled dot-product attention within groups.
    ///
    /// Query rows `g·nq..(g+1)·nq` attend to key rows `g·nk..(g+1)·nk`; keys
    /// with zero mask are excluded. A group with no valid key returns zeros.
    pub fn group_attention(&mut self, q: Var, k: Var, v: Var, nq: usize, nk: usize, key_mask: Rc<Vec<bool>>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let scale = 1.0 / (d as f64).sqrt();
        let groups = qv.nrows() / nq;
        let mut probs: Vec<Array2<f64>> = Vec::with_capacity(groups);
        let mut value = Array2::zeros((qv.nrows(), vv.ncols()));
        for gi in 0..groups {
            let qg = qv.slice(s![gi * nq..(gi + 1) * nq, ..]);
            let kg = kv.slice(s![gi * nk..(gi + 1) * nk, ..]);
            let vg = vv.slice(s![gi * nk..(gi + 1) * nk, ..]);
            let mut sc = qg.dot(&kg.t()) * scale;
            for mut row in sc.rows_mut() {
                let mut m = f64::NEG_INFINITY;
                for (c, x) in row.iter().enumerate() {
                    if key_mask[gi * nk + c] {
                        m = m.max(*x);
                    }
                }
                let mut z = 0.0;
                for (c, x) in row.iter_mut().enumerate() {
                    *x = if key_mask[gi * nk + c] { (*x - m).exp() } else { 0.0 };
                    z += *x;
                }
                if z > 0.0 {
                    row.mapv_inplace(|x| x / z);
                }
            }
            value.slice_mut(s![gi * nq..(gi + 1) * nq, ..]).assign(&sc.dot(&vg));
            probs.push(sc);
        }
        self.custom(value, &[q, k, v], move |g, gr| {
            let (qv, kv, vv) = (gr.value(q), gr.value(k), gr.value(v));
            let mut gq = Array2::zeros(qv.dim());
            let mut gk = Array2::zeros(kv.dim());
            let mut gv = Array2::zeros(vv.dim());
            for (gi, p) in probs.iter().enumerate() {
                let go = g.slice(s![gi * nq..(gi + 1) * nq, ..]);
                let kg = kv.slice(s![gi * nk..(gi + 1) * nk, ..]);
                let vg = vv.slice(s![gi * nk..(gi + 1) * nk, ..]);
                let qg = qv.slice(s![gi * nq..(gi + 1) * nq, ..]);
                gv.slice_mut(s![gi * nk..(gi + 1) * nk, ..]).assign(&p.t().dot(&go));
                let gp = go.dot(&vg.t());
                let rs = (&gp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let gs = (gp - rs) * p * scale;
                gq.slice_mut(s![gi * nq..(gi + 1) * nq, ..]).assign(&gs.dot(&kg));
                gk.slice_mut(s![gi * nk..(gi + 1) * nk, ..]).assign(&gs.t().dot(&qg));
            }
            vec![(q, gq), (k, gk), (v, gv)]
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.value(a).dim();
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.custom(value, &[a], move |g, _| vec![(a, Array2::from_elem(shape, g[(0, 0)]))])
    }

    /// `Σ w·|a − target|` as a `1×1` value.
    pub fn weighted_l1(&mut self, a: Var, target: &Array2<f64>, weight: &Array2<f64>) -> Var {
        let diff = self.value(a) - target;
        let value = Array2::from_elem((1, 1), (diff.mapv(f64::abs) * weight).sum());
        let sign = diff.mapv(|d| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 }) * weight;
        self.custom(value, &[a], move |g, _| vec![(a, &sign * g[(0, 0)])])
    }

    /// `Σ w·BCE(σ(logit), target)` as a `1×1` value.
    pub fn weighted_bce_logits(&mut self, logits: Var, target: &Array2<f64>, weight: &Array2<f64>) -> Var {
        let l = self.value(logits);
        let per = ndarray::Zip::from(l)
            .and(target)
            .map_collect(|&x, &t| crate::ssm::softplus(x) - t * x);
        let value = Array2::from_elem((1, 1), (per * weight).sum());
        let grad = (l.mapv(sigmoid) - target) * weight;
        self.custom(value, &[logits], move |g, _| vec![(logits, &grad * g[(0, 0)])])
    }
}
