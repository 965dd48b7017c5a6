//! Grid token-guided bidirectional scanning over sampled joint tokens.
//!
//! A hypothesis contributes `T·J` per-view joint tokens, stored at index
//! `t·J + j`. The forward pass walks them in the scan order, the backward pass
//! walks the exact reversal, and both outputs are scattered back to their
//! token positions and summed.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::ssm::{check_shapes, scan_backward_batch, scan_forward_batch, ScanCache, SelectiveGrads, SelectiveProjections};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Each view's joint chain is contiguous.
    #[default]
    JointMajor,
    /// Each joint's views are contiguous.
    ViewMajor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOrder {
    pub forward: Vec<usize>,
    pub backward: Vec<usize>,
    pub grouping: Grouping,
}

impl ScanOrder {
    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Plain left-to-right order over `len` tokens.
    pub fn identity(len: usize) -> Self {
        let forward: Vec<usize> = (0..len).collect();
        let backward = forward.iter().rev().copied().collect();
        Self {
            forward,
            backward,
            grouping: Grouping::JointMajor,
        }
    }
}

pub fn build_gtbs_orders(num_views: usize, num_joints: usize, grouping: Grouping) -> ScanOrder {
    let forward: Vec<usize> = match grouping {
        Grouping::JointMajor => (0..num_views * num_joints).collect(),
        Grouping::ViewMajor => (0..num_joints)
            .flat_map(|j| (0..num_views).map(move |t| t * num_joints + j))
            .collect(),
    };
    let backward = forward.iter().rev().copied().collect();
    ScanOrder {
        forward,
        backward,
        grouping,
    }
}

/// Two directional selective scans sharing `A` and `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct BidirectionalParams {
    pub a: Array2<f64>,
    pub d: Array1<f64>,
    pub forward: SelectiveProjections,
    pub backward: SelectiveProjections,
}

impl BidirectionalParams {
    pub fn channels(&self) -> usize {
        self.a.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.a.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BidirectionalGrads {
    pub x: Array2<f64>,
    pub a: Array2<f64>,
    pub d: Array1<f64>,
    pub forward: SelectiveProjections,
    pub backward: SelectiveProjections,
}

/// Forward-pass state for a batch of sequences sharing one order.
pub(crate) struct BidirCache {
    order: ScanOrder,
    fwd: Vec<ScanCache>,
    bwd: Vec<ScanCache>,
    rows: usize,
}

fn gather(x: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    let len = perm.len();
    let count = x.nrows() / len;
    let mut out = Array2::zeros(x.dim());
    for b in 0..count {
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(b * len + i).assign(&x.row(b * len + p));
        }
    }
    out
}

fn scatter_add(into: &mut Array2<f64>, y: &Array2<f64>, perm: &[usize]) {
    let len = perm.len();
    let count = y.nrows() / len;
    for b in 0..count {
        for (i, &p) in perm.iter().enumerate() {
            let mut row = into.row_mut(b * len + p);
            row += &y.row(b * len + i);
        }
    }
}

fn check(params: &BidirectionalParams, x: &Array2<f64>, order: &ScanOrder) -> Result<()> {
    if order.is_empty() || x.nrows() == 0 {
        return Err(Error::EmptySequence);
    }
    if x.nrows() % order.len() != 0 {
        return Err(Error::LengthMismatch {
            expected: order.len(),
            found: x.nrows(),
        });
    }
    check_shapes(&params.a, &params.d, &params.forward, &x.view())?;
    check_shapes(&params.a, &params.d, &params.backward, &x.view())
}

/// Scan `count` stacked sequences (`count·len × L`).
pub(crate) fn forward_batch(params: &BidirectionalParams, x: &Array2<f64>, order: &ScanOrder) -> Result<(Array2<f64>, BidirCache)> {
    check(params, x, order)?;
    let len = order.len();
    let xf = gather(x, &order.forward);
    let xb = gather(x, &order.backward);
    let ((yf, fwd), (yb, bwd)) = rayon::join(
        || scan_forward_batch(&params.a, &params.d, &params.forward, &xf, len),
        || scan_forward_batch(&params.a, &params.d, &params.backward, &xb, len),
    );
    let mut y = Array2::zeros(x.dim());
    scatter_add(&mut y, &yf, &order.forward);
    scatter_add(&mut y, &yb, &order.backward);
    Ok((
        y,
        BidirCache {
            order: order.clone(),
            fwd,
            bwd,
            rows: x.nrows(),
        },
    ))
}

pub(crate) fn backward_batch(params: &BidirectionalParams, cache: &BidirCache, upstream: &Array2<f64>) -> BidirectionalGrads {
    let len = cache.order.len();
    debug_assert_eq!(upstream.nrows(), cache.rows);
    let gf = gather(upstream, &cache.order.forward);
    let gb = gather(upstream, &cache.order.backward);
    let (f, b): (SelectiveGrads, SelectiveGrads) = rayon::join(
        || scan_backward_batch(&params.a, &params.d, &params.forward, &cache.fwd, &gf, len),
        || scan_backward_batch(&params.a, &params.d, &params.backward, &cache.bwd, &gb, len),
    );
    let mut x = Array2::zeros(upstream.dim());
    scatter_add(&mut x, &f.x, &cache.order.forward);
    scatter_add(&mut x, &b.x, &cache.order.backward);
    BidirectionalGrads {
        x,
        a: &f.a + &b.a,
        d: &f.d + &b.d,
        forward: f.proj,
        backward: b.proj,
    }
}

/// Sum-merged forward and backward selective scans of one token sequence.
pub fn bidirectional_scan(params: &BidirectionalParams, tokens: &Array2<f64>, order: &ScanOrder) -> Result<Array2<f64>> {
    if tokens.nrows() != order.len() {
        return Err(Error::LengthMismatch {
            expected: order.len(),
            found: tokens.nrows(),
        });
    }
    Ok(forward_batch(params, tokens, order)?.0)
}

/// Gradients of `Σ upstream ⊙ bidirectional_scan(params, tokens, order)`.
pub fn bidirectional_scan_backward(
    params: &BidirectionalParams,
    tokens: &Array2<f64>,
    order: &ScanOrder,
    upstream: &Array2<f64>,
) -> Result<BidirectionalGrads> {
    if tokens.nrows() != order.len() || upstream.dim() != tokens.dim() {
        return Err(Error::LengthMismatch {
            expected: order.len(),
            found: tokens.nrows(),
        });
    }
    let (_, cache) = forward_batch(params, tokens, order)?;
    Ok(backward_batch(params, &cache, upstream))
}
