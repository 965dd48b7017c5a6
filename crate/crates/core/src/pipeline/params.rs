//! Named parameter tensors of the regression model.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::PipelineConfig;
use crate::autodiff::{Graph, Var};
use crate::error::Result;

/// Ordered collection of named matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn id(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.values[self.id(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let i = self.id(name);
        &mut self.values[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Register every tensor as a graph parameter.
    pub fn register(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self.values.iter().map(|v| g.param(v.clone())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Graph handles of a registered [`ParamSet`], in the same order.
pub struct ParamVars {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }
}

/// Full model: configuration echo plus all tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: PipelineConfig,
    pub params: ParamSet,
    pub seed: u64,
}

pub fn layer_key(layer: usize, key: &str) -> String {
    format!("layer{layer}.{key}")
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || self.rng.random_range(-bound..bound))
    }

    fn linear(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        self.uniform(rows, cols, 1.0 / (rows as f64).sqrt())
    }

    fn normal(&mut self, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || scale * self.rng.sample::<f64, _>(StandardNormal))
    }
}

fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl ModelParams {
    pub fn init(config: &PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let l = config.feature_dim;
        let j = config.num_joints;
        let sp = config.scales * config.points;
        let d = config.scan_dim;
        let ns = config.state_dim;
        let f = config.ffn_dim;
        let h = config.head_dim;
        let mut p = ParamSet::default();
        p.insert("joint_embed", init.normal(j, l, 1.0));
        for m in 0..config.num_layers {
            let k = |s: &str| layer_key(m, s);
            p.insert(k("off_w"), init.uniform(l, 2 * sp, 0.01));
            let mut off_b = Array2::zeros((1, 2 * sp));
            for s in 0..config.scales {
                for q in 0..config.points {
                    let angle = std::f64::consts::TAU * q as f64 / config.points as f64;
                    let radius = 0.5 * q as f64;
                    let i = s * config.points + q;
                    off_b[(0, 2 * i)] = radius * angle.cos();
                    off_b[(0, 2 * i + 1)] = radius * angle.sin();
                }
            }
            p.insert(k("off_b"), off_b);
            p.insert(k("att_w"), Array2::zeros((l, sp)));
            p.insert(k("att_b"), Array2::zeros((1, sp)));
            p.insert(k("out_w"), init.linear(l, l));
            p.insert(k("out_b"), Array2::zeros((1, l)));

            p.insert(k("scan_in_w"), init.linear(l, d));
            p.insert(k("scan_feat_w"), init.linear(l, d));
            p.insert(
                k("a_log"),
                Array2::from_shape_fn((d, ns), |(_, s)| ((s + 1) as f64).ln()),
            );
            p.insert(k("d_skip"), Array2::ones((1, d)));
            for dir in ["fwd", "bwd"] {
                p.insert(k(&format!("{dir}.delta_w")), init.uniform(d, d, 0.01));
                let lo = 1e-3f64.ln();
                let hi = 0.1f64.ln();
                let db = Array2::from_shape_simple_fn((1, d), || inverse_softplus(init.rng.random_range(lo..hi).exp()));
                p.insert(k(&format!("{dir}.delta_b")), db);
                p.insert(k(&format!("{dir}.b_w")), init.linear(d, ns));
                p.insert(k(&format!("{dir}.b_b")), Array2::zeros((1, ns)));
                p.insert(k(&format!("{dir}.c_w")), init.linear(d, ns));
                p.insert(k(&format!("{dir}.c_b")), Array2::zeros((1, ns)));
            }
            p.insert(k("scan_out_w"), init.uniform(d, l, 0.01));

            p.insert(k("ln_g"), Array2::ones((1, l)));
            p.insert(k("ln_b"), Array2::zeros((1, l)));
            p.insert(k("ffn_w1"), init.linear(l, f));
            p.insert(k("ffn_b1"), Array2::zeros((1, f)));
            p.insert(k("ffn_w2"), init.linear(f, l));
            p.insert(k("ffn_b2"), Array2::zeros((1, l)));

            p.insert(k("q_w"), init.linear(l, l));
            p.insert(k("k_w"), init.linear(l, l));
            p.insert(k("v_w"), init.linear(l, l));

            p.insert(k("head_w1"), init.linear(2 * l, h));
            p.insert(k("head_b1"), Array2::zeros((1, h)));
            p.insert(k("head_w2"), init.uniform(j * h, 3, 0.01));
            p.insert(k("head_b2"), Array2::zeros((j, 3)));

            p.insert(k("cls_w"), init.uniform(l, 2, 0.01));
            p.insert(k("cls_b"), Array2::zeros((1, 2)));
        }
        Ok(Self {
            config: config.clone(),
            params: p,
            seed,
        })
    }
}
