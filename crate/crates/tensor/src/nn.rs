//! Small layer helpers shared by the models.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;

/// Affine map `x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let w = store.add_xavier(format!("{name}.w"), fan_in, fan_out, rng);
        let b = store.add_full(format!("{name}.b"), &[fan_out], 0.0);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add(y, p[self.b])
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data_mut().fill(0.0);
        store.get_mut(self.b).data_mut().fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_full(format!("{name}.gamma"), &[dim], 1.0),
            beta: store.add_full(format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], LAYER_NORM_EPS)
    }
}

/// Token lookup table `[vocab, dim]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut Rng) -> Self {
        let table = store.add_xavier(format!("{name}.table"), vocab, dim, rng);
        Self { table, vocab, dim }
    }

    /// Lookup of `ids` reshaped to `shape ++ [dim]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let rows = g.index_rows(p[self.table], ids)?;
        let mut s = shape.to_vec();
        s.push(self.dim);
        g.reshape(rows, &s)
    }
}
