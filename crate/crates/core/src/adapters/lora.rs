use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::rng::{kaiming_uniform_init, Rng};
use crate::tensor::Tensor;

use super::{as_rows, restore_rank, AdapterConfig};

/// `ΔW = (α/r)·B·A` with `A[r×k]` Kaiming-uniform and `B[d×r] = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        d: usize,
        config: &AdapterConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let r = config.rank;
        let a = store.add(format!("{name}.A"), kaiming_uniform_init(&[r, k], k, rng)?, true);
        let b = store.add(format!("{name}.B"), Tensor::zeros(&[d, r]), true);
        Ok(Self {
            a,
            b,
            rank: r,
            alpha: config.alpha(),
            dropout: config.dropout,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(α/r)·dropout(x)·Aᵀ·Bᵀ` for `x[n×k]`.
    pub fn branch(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout_rng: Option<&mut Rng>) -> Result<Var> {
        let x = match dropout_rng {
            Some(rng) => g.dropout(x, self.dropout, rng)?,
            None => x,
        };
        let a = g.param(store, self.a);
        let b = g.param(store, self.b);
        let down = g.linear(x, a)?;
        let up = g.linear(down, b)?;
        Ok(g.scale(up, self.scaling()))
    }
}

/// Eval-mode `W0·h + (α/r)·B·A·h` for `h[k]` or rows `h[n×k]`.
pub fn lora_forward(store: &ParamStore, h: &Tensor, w0: ParamId, adapter: &LoraAdapter) -> Result<Tensor> {
    let (rows, was_vector) = as_rows(h)?;
    let mut g = Graph::new();
    let x = g.constant(rows);
    let w = g.param(store, w0);
    let base = g.linear(x, w)?;
    let branch = adapter.branch(&mut g, store, x, None)?;
    let out = g.add(base, branch)?;
    restore_rank(g.value(out).clone(), was_vector)
}

/// `W′ = W0 + (α/r)·B·A`.
pub fn lora_merge(store: &ParamStore, w0: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let delta = store.value(adapter.b).matmul(store.value(adapter.a))?;
    if delta.shape() != w0.shape() {
        return Err(Error::dim("lora_merge", w0.shape(), delta.shape()));
    }
    w0.add(&delta.scale(adapter.scaling()))
}
