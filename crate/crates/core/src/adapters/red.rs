use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::{as_rows, restore_rank};

/// Elementwise edit `l_scaling ⊙ h + l_bias`, initialised to the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RedAdapter {
    pub scaling: ParamId,
    pub bias: ParamId,
}

impl RedAdapter {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            scaling: store.add(format!("{name}.l_scaling"), Tensor::ones(&[d]), true),
            bias: store.add(format!("{name}.l_bias"), Tensor::zeros(&[d]), true),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let s = g.param(store, self.scaling);
        let b = g.param(store, self.bias);
        let scaled = g.mul_row(h, s)?;
        g.add_row(scaled, b)
    }
}

pub fn red_forward(store: &ParamStore, h: &Tensor, adapter: &RedAdapter) -> Result<Tensor> {
    let (rows, was_vector) = as_rows(h)?;
    let mut g = Graph::new();
    let x = g.constant(rows);
    let out = adapter.apply(&mut g, store, x)?;
    restore_rank(g.value(out).clone(), was_vector)
}
