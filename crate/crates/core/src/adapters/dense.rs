use crate::error::{Error, Result};
use crate::graph::{ActivationKind, Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::rng::{kaiming_uniform_init, Rng};
use crate::tensor::Tensor;

use super::{as_rows, restore_rank, AdapterConfig};

/// Encoder `W_e[r×k]` and decoder `W_d[d×r]` shared by all layers of one
/// module type. Holds parameter handles only, so copies alias the same
/// weights in the store.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SharedCodec {
    pub encoder: ParamId,
    pub decoder: ParamId,
    pub activation: ActivationKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub rank: usize,
}

impl SharedCodec {
    /// `W_e` is Kaiming-uniform (fan_in = k). `W_d` is zero, except for a
    /// frozen codec where it is Kaiming-uniform (fan_in = r) and the
    /// per-layer `M` starts at zero instead.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        d: usize,
        config: &AdapterConfig,
        frozen: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let r = config.rank;
        let we = kaiming_uniform_init(&[r, k], k, rng)?;
        let wd = if frozen {
            kaiming_uniform_init(&[d, r], r, rng)?
        } else {
            Tensor::zeros(&[d, r])
        };
        Ok(Self {
            encoder: store.add(format!("{name}.W_e"), we, !frozen),
            decoder: store.add(format!("{name}.W_d"), wd, !frozen),
            activation: config.activation,
            in_dim: k,
            out_dim: d,
            rank: r,
        })
    }

    /// `σ(x·W_eᵀ)` for `x[n×k]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let we = g.param(store, self.encoder);
        let z = g.linear(x, we)?;
        Ok(g.activation(z, self.activation))
    }

    /// `σ(v·W_dᵀ)` for `v[n×r]`: the decoder maps r back to d.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, v: Var) -> Result<Var> {
        let wd = g.param(store, self.decoder);
        let z = g.linear(v, wd)?;
        Ok(g.activation(z, self.activation))
    }
}

/// Per-layer dense `M[r×r]` between the shared encoder and decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenseLoraAdapter {
    pub m: ParamId,
    pub codec: SharedCodec,
    pub alpha: f64,
    pub dropout: f64,
}

impl DenseLoraAdapter {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        codec: SharedCodec,
        config: &AdapterConfig,
        frozen_codec: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let r = codec.rank;
        let m = if frozen_codec {
            Tensor::zeros(&[r, r])
        } else {
            kaiming_uniform_init(&[r, r], r, rng)?
        };
        Ok(Self {
            m: store.add(format!("{name}.M"), m, true),
            codec,
            alpha: config.alpha(),
            dropout: config.dropout,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.codec.rank as f64
    }

    /// `(α/r)·Decoder(M·Encoder(dropout(x)))` for `x[n×k]`.
    pub fn branch(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout_rng: Option<&mut Rng>) -> Result<Var> {
        let x = match dropout_rng {
            Some(rng) => g.dropout(x, self.dropout, rng)?,
            None => x,
        };
        let enc = self.codec.encode(g, store, x)?;
        let m = g.param(store, self.m);
        let mid = g.linear(enc, m)?;
        let dec = self.codec.decode(g, store, mid)?;
        Ok(g.scale(dec, self.scaling()))
    }
}

pub fn encode(store: &ParamStore, h: &Tensor, codec: &SharedCodec) -> Result<Tensor> {
    let (rows, was_vector) = as_rows(h)?;
    let mut g = Graph::new();
    let x = g.constant(rows);
    let out = codec.encode(&mut g, store, x)?;
    restore_rank(g.value(out).clone(), was_vector)
}

pub fn decode(store: &ParamStore, v: &Tensor, codec: &SharedCodec) -> Result<Tensor> {
    let (rows, was_vector) = as_rows(v)?;
    let mut g = Graph::new();
    let x = g.constant(rows);
    let out = codec.decode(&mut g, store, x)?;
    restore_rank(g.value(out).clone(), was_vector)
}

/// Eval-mode `W0·h + (α/r)·Decoder(M·Encoder(h))`.
pub fn denselora_forward(
    store: &ParamStore,
    h: &Tensor,
    w0: ParamId,
    adapter: &DenseLoraAdapter,
) -> Result<Tensor> {
    let w_shape = store.value(w0).shape();
    let codec = &adapter.codec;
    if w_shape != [codec.out_dim, codec.in_dim] {
        return Err(Error::Config(format!(
            "codec shape group (k={}, d={}) does not match W0 {:?}",
            codec.in_dim, codec.out_dim, w_shape
        )));
    }
    let (rows, was_vector) = as_rows(h)?;
    let mut g = Graph::new();
    let x = g.constant(rows);
    let w = g.param(store, w0);
    let base = g.linear(x, w)?;
    let branch = adapter.branch(&mut g, store, x, None)?;
    let out = g.add(base, branch)?;
    restore_rank(g.value(out).clone(), was_vector)
}

/// The `d×k` matrix `(α/r)·W_d·M·W_e`, defined only for identity activation.
/// A nonlinear codec has no merged form.
pub fn only_matrix_merge(store: &ParamStore, adapter: &DenseLoraAdapter) -> Result<Tensor> {
    if adapter.codec.activation != ActivationKind::Identity {
        return Err(Error::Config(format!(
            "cannot merge a {:?} codec; only identity activation is linear",
            adapter.codec.activation
        )));
    }
    let wd = store.value(adapter.codec.decoder);
    let m = store.value(adapter.m);
    let we = store.value(adapter.codec.encoder);
    Ok(wd.matmul(m)?.matmul(we)?.scale(adapter.scaling()))
}
