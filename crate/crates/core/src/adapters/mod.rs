//! Adapter families attached to frozen projections.
//!
//! * [`LoraAdapter`]: `ĥ = W0·h + (α/r)·B·A·h`
//! * [`RedAdapter`]: `ĥ = l_scaling ⊙ h + l_bias` on a projection output
//! * [`DenseLoraAdapter`]: `ĥ = W0·h + (α/r)·σ(W_d · M · σ(W_e·h))`, where
//!   `W_e`/`W_d` live in a [`SharedCodec`] shared by every layer of one
//!   module type and `M` is a per-layer `r×r` matrix.
//!
//! Activations are row-major, so every branch works on `x[n×k]` and the
//! vector helpers below accept either `[k]` or `[n×k]` inputs.

pub(crate) mod checkpoint;
mod dense;
mod lora;
mod red;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ActivationKind, Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::site::Site;
use crate::tensor::Tensor;

pub use checkpoint::{AdapterCheckpoint, ADAPTER_FORMAT_VERSION, ADAPTER_MAGIC, AdapterManifest, CheckpointEntry, GroupManifest, Role};
pub use dense::{decode, denselora_forward, encode, only_matrix_merge, DenseLoraAdapter, SharedCodec};
pub use lora::{lora_forward, lora_merge, LoraAdapter};
pub use red::{red_forward, RedAdapter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterVariant {
    #[serde(rename = "denselora")]
    DenseLora,
    /// DenseLoRA with the codec frozen; only `M` trains.
    Freeze,
    /// DenseLoRA with identity activations, so the branch is linear.
    OnlyMatrix,
    #[serde(rename = "lora")]
    Lora,
    #[serde(rename = "red")]
    Red,
}

impl AdapterVariant {
    pub const ALL: [AdapterVariant; 5] = [
        AdapterVariant::DenseLora,
        AdapterVariant::Freeze,
        AdapterVariant::OnlyMatrix,
        AdapterVariant::Lora,
        AdapterVariant::Red,
    ];

    pub fn is_dense(self) -> bool {
        matches!(self, Self::DenseLora | Self::Freeze | Self::OnlyMatrix)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::DenseLora => "denselora",
            Self::Freeze => "freeze",
            Self::OnlyMatrix => "only-matrix",
            Self::Lora => "lora",
            Self::Red => "red",
        }
    }
}

impl fmt::Display for AdapterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|v| v.name() == norm || (norm == "dense-lora" && *v == Self::DenseLora))
            .ok_or_else(|| Error::Config(format!("unknown adapter variant {s:?}")))
    }
}

/// Hyperparameters shared by every adapter in one attachment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Branch scale numerator; the branch is multiplied by `alpha / rank`.
    /// `None` means `2 * rank`.
    pub alpha: Option<f64>,
    pub dropout: f64,
    pub activation: ActivationKind,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig::new(8)
    }
}

impl AdapterConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            alpha: None,
            dropout: 0.05,
            activation: ActivationKind::Tanh,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(2.0 * self.rank as f64)
    }

    pub fn scaling(&self) -> f64 {
        self.alpha() / self.rank as f64
    }
}

/// One adapter bound to a single (module type, layer) site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SiteAdapter {
    Lora(LoraAdapter),
    DenseLora(DenseLoraAdapter),
    Red(RedAdapter),
}

impl SiteAdapter {
    /// Adapted projection output given the branch input `x` and the frozen
    /// output `base = x·W0ᵀ`. `dropout_rng` is `Some` only in training mode.
    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        base: Var,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        match self {
            SiteAdapter::Lora(a) => {
                let branch = a.branch(g, store, x, dropout_rng)?;
                g.add(base, branch)
            }
            SiteAdapter::DenseLora(a) => {
                let branch = a.branch(g, store, x, dropout_rng)?;
                g.add(base, branch)
            }
            SiteAdapter::Red(a) => a.apply(g, store, base),
        }
    }

    /// Every parameter this adapter owns, with its checkpoint role. Shared
    /// codec parameters are not included.
    pub fn owned_params(&self) -> Vec<(Role, ParamId)> {
        match self {
            SiteAdapter::Lora(a) => vec![(Role::A, a.a), (Role::B, a.b)],
            SiteAdapter::DenseLora(a) => vec![(Role::M, a.m)],
            SiteAdapter::Red(a) => vec![(Role::LScaling, a.scaling), (Role::LBias, a.bias)],
        }
    }
}

/// All adapters of one module type across layers, plus the codec they share.
#[derive(Clone, Debug)]
pub struct AdapterGroup {
    pub site: Site,
    pub variant: AdapterVariant,
    pub in_dim: usize,
    pub out_dim: usize,
    pub config: AdapterConfig,
    pub codec: Option<SharedCodec>,
    pub adapters: Vec<SiteAdapter>,
    /// Non-fatal configuration notices (e.g. rank not below `min(k, d)`).
    pub notices: Vec<String>,
}

impl AdapterGroup {
    pub fn all_params(&self) -> Vec<(Option<usize>, Role, ParamId)> {
        let mut out = Vec::new();
        if let Some(c) = &self.codec {
            out.push((None, Role::WE, c.encoder));
            out.push((None, Role::WD, c.decoder));
        }
        for (layer, a) in self.adapters.iter().enumerate() {
            out.extend(a.owned_params().into_iter().map(|(role, id)| (Some(layer), role, id)));
        }
        out
    }

    pub fn trainable_count(&self, store: &ParamStore) -> usize {
        self.all_params()
            .iter()
            .filter(|(_, _, id)| store.is_trainable(*id))
            .map(|(_, _, id)| store.value(*id).len())
            .sum()
    }
}

/// Creates the adapters of one module type for `layers` layers.
///
/// Dense variants get exactly one [`SharedCodec`] and `layers` independent
/// `M` matrices drawn in layer order from `rng`. `module_shape` is `(k, d)`:
/// input and output width of the adapted projection.
pub fn attach_group(
    store: &mut ParamStore,
    site: Site,
    layers: usize,
    module_shape: (usize, usize),
    variant: AdapterVariant,
    config: &AdapterConfig,
    rng: &mut Rng,
) -> Result<AdapterGroup> {
    let (k, d) = module_shape;
    if layers == 0 {
        return Err(Error::Config("attach_group needs at least one layer".into()));
    }
    if k == 0 || d == 0 {
        return Err(Error::Config(format!("degenerate module shape ({k}, {d})")));
    }
    if config.rank == 0 && variant != AdapterVariant::Red {
        return Err(Error::Config("adapter rank must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
    }
    let mut config = *config;
    if variant == AdapterVariant::OnlyMatrix {
        config.activation = ActivationKind::Identity;
    }
    let mut notices = Vec::new();
    if variant != AdapterVariant::Red && config.rank >= k.min(d) {
        notices.push(format!(
            "{site}: rank {} is not below min(k, d) = {}; low-rank assumption does not hold",
            config.rank,
            k.min(d)
        ));
    }

    let mut codec = None;
    let adapters = match variant {
        AdapterVariant::Lora => (0..layers)
            .map(|l| LoraAdapter::new(store, &format!("{site}.{l}"), k, d, &config, rng).map(SiteAdapter::Lora))
            .collect::<Result<Vec<_>>>()?,
        AdapterVariant::Red => (0..layers)
            .map(|l| SiteAdapter::Red(RedAdapter::new(store, &format!("{site}.{l}"), d)))
            .collect(),
        AdapterVariant::DenseLora | AdapterVariant::OnlyMatrix | AdapterVariant::Freeze => {
            let frozen = variant == AdapterVariant::Freeze;
            let c = SharedCodec::new(store, &site.to_string(), k, d, &config, frozen, rng)?;
            codec = Some(c);
            (0..layers)
                .map(|l| {
                    DenseLoraAdapter::new(store, &format!("{site}.{l}"), c, &config, frozen, rng)
                        .map(SiteAdapter::DenseLora)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(AdapterGroup {
        site,
        variant,
        in_dim: k,
        out_dim: d,
        config,
        codec,
        adapters,
        notices,
    })
}

/// Wraps a `[k]` vector as a `[1×k]` row; matrices pass through.
pub(crate) fn as_rows(h: &Tensor) -> Result<(Tensor, bool)> {
    match h.shape() {
        [k] => Ok((h.clone().reshape(&[1, *k])?, true)),
        [_, _] => Ok((h.clone(), false)),
        other => Err(Error::dim("adapter input", other, &[0])),
    }
}

pub(crate) fn restore_rank(t: Tensor, was_vector: bool) -> Result<Tensor> {
    if was_vector {
        let n = t.len();
        t.reshape(&[n])
    } else {
        Ok(t)
    }
}

#[cfg(test)]
mod tests;
