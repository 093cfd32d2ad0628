use serde::{Deserialize, Serialize};

use crate::adapters::AdapterVariant;
use crate::error::{Error, Result};
use crate::model::AdaptedModel;
use crate::site::Site;

/// `l·d·k`: full fine-tuning of one module type across `l` layers.
pub fn count_full_ft(l: u64, d: u64, k: u64) -> u64 {
    l * d * k
}

/// `l·(d + k)·r`.
pub fn count_lora(l: u64, d: u64, k: u64, r: u64) -> u64 {
    l * (d + k) * r
}

/// `(d + k + l·r)·r`: one shared codec plus `l` dense `r×r` matrices.
pub fn count_denselora(l: u64, d: u64, k: u64, r: u64) -> u64 {
    (d + k + l * r) * r
}

/// Trainable parameters of one module type under `variant`.
pub fn variant_formula(variant: AdapterVariant, l: u64, d: u64, k: u64, r: u64) -> u64 {
    match variant {
        AdapterVariant::DenseLora | AdapterVariant::OnlyMatrix => count_denselora(l, d, k, r),
        AdapterVariant::Freeze => l * r * r,
        AdapterVariant::Lora => count_lora(l, d, k, r),
        AdapterVariant::Red => l * 2 * d,
    }
}

/// Input width `k` and output width `d` of one module type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteDims {
    pub site: Site,
    pub k: u64,
    pub d: u64,
}

/// Dimension tables for analytic counting; no weights are instantiated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountPreset {
    pub name: String,
    pub layers: u64,
    pub sites: Vec<SiteDims>,
    /// Total base model parameters, when known, for percentages.
    pub base_total: Option<u64>,
}

impl CountPreset {
    /// LLaMA2-7B attention and MLP projections adapted at Q, K, V, Up, Down.
    pub fn llama2_7b() -> Self {
        let (h, f) = (4096, 11008);
        Self {
            name: "llama2-7b".into(),
            layers: 32,
            sites: vec![
                SiteDims { site: Site::Q, k: h, d: h },
                SiteDims { site: Site::K, k: h, d: h },
                SiteDims { site: Site::V, k: h, d: h },
                SiteDims { site: Site::U, k: h, d: f },
                SiteDims { site: Site::D, k: f, d: h },
            ],
            base_total: None,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "llama2-7b" => Ok(Self::llama2_7b()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleCount {
    pub site: Site,
    pub variant: Option<AdapterVariant>,
    pub k: u64,
    pub d: u64,
    pub full_ft: u64,
    pub lora: u64,
    pub denselora: u64,
    /// Formula count for the attached variant (0 when unadapted).
    pub formula: u64,
    /// Counted from the parameter store; `None` for analytic presets.
    pub enumerated: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub layers: u64,
    pub rank: u64,
    pub full_ft: u64,
    pub lora: u64,
    pub denselora: u64,
    pub breakdown: Vec<ModuleCount>,
    /// Formula total for the attached variants.
    pub formula_total: u64,
    pub enumerated_total: Option<u64>,
    pub base_total: Option<u64>,
    /// Trainable share of the base parameters, in percent.
    pub percentage: Option<f64>,
}

impl ParamCountReport {
    pub fn lora_to_denselora_ratio(&self) -> f64 {
        self.lora as f64 / self.denselora as f64
    }

    pub fn total(&self) -> u64 {
        self.enumerated_total.unwrap_or(self.formula_total)
    }
}

/// Analytic counts of all three methods over a set of module types.
pub fn count_sites(layers: u64, sites: &[SiteDims], rank: u64, base_total: Option<u64>) -> ParamCountReport {
    let breakdown: Vec<ModuleCount> = sites
        .iter()
        .map(|s| ModuleCount {
            site: s.site,
            variant: None,
            k: s.k,
            d: s.d,
            full_ft: count_full_ft(layers, s.d, s.k),
            lora: count_lora(layers, s.d, s.k, rank),
            denselora: count_denselora(layers, s.d, s.k, rank),
            formula: 0,
            enumerated: None,
        })
        .collect();
    ParamCountReport {
        layers,
        rank,
        full_ft: breakdown.iter().map(|m| m.full_ft).sum(),
        lora: breakdown.iter().map(|m| m.lora).sum(),
        denselora: breakdown.iter().map(|m| m.denselora).sum(),
        breakdown,
        formula_total: 0,
        enumerated_total: None,
        base_total,
        percentage: None,
    }
}

/// Enumerates the model's trainable parameters and checks them against the
/// per-group formulas. A mismatch is an internal-consistency error.
pub fn count_model(model: &AdaptedModel) -> Result<ParamCountReport> {
    let cfg = model.config();
    let layers = cfg.n_layers as u64;
    let store = model.store();
    let rank = model.groups().first().map_or(0, |g| g.config.rank as u64);
    let mut breakdown = Vec::new();
    for g in model.groups() {
        let (k, d) = (g.in_dim as u64, g.out_dim as u64);
        let r = g.config.rank as u64;
        breakdown.push(ModuleCount {
            site: g.site,
            variant: Some(g.variant),
            k,
            d,
            full_ft: count_full_ft(layers, d, k),
            lora: count_lora(layers, d, k, r),
            denselora: count_denselora(layers, d, k, r),
            formula: variant_formula(g.variant, layers, d, k, r),
            enumerated: Some(g.trainable_count(store) as u64),
        });
    }
    let enumerated_total = store.trainable_count() as u64;
    let formula_total: u64 = breakdown.iter().map(|m| m.formula).sum();
    if let Some(m) = breakdown.iter().find(|m| m.enumerated != Some(m.formula)) {
        return Err(Error::Consistency(format!(
            "{} ({:?}): enumerated {:?} != formula {}",
            m.site, m.variant, m.enumerated, m.formula
        )));
    }
    if enumerated_total != formula_total {
        return Err(Error::Consistency(format!(
            "enumerated trainable total {enumerated_total} != formula total {formula_total}"
        )));
    }
    let base_total = model.base_param_count() as u64;
    Ok(ParamCountReport {
        layers,
        rank,
        full_ft: breakdown.iter().map(|m| m.full_ft).sum(),
        lora: breakdown.iter().map(|m| m.lora).sum(),
        denselora: breakdown.iter().map(|m| m.denselora).sum(),
        breakdown,
        formula_total,
        enumerated_total: Some(enumerated_total),
        base_total: Some(base_total),
        percentage: Some(100.0 * enumerated_total as f64 / base_total as f64),
    })
}
