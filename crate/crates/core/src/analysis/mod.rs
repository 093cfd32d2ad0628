//! Parameter accounting and weight-update density measurement.

mod counts;
mod density;

pub use counts::{
    count_denselora, count_full_ft, count_lora, count_model, count_sites, variant_formula, CountPreset, ModuleCount,
    ParamCountReport, SiteDims,
};
pub use density::{
    density_report, increment_density, pooled_rms, Density, DensityOptions, DensityReport, MatrixDensity, RoleSummary,
    TauMode,
};
