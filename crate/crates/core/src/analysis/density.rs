use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterCheckpoint, Role};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::site::Site;
use crate::tensor::Tensor;

/// Which increments set the threshold reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauMode {
    /// One rms pooled over every increment in the comparison set.
    #[default]
    Pooled,
    /// Each increment is thresholded against its own rms.
    PerMatrix,
}

impl std::str::FromStr for TauMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pooled" => Ok(TauMode::Pooled),
            "per-matrix" => Ok(TauMode::PerMatrix),
            other => Err(Error::Config(format!("unknown tau mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Density {
    /// Share of entries with `|Δ| > tau`.
    pub active_fraction: f64,
    /// Root mean square of the increment.
    pub rms: f64,
    pub tau: f64,
}

fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Root mean square over the concatenation of all increments.
pub fn pooled_rms(deltas: &[&Tensor]) -> f64 {
    let n: usize = deltas.iter().map(|t| t.len()).sum();
    if n == 0 {
        return 0.0;
    }
    let ss: f64 = deltas.iter().flat_map(|t| t.data()).map(|v| v * v).sum();
    (ss / n as f64).sqrt()
}

/// Density of `final_ - initial` with `tau = tau_factor · reference_rms`.
/// Without a reference the increment's own rms is used.
pub fn increment_density(
    initial: &Tensor,
    final_: &Tensor,
    tau_factor: f64,
    reference_rms: Option<f64>,
) -> Result<Density> {
    let delta = final_.sub(initial)?;
    density_of(&delta, tau_factor, reference_rms)
}

fn density_of(delta: &Tensor, tau_factor: f64, reference_rms: Option<f64>) -> Result<Density> {
    if !(tau_factor > 0.0 && tau_factor.is_finite()) {
        return Err(Error::Config(format!("tau factor must be positive, got {tau_factor}")));
    }
    let own = rms(delta.data());
    let reference = reference_rms.unwrap_or(own);
    if !(reference > 0.0) || !reference.is_finite() {
        return Err(Error::Degenerate(format!(
            "reference rms is {reference}; the checkpoints do not differ"
        )));
    }
    let tau = tau_factor * reference;
    let active = delta.data().iter().filter(|v| v.abs() > tau).count();
    Ok(Density {
        active_fraction: if delta.is_empty() { 0.0 } else { active as f64 / delta.len() as f64 },
        rms: own,
        tau,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityOptions {
    pub tau_factor: f64,
    pub tau_mode: TauMode,
    /// Roles that form the comparison set; `None` keeps every entry.
    pub roles: Option<Vec<Role>>,
    /// Seed for choosing the rank-sized heatmap window of each matrix.
    pub slice_seed: u64,
}

impl Default for DensityOptions {
    fn default() -> Self {
        Self {
            tau_factor: 0.1,
            tau_mode: TauMode::Pooled,
            roles: None,
            slice_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixDensity {
    pub run: String,
    pub label: String,
    pub module_type: Site,
    pub layer_index: Option<usize>,
    pub role: Role,
    pub shape: Vec<usize>,
    pub density: Density,
    /// Top-left corner of the heatmap window.
    pub slice_origin: (usize, usize),
    /// `r×r` window of the increment (smaller when the matrix is).
    pub slice: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleSummary {
    pub role: Role,
    pub matrices: usize,
    pub entries: usize,
    /// Active entries over all entries of this role.
    pub active_fraction: f64,
    pub rms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub options: DensityOptions,
    pub pooled_rms: Option<f64>,
    pub matrices: Vec<MatrixDensity>,
    pub roles: Vec<RoleSummary>,
}

impl DensityReport {
    pub fn role(&self, role: Role) -> Option<&RoleSummary> {
        self.roles.iter().find(|s| s.role == role)
    }

    /// Active fraction of `M` over the larger of `A` and `B`.
    pub fn m_to_ab_ratio(&self) -> Option<f64> {
        let m = self.role(Role::M)?.active_fraction;
        let a = self.role(Role::A).map_or(0.0, |s| s.active_fraction);
        let b = self.role(Role::B).map_or(0.0, |s| s.active_fraction);
        let denom = a.max(b);
        (denom > 0.0).then(|| m / denom)
    }

    pub fn matrices_csv(&self) -> String {
        let mut out = String::from("run,label,module_type,layer,role,rows,cols,rms,tau,active_fraction\n");
        for m in &self.matrices {
            let (rows, cols) = dims2(&m.shape);
            let layer = m.layer_index.map_or_else(|| "shared".to_string(), |l| l.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:e},{:e},{}",
                m.run, m.label, m.module_type, layer, m.role, rows, cols, m.density.rms, m.density.tau,
                m.density.active_fraction
            );
        }
        out
    }

    pub fn roles_csv(&self) -> String {
        let mut out = String::from("role,matrices,entries,rms,active_fraction\n");
        for s in &self.roles {
            let _ = writeln!(out, "{},{},{},{:e},{}", s.role, s.matrices, s.entries, s.rms, s.active_fraction);
        }
        out
    }

    /// Long-format heatmap grids, one row per cell.
    pub fn heatmaps_csv(&self) -> String {
        let mut out = String::from("run,label,row,col,delta,active\n");
        for m in &self.matrices {
            let (rows, cols) = dims2(m.slice.shape());
            for i in 0..rows {
                for j in 0..cols {
                    let v = m.slice.data()[i * cols + j];
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{:e},{}",
                        m.run,
                        m.label,
                        m.slice_origin.0 + i,
                        m.slice_origin.1 + j,
                        v,
                        u8::from(v.abs() > m.density.tau)
                    );
                }
            }
        }
        out
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (1, shape.iter().product()),
    }
}

fn window(delta: &Tensor, size: usize, rng: &mut Rng) -> ((usize, usize), Tensor) {
    let (rows, cols) = dims2(delta.shape());
    let (h, w) = (size.min(rows), size.min(cols));
    let r0 = rng.below(rows - h + 1);
    let c0 = rng.below(cols - w + 1);
    let mut data = Vec::with_capacity(h * w);
    for i in r0..r0 + h {
        data.extend_from_slice(&delta.data()[i * cols + c0..i * cols + c0 + w]);
    }
    ((r0, c0), Tensor::new(vec![h, w], data).expect("window shape"))
}

/// Measures how the adapter weights moved between checkpoints. Each run is a
/// `(name, before, after)` triple; several runs share one threshold pool so
/// that matched runs of different variants can be compared.
pub fn density_report(
    runs: &[(&str, &AdapterCheckpoint, &AdapterCheckpoint)],
    options: &DensityOptions,
) -> Result<DensityReport> {
    struct Pending<'a> {
        run: &'a str,
        label: String,
        site: Site,
        layer: Option<usize>,
        role: Role,
        rank: usize,
        delta: Tensor,
    }
    let mut pending = Vec::new();
    for &(run, before, after) in runs {
        if before.manifest != after.manifest {
            return Err(Error::Config(format!("run {run:?}: checkpoint manifests differ")));
        }
        if before.entries.len() != after.entries.len() {
            return Err(Error::Config(format!("run {run:?}: checkpoint entry counts differ")));
        }
        for (b, a) in before.entries.iter().zip(&after.entries) {
            if (b.module_type, b.layer_index, b.role) != (a.module_type, a.layer_index, a.role) {
                return Err(Error::Config(format!("run {run:?}: entry {} has no counterpart", b.label())));
            }
            if options.roles.as_ref().is_some_and(|r| !r.contains(&b.role)) {
                continue;
            }
            let rank = before
                .manifest
                .groups
                .iter()
                .find(|g| g.module_type == b.module_type)
                .map_or(1, |g| g.rank.max(1));
            pending.push(Pending {
                run,
                label: b.label(),
                site: b.module_type,
                layer: b.layer_index,
                role: b.role,
                rank,
                delta: a.tensor.sub(&b.tensor)?,
            });
        }
    }
    if pending.is_empty() {
        return Err(Error::Degenerate("no matrices in the comparison set".into()));
    }

    let pool = match options.tau_mode {
        TauMode::Pooled => {
            let deltas: Vec<&Tensor> = pending.iter().map(|p| &p.delta).collect();
            Some(pooled_rms(&deltas))
        }
        TauMode::PerMatrix => None,
    };
    if pool == Some(0.0) {
        return Err(Error::Degenerate("pooled increment rms is zero".into()));
    }

    let mut matrices = Vec::with_capacity(pending.len());
    for (i, p) in pending.into_iter().enumerate() {
        let density = density_of(&p.delta, options.tau_factor, pool)?;
        let mut rng = Rng::derive(options.slice_seed, i as u64);
        let (slice_origin, slice) = window(&p.delta, p.rank, &mut rng);
        matrices.push(MatrixDensity {
            run: p.run.to_string(),
            label: p.label,
            module_type: p.site,
            layer_index: p.layer,
            role: p.role,
            shape: p.delta.shape().to_vec(),
            density,
            slice_origin,
            slice,
        });
    }

    let mut roles: Vec<Role> = matrices.iter().map(|m| m.role).collect();
    roles.sort();
    roles.dedup();
    let roles = roles
        .into_iter()
        .map(|role| {
            let of_role: Vec<&MatrixDensity> = matrices.iter().filter(|m| m.role == role).collect();
            let entries: usize = of_role.iter().map(|m| m.slice_len()).sum();
            let active: f64 = of_role
                .iter()
                .map(|m| m.density.active_fraction * m.slice_len() as f64)
                .sum();
            let ss: f64 = of_role
                .iter()
                .map(|m| m.density.rms * m.density.rms * m.slice_len() as f64)
                .sum();
            RoleSummary {
                role,
                matrices: of_role.len(),
                entries,
                active_fraction: if entries == 0 { 0.0 } else { (active / entries as f64).clamp(0.0, 1.0) },
                rms: if entries == 0 { 0.0 } else { (ss / entries as f64).sqrt() },
            }
        })
        .collect();

    Ok(DensityReport {
        options: options.clone(),
        pooled_rms: pool,
        matrices,
        roles,
    })
}

impl MatrixDensity {
    fn slice_len(&self) -> usize {
        self.shape.iter().product()
    }
}
