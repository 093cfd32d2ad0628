use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use denselora_core::adapters::Role;
use denselora_core::analysis::{density_report, DensityOptions, DensityReport, MatrixDensity, TauMode};
use denselora_core::AdapterCheckpoint;

use crate::exit::Usage;

#[derive(Args, Debug)]
pub struct DensityArgs {
    #[arg(long)]
    pub before: PathBuf,
    #[arg(long)]
    pub after: PathBuf,
    /// A second run sharing the threshold pool, e.g. the matched LoRA run.
    #[arg(long, requires = "compare_after")]
    pub compare_before: Option<PathBuf>,
    #[arg(long, requires = "compare_before")]
    pub compare_after: Option<PathBuf>,
    #[arg(long, env = "DENSELORA_OUT_DIR", default_value = "denselora-out")]
    pub out: PathBuf,
    #[arg(long, default_value = "pooled")]
    pub tau_mode: TauMode,
    #[arg(long, default_value_t = 0.1)]
    pub tau_factor: f64,
    /// Restrict the comparison set, e.g. A,B,M.
    #[arg(long, value_delimiter = ',', value_parser = parse_role)]
    pub roles: Vec<Role>,
    #[arg(long, default_value_t = 0)]
    pub slice_seed: u64,
}

fn parse_role(s: &str) -> std::result::Result<Role, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown role {s:?}"))
}

fn load(path: &PathBuf) -> Result<AdapterCheckpoint> {
    AdapterCheckpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

pub fn run(args: &DensityArgs) -> Result<()> {
    if !(args.tau_factor > 0.0) {
        return Err(Usage("--tau-factor must be positive".into()).into());
    }
    let primary = (load(&args.before)?, load(&args.after)?);
    let compare = match (&args.compare_before, &args.compare_after) {
        (Some(b), Some(a)) => Some((load(b)?, load(a)?)),
        _ => None,
    };
    let mut runs = vec![("primary", &primary.0, &primary.1)];
    if let Some((b, a)) = &compare {
        runs.push(("compare", b, a));
    }
    let options = DensityOptions {
        tau_factor: args.tau_factor,
        tau_mode: args.tau_mode,
        roles: (!args.roles.is_empty()).then(|| args.roles.clone()),
        slice_seed: args.slice_seed,
    };
    let report = density_report(&runs, &options)?;
    write_report(&report, &args.out)?;

    for s in &report.roles {
        println!("{:<10} matrices {:>3}  active {:.4}  rms {:.3e}", s.role, s.matrices, s.active_fraction, s.rms);
    }
    match report.m_to_ab_ratio() {
        Some(r) => println!("M / max(A, B) active fraction ratio {r:.4}"),
        None => println!("M / max(A, B) ratio unavailable for this comparison set"),
    }
    println!(
        "threshold {} x {} rms",
        args.tau_factor,
        match args.tau_mode {
            TauMode::Pooled => "pooled",
            TauMode::PerMatrix => "per-matrix",
        }
    );
    Ok(())
}

fn file_stem(m: &MatrixDensity) -> String {
    format!("{}__{}", m.run, m.label.replace('.', "_"))
}

fn grid_csv(m: &MatrixDensity) -> String {
    let cols = m.slice.shape()[1];
    let mut out = String::new();
    for row in m.slice.data().chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn write_report(report: &DensityReport, out: &PathBuf) -> Result<()> {
    let heatmaps = out.join("heatmaps");
    fs::create_dir_all(&heatmaps).with_context(|| format!("creating {}", heatmaps.display()))?;
    fs::write(out.join("density_matrices.csv"), report.matrices_csv())?;
    fs::write(out.join("density_roles.csv"), report.roles_csv())?;
    fs::write(out.join("density_cells.csv"), report.heatmaps_csv())?;
    fs::write(out.join("density_report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    for m in &report.matrices {
        fs::write(heatmaps.join(format!("{}.csv", file_stem(m))), grid_csv(m))?;
    }
    Ok(())
}
