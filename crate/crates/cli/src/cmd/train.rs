use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use denselora_core::adapters::{denselora_forward, only_matrix_merge, SiteAdapter};
use denselora_core::analysis::count_model;
use denselora_core::{evaluate, train_with, AdaptedModel, AdapterVariant, Rng, Site};
use serde::{Deserialize, Serialize};

use crate::config::{RunArgs, RunConfig, RunManifest};
use crate::exit::CheckFailed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEFORE_FILE: &str = "adapters_before.dlac";
pub const AFTER_FILE: &str = "adapters_after.dlac";
pub const MODEL_FILE: &str = "model.dlmc";
pub const SUMMARY_FILE: &str = "summary.json";

const MERGE_TOLERANCE: f64 = 1e-12;

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: AdapterVariant,
    pub targets: String,
    pub rank: usize,
    pub trainable_params: u64,
    pub base_params: u64,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub base_accuracy: f64,
    pub final_accuracy: f64,
    /// Largest gap between the linear branch and its merged matrix, for
    /// identity-activation runs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub merge_max_abs_diff: Option<f64>,
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let config = args.run.resolve()?;
    let t = Instant::now();
    let summary = execute(&config, &args.run.out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    eprintln!("finished in {:.1}s; outputs in {}", t.elapsed().as_secs_f64(), args.run.out.display());
    Ok(())
}

/// Trains one configuration and writes every artifact into `out`.
pub fn execute(config: &RunConfig, out: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = RunManifest::new(config);
    write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;

    let mut model = AdaptedModel::build(config.model.clone())?;
    let groups = model.attach(
        config.adapter.variant,
        config.adapter.targets,
        &config.adapter.adapter_config(),
        &mut Rng::new(config.adapter.init_seed),
    )?;
    for notice in groups.iter().flat_map(|g| &g.notices) {
        eprintln!("note: {notice}");
    }
    let counts = count_model(&model)?;
    let base_accuracy = evaluate(&model, &config.task, config.train.seed)?;

    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = BufWriter::new(
        fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?,
    );
    let mut write_err = None;
    let outcome = train_with(&mut model, &config.task, &config.train, |rec| {
        if write_err.is_some() {
            return;
        }
        let line = serde_json::to_string(rec).expect("metric records serialize");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err = Some(e);
        }
        if let Some(acc) = rec.accuracy {
            eprintln!("step {:>5}  loss {:.4}  lr {:.2e}  acc {:.3}", rec.step, rec.loss, rec.lr, acc);
        }
    });
    metrics.flush()?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }
    let outcome = outcome?;

    outcome.before.save(out.join(BEFORE_FILE))?;
    outcome.after.save(out.join(AFTER_FILE))?;
    model.save(out.join(MODEL_FILE))?;

    let final_accuracy = match outcome.history.final_accuracy() {
        Some(a) => a,
        None => evaluate(&model, &config.task, config.train.seed)?,
    };
    let merge_max_abs_diff = if config.adapter.variant == AdapterVariant::OnlyMatrix {
        let diff = merged_branch_gap(&model, config.train.seed)?;
        if diff > MERGE_TOLERANCE {
            return Err(CheckFailed(format!("merged branch differs by {diff:e}")).into());
        }
        Some(diff)
    } else {
        None
    };
    let summary = RunSummary {
        variant: config.adapter.variant,
        targets: config.adapter.targets.to_string(),
        rank: config.adapter.rank,
        trainable_params: counts.total(),
        base_params: counts.base_total.unwrap_or(0),
        steps: outcome.history.steps(),
        final_loss: outcome.history.losses.last().copied(),
        base_accuracy,
        final_accuracy,
        merge_max_abs_diff,
    };
    write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

fn write(path: PathBuf, contents: String) -> Result<()> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Compares every identity-activation branch against `W0 + merged` on
/// random inputs.
fn merged_branch_gap(model: &AdaptedModel, seed: u64) -> Result<f64> {
    let mut rng = Rng::derive(seed, 6);
    let store = model.store();
    let mut worst: f64 = 0.0;
    for layer in 0..model.config().n_layers {
        for site in Site::ALL {
            let Some(SiteAdapter::DenseLora(adapter)) = model.adapter_at(layer, site) else {
                continue;
            };
            let w0 = model.projection(layer, site);
            let merged = store.value(w0).add(&only_matrix_merge(store, adapter)?)?;
            let h = rng.uniform_tensor(&[20, adapter.codec.in_dim], -1.0, 1.0);
            let branch = denselora_forward(store, &h, w0, adapter)?;
            worst = worst.max(branch.max_abs_diff(&h.matmul_nt(&merged)?));
        }
    }
    Ok(worst)
}
