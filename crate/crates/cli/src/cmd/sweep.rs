use std::fmt::Write as _;
use std::fs;

use anyhow::Result;
use clap::Args;
use denselora_core::analysis::variant_formula;

use super::train::execute;
use crate::config::RunArgs;

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated ranks, run in the order given.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ranks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub rank: usize,
    pub trainable: u64,
    pub final_accuracy: f64,
}

pub fn run(args: &SweepArgs) -> Result<()> {
    let base = args.run.resolve()?;
    let max_rank = base
        .adapter
        .targets
        .iter()
        .map(|s| {
            let (k, d) = base.model.site_shape(s);
            k.min(d)
        })
        .min()
        .unwrap_or(0);
    let layers = base.model.n_layers as u64;

    let mut rows = Vec::new();
    for &rank in &args.ranks {
        if rank == 0 || rank >= max_rank {
            eprintln!("skipping rank {rank}: must be in 1..{max_rank} for these dims");
            continue;
        }
        let mut config = base.clone();
        config.adapter.rank = rank;
        eprintln!("== rank {rank}");
        let summary = execute(&config, &args.run.out.join(format!("rank-{rank}")))?;
        let formula: u64 = config
            .adapter
            .targets
            .iter()
            .map(|s| {
                let (k, d) = config.model.site_shape(s);
                variant_formula(config.adapter.variant, layers, d as u64, k as u64, rank as u64)
            })
            .sum();
        // count_model already checked enumeration against the formula
        debug_assert_eq!(formula, summary.trainable_params);
        rows.push(SweepRow {
            rank,
            trainable: summary.trainable_params,
            final_accuracy: summary.final_accuracy,
        });
    }

    let table = render(&rows);
    fs::create_dir_all(&args.run.out)?;
    fs::write(args.run.out.join("sweep.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn render(rows: &[SweepRow]) -> String {
    let mut out = String::from("rank,trainable_params,final_accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.rank, r.trainable, r.final_accuracy);
    }
    out
}
