use anyhow::Result;
use clap::Args;
use denselora_core::{
    grad_check, ActivationKind, AdaptedModel, AdapterConfig, AdapterVariant, GradCheckOptions, ModelConfig, Rng,
    TargetSet,
};

use crate::exit::{CheckFailed, Usage};

/// Larger models make central differences impractically slow.
pub const MAX_PARAMS: usize = 100_000;

#[derive(Args, Debug)]
pub struct GradArgs {
    #[arg(long, default_value_t = AdapterVariant::DenseLora)]
    pub variant: AdapterVariant,
    #[arg(long, default_value = "QKVUD")]
    pub targets: TargetSet,
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    #[arg(long, default_value = "tanh")]
    pub activation: ActivationKind,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 11)]
    pub vocab: usize,
    /// Tokens in the probe sequence.
    #[arg(long, default_value_t = 6)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Scales every activation derivative; a negative control.
    #[arg(long, hide = true)]
    pub corrupt_derivative: Option<f64>,
}

pub fn run(args: &GradArgs) -> Result<()> {
    if args.seq_len < 2 {
        return Err(Usage("--seq-len must be at least 2".into()).into());
    }
    let config = ModelConfig {
        n_layers: args.layers,
        d_model: args.d_model,
        n_heads: args.heads,
        d_ff: args.d_ff,
        vocab_size: args.vocab,
        max_seq_len: args.seq_len,
        seed: args.seed,
    };
    let mut model = AdaptedModel::build(config)?;
    let adapter = AdapterConfig {
        activation: args.activation,
        dropout: 0.0,
        ..AdapterConfig::new(args.rank)
    };
    model.attach(args.variant, args.targets, &adapter, &mut Rng::new(args.seed))?;
    let total = model.store().total_count();
    if total > MAX_PARAMS {
        anyhow::bail!(denselora_core::Error::Config(format!(
            "model has {total} parameters; finite differences are limited to {MAX_PARAMS}"
        )));
    }

    // Zero-initialized factors would hide half the chain rule.
    let mut rng = Rng::derive(args.seed, 6);
    for id in model.store().trainable_ids() {
        let v = model.store().value(id).clone();
        let jitter = rng.uniform_tensor(v.shape(), -0.5, 0.5);
        model.store_mut().set_value(id, v.add(&jitter)?)?;
    }

    let mut rng = Rng::derive(args.seed, 7);
    let seq: Vec<usize> = (0..args.seq_len).map(|_| rng.below(args.vocab)).collect();
    let (tokens, next) = seq.split_at(args.seq_len - 1);
    let targets: Vec<Option<usize>> = seq[1..].iter().map(|&t| Some(t)).collect();
    debug_assert_eq!(targets.len(), tokens.len() + next.len() - 1);

    let params = model.store().trainable_ids();
    let probe = model.clone();
    let mut store = model.store().clone();
    let opts = GradCheckOptions {
        seed: args.seed,
        ..GradCheckOptions::default()
    };
    let corrupt = args.corrupt_derivative;
    let report = grad_check(&mut store, &params, &opts, |g, s| {
        if let Some(f) = corrupt {
            g.corrupt_activation_derivative(f);
        }
        let mut m = probe.clone();
        *m.store_mut() = s.clone();
        let logits = m.forward(g, tokens, None)?;
        g.cross_entropy(logits, &targets)
    })?;

    println!(
        "variant {}  activation {:?}  params {}  coords {}  max relative error {:.3e}{}",
        args.variant,
        adapter.activation,
        model.store().trainable_count(),
        report.coords_checked,
        report.max_relative_error,
        report.worst_param.as_deref().map(|p| format!("  (worst {p})")).unwrap_or_default()
    );
    if report.max_relative_error <= args.tolerance {
        println!("PASS (tolerance {:e})", args.tolerance);
        Ok(())
    } else {
        Err(CheckFailed(format!(
            "max relative error {:e} exceeds {:e}",
            report.max_relative_error, args.tolerance
        ))
        .into())
    }
}
