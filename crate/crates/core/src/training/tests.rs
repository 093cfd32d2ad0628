use super::*;
use crate::adapters::{AdapterConfig, AdapterVariant};
use crate::model::ModelConfig;

fn small_model(variant: AdapterVariant) -> AdaptedModel {
    let mut model = AdaptedModel::build(ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 6,
        max_seq_len: 8,
        seed: 1,
    })
    .unwrap();
    model
        .attach(variant, "QKVUD".parse().unwrap(), &AdapterConfig::new(2), &mut Rng::new(2))
        .unwrap();
    model
}

fn small_task() -> Task {
    Task {
        train_examples: 32,
        eval_examples: 16,
        ..Task::copy(6, 6)
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        warmup_steps: 2,
        batch_size: 8,
        epochs: 3,
        seed: 9,
        eval_every: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_is_a_noop() {
    let mut model = small_model(AdapterVariant::DenseLora);
    let before = model.adapter_checkpoint(false);
    let cfg = TrainConfig {
        epochs: 0,
        ..small_config()
    };
    let out = train(&mut model, &small_task(), &cfg).unwrap();
    assert_eq!(out.history.steps(), 0);
    assert_eq!(model.adapter_checkpoint(false), before);
}

#[test]
fn only_adapters_move_and_loss_is_recorded() {
    let mut model = small_model(AdapterVariant::DenseLora);
    let base_before: Vec<Tensor> = model
        .base_param_ids()
        .iter()
        .map(|&id| model.store().value(id).clone())
        .collect();
    let mut streamed = Vec::new();
    let out = train_with(&mut model, &small_task(), &small_config(), |r| streamed.push(r.clone())).unwrap();
    assert_eq!(out.history.steps(), 12);
    assert_eq!(out.history.learning_rates.len(), 12);
    assert_eq!(streamed, out.history.records());
    assert_eq!(out.history.accuracies.iter().map(|a| a.0).collect::<Vec<_>>(), vec![4, 8, 12]);
    for (i, &id) in model.base_param_ids().iter().enumerate() {
        assert_eq!(model.store().value(id).max_abs_diff(&base_before[i]), 0.0);
    }
    assert_ne!(out.before, out.after);
    assert_eq!(out.before.manifest, out.after.manifest);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut model = small_model(AdapterVariant::Lora);
        let out = train(&mut model, &small_task(), &small_config()).unwrap();
        (out.history, out.after.to_bytes())
    };
    let (h1, c1) = run();
    let (h2, c2) = run();
    assert!(h1.same_trajectory(&h2));
    assert_eq!(h1.to_jsonl(), h2.to_jsonl());
    assert_eq!(c1, c2);
}

#[test]
fn freeze_variant_keeps_codec_fixed() {
    let mut model = small_model(AdapterVariant::Freeze);
    let out = train(&mut model, &small_task(), &small_config()).unwrap();
    for (b, a) in out.before.entries.iter().zip(&out.after.entries) {
        use crate::adapters::Role;
        match b.role {
            Role::WE | Role::WD => assert_eq!(b.tensor, a.tensor),
            Role::M => assert_ne!(b.tensor, a.tensor),
            _ => unreachable!(),
        }
    }
}

#[test]
fn requires_adapters_and_valid_schedule() {
    let mut bare = AdaptedModel::build(ModelConfig::default()).unwrap();
    assert!(train(&mut bare, &small_task(), &small_config()).is_err());
    let mut model = small_model(AdapterVariant::DenseLora);
    let cfg = TrainConfig {
        warmup_steps: 100,
        ..small_config()
    };
    assert!(matches!(train(&mut model, &small_task(), &cfg), Err(Error::Config(_))));
}

#[test]
fn divergence_guard_needs_sustained_blowup() {
    let mut guard = DivergenceGuard::default();
    assert_eq!(guard.observe(1.0), None);
    for _ in 0..DIVERGENCE_PATIENCE - 1 {
        assert_eq!(guard.observe(11.0), None);
    }
    // a single recovery resets the streak
    assert_eq!(guard.observe(5.0), None);
    for _ in 0..DIVERGENCE_PATIENCE - 1 {
        assert_eq!(guard.observe(20.0), None);
    }
    assert_eq!(guard.observe(20.0), Some(1.0));
}

#[test]
fn accuracy_fixtures() {
    let task = small_task();
    let examples = task.eval_set(0).unwrap();
    let v = task.vocab_size;
    // logits that put all mass on the ground truth
    let perfect = accuracy_of(&examples, |inputs| {
        let ex = examples.iter().find(|e| e.inputs == inputs).unwrap();
        let mut t = Tensor::zeros(&[inputs.len(), v]);
        for (i, target) in ex.targets.iter().enumerate() {
            if let Some(target) = target {
                t.data_mut()[i * v + target] = 1.0;
            }
        }
        Ok(t)
    })
    .unwrap();
    assert_eq!(perfect, 1.0);
    assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
}

#[test]
fn untrained_model_is_near_chance() {
    let model = AdaptedModel::build(ModelConfig {
        vocab_size: 16,
        ..ModelConfig::default()
    })
    .unwrap();
    let task = Task {
        eval_examples: 400,
        ..Task::copy(16, 12)
    };
    let acc = evaluate(&model, &task, 0).unwrap();
    // chance is 1/16; 2400 positions give sd ~0.005 if independent
    assert!(acc < 0.15, "{acc}");
    assert_eq!(acc, evaluate(&model, &task, 0).unwrap());
}
