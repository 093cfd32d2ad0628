use criterion::{black_box, criterion_group, criterion_main, Criterion};
use denselora_bench::{adapted, tokens};
use denselora_core::{AdapterVariant, Graph, Rng};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("logits");
    let input = tokens(11, 16, 7);
    for variant in [AdapterVariant::DenseLora, AdapterVariant::Lora, AdapterVariant::Red] {
        let model = adapted(variant, 8);
        group.bench_function(variant.name(), |b| b.iter(|| model.logits(black_box(&input)).unwrap()));
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    let input = tokens(11, 16, 7);
    let targets: Vec<Option<usize>> = input.iter().map(|&t| Some(t)).collect();
    for variant in [AdapterVariant::DenseLora, AdapterVariant::Lora] {
        let model = adapted(variant, 8);
        let mut store = model.store().clone();
        let mut rng = Rng::new(3);
        group.bench_function(variant.name(), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let logits = model.forward(&mut g, &input, Some(&mut rng)).unwrap();
                let loss = g.cross_entropy(logits, &targets).unwrap();
                g.backward(loss, &mut store).unwrap();
                store.zero_grads();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward, forward_backward);
criterion_main!(benches);
