use super::*;
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::rng::Rng;
use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

fn ref_matvec(w: &Tensor, h: &[f64]) -> Vec<f64> {
    let (d, k) = (w.shape()[0], w.shape()[1]);
    (0..d)
        .map(|i| (0..k).map(|j| w.data()[i * k + j] * h[j]).sum())
        .collect()
}

fn ref_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            for l in 0..n {
                out[i * p + j] += a.data()[i * n + l] * b.data()[l * p + j];
            }
        }
    }
    Tensor::new(vec![m, p], out).unwrap()
}

fn identity_config(rank: usize) -> AdapterConfig {
    AdapterConfig {
        rank,
        alpha: Some(rank as f64),
        dropout: 0.0,
        activation: ActivationKind::Identity,
    }
}

fn randomize(store: &mut ParamStore, id: ParamId, rng: &mut Rng) {
    let shape = store.value(id).shape().to_vec();
    store.set_value(id, rng.uniform_tensor(&shape, -1.0, 1.0)).unwrap();
}

fn lora_setup(d: usize, k: usize, r: usize, seed: u64) -> (ParamStore, ParamId, LoraAdapter, Rng) {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let w0 = store.add("w0", rng.uniform_tensor(&[d, k], -1.0, 1.0), false);
    let group = attach_group(&mut store, Site::Q, 1, (k, d), AdapterVariant::Lora, &AdapterConfig::new(r), &mut rng).unwrap();
    let SiteAdapter::Lora(a) = group.adapters[0] else { unreachable!() };
    (store, w0, a, rng)
}

fn dense_setup(
    d: usize,
    k: usize,
    r: usize,
    variant: AdapterVariant,
    seed: u64,
) -> (ParamStore, ParamId, AdapterGroup, Rng) {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let w0 = store.add("w0", rng.uniform_tensor(&[d, k], -1.0, 1.0), false);
    let group = attach_group(&mut store, Site::U, 2, (k, d), variant, &AdapterConfig::new(r), &mut rng).unwrap();
    (store, w0, group, rng)
}

fn dense_of(group: &AdapterGroup, layer: usize) -> DenseLoraAdapter {
    match group.adapters[layer] {
        SiteAdapter::DenseLora(a) => a,
        _ => unreachable!(),
    }
}

#[test]
fn lora_fresh_adapter_is_exactly_base() {
    let (store, w0, a, mut rng) = lora_setup(5, 4, 2, 1);
    assert!(store.value(a.b).data().iter().all(|&v| v == 0.0));
    let h = rng.uniform_tensor(&[4], -1.0, 1.0);
    let out = lora_forward(&store, &h, w0, &a).unwrap();
    let base = ref_matvec(store.value(w0), h.data());
    assert!(out.bit_eq(&Tensor::vector(&base)));
}

#[test]
fn lora_hand_example() {
    let mut store = ParamStore::new();
    let w0 = store.add("w0", Tensor::eye(2), false);
    let a = LoraAdapter {
        a: store.add("A", Tensor::eye(2), true),
        b: store.add("B", Tensor::eye(2), true),
        rank: 2,
        alpha: 2.0,
        dropout: 0.0,
    };
    let out = lora_forward(&store, &Tensor::vector(&[1.0, 2.0]), w0, &a).unwrap();
    assert_eq!(out.data(), &[2.0, 4.0]);
}

#[test]
fn lora_matches_merged_reference() {
    let (mut store, w0, a, mut rng) = lora_setup(4, 4, 2, 2);
    randomize(&mut store, a.b, &mut rng);
    let h = rng.uniform_tensor(&[4], -1.0, 1.0);
    let ba = ref_matmul(store.value(a.b), store.value(a.a));
    let merged = store.value(w0).add(&ba.scale(a.scaling())).unwrap();
    let want = ref_matvec(&merged, h.data());
    let got = lora_forward(&store, &h, w0, &a).unwrap();
    assert!(got.max_abs_diff(&Tensor::vector(&want)) <= 1e-12);
}

#[test]
fn lora_merge_cases() {
    let (store, w0, a, _) = lora_setup(3, 3, 1, 3);
    assert_eq!(lora_merge(&store, store.value(w0), &a).unwrap(), *store.value(w0));

    let mut store = ParamStore::new();
    let ones = LoraAdapter {
        a: store.add("A", Tensor::ones(&[1, 2]), true),
        b: store.add("B", Tensor::ones(&[2, 1]), true),
        rank: 1,
        alpha: 1.0,
        dropout: 0.0,
    };
    let w0 = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let merged = lora_merge(&store, &w0, &ones).unwrap();
    assert_eq!(merged.data(), &[2.0, 3.0, 4.0, 5.0]);
}

#[test]
fn lora_merge_rejects_shape_mismatch() {
    let (store, _, a, _) = lora_setup(3, 4, 1, 3);
    assert!(lora_merge(&store, &Tensor::zeros(&[4, 4]), &a).is_err());
    let bad_h = Tensor::zeros(&[5]);
    assert!(matches!(
        lora_forward(&store, &bad_h, ParamId(0), &a),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn encode_cases() {
    let (store, _, group, mut rng) = dense_setup(3, 4, 2, AdapterVariant::DenseLora, 4);
    let codec = group.codec.unwrap();
    assert_eq!(encode(&store, &Tensor::zeros(&[4]), &codec).unwrap(), Tensor::zeros(&[2]));

    let h = rng.uniform_tensor(&[4], -1.0, 1.0);
    let want: Vec<f64> = ref_matvec(store.value(codec.encoder), h.data())
        .into_iter()
        .map(f64::tanh)
        .collect();
    assert!(encode(&store, &h, &codec).unwrap().max_abs_diff(&Tensor::vector(&want)) <= 1e-15);

    let mut store = ParamStore::new();
    let c = SharedCodec {
        encoder: store.add("we", Tensor::matrix(&[&[1.0, 1.0]]), true),
        decoder: store.add("wd", Tensor::matrix(&[&[2.0], &[3.0]]), true),
        activation: ActivationKind::Identity,
        in_dim: 2,
        out_dim: 2,
        rank: 1,
    };
    assert_eq!(encode(&store, &Tensor::vector(&[2.0, 3.0]), &c).unwrap().data(), &[5.0]);
    assert_eq!(decode(&store, &Tensor::vector(&[1.0]), &c).unwrap().data(), &[2.0, 3.0]);
    assert!(encode(&store, &Tensor::vector(&[1.0]), &c).is_err());
}

#[test]
fn decode_cases() {
    let (mut store, _, group, mut rng) = dense_setup(3, 4, 2, AdapterVariant::DenseLora, 5);
    let codec = group.codec.unwrap();
    let v = rng.uniform_tensor(&[2], -1.0, 1.0);
    assert_eq!(decode(&store, &v, &codec).unwrap(), Tensor::zeros(&[3]));

    randomize(&mut store, codec.decoder, &mut rng);
    let want: Vec<f64> = ref_matvec(store.value(codec.decoder), v.data())
        .into_iter()
        .map(f64::tanh)
        .collect();
    assert!(decode(&store, &v, &codec).unwrap().max_abs_diff(&Tensor::vector(&want)) <= 1e-15);
}

#[test]
fn denselora_fresh_adapter_is_exactly_base() {
    for variant in [AdapterVariant::DenseLora, AdapterVariant::Freeze, AdapterVariant::OnlyMatrix] {
        let (store, w0, group, mut rng) = dense_setup(5, 4, 2, variant, 6);
        let h = rng.uniform_tensor(&[4], -1.0, 1.0);
        let base = Tensor::vector(&ref_matvec(store.value(w0), h.data()));
        for layer in 0..2 {
            let out = denselora_forward(&store, &h, w0, &dense_of(&group, layer)).unwrap();
            assert!(out.bit_eq(&base), "{variant}");
        }
    }
}

#[test]
fn denselora_hand_example() {
    let mut store = ParamStore::new();
    let w0 = store.add("w0", Tensor::matrix(&[&[1.0, 0.0], &[0.0, 2.0]]), false);
    let codec = SharedCodec {
        encoder: store.add("we", Tensor::matrix(&[&[1.0, 0.0]]), true),
        decoder: store.add("wd", Tensor::matrix(&[&[1.0], &[1.0]]), true),
        activation: ActivationKind::Identity,
        in_dim: 2,
        out_dim: 2,
        rank: 1,
    };
    let a = DenseLoraAdapter {
        m: store.add("m", Tensor::matrix(&[&[2.0]]), true),
        codec,
        alpha: 1.0,
        dropout: 0.0,
    };
    let out = denselora_forward(&store, &Tensor::vector(&[3.0, 5.0]), w0, &a).unwrap();
    // W0·h = [3, 10], branch = [6, 6]
    assert_eq!(out.data(), &[9.0, 16.0]);
}

#[test]
fn denselora_rejects_codec_shape_mismatch() {
    let (mut store, _, group, mut rng) = dense_setup(3, 4, 2, AdapterVariant::DenseLora, 7);
    let other = store.add("w_other", rng.uniform_tensor(&[4, 4], -1.0, 1.0), false);
    let err = denselora_forward(&store, &Tensor::zeros(&[4]), other, &dense_of(&group, 0));
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn only_matrix_branch_is_merged_linear_map() {
    let (mut store, w0, group, mut rng) = dense_setup(6, 5, 3, AdapterVariant::OnlyMatrix, 8);
    let codec = group.codec.unwrap();
    assert_eq!(codec.activation, ActivationKind::Identity);
    randomize(&mut store, codec.decoder, &mut rng);
    let a = dense_of(&group, 1);
    let merged = ref_matmul(&ref_matmul(store.value(codec.decoder), store.value(a.m)), store.value(codec.encoder))
        .scale(a.scaling());
    assert!(only_matrix_merge(&store, &a).unwrap().max_abs_diff(&merged) <= 1e-12);
    for _ in 0..20 {
        let h = rng.uniform_tensor(&[5], -1.0, 1.0);
        let full = denselora_forward(&store, &h, w0, &a).unwrap();
        let want: Vec<f64> = ref_matvec(store.value(w0), h.data())
            .iter()
            .zip(ref_matvec(&merged, h.data()))
            .map(|(x, y)| x + y)
            .collect();
        assert!(full.max_abs_diff(&Tensor::vector(&want)) <= 1e-12);
    }
}

#[test]
fn nonlinear_codec_cannot_merge() {
    let (store, _, group, _) = dense_setup(3, 3, 1, AdapterVariant::DenseLora, 9);
    assert!(only_matrix_merge(&store, &dense_of(&group, 0)).is_err());
}

#[test]
fn red_cases() {
    let mut store = ParamStore::new();
    let fresh = RedAdapter::new(&mut store, "r", 3);
    let h = Tensor::vector(&[0.3, -1.0, 2.0]);
    assert!(red_forward(&store, &h, &fresh).unwrap().bit_eq(&h));

    store.set_value(fresh.scaling, Tensor::vector(&[2.0, 0.0, 1.0])).unwrap();
    store.set_value(fresh.bias, Tensor::vector(&[0.0, 1.0, 0.0])).unwrap();
    let out = red_forward(&store, &Tensor::vector(&[3.0, 4.0, 5.0]), &fresh).unwrap();
    assert_eq!(out.data(), &[6.0, 1.0, 5.0]);
    assert!(red_forward(&store, &Tensor::vector(&[1.0]), &fresh).is_err());

    let mut rng = Rng::new(10);
    randomize(&mut store, fresh.scaling, &mut rng);
    randomize(&mut store, fresh.bias, &mut rng);
    let h = rng.uniform_tensor(&[3], -1.0, 1.0);
    let (s, b) = (store.value(fresh.scaling).data(), store.value(fresh.bias).data());
    let want: Vec<f64> = (0..3).map(|i| s[i] * h.data()[i] + b[i]).collect();
    assert_eq!(red_forward(&store, &h, &fresh).unwrap().data(), want.as_slice());
}

#[test]
fn attach_group_structure_and_counts() {
    let (k, d, r, layers) = (6, 5, 2, 3);
    for variant in AdapterVariant::ALL {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(11);
        let g = attach_group(&mut store, Site::V, layers, (k, d), variant, &AdapterConfig::new(r), &mut rng).unwrap();
        assert_eq!(g.adapters.len(), layers);
        let expected = match variant {
            AdapterVariant::DenseLora | AdapterVariant::OnlyMatrix => (d + k) * r + layers * r * r,
            AdapterVariant::Freeze => layers * r * r,
            AdapterVariant::Lora => layers * (d + k) * r,
            AdapterVariant::Red => layers * 2 * d,
        };
        assert_eq!(g.trainable_count(&store), expected, "{variant}");
        assert_eq!(store.trainable_count(), expected, "{variant}");
        assert_eq!(g.codec.is_some(), variant.is_dense());
        if variant.is_dense() {
            // one codec, distinct M per layer
            let ms: Vec<ParamId> = (0..layers).map(|l| dense_of(&g, l).m).collect();
            assert!(ms.windows(2).all(|w| w[0] != w[1]));
            assert!((0..layers).all(|l| dense_of(&g, l).codec == g.codec.unwrap()));
            assert_eq!(store.len(), 2 + layers);
        }
    }
}

#[test]
fn dense_m_init_is_independent_kaiming() {
    let (store, _, group, _) = dense_setup(8, 8, 4, AdapterVariant::DenseLora, 12);
    let m0 = store.value(dense_of(&group, 0).m);
    let m1 = store.value(dense_of(&group, 1).m);
    assert_ne!(m0, m1);
    let bound = (6.0f64 / 4.0).sqrt();
    assert!(m0.data().iter().chain(m1.data()).all(|v| v.abs() <= bound));
    let we = store.value(group.codec.unwrap().encoder);
    assert!(we.data().iter().all(|v| v.abs() <= (6.0f64 / 8.0).sqrt()));
    assert!(store.value(group.codec.unwrap().decoder).max_abs() == 0.0);
}

#[test]
fn attach_group_errors_and_notices() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(0);
    let cfg = AdapterConfig::new(2);
    assert!(attach_group(&mut store, Site::Q, 0, (4, 4), AdapterVariant::DenseLora, &cfg, &mut rng).is_err());
    assert!(attach_group(&mut store, Site::Q, 1, (4, 4), AdapterVariant::DenseLora, &AdapterConfig::new(0), &mut rng).is_err());
    let g = attach_group(&mut store, Site::Q, 1, (4, 2), AdapterVariant::DenseLora, &cfg, &mut rng).unwrap();
    assert_eq!(g.notices.len(), 1);
    let g = attach_group(&mut store, Site::Q, 1, (4, 8), AdapterVariant::Lora, &cfg, &mut rng).unwrap();
    assert!(g.notices.is_empty());
}

#[test]
fn codec_update_is_seen_by_every_layer() {
    let (mut store, _, group, mut rng) = dense_setup(4, 4, 2, AdapterVariant::DenseLora, 13);
    let codec = group.codec.unwrap();
    let h = rng.uniform_tensor(&[2, 4], -1.0, 1.0);
    let before: Vec<Tensor> = (0..2)
        .map(|l| encode(&store, &h, &dense_of(&group, l).codec).unwrap())
        .collect();

    // one backward pass through layer 0 only, then a plain SGD step on W_e
    randomize(&mut store, codec.decoder, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(h.clone());
    let branch = dense_of(&group, 0).branch(&mut g, &store, x, None).unwrap();
    let loss = g.sum(branch);
    g.backward(loss, &mut store).unwrap();
    let grad = store.grad(codec.encoder).clone();
    assert!(grad.max_abs() > 0.0);
    let stepped = store.value(codec.encoder).sub(&grad.scale(0.1)).unwrap();
    store.set_value(codec.encoder, stepped).unwrap();

    for l in 0..2 {
        let after = encode(&store, &h, &dense_of(&group, l).codec).unwrap();
        assert!(after.max_abs_diff(&before[l]) > 1e-6, "layer {l} did not observe the shared update");
    }
}

#[test]
fn freeze_variant_trains_only_m() {
    let (mut store, _, group, mut rng) = dense_setup(4, 5, 2, AdapterVariant::Freeze, 14);
    let codec = group.codec.unwrap();
    assert!(!store.is_trainable(codec.encoder) && !store.is_trainable(codec.decoder));
    let h = rng.uniform_tensor(&[3, 5], -1.0, 1.0);
    let target = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
    let a = dense_of(&group, 0);
    let mut g = Graph::new();
    let x = g.constant(h);
    let t = g.constant(target.scale(-1.0));
    let branch = a.branch(&mut g, &store, x, None).unwrap();
    let diff = g.add(branch, t).unwrap();
    let sq = g.mul(diff, diff).unwrap();
    let loss = g.sum(sq);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(codec.encoder).max_abs(), 0.0);
    assert_eq!(store.grad(codec.decoder).max_abs(), 0.0);
    assert!(store.grad(a.m).max_abs() > 0.0);
}

#[test]
fn dropout_only_in_training_mode() {
    let (mut store, _, a, mut rng) = lora_setup(4, 6, 2, 15);
    randomize(&mut store, a.b, &mut rng);
    let a = LoraAdapter { dropout: 0.5, ..a };
    let h = rng.uniform_tensor(&[3, 6], -1.0, 1.0);
    let run = |train: Option<&mut Rng>| {
        let mut g = Graph::new();
        let x = g.constant(h.clone());
        let b = a.branch(&mut g, &store, x, train).unwrap();
        g.value(b).clone()
    };
    let eval1 = run(None);
    let eval2 = run(None);
    assert!(eval1.bit_eq(&eval2));
    let train = run(Some(&mut Rng::new(1)));
    assert!(train.max_abs_diff(&eval1) > 1e-6);
}

fn branch_grad_check(variant: AdapterVariant, activation: ActivationKind, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let (k, d) = (5, 4);
    let w0 = store.add("w0", rng.uniform_tensor(&[d, k], -1.0, 1.0), false);
    let cfg = AdapterConfig {
        activation,
        ..AdapterConfig::new(2)
    };
    let group = attach_group(&mut store, Site::Q, 2, (k, d), variant, &cfg, &mut rng).unwrap();
    for (_, _, id) in group.all_params() {
        if store.is_trainable(id) {
            randomize(&mut store, id, &mut rng);
        }
    }
    let h = rng.uniform_tensor(&[3, k], -1.0, 1.0);
    let target = rng.uniform_tensor(&[3, d], -1.0, 1.0).scale(-1.0);
    let params = store.trainable_ids();
    let report = grad_check(&mut store, &params, &GradCheckOptions::default(), |g, s| {
        let x = g.constant(h.clone());
        let w = g.param(s, w0);
        let mut out = g.linear(x, w)?;
        for a in &group.adapters {
            let base = out;
            out = a.apply(g, s, x, base, None)?;
        }
        let t = g.constant(target.clone());
        let diff = g.add(out, t)?;
        let sq = g.mul(diff, diff)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    report.max_relative_error
}

#[test]
fn adapter_branches_pass_grad_check() {
    for variant in AdapterVariant::ALL {
        let err = branch_grad_check(variant, ActivationKind::Tanh, 16);
        assert!(err <= 1e-5, "{variant}: {err}");
    }
    let err = branch_grad_check(AdapterVariant::DenseLora, ActivationKind::Identity, 17);
    assert!(err <= 1e-7, "identity: {err}");
}

#[test]
fn variant_names_roundtrip() {
    for v in AdapterVariant::ALL {
        assert_eq!(v.name().parse::<AdapterVariant>().unwrap(), v);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, format!("\"{}\"", v.name()));
    }
    assert!("dora".parse::<AdapterVariant>().is_err());
}

#[test]
fn checkpoint_roundtrip_and_snapshots() {
    let (mut store, _, group, mut rng) = dense_setup(4, 5, 2, AdapterVariant::DenseLora, 18);
    let m = dense_of(&group, 1).m;
    randomize(&mut store, m, &mut rng);
    let groups = [group];
    let before = AdapterCheckpoint::capture(&store, &groups, true);
    let after = AdapterCheckpoint::capture(&store, &groups, false);
    assert_eq!(before.manifest, after.manifest);
    assert_eq!(before.entries.len(), 4);
    assert_ne!(before.get(Site::U, Some(1), Role::M), after.get(Site::U, Some(1), Role::M));
    assert_eq!(before.get(Site::U, None, Role::WE), after.get(Site::U, None, Role::WE));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("after.dlac");
    after.save(&path).unwrap();
    let loaded = AdapterCheckpoint::load(&path).unwrap();
    assert_eq!(loaded, after);
    assert_eq!(loaded.to_bytes(), after.to_bytes());
    assert_eq!(&after.to_bytes()[..4], b"DLAC");

    let mut bytes = after.to_bytes();
    bytes[0] = b'X';
    assert!(AdapterCheckpoint::read_from(&mut bytes.as_slice()).is_err());
}

proptest! {
    #[test]
    fn lora_merge_equivalence(seed in any::<u64>(), d in 2usize..6, k in 2usize..6) {
        let (mut store, w0, a, mut rng) = lora_setup(d, k, 1, seed);
        randomize(&mut store, a.b, &mut rng);
        let merged = lora_merge(&store, store.value(w0), &a).unwrap();
        let h = rng.uniform_tensor(&[k], -1.0, 1.0);
        let direct = lora_forward(&store, &h, w0, &a).unwrap();
        let via_merge = Tensor::vector(&ref_matvec(&merged, h.data()));
        prop_assert!(direct.max_abs_diff(&via_merge) <= 1e-12);
    }

    #[test]
    fn trainable_count_formula(layers in 1usize..6, k in 1usize..20, d in 1usize..20, r in 1usize..6) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let g = attach_group(&mut store, Site::D, layers, (k, d), AdapterVariant::DenseLora, &identity_config(r), &mut rng).unwrap();
        prop_assert_eq!(g.trainable_count(&store), (d + k + layers * r) * r);
    }
}
