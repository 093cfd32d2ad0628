//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Cap on coordinates checked per parameter; `None` checks every entry.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |numeric|)
    pub max_relative_error: f64,
    pub worst_param: Option<String>,
    pub coords_checked: usize,
}

/// Compares the analytic gradient of `loss_fn` against central differences
/// for every listed parameter. `loss_fn` must build a fresh graph that ends
/// in a scalar loss and must be deterministic.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    opts: &GradCheckOptions,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(opts.epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {}", opts.epsilon)));
    }
    store.zero_grads();
    let mut graph = Graph::new();
    let loss = loss_fn(&mut graph, store)?;
    let first = graph.value(loss).item()?;
    graph.backward(loss, store)?;

    let second = eval(store, &mut loss_fn)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut rng = Rng::new(opts.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: None,
        coords_checked: 0,
    };
    for &id in params {
        let analytic = store.grad(id).clone();
        let n = analytic.len();
        let coords = match opts.max_coords_per_param {
            Some(k) if k < n => rng.sample_indices(n, k),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + opts.epsilon;
            let plus = eval(store, &mut loss_fn)?;
            store.value_mut(id).data_mut()[c] = orig - opts.epsilon;
            let minus = eval(store, &mut loss_fn)?;
            store.value_mut(id).data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let err = (analytic.data()[c] - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if !(err <= report.max_relative_error) {
                report.max_relative_error = err;
                report.worst_param = Some(store.get(id).name().to_string());
            }
        }
    }
    store.zero_grads();
    Ok(report)
}

fn eval<F>(store: &ParamStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.value(loss).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ActivationKind;
    use crate::tensor::Tensor;
    use std::cell::Cell;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(&[&[0.7, -1.3]]), true);
        let report = grad_check(&mut store, &[w], &GradCheckOptions::default(), |g, s| {
            let v = g.param(s, w);
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_relative_error <= 1e-9, "{report:?}");
        assert_eq!(report.coords_checked, 2);
    }

    #[test]
    fn two_layer_composition() {
        let mut rng = Rng::new(9);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", rng.uniform_tensor(&[4, 3], -1.0, 1.0), true);
        let w2 = store.add("w2", rng.uniform_tensor(&[2, 4], -1.0, 1.0), true);
        let x = rng.uniform_tensor(&[5, 3], -1.0, 1.0);
        let report = grad_check(&mut store, &[w1, w2], &GradCheckOptions::default(), |g, s| {
            let xv = g.constant(x.clone());
            let (a, b) = (g.param(s, w1), g.param(s, w2));
            let h = g.linear(xv, a)?;
            let h = g.activation(h, ActivationKind::Tanh);
            let y = g.linear(h, b)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_relative_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn every_op_differentiates_correctly() {
        let mut rng = Rng::new(21);
        let mut store = ParamStore::new();
        let emb = store.add("emb", rng.uniform_tensor(&[6, 4], -1.0, 1.0), true);
        let gain = store.add("gain", rng.uniform_tensor(&[4], 0.5, 1.5), true);
        let bias = store.add("bias", rng.uniform_tensor(&[4], -0.5, 0.5), true);
        let w = store.add("w", rng.uniform_tensor(&[6, 4], -1.0, 1.0), true);
        let report = grad_check(&mut store, &[emb, gain, bias, w], &GradCheckOptions::default(), |g, s| {
            let e = g.param(s, emb);
            let x = g.gather(e, &[3, 1, 1, 5])?;
            let x = g.rms_norm(x, 1e-6)?;
            let gv = g.param(s, gain);
            let x = g.mul_row(x, gv)?;
            let bv = g.param(s, bias);
            let x = g.add_row(x, bv)?;
            let left = g.slice_cols(x, 0, 2)?;
            let right = g.slice_cols(x, 2, 2)?;
            let scores = g.linear(left, right)?;
            let scores = g.scale(scores, 0.7);
            let p = g.causal_softmax(scores)?;
            let mixed = g.matmul(p, right)?;
            let gated = g.silu(mixed);
            let cat = g.concat_cols(&[gated, left])?;
            let cat = g.activation(cat, ActivationKind::Tanh);
            let wv = g.param(s, w);
            let logits = g.linear(cat, wv)?;
            let sum = g.add(logits, logits)?;
            g.cross_entropy(sum, &[Some(0), None, Some(5), Some(2)])
        })
        .unwrap();
        assert!(report.max_relative_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn corrupted_derivative_is_caught() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        let w = store.add("w", rng.uniform_tensor(&[3, 3], -1.0, 1.0), true);
        let x = rng.uniform_tensor(&[2, 3], -1.0, 1.0);
        let report = grad_check(&mut store, &[w], &GradCheckOptions::default(), |g, s| {
            g.corrupt_activation_derivative(1.1);
            let xv = g.constant(x.clone());
            let wv = g.param(s, w);
            let h = g.linear(xv, wv)?;
            let h = g.activation(h, ActivationKind::Tanh);
            let sq = g.mul(h, h)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_relative_error > 1e-3);
    }

    #[test]
    fn nondeterminism_is_an_error() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(&[&[1.0]]), true);
        let calls = Cell::new(0.0);
        let err = grad_check(&mut store, &[w], &GradCheckOptions::default(), |g, s| {
            calls.set(calls.get() + 1.0);
            let v = g.param(s, w);
            let c = g.constant(Tensor::matrix(&[&[calls.get()]]));
            let y = g.mul(v, c)?;
            Ok(g.sum(y))
        });
        assert!(matches!(err, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let mut store = ParamStore::new();
        let opts = GradCheckOptions {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(grad_check(&mut store, &[], &opts, |g, _| Ok(g.constant(Tensor::scalar(0.0)))).is_err());
    }
}
