//! Shared test oracles, independent of the library's backward pass.

#![allow(dead_code)]

use coarl_core::tensor::{NodeId, Tape, Tensor};

/// Central finite-difference gradient check.
///
/// `build` constructs a scalar loss from leaves of the given tensors on a
/// fresh tape. Analytic gradients from `backward` are compared against
/// `(f(x+h) - f(x-h)) / 2h` for every element of every input.
///
/// Relative error uses a 1e-3 floor in the denominator so near-zero
/// gradients are compared absolutely at 1e-3 * tol.
pub fn gradcheck(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
    h: f64,
    tol: f64,
    label: &str,
) {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &ids);
        tape.scalar_value(loss)
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss).expect("backward failed in gradcheck");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut max_rel: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        if analytic[i].is_empty() {
            continue; // unreachable input; nothing to check
        }
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i][e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
            }
            assert!(
                rel <= tol,
                "{label}: input {i} elem {e}: analytic {a} vs fd {fd} (rel {rel:.3e} > {tol:.0e})"
            );
        }
    }
    // Sanity: the check must have exercised at least one gradient.
    assert!(
        analytic.iter().any(|g| !g.is_empty()),
        "{label}: no gradients reached any input"
    );
    let _ = max_rel;
}

/// Deterministic test tensor with entries in (lo, hi).
pub fn rand_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut rng = coarl_core::rng::rng_from_seed(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| coarl_core::rng::uniform(&mut rng, lo, hi))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Finite differences through the full model (and adapter) loss: every
/// parameter tensor is probed at a deterministic sample of indices.
/// Returns the number of elements checked.
pub fn full_model_gradcheck(h: f64, tol: f64) -> usize {
    use coarl_core::lora::{attach, LoraAdapter, LoraConfig, LoraTargets};
    use coarl_core::model::{forward_on_tape, ModelConfig, Seq2SeqModel};

    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        max_seq_len: 32,
        ..ModelConfig::default()
    };
    let mut model = Seq2SeqModel::init(cfg, 42).unwrap();
    let mut adapter = attach(
        &mut model,
        LoraConfig {
            rank: 2,
            alpha: 4.0,
            dropout: 0.0,
            targets: LoraTargets::default(),
        },
        43,
    )
    .unwrap();
    // Nonzero B so gradients flow through both adapter factors.
    {
        let mut rng = coarl_core::rng::rng_from_seed(44);
        for (_, p) in adapter.params.iter_mut() {
            for v in p.value.data_mut() {
                *v += coarl_core::rng::uniform(&mut rng, -0.05, 0.05);
            }
        }
    }
    let src = [72u32, 105, 33];
    let tgt = [120u32, 121, 122, 258];

    let loss_of = |model: &Seq2SeqModel, adapter: &LoraAdapter| -> f64 {
        let mut tape = Tape::new();
        let out = forward_on_tape(&mut tape, model, Some(adapter), &src, &tgt, None).unwrap();
        let loss = tape.cross_entropy(out.logits, &tgt, None).unwrap();
        tape.scalar_value(loss)
    };

    let mut tape = Tape::new();
    let out = forward_on_tape(&mut tape, &model, Some(&adapter), &src, &tgt, None).unwrap();
    let loss = tape.cross_entropy(out.logits, &tgt, None).unwrap();
    tape.backward(loss).unwrap();

    let mut idx_rng = coarl_core::rng::rng_from_seed(7);
    let mut checked = 0usize;
    let nodes: Vec<(String, NodeId, bool)> = out
        .base_nodes
        .iter()
        .map(|(n, id)| (n.clone(), *id, true))
        .chain(out.adapter_nodes.iter().map(|(n, id)| (n.clone(), *id, false)))
        .collect();
    for (name, node, is_base) in nodes {
        let analytic = tape.grad(node).map(<[f64]>::to_vec).unwrap_or_else(|| {
            let n: usize = tape.shape(node).iter().product();
            vec![0.0; n]
        });
        let numel = analytic.len();
        let probes: Vec<usize> = if numel <= 24 {
            (0..numel).collect()
        } else {
            (0..24)
                .map(|_| coarl_core::rng::rand_index(&mut idx_rng, numel))
                .collect()
        };
        for e in probes {
            let eval_at = |delta: f64| -> f64 {
                let mut m = model.clone();
                let mut a = adapter.clone();
                let store = if is_base { &mut m.params } else { &mut a.params };
                store.get_mut(&name).unwrap().value.data_mut()[e] += delta;
                loss_of(&m, &a)
            };
            let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            let an = analytic[e];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            assert!(
                rel <= tol,
                "{name}[{e}]: analytic {an} vs fd {fd} (rel {rel:.3e})"
            );
            checked += 1;
        }
    }
    assert!(checked > 500, "only {checked} elements probed");
    checked
}
