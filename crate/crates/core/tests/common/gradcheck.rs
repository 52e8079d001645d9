//! Gradient-check harness: every op and full toy models against central
//! finite differences of the 64-bit reference. Shared by the gradient test
//! target and the acceptance suite.

use super::reference;
use super::{central_diff, rel_err, GRAD_TOL};

use layerslim_core::autodiff::{Graph, NodeId};
use layerslim_core::model::{HeadType, ModelConfig, TransformerModel};
use layerslim_core::rng::rng_for;
use layerslim_core::tensor::Tensor;
use rand::Rng;

use reference::RefModel;


fn randn(tag: &str, shape: &[usize], scale: f32) -> (Vec<usize>, Vec<f32>) {
    let mut rng = rng_for(99, tag);
    let n: usize = shape.iter().product();
    (
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect(),
    )
}

fn coeffs(tag: &str, n: usize) -> Vec<f64> {
    let mut rng = rng_for(7, tag);
    (0..n).map(|_| rng.random_range(-1.0f64..1.0)).collect()
}

fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Runs one op through the graph with a random linear functional as loss and
/// compares every input gradient against finite differences of `reference`
/// (an f64 forward of the op over the same inputs).
fn check_op(
    tag: &str,
    inputs: &[(Vec<usize>, Vec<f32>)],
    build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) {
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|(shape, data)| {
            graph.leaf(Tensor::from_vec(shape.clone(), data.clone()).unwrap())
        })
        .collect();
    let out = build(&mut graph, &ids);
    let w = coeffs(tag, graph.value(out).len());
    let loss = graph
        .weighted_sum(out, w.iter().map(|&v| v as f32).collect())
        .unwrap();
    graph.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| widen(d)).collect();
    let ref_loss = |xs: &[Vec<f64>]| -> f64 {
        reference(xs).iter().zip(&w).map(|(o, c)| o * c).sum()
    };
    let mut worst = 0.0f64;
    for (k, (_, data)) in inputs.iter().enumerate() {
        let grad = graph.grad(ids[k]).expect("input reached by backward");
        for i in 0..data.len() {
            let mut f = |x: &[f64]| {
                let mut xs = base.clone();
                xs[k] = x.to_vec();
                ref_loss(&xs)
            };
            let fd = central_diff(&mut f, &base[k], i);
            let err = rel_err(grad[i] as f64, fd);
            worst = worst.max(err);
            assert!(
                err < GRAD_TOL,
                "{tag}: input {k} coord {i}: impl {} vs fd {fd}, rel err {err}",
                grad[i]
            );
        }
    }
    println!("gradcheck {tag}: max rel err {worst:.2e}");
}

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

fn ref_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn matmul_gradients() {
    let inputs = [randn("mm-a", &[3, 4], 1.0), randn("mm-b", &[4, 5], 1.0)];
    check_op(
        "matmul",
        &inputs,
        |g, ids| g.matmul(ids[0], ids[1]).unwrap(),
        |xs| ref_matmul(&xs[0], &xs[1], 3, 4, 5),
    );
}

pub fn matmul_nt_gradients() {
    let inputs = [randn("nt-a", &[3, 4], 1.0), randn("nt-b", &[5, 4], 1.0)];
    check_op(
        "matmul_nt",
        &inputs,
        |g, ids| g.matmul_nt(ids[0], ids[1]).unwrap(),
        |xs| {
            let (a, b) = (&xs[0], &xs[1]);
            let mut c = vec![0.0; 3 * 5];
            for i in 0..3 {
                for j in 0..5 {
                    c[i * 5 + j] = (0..4).map(|p| a[i * 4 + p] * b[j * 4 + p]).sum();
                }
            }
            c
        },
    );
}

pub fn add_and_bias_gradients() {
    let inputs = [randn("add-a", &[3, 4], 1.0), randn("add-b", &[3, 4], 1.0)];
    check_op(
        "add",
        &inputs,
        |g, ids| g.add(ids[0], ids[1]).unwrap(),
        |xs| xs[0].iter().zip(&xs[1]).map(|(a, b)| a + b).collect(),
    );

    let inputs = [randn("bias-x", &[3, 4], 1.0), randn("bias-b", &[4], 1.0)];
    check_op(
        "add_bias",
        &inputs,
        |g, ids| g.add_bias(ids[0], ids[1]).unwrap(),
        |xs| {
            let mut out = xs[0].clone();
            for row in out.chunks_exact_mut(4) {
                for (o, b) in row.iter_mut().zip(&xs[1]) {
                    *o += b;
                }
            }
            out
        },
    );
}

pub fn gelu_gradients() {
    let inputs = [randn("gelu-x", &[2, 6], 2.0)];
    check_op(
        "gelu",
        &inputs,
        |g, ids| g.gelu(ids[0]),
        |xs| {
            xs[0]
                .iter()
                .map(|&x| {
                    let c = (2.0 / std::f64::consts::PI).sqrt();
                    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
                })
                .collect()
        },
    );
}

pub fn layer_norm_gradients() {
    let mut gain = randn("ln-g", &[8], 0.3);
    for v in gain.1.iter_mut() {
        *v += 1.0;
    }
    let inputs = [randn("ln-x", &[2, 8], 1.5), gain, randn("ln-b", &[8], 0.3)];
    check_op(
        "layer_norm",
        &inputs,
        |g, ids| g.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap(),
        |xs| {
            let mut out = Vec::with_capacity(16);
            for row in xs[0].chunks_exact(8) {
                let mean = row.iter().sum::<f64>() / 8.0;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
                let inv = 1.0 / (var + 1e-5_f32 as f64).sqrt();
                for j in 0..8 {
                    out.push((row[j] - mean) * inv * xs[1][j] + xs[2][j]);
                }
            }
            out
        },
    );
}

pub fn softmax_gradients_both_axes() {
    let inputs = [randn("sm-x", &[3, 5], 2.0)];
    check_op(
        "softmax_axis1",
        &inputs,
        |g, ids| g.softmax(ids[0], 1).unwrap(),
        |xs| ref_softmax_rows(&xs[0], 3, 5),
    );
    check_op(
        "softmax_axis0",
        &inputs,
        |g, ids| g.softmax(ids[0], 0).unwrap(),
        |xs| {
            // transpose, row softmax, transpose back
            let mut t = vec![0.0; 15];
            for r in 0..3 {
                for c in 0..5 {
                    t[c * 3 + r] = xs[0][r * 5 + c];
                }
            }
            let s = ref_softmax_rows(&t, 5, 3);
            let mut out = vec![0.0; 15];
            for r in 0..3 {
                for c in 0..5 {
                    out[r * 5 + c] = s[c * 3 + r];
                }
            }
            out
        },
    );
    let inputs = [randn("sm-vec", &[7], 2.0)];
    check_op(
        "softmax_1d",
        &inputs,
        |g, ids| g.softmax(ids[0], 0).unwrap(),
        |xs| ref_softmax_rows(&xs[0], 1, 7),
    );
}

pub fn causal_attention_gradients() {
    let inputs = [
        randn("att-q", &[5, 8], 1.0),
        randn("att-k", &[5, 8], 1.0),
        randn("att-v", &[5, 8], 1.0),
    ];
    check_op(
        "causal_attention",
        &inputs,
        |g, ids| g.causal_attention(ids[0], ids[1], ids[2], 2).unwrap(),
        |xs| {
            let (q, k, v) = (&xs[0], &xs[1], &xs[2]);
            let (seq, d, heads) = (5usize, 8usize, 2usize);
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut out = vec![0.0; seq * d];
            for h in 0..heads {
                let hs = h * dh;
                for t in 0..seq {
                    let mut scores: Vec<f64> = (0..=t)
                        .map(|u| {
                            (0..dh).map(|j| q[t * d + hs + j] * k[u * d + hs + j]).sum::<f64>()
                                * scale
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    for s in scores.iter_mut() {
                        *s /= sum;
                    }
                    for (u, &p) in scores.iter().enumerate() {
                        for j in 0..dh {
                            out[t * d + hs + j] += p * v[u * d + hs + j];
                        }
                    }
                }
            }
            out
        },
    );
}

pub fn embedding_and_gather_gradients() {
    // Repeated ids exercise the scatter-add in both backward rules.
    let ids: Vec<u32> = vec![0, 3, 5, 3];
    let inputs = [randn("emb-t", &[6, 4], 1.0)];
    check_op(
        "embed",
        &inputs,
        |g, node_ids| g.embed(node_ids[0], &ids).unwrap(),
        |xs| {
            let mut out = Vec::new();
            for &id in &ids {
                out.extend_from_slice(&xs[0][id as usize * 4..(id as usize + 1) * 4]);
            }
            out
        },
    );

    let rows = vec![4usize, 0, 2, 2];
    let inputs = [randn("gather-x", &[5, 3], 1.0)];
    check_op(
        "gather_rows",
        &inputs,
        |g, node_ids| g.gather_rows(node_ids[0], &rows).unwrap(),
        |xs| {
            let mut out = Vec::new();
            for &r in &rows {
                out.extend_from_slice(&xs[0][r * 3..(r + 1) * 3]);
            }
            out
        },
    );
}

pub fn cross_entropy_gradients() {
    let targets = vec![1u32, 5, 0];
    let inputs = [randn("ce-l", &[3, 6], 2.0)];
    check_op(
        "cross_entropy_rows",
        &inputs,
        |g, ids| g.cross_entropy_rows(ids[0], &targets).unwrap(),
        |xs| {
            let mut loss = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = &xs[0][r * 6..(r + 1) * 6];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[t as usize];
            }
            vec![loss]
        },
    );
}

// ── full-model checks against the straight-line reference ─────────────

fn toy_config(head: HeadType, tie: bool, n_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        n_layers,
        d_ff: 16,
        max_seq_len: 10,
        head,
        tie_lm_head: tie,
    }
}

/// Rewrites all parameters at O(0.1–1) magnitudes. The pinned FD step
/// h = 1e-3 needs well-conditioned scales; at the 0.02 init std it would be
/// a 5% perturbation and truncation error would swamp the comparison.
fn scramble(model: &mut TransformerModel, tag: &str) {
    let mut rng = rng_for(123, tag);
    for p in model.params_mut() {
        let norm_gain = p.name.ends_with("gain");
        for v in p.value.data_mut() {
            *v = if norm_gain {
                1.0 + rng.random_range(-0.2f32..0.2)
            } else {
                rng.random_range(-0.4f32..0.4)
            };
        }
    }
}

pub fn two_layer_forward_matches_reference_within_1e4() {
    let model = TransformerModel::init(toy_config(HeadType::LanguageModeling, true, 2), 21).unwrap();
    let ids: Vec<u32> = vec![1, 7, 3, 11, 0];
    let got = model.forward_hidden(&ids).unwrap();
    let reference = RefModel::from_model(&model);
    let want = reference.forward_hidden(&[1, 7, 3, 11, 0]);
    let mut worst = 0.0f64;
    for (t, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            worst = worst.max((got.row(t)[j] as f64 - w).abs());
        }
    }
    assert!(worst < 1e-4, "forward deviates from f64 reference by {worst}");
}

/// FD over every parameter coordinate of the model under `loss_impl` /
/// `loss_ref`, asserting max relative error < 1e-3, finiteness, and that
/// every parameter tensor received some gradient.
fn check_model_grads(
    model: &mut TransformerModel,
    reference: &RefModel,
    run: impl Fn(&mut TransformerModel) -> f32,
    ref_loss: impl Fn(&RefModel) -> f64,
) {
    model.zero_grads();
    let _ = run(model);
    let grads: Vec<(String, Vec<f32>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .collect();
    let mut worst = 0.0f64;
    for (name, grad) in &grads {
        assert!(grad.iter().all(|g| g.is_finite()), "{name}: non-finite grad");
        assert!(
            grad.iter().any(|&g| g != 0.0),
            "{name}: gradient identically zero"
        );
        for (i, &g) in grad.iter().enumerate() {
            let mut plus = reference.clone();
            plus.nudge(name, i, super::FD_H);
            let mut minus = reference.clone();
            minus.nudge(name, i, -super::FD_H);
            let fd = (ref_loss(&plus) - ref_loss(&minus)) / (2.0 * super::FD_H);
            let err = rel_err(g as f64, fd);
            worst = worst.max(err);
            assert!(
                err < GRAD_TOL,
                "{name}[{i}]: impl {g} vs fd {fd}, rel err {err}"
            );
        }
    }
    println!("model gradcheck: max rel err {worst:.2e}");
}

pub fn two_layer_lm_model_passes_finite_differences() {
    let mut model =
        TransformerModel::init(toy_config(HeadType::LanguageModeling, true, 2), 33).unwrap();
    scramble(&mut model, "fd-lm");
    let ids: Vec<u32> = vec![2, 9, 4, 6];
    let positions = vec![2usize, 3];
    let targets = vec![5u32, 1];
    let reference = RefModel::from_model(&model);
    let ids64: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let t64: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    check_model_grads(
        &mut model,
        &reference,
        |m| {
            let mut trace = m.trace(&ids).unwrap();
            let logits = m.lm_logits_node(&mut trace, &positions).unwrap();
            let loss = trace.graph.cross_entropy_rows(logits, &targets).unwrap();
            let v = trace.graph.value(loss).item();
            trace.graph.backward(loss).unwrap();
            m.accumulate_grads(&trace);
            v
        },
        |r| r.lm_loss(&ids64, &positions, &t64),
    );
}

pub fn untied_lm_head_passes_finite_differences() {
    let mut model =
        TransformerModel::init(toy_config(HeadType::LanguageModeling, false, 1), 35).unwrap();
    scramble(&mut model, "fd-untied");
    let ids: Vec<u32> = vec![3, 0, 8];
    let reference = RefModel::from_model(&model);
    check_model_grads(
        &mut model,
        &reference,
        |m| {
            let mut trace = m.trace(&ids).unwrap();
            let logits = m.lm_logits_node(&mut trace, &[2]).unwrap();
            let loss = trace.graph.cross_entropy_rows(logits, &[7]).unwrap();
            let v = trace.graph.value(loss).item();
            trace.graph.backward(loss).unwrap();
            m.accumulate_grads(&trace);
            v
        },
        |r| r.lm_loss(&[3, 0, 8], &[2], &[7]),
    );
}

pub fn two_layer_cls_model_passes_finite_differences() {
    let mut model = TransformerModel::init(
        toy_config(HeadType::Classification { num_classes: 4 }, true, 2),
        34,
    )
    .unwrap();
    scramble(&mut model, "fd-cls");
    let ids: Vec<u32> = vec![1, 10, 2, 7, 5];
    let reference = RefModel::from_model(&model);
    check_model_grads(
        &mut model,
        &reference,
        |m| {
            let mut trace = m.trace(&ids).unwrap();
            let logits = m.cls_logits_node(&mut trace).unwrap();
            let loss = trace.graph.cross_entropy_rows(logits, &[3]).unwrap();
            let v = trace.graph.value(loss).item();
            trace.graph.backward(loss).unwrap();
            m.accumulate_grads(&trace);
            v
        },
        |r| r.cls_loss(&[1, 10, 2, 7, 5], 3),
    );
}
