//! Separately coded 64-bit straight-line forward pass of the decoder stack.
//!
//! This mirrors the architecture directly from its definition (pre-norm
//! residual blocks, causal attention, tanh-GELU, tied or untied heads) with
//! no shared code, no graph, and f64 arithmetic throughout; finite
//! differences over it give the trusted gradients.

use std::collections::HashMap;

use layerslim_core::model::{Head, HeadType, TransformerModel, LAYER_NORM_EPS};

#[derive(Clone)]
pub struct RefModel {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub head: HeadType,
    pub tied: bool,
    /// name → (shape, values) in f64.
    pub params: HashMap<String, (Vec<usize>, Vec<f64>)>,
}

impl RefModel {
    pub fn from_model(model: &TransformerModel) -> RefModel {
        let mut params = HashMap::new();
        for p in model.params() {
            params.insert(
                p.name.clone(),
                (
                    p.value.shape().to_vec(),
                    p.value.data().iter().map(|&v| v as f64).collect(),
                ),
            );
        }
        let tied = matches!(model.head, Head::LanguageModeling { weight: None });
        RefModel {
            vocab_size: model.config.vocab_size,
            d_model: model.config.d_model,
            n_heads: model.config.n_heads,
            n_layers: model.config.n_layers,
            d_ff: model.config.d_ff,
            head: model.config.head,
            tied,
            params,
        }
    }

    pub fn param(&self, name: &str) -> &[f64] {
        &self.params.get(name).unwrap_or_else(|| panic!("no param {name}")).1
    }

    pub fn nudge(&mut self, name: &str, index: usize, delta: f64) {
        self.params.get_mut(name).expect("param").1[index] += delta;
    }

    fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        let mean = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - mean) * inv * gain[j] + bias[j])
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
    }

    /// row · W + b where W is [in × out] row-major.
    fn affine(row: &[f64], w: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
        let mut out = b.to_vec();
        debug_assert_eq!(out.len(), out_dim);
        for (i, &xv) in row.iter().enumerate() {
            for j in 0..out_dim {
                out[j] += xv * w[i * out_dim + j];
            }
        }
        out
    }

    fn softmax(x: &mut [f64]) {
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in x.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in x.iter_mut() {
            *v /= sum;
        }
    }

    /// Hidden rows after the final normalization.
    pub fn forward_hidden(&self, ids: &[usize]) -> Vec<Vec<f64>> {
        let d = self.d_model;
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let tok = self.param("token_embedding");
        let pos = self.param("position_embedding");
        let mut x: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| {
                (0..d).map(|j| tok[id * d + j] + pos[t * d + j]).collect()
            })
            .collect();

        for l in 0..self.n_layers {
            let p = |f: &str| format!("layers.{l}.{f}");
            let ln1g = self.param(&p("ln1.gain")).to_vec();
            let ln1b = self.param(&p("ln1.bias")).to_vec();
            let a: Vec<Vec<f64>> = x.iter().map(|row| Self::layer_norm(row, &ln1g, &ln1b)).collect();

            let wq = self.param(&p("attn.wq")).to_vec();
            let bq = self.param(&p("attn.bq")).to_vec();
            let wk = self.param(&p("attn.wk")).to_vec();
            let bk = self.param(&p("attn.bk")).to_vec();
            let wv = self.param(&p("attn.wv")).to_vec();
            let bv = self.param(&p("attn.bv")).to_vec();
            let q: Vec<Vec<f64>> = a.iter().map(|r| Self::affine(r, &wq, &bq, d)).collect();
            let k: Vec<Vec<f64>> = a.iter().map(|r| Self::affine(r, &wk, &bk, d)).collect();
            let v: Vec<Vec<f64>> = a.iter().map(|r| Self::affine(r, &wv, &bv, d)).collect();

            let mut att = vec![vec![0.0f64; d]; ids.len()];
            for h in 0..self.n_heads {
                let hs = h * dh;
                for t in 0..ids.len() {
                    let mut scores: Vec<f64> = (0..=t)
                        .map(|u| {
                            (0..dh).map(|j| q[t][hs + j] * k[u][hs + j]).sum::<f64>() * scale
                        })
                        .collect();
                    Self::softmax(&mut scores);
                    for (u, &w) in scores.iter().enumerate() {
                        for j in 0..dh {
                            att[t][hs + j] += w * v[u][hs + j];
                        }
                    }
                }
            }
            let wo = self.param(&p("attn.wo")).to_vec();
            let bo = self.param(&p("attn.bo")).to_vec();
            for t in 0..ids.len() {
                let proj = Self::affine(&att[t], &wo, &bo, d);
                for j in 0..d {
                    x[t][j] += proj[j];
                }
            }

            let ln2g = self.param(&p("ln2.gain")).to_vec();
            let ln2b = self.param(&p("ln2.bias")).to_vec();
            let w1 = self.param(&p("mlp.w1")).to_vec();
            let b1 = self.param(&p("mlp.b1")).to_vec();
            let w2 = self.param(&p("mlp.w2")).to_vec();
            let b2 = self.param(&p("mlp.b2")).to_vec();
            for t in 0..ids.len() {
                let m = Self::layer_norm(&x[t], &ln2g, &ln2b);
                let mut h1 = Self::affine(&m, &w1, &b1, self.d_ff);
                for v in h1.iter_mut() {
                    *v = Self::gelu(*v);
                }
                let f = Self::affine(&h1, &w2, &b2, d);
                for j in 0..d {
                    x[t][j] += f[j];
                }
            }
        }

        let fg = self.param("final_norm.gain").to_vec();
        let fb = self.param("final_norm.bias").to_vec();
        x.iter().map(|row| Self::layer_norm(row, &fg, &fb)).collect()
    }

    fn lm_head_logits(&self, hidden_row: &[f64]) -> Vec<f64> {
        let d = self.d_model;
        let w = if self.tied {
            self.param("token_embedding")
        } else {
            self.param("lm_head.weight")
        };
        (0..self.vocab_size)
            .map(|r| (0..d).map(|j| hidden_row[j] * w[r * d + j]).sum())
            .collect()
    }

    fn cross_entropy(logits: &[f64], target: usize) -> f64 {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        lse - logits[target]
    }

    /// Summed next-token cross-entropy at the given hidden positions.
    pub fn lm_loss(&self, ids: &[usize], positions: &[usize], targets: &[usize]) -> f64 {
        let hidden = self.forward_hidden(ids);
        positions
            .iter()
            .zip(targets)
            .map(|(&p, &t)| Self::cross_entropy(&self.lm_head_logits(&hidden[p]), t))
            .sum()
    }

    /// Classification cross-entropy from the last token's hidden state.
    pub fn cls_loss(&self, ids: &[usize], target: usize) -> f64 {
        let HeadType::Classification { num_classes } = self.head else {
            panic!("cls_loss on an LM-headed model");
        };
        let hidden = self.forward_hidden(ids);
        let last = hidden.last().expect("non-empty input");
        let w = self.param("cls_head.weight");
        let b = self.param("cls_head.bias");
        let d = self.d_model;
        let logits: Vec<f64> = (0..num_classes)
            .map(|c| b[c] + (0..d).map(|j| last[j] * w[c * d + j]).sum::<f64>())
            .collect();
        Self::cross_entropy(&logits, target)
    }
}
