//! Decoder-only transformer: embeddings, pre-norm residual blocks, final
//! normalization, and an interchangeable language-modeling or classification
//! head.
//!
//! Forward passes are recorded on a [`Graph`]; [`ForwardTrace`] keeps the
//! node handles needed to attach heads and route gradients back into the
//! model's [`Parameter`]s.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Parameter};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    LanguageModeling,
    Classification { num_classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub head: HeadType,
    /// Share the LM head with the token embedding (GPT-2 convention).
    pub tie_lm_head: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be at least 1".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.d_ff == 0 {
            return Err(Error::Config("vocab_size and d_ff must be positive".into()));
        }
        if let HeadType::Classification { num_classes } = self.head {
            if num_classes < 2 {
                return Err(Error::Config(format!(
                    "classification head needs at least 2 classes, got {num_classes}"
                )));
            }
        }
        Ok(())
    }

    /// GPT-2 XL shape (48 layers, tied head) as published.
    pub fn gpt2_xl() -> Self {
        ModelConfig {
            vocab_size: 50257,
            d_model: 1600,
            n_heads: 25,
            n_layers: 48,
            d_ff: 6400,
            max_seq_len: 1024,
            head: HeadType::LanguageModeling,
            tie_lm_head: true,
        }
    }

    /// OPT-1.3B shape (24 layers); the tied head matches the published
    /// parameter column.
    pub fn opt_1_3b() -> Self {
        ModelConfig {
            vocab_size: 50272,
            d_model: 2048,
            n_heads: 32,
            n_layers: 24,
            d_ff: 8192,
            max_seq_len: 2048,
            head: HeadType::LanguageModeling,
            tie_lm_head: true,
        }
    }

    /// GPT-2 small shape (12 layers, d_model 768).
    pub fn gpt2_small() -> Self {
        ModelConfig {
            vocab_size: 50257,
            d_model: 768,
            n_heads: 12,
            n_layers: 12,
            d_ff: 3072,
            max_seq_len: 1024,
            head: HeadType::LanguageModeling,
            tie_lm_head: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NormParams {
    pub gain: Parameter,
    pub bias: Parameter,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Parameter,
    pub bq: Parameter,
    pub wk: Parameter,
    pub bk: Parameter,
    pub wv: Parameter,
    pub bv: Parameter,
    pub wo: Parameter,
    pub bo: Parameter,
}

#[derive(Clone, Debug)]
pub struct MlpParams {
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
}

/// One pre-norm residual block; all blocks in a stack are structurally
/// identical, parameter names carry the layer index.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: NormParams,
    pub attn: AttentionParams,
    pub ln2: NormParams,
    pub mlp: MlpParams,
}

#[derive(Clone, Debug)]
pub enum Head {
    /// LM head; `None` when tied to the token embedding.
    LanguageModeling { weight: Option<Parameter> },
    Classification { weight: Parameter, bias: Parameter },
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub token_embedding: Parameter,
    pub position_embedding: Parameter,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: NormParams,
    pub head: Head,
}

/// Recorded forward pass plus the node handles needed afterwards.
pub struct ForwardTrace {
    pub graph: Graph,
    /// (canonical parameter index, leaf node) pairs for gradient routing.
    bindings: Vec<(usize, NodeId)>,
    /// Residual-stream output of each decoder layer (pre final norm).
    pub layer_outputs: Vec<NodeId>,
    /// Hidden states after the final normalization, shape [seq × d_model].
    pub hidden: NodeId,
    /// Leaf of the token embedding table (doubles as the tied LM head).
    emb_leaf: NodeId,
    head_leaves: HeadLeaves,
    pub input_len: usize,
}

enum HeadLeaves {
    Tied,
    LmWeight(NodeId),
    Cls { weight: NodeId, bias: NodeId },
}

impl TransformerModel {
    /// Fresh model with Normal(0, 0.02) weights, zero biases, unit norm
    /// gains; bit-deterministic per (config, seed).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, "model-init");
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        Self::build(config, |shape| {
            let n: usize = shape.iter().product();
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        })
    }

    /// All-zero weights; a shell for checkpoint loading and archive import.
    pub(crate) fn skeleton(config: ModelConfig) -> Result<Self> {
        Self::build(config, |shape| vec![0.0; shape.iter().product()])
    }

    fn build(
        config: ModelConfig,
        mut fill_weight: impl FnMut(&[usize]) -> Vec<f32>,
    ) -> Result<Self> {
        config.validate()?;
        let mut weight = |name: &str, shape: Vec<usize>| {
            let data = fill_weight(&shape);
            Parameter::new(name, Tensor::from_vec(shape, data).expect("shape"))
        };
        let zero = |name: &str, shape: Vec<usize>| Parameter::new(name, Tensor::zeros(shape));
        let one = |name: &str, len: usize| Parameter::new(name, Tensor::full(vec![len], 1.0));

        let d = config.d_model;
        let token_embedding = weight("token_embedding", vec![config.vocab_size, d]);
        let position_embedding = weight("position_embedding", vec![config.max_seq_len, d]);
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |field: &str| format!("layers.{i}.{field}");
            layers.push(DecoderLayer {
                ln1: NormParams {
                    gain: one(&p("ln1.gain"), d),
                    bias: zero(&p("ln1.bias"), vec![d]),
                },
                attn: AttentionParams {
                    wq: weight(&p("attn.wq"), vec![d, d]),
                    bq: zero(&p("attn.bq"), vec![d]),
                    wk: weight(&p("attn.wk"), vec![d, d]),
                    bk: zero(&p("attn.bk"), vec![d]),
                    wv: weight(&p("attn.wv"), vec![d, d]),
                    bv: zero(&p("attn.bv"), vec![d]),
                    wo: weight(&p("attn.wo"), vec![d, d]),
                    bo: zero(&p("attn.bo"), vec![d]),
                },
                ln2: NormParams {
                    gain: one(&p("ln2.gain"), d),
                    bias: zero(&p("ln2.bias"), vec![d]),
                },
                mlp: MlpParams {
                    w1: weight(&p("mlp.w1"), vec![d, config.d_ff]),
                    b1: zero(&p("mlp.b1"), vec![config.d_ff]),
                    w2: weight(&p("mlp.w2"), vec![config.d_ff, d]),
                    b2: zero(&p("mlp.b2"), vec![d]),
                },
            });
        }
        let final_norm = NormParams {
            gain: one("final_norm.gain", d),
            bias: zero("final_norm.bias", vec![d]),
        };
        let head = match config.head {
            HeadType::LanguageModeling => Head::LanguageModeling {
                weight: if config.tie_lm_head {
                    None
                } else {
                    Some(weight("lm_head.weight", vec![config.vocab_size, d]))
                },
            },
            HeadType::Classification { num_classes } => Head::Classification {
                weight: weight("cls_head.weight", vec![num_classes, d]),
                bias: zero("cls_head.bias", vec![num_classes]),
            },
        };
        Ok(TransformerModel {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_norm,
            head,
        })
    }

    /// Same body, head swapped for a zero-initialized classification head
    /// (uniform predictions until trained).
    pub fn with_classification_head(&self, num_classes: usize) -> Result<TransformerModel> {
        let mut config = self.config.clone();
        config.head = HeadType::Classification { num_classes };
        config.validate()?;
        let d = config.d_model;
        let mut out = self.clone();
        out.config = config;
        out.head = Head::Classification {
            weight: Parameter::new("cls_head.weight", Tensor::zeros(vec![num_classes, d])),
            bias: Parameter::new("cls_head.bias", Tensor::zeros(vec![num_classes])),
        };
        Ok(out)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// All trainable parameters in canonical order (embeddings, layers
    /// bottom-up, final norm, head).
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend([
                &l.ln1.gain, &l.ln1.bias, &l.attn.wq, &l.attn.bq, &l.attn.wk, &l.attn.bk,
                &l.attn.wv, &l.attn.bv, &l.attn.wo, &l.attn.bo, &l.ln2.gain, &l.ln2.bias,
                &l.mlp.w1, &l.mlp.b1, &l.mlp.w2, &l.mlp.b2,
            ]);
        }
        out.push(&self.final_norm.gain);
        out.push(&self.final_norm.bias);
        match &self.head {
            Head::LanguageModeling { weight: Some(w) } => out.push(w),
            Head::LanguageModeling { weight: None } => {}
            Head::Classification { weight, bias } => {
                out.push(weight);
                out.push(bias);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> =
            vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1.gain, &mut l.ln1.bias, &mut l.attn.wq, &mut l.attn.bq,
                &mut l.attn.wk, &mut l.attn.bk, &mut l.attn.wv, &mut l.attn.bv,
                &mut l.attn.wo, &mut l.attn.bo, &mut l.ln2.gain, &mut l.ln2.bias,
                &mut l.mlp.w1, &mut l.mlp.b1, &mut l.mlp.w2, &mut l.mlp.b2,
            ]);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        match &mut self.head {
            Head::LanguageModeling { weight: Some(w) } => out.push(w),
            Head::LanguageModeling { weight: None } => {}
            Head::Classification { weight, bias } => {
                out.push(weight);
                out.push(bias);
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn validate_input(&self, token_ids: &[u32]) -> Result<()> {
        if token_ids.is_empty() {
            return Err(Error::Config("input must contain at least one token".into()));
        }
        if token_ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: token_ids.len(),
                max: self.config.max_seq_len,
            });
        }
        for &id in token_ids {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: id as usize,
                    size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Records a full forward pass (embed → layers → final norm).
    pub fn trace(&self, token_ids: &[u32]) -> Result<ForwardTrace> {
        self.validate_input(token_ids)?;
        let mut graph = Graph::new();
        let mut bindings = Vec::new();
        let params = self.params();
        let mut leaf_of = |graph: &mut Graph, idx: usize| {
            let id = graph.leaf(params[idx].value.clone());
            bindings.push((idx, id));
            id
        };

        let emb_leaf = leaf_of(&mut graph, 0);
        let pos_leaf = leaf_of(&mut graph, 1);
        let mut leaf_idx = 2usize;
        let mut layer_leaves = Vec::with_capacity(self.layers.len());
        for _ in 0..self.layers.len() {
            let ids: Vec<NodeId> = (0..16).map(|j| leaf_of(&mut graph, leaf_idx + j)).collect();
            layer_leaves.push(ids);
            leaf_idx += 16;
        }
        let fin_gain = leaf_of(&mut graph, leaf_idx);
        let fin_bias = leaf_of(&mut graph, leaf_idx + 1);
        let head_leaves = match &self.head {
            Head::LanguageModeling { weight: None } => HeadLeaves::Tied,
            Head::LanguageModeling { weight: Some(_) } => {
                HeadLeaves::LmWeight(leaf_of(&mut graph, leaf_idx + 2))
            }
            Head::Classification { .. } => HeadLeaves::Cls {
                weight: leaf_of(&mut graph, leaf_idx + 2),
                bias: leaf_of(&mut graph, leaf_idx + 3),
            },
        };

        let positions: Vec<u32> = (0..token_ids.len() as u32).collect();
        let tok = graph.embed(emb_leaf, token_ids)?;
        let pos = graph.embed(pos_leaf, &positions)?;
        let mut x = graph.add(tok, pos)?;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for leaves in &layer_leaves {
            let [ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo, ln2g, ln2b, w1, b1, w2, b2] =
                leaves[..]
            else {
                unreachable!("layer leaf count")
            };
            let a = graph.layer_norm(x, ln1g, ln1b, LAYER_NORM_EPS)?;
            let q = graph.matmul(a, wq)?;
            let q = graph.add_bias(q, bq)?;
            let k = graph.matmul(a, wk)?;
            let k = graph.add_bias(k, bk)?;
            let v = graph.matmul(a, wv)?;
            let v = graph.add_bias(v, bv)?;
            let att = graph.causal_attention(q, k, v, self.config.n_heads)?;
            let proj = graph.matmul(att, wo)?;
            let proj = graph.add_bias(proj, bo)?;
            x = graph.add(x, proj)?;
            let m = graph.layer_norm(x, ln2g, ln2b, LAYER_NORM_EPS)?;
            let h = graph.matmul(m, w1)?;
            let h = graph.add_bias(h, b1)?;
            let h = graph.gelu(h);
            let f = graph.matmul(h, w2)?;
            let f = graph.add_bias(f, b2)?;
            x = graph.add(x, f)?;
            layer_outputs.push(x);
        }
        let hidden = graph.layer_norm(x, fin_gain, fin_bias, LAYER_NORM_EPS)?;
        Ok(ForwardTrace {
            graph,
            bindings,
            layer_outputs,
            hidden,
            emb_leaf,
            head_leaves,
            input_len: token_ids.len(),
        })
    }

    /// Next-token logits rows for the given hidden-state positions,
    /// shape [positions × vocab].
    pub fn lm_logits_node(&self, trace: &mut ForwardTrace, positions: &[usize]) -> Result<NodeId> {
        let head_leaf = match (&self.head, &trace.head_leaves) {
            (Head::LanguageModeling { weight: None }, HeadLeaves::Tied) => trace.emb_leaf,
            (Head::LanguageModeling { weight: Some(_) }, HeadLeaves::LmWeight(w)) => *w,
            _ => {
                return Err(Error::Config(
                    "model has no language modeling head".into(),
                ))
            }
        };
        let rows = trace.graph.gather_rows(trace.hidden, positions)?;
        trace.graph.matmul_nt(rows, head_leaf)
    }

    /// Class logits from the last input token's hidden state, shape
    /// [1 × num_classes].
    pub fn cls_logits_node(&self, trace: &mut ForwardTrace) -> Result<NodeId> {
        let (w, b) = match &trace.head_leaves {
            HeadLeaves::Cls { weight, bias } => (*weight, *bias),
            _ => return Err(Error::Config("model has no classification head".into())),
        };
        let last = trace.graph.gather_rows(trace.hidden, &[trace.input_len - 1])?;
        let logits = trace.graph.matmul_nt(last, w)?;
        trace.graph.add_bias(logits, b)
    }

    /// Adds the trace's leaf gradients into each parameter's grad slot.
    pub fn accumulate_grads(&mut self, trace: &ForwardTrace) {
        let mut params = self.params_mut();
        for (idx, node) in &trace.bindings {
            if let Some(g) = trace.graph.grad(*node) {
                let dst = params[*idx].grad.data_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    // ── convenience inference entry points ───────────────────────────

    /// Hidden-state matrix after the final norm, shape [seq × d_model].
    pub fn forward_hidden(&self, token_ids: &[u32]) -> Result<Tensor> {
        let trace = self.trace(token_ids)?;
        Ok(trace.graph.value(trace.hidden).clone())
    }

    /// Per-layer residual-stream outputs plus the post-norm hidden states.
    pub fn hidden_states(&self, token_ids: &[u32]) -> Result<(Vec<Tensor>, Tensor)> {
        let trace = self.trace(token_ids)?;
        let per_layer = trace
            .layer_outputs
            .iter()
            .map(|id| trace.graph.value(*id).clone())
            .collect();
        Ok((per_layer, trace.graph.value(trace.hidden).clone()))
    }

    /// Logits for the token following the final input position, shape
    /// [vocab].
    pub fn lm_logits(&self, token_ids: &[u32]) -> Result<Tensor> {
        let mut trace = self.trace(token_ids)?;
        let last = trace.input_len - 1;
        let node = self.lm_logits_node(&mut trace, &[last])?;
        let v = trace.graph.value(node);
        Tensor::from_vec(vec![v.cols()], v.data().to_vec())
    }

    /// Class logits for the last input token, shape [num_classes].
    pub fn cls_logits(&self, token_ids: &[u32]) -> Result<Tensor> {
        let mut trace = self.trace(token_ids)?;
        let node = self.cls_logits_node(&mut trace)?;
        let v = trace.graph.value(node);
        Tensor::from_vec(vec![v.cols()], v.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 17,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_seq_len: 12,
            head: HeadType::LanguageModeling,
            tie_lm_head: true,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = TransformerModel::init(toy_config(), 7).unwrap();
        let b = TransformerModel::init(toy_config(), 7).unwrap();
        let c = TransformerModel::init(toy_config(), 8).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value.data(), pb.value.data(), "{}", pa.name);
        }
        let differs = a
            .params()
            .iter()
            .zip(c.params())
            .any(|(pa, pc)| pa.value.data() != pc.value.data());
        assert!(differs, "different seeds must differ somewhere");
    }

    #[test]
    fn config_invariants_are_enforced() {
        let mut cfg = toy_config();
        cfg.n_layers = 0;
        assert!(TransformerModel::init(cfg, 0).is_err());
        let mut cfg = toy_config();
        cfg.d_model = 9; // not divisible by 2 heads
        assert!(TransformerModel::init(cfg, 0).is_err());
    }

    #[test]
    fn causality_suffix_perturbation() {
        let model = TransformerModel::init(toy_config(), 3).unwrap();
        let base: Vec<u32> = vec![1, 2, 3, 4, 5];
        let mut changed = base.clone();
        changed[3] = 9;
        let ha = model.forward_hidden(&base).unwrap();
        let hb = model.forward_hidden(&changed).unwrap();
        let d = model.config.d_model;
        // positions 0..2 unaffected by a change at position 3
        assert_eq!(&ha.data()[..3 * d], &hb.data()[..3 * d]);
        assert_ne!(&ha.data()[3 * d..], &hb.data()[3 * d..]);
    }

    #[test]
    fn forward_is_pure() {
        let model = TransformerModel::init(toy_config(), 4).unwrap();
        let ids = vec![3, 1, 4, 1, 5];
        let a = model.forward_hidden(&ids).unwrap();
        let b = model.forward_hidden(&ids).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.all_finite());
    }

    #[test]
    fn lm_logits_softmax_sums_to_one() {
        let model = TransformerModel::init(toy_config(), 5).unwrap();
        let logits = model.lm_logits(&[1, 2, 3]).unwrap();
        assert_eq!(logits.len(), 17);
        let mut p = logits.data().to_vec();
        crate::kernels::softmax_in_place(&mut p);
        let sum: f32 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn input_validation_errors() {
        let model = TransformerModel::init(toy_config(), 1).unwrap();
        assert!(matches!(
            model.forward_hidden(&vec![0; 13]).unwrap_err(),
            Error::SequenceTooLong { len: 13, max: 12 }
        ));
        assert!(matches!(
            model.forward_hidden(&[99]).unwrap_err(),
            Error::Index { .. }
        ));
        assert!(model.forward_hidden(&[]).is_err());
    }

    #[test]
    fn head_type_mismatch_is_a_config_error() {
        let model = TransformerModel::init(toy_config(), 1).unwrap();
        assert!(matches!(
            model.cls_logits(&[1, 2]).unwrap_err(),
            Error::Config(_)
        ));
        let cls = model.with_classification_head(4).unwrap();
        assert!(matches!(cls.lm_logits(&[1, 2]).unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn zero_init_cls_head_predicts_uniformly() {
        let model = TransformerModel::init(toy_config(), 2)
            .unwrap()
            .with_classification_head(4)
            .unwrap();
        let logits = model.cls_logits(&[1, 2, 3]).unwrap();
        assert_eq!(logits.data(), &[0.0; 4]);
    }

    #[test]
    fn cls_logits_depend_on_earlier_tokens() {
        let mut cfg = toy_config();
        cfg.head = HeadType::Classification { num_classes: 3 };
        let model = TransformerModel::init(cfg, 9).unwrap();
        let a = model.cls_logits(&[1, 2, 3, 4]).unwrap();
        let b = model.cls_logits(&[1, 7, 3, 4]).unwrap();
        assert_ne!(a.data(), b.data(), "attention must mix leftward context");
    }

    #[test]
    fn tied_head_shares_embedding_storage() {
        let mut model = TransformerModel::init(toy_config(), 6).unwrap();
        let ids = vec![2, 3];
        let before = model.lm_logits(&ids).unwrap();
        // Mutate the embedding as the optimizer would; tied logits must move.
        model.token_embedding.value.data_mut()[0] += 0.5;
        let after = model.lm_logits(&ids).unwrap();
        assert_ne!(before.data(), after.data());
        // And there is no separate lm_head parameter.
        assert!(model.params().iter().all(|p| p.name != "lm_head.weight"));
    }

    #[test]
    fn grads_route_back_to_parameters() {
        let mut model = TransformerModel::init(toy_config(), 11).unwrap();
        let mut trace = model.trace(&[1, 2, 3]).unwrap();
        let logits = model.lm_logits_node(&mut trace, &[2]).unwrap();
        let loss = trace.graph.cross_entropy_rows(logits, &[5]).unwrap();
        trace.graph.backward(loss).unwrap();
        model.accumulate_grads(&trace);
        let nonzero = model
            .params()
            .iter()
            .filter(|p| p.grad.iter().any(|&g| g != 0.0))
            .count();
        // Everything reachable from the loss gets a gradient.
        assert_eq!(nonzero, model.params().len());
    }

    #[test]
    fn single_token_zero_layer_contribution() {
        // With all layer weights zeroed, attention and MLP add nothing and
        // the hidden state equals final_norm(embedding + position).
        let mut model = TransformerModel::init(toy_config(), 13).unwrap();
        for l in &mut model.layers {
            for p in [
                &mut l.attn.wq, &mut l.attn.bq, &mut l.attn.wk, &mut l.attn.bk,
                &mut l.attn.wv, &mut l.attn.bv, &mut l.attn.wo, &mut l.attn.bo,
                &mut l.mlp.w1, &mut l.mlp.b1, &mut l.mlp.w2, &mut l.mlp.b2,
            ] {
                p.value.data_mut().fill(0.0);
            }
        }
        let hidden = model.forward_hidden(&[7]).unwrap();

        let d = model.config.d_model;
        let mut embed: Vec<f32> = model.token_embedding.value.row(7).to_vec();
        for (e, p) in embed.iter_mut().zip(model.position_embedding.value.row(0)) {
            *e += p;
        }
        let mean: f32 = embed.iter().sum::<f32>() / d as f32;
        let var: f32 = embed.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let want: Vec<f32> = embed.iter().map(|v| (v - mean) * inv).collect();
        for (got, want) in hidden.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn tied_lm_logits_match_direct_computation() {
        let mut model = TransformerModel::init(toy_config(), 14).unwrap();
        for l in &mut model.layers {
            for p in [
                &mut l.attn.wo, &mut l.attn.bo, &mut l.mlp.w2, &mut l.mlp.b2,
            ] {
                p.value.data_mut().fill(0.0);
            }
        }
        // Output projections zeroed → hidden = final_norm(embed row), logits
        // = hidden · embeddingᵀ.
        let hidden = model.forward_hidden(&[5]).unwrap();
        let logits = model.lm_logits(&[5]).unwrap();
        for (v, row) in logits.iter().zip(0..model.config.vocab_size) {
            let want = crate::kernels::dot(hidden.row(0), model.token_embedding.value.row(row));
            assert!((v - want).abs() < 1e-5);
        }
    }
}
