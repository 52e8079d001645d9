//! Top-layer dropping and parameter accounting.
//!
//! Dropping the top k decoder layers keeps the embeddings, the lower layers,
//! the final normalization, and the head bit-identical to the source model;
//! only `config.n_layers` and the layer list change.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadType, ModelConfig, TransformerModel};

/// Request to remove the top `k` decoder layers.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PruneSpec {
    pub k: usize,
}

impl PruneSpec {
    /// At least one layer must remain.
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.k >= n_layers {
            return Err(Error::Prune(format!(
                "cannot drop {} of {} layers; at least one layer must remain",
                self.k, n_layers
            )));
        }
        Ok(())
    }
}

/// Exact trainable-scalar count with a per-component breakdown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total_params: u64,
    pub embedding_params: u64,
    pub per_layer_params: u64,
    pub layers_retained: usize,
    pub final_norm_params: u64,
    pub head_params: u64,
}

impl ParamReport {
    pub fn humanized_total(&self) -> String {
        humanize_params(self.total_params)
    }
}

/// Parameter-count bucket formatting: billions get one rounded decimal,
/// millions are floored to the integer below (so 819.8M prints as "819M").
pub fn humanize_params(n: u64) -> String {
    if n >= 1_000_000_000 {
        format!("{:.1}B", n as f64 / 1e9)
    } else if n >= 1_000_000 {
        format!("{}M", n / 1_000_000)
    } else if n >= 1_000 {
        format!("{}K", n / 1_000)
    } else {
        n.to_string()
    }
}

/// Analytic parameter count for an architecture description.
pub fn count_params(config: &ModelConfig) -> Result<ParamReport> {
    config.validate()?;
    let d = config.d_model as u64;
    let d_ff = config.d_ff as u64;
    let embedding_params = (config.vocab_size as u64) * d + (config.max_seq_len as u64) * d;
    // attention (4 d² weights + 4 d biases) + mlp (2 d·d_ff + d_ff + d) +
    // two layer norms (4 d)
    let per_layer_params = 4 * d * d + 2 * d * d_ff + 9 * d + d_ff;
    let final_norm_params = 2 * d;
    let head_params = match config.head {
        HeadType::LanguageModeling => {
            if config.tie_lm_head {
                0
            } else {
                (config.vocab_size as u64) * d
            }
        }
        HeadType::Classification { num_classes } => (num_classes as u64) * (d + 1),
    };
    let total_params = embedding_params
        + per_layer_params * config.n_layers as u64
        + final_norm_params
        + head_params;
    Ok(ParamReport {
        total_params,
        embedding_params,
        per_layer_params,
        layers_retained: config.n_layers,
        final_norm_params,
        head_params,
    })
}

/// Parameter count of an instantiated model, summed from its actual tensors.
pub fn count_params_model(model: &TransformerModel) -> ParamReport {
    let tensor = |p: &crate::autodiff::Parameter| p.value.len() as u64;
    let embedding_params = tensor(&model.token_embedding) + tensor(&model.position_embedding);
    let per_layer_params = model
        .layers
        .first()
        .map(|l| {
            tensor(&l.ln1.gain)
                + tensor(&l.ln1.bias)
                + tensor(&l.attn.wq)
                + tensor(&l.attn.bq)
                + tensor(&l.attn.wk)
                + tensor(&l.attn.bk)
                + tensor(&l.attn.wv)
                + tensor(&l.attn.bv)
                + tensor(&l.attn.wo)
                + tensor(&l.attn.bo)
                + tensor(&l.ln2.gain)
                + tensor(&l.ln2.bias)
                + tensor(&l.mlp.w1)
                + tensor(&l.mlp.b1)
                + tensor(&l.mlp.w2)
                + tensor(&l.mlp.b2)
        })
        .unwrap_or(0);
    let final_norm_params = tensor(&model.final_norm.gain) + tensor(&model.final_norm.bias);
    let head_params = match &model.head {
        crate::model::Head::LanguageModeling { weight } => {
            weight.as_ref().map(tensor).unwrap_or(0)
        }
        crate::model::Head::Classification { weight, bias } => tensor(weight) + tensor(bias),
    };
    ParamReport {
        total_params: embedding_params
            + per_layer_params * model.n_layers() as u64
            + final_norm_params
            + head_params,
        embedding_params,
        per_layer_params,
        layers_retained: model.n_layers(),
        final_norm_params,
        head_params,
    }
}

/// Removes the top `k` decoder layers, keeping everything else value-
/// identical. The input model is not touched.
pub fn drop_top_layers(model: &TransformerModel, k: usize) -> Result<TransformerModel> {
    PruneSpec { k }.validate(model.n_layers())?;
    let mut out = model.clone();
    out.layers.truncate(model.n_layers() - k);
    out.config.n_layers = out.layers.len();
    Ok(out)
}

/// Max absolute difference between the full model's hidden states after its
/// layer n−k and the pruned model's pre-final-norm hidden states. Zero means
/// the shared prefix computes identically.
pub fn verify_prefix_equivalence(
    full: &TransformerModel,
    pruned: &TransformerModel,
    token_ids: &[u32],
) -> Result<f32> {
    let shared = pruned.n_layers();
    if shared > full.n_layers()
        || full.config.d_model != pruned.config.d_model
        || full.config.vocab_size != pruned.config.vocab_size
        || full.config.n_heads != pruned.config.n_heads
    {
        return Err(Error::Config(format!(
            "models are not comparable: full has {} layers / d_model {}, pruned has {} / {}",
            full.n_layers(),
            full.config.d_model,
            pruned.n_layers(),
            pruned.config.d_model
        )));
    }
    let (full_layers, _) = full.hidden_states(token_ids)?;
    let (pruned_layers, _) = pruned.hidden_states(token_ids)?;
    full_layers[shared - 1].max_abs_diff(&pruned_layers[shared - 1])
}

/// Fraction of parameters removed, in percent.
pub fn reduction_percent(before: &ParamReport, after: &ParamReport) -> f64 {
    100.0 * (1.0 - after.total_params as f64 / before.total_params as f64)
}
