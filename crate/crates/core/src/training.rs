//! AdamW and the three fine-tuning paradigms, with the experimental
//! schedule: lr 5e-5, up to 50 epochs, early stopping on validation accuracy
//! with patience 15, batch size 1.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Parameter;
use crate::data::{FewShotSplit, LabeledExample};
use crate::error::{Error, Result};
use crate::model::{HeadType, TransformerModel};
use crate::prompting::{score_labels_ids, EncodedPrompt, TaskDef, Verbalizer};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

/// The three fine-tuning setups: prompt + LM head, bare text +
/// classification head, and prompt + classification head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    PromptLm,
    VanillaCls,
    PromptCls,
}

impl Paradigm {
    pub const ALL: [Paradigm; 3] = [Paradigm::PromptLm, Paradigm::VanillaCls, Paradigm::PromptCls];

    pub fn uses_prompt(self) -> bool {
        !matches!(self, Paradigm::VanillaCls)
    }

    pub fn uses_lm_head(self) -> bool {
        matches!(self, Paradigm::PromptLm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::PromptLm => "prompt_lm",
            Paradigm::VanillaCls => "vanilla_cls",
            Paradigm::PromptCls => "prompt_cls",
        }
    }

    /// Series label used in the accuracy-vs-layers plot.
    pub fn plot_label(self) -> &'static str {
        match self {
            Paradigm::PromptLm => "LM",
            Paradigm::PromptCls => "P-CLS",
            Paradigm::VanillaCls => "CLS",
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Paradigm> {
        match s {
            "prompt_lm" => Ok(Paradigm::PromptLm),
            "vanilla_cls" => Ok(Paradigm::VanillaCls),
            "prompt_cls" => Ok(Paradigm::PromptCls),
            other => Err(Error::Config(format!(
                "unknown paradigm {other:?}; expected prompt_lm, vanilla_cls, or prompt_cls"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub paradigm: Paradigm,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub grad_clip: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            max_epochs: 50,
            patience: 15,
            batch_size: 1,
            seed: 0,
            paradigm: Paradigm::PromptLm,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-example training loss, one entry per epoch run.
    pub train_loss: Vec<f32>,
    pub val_accuracy: Vec<f32>,
    /// 1-based epoch whose snapshot is returned.
    pub best_epoch: usize,
    pub best_val_accuracy: f32,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.val_accuracy.len()
    }
}

// ── AdamW ─────────────────────────────────────────────────────────────

/// Decoupled-weight-decay Adam with bias correction. Decay applies to 2-D
/// weight matrices only (not biases, norms, or embeddings), and the lr=0
/// step leaves parameters bit-identical.
pub struct AdamW {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

fn decays(param: &Parameter) -> bool {
    param.value.ndim() == 2 && !param.name.contains("embedding")
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        AdamW {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over each parameter's accumulated gradient.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        self.step += 1;
        let t = self.step as f32;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for param in params.iter_mut() {
            if param.value.shape() != param.grad.shape() {
                return Err(Error::Optimizer(format!(
                    "{}: value shape {:?} vs grad shape {:?}",
                    param.name,
                    param.value.shape(),
                    param.grad.shape()
                )));
            }
            let decay = if decays(param) { self.weight_decay } else { 0.0 };
            let (m, v) = self
                .moments
                .entry(param.name.clone())
                .or_insert_with(|| (vec![0.0; param.value.len()], vec![0.0; param.value.len()]));
            if m.len() != param.value.len() {
                return Err(Error::Optimizer(format!(
                    "{}: optimizer state built for {} elements, parameter has {}",
                    param.name,
                    m.len(),
                    param.value.len()
                )));
            }
            let grad = param.grad.data();
            for (i, p) in param.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= self.learning_rate * (m_hat / (v_hat.sqrt() + self.eps) + decay * *p);
            }
        }
        Ok(())
    }
}

// ── task context and per-example losses ───────────────────────────────

/// Everything needed to turn an example into model input under a paradigm:
/// template, verbalizer, vocabulary, and the fixed per-seed demonstrations.
#[derive(Clone)]
pub struct TaskContext {
    pub task: TaskDef,
    pub verbalizer: Verbalizer,
    pub vocab: Vocab,
    demonstrations: Vec<(String, String)>,
}

impl TaskContext {
    /// Demonstrations come ordered by label id; one per class is required.
    pub fn new(task: &TaskDef, vocab: &Vocab, demonstrations: &[LabeledExample]) -> Result<Self> {
        let verbalizer = Verbalizer::new(&task.label_words, vocab)?;
        if demonstrations.len() != task.num_classes() {
            return Err(Error::Prompt(format!(
                "expected one demonstration per class ({}), got {}",
                task.num_classes(),
                demonstrations.len()
            )));
        }
        let mut ordered = vec![None; task.num_classes()];
        for demo in demonstrations {
            if demo.label_id >= task.num_classes() {
                return Err(Error::Prompt(format!(
                    "demonstration label id {} out of range",
                    demo.label_id
                )));
            }
            if ordered[demo.label_id].is_some() {
                return Err(Error::Prompt(format!(
                    "class {} has more than one demonstration",
                    demo.label_id
                )));
            }
            ordered[demo.label_id] = Some((demo.text.clone(), demo.label_word.clone()));
        }
        let demonstrations = ordered
            .into_iter()
            .enumerate()
            .map(|(c, d)| d.ok_or_else(|| Error::Prompt(format!("missing demonstration for class {c}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskContext {
            task: task.clone(),
            verbalizer,
            vocab: vocab.clone(),
            demonstrations,
        })
    }

    fn demo_refs(&self) -> Vec<(&str, &str)> {
        self.demonstrations
            .iter()
            .map(|(s, l)| (s.as_str(), l.as_str()))
            .collect()
    }

    /// Model input ids for `text` under `paradigm`, truncated to fit with
    /// `reserved` continuation slots.
    pub fn input_ids(
        &self,
        paradigm: Paradigm,
        text: &str,
        max_seq_len: usize,
        reserved: usize,
    ) -> Result<Vec<u32>> {
        if paradigm.uses_prompt() {
            let encoded = EncodedPrompt::new(
                &self.vocab,
                &self.task.template,
                &self.demo_refs(),
                text,
            );
            encoded.truncate_to_ids(max_seq_len, reserved)
        } else {
            let ids = self.vocab.encode(text);
            if ids.len() + reserved > max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: ids.len() + reserved,
                    max: max_seq_len,
                });
            }
            Ok(ids)
        }
    }
}

fn check_head(model: &TransformerModel, paradigm: Paradigm) -> Result<()> {
    match (paradigm.uses_lm_head(), model.config.head) {
        (true, HeadType::LanguageModeling) => Ok(()),
        (false, HeadType::Classification { .. }) => Ok(()),
        (true, other) => Err(Error::Config(format!(
            "paradigm {} needs a language modeling head, model has {other:?}",
            paradigm.name()
        ))),
        (false, other) => Err(Error::Config(format!(
            "paradigm {} needs a classification head, model has {other:?}",
            paradigm.name()
        ))),
    }
}

/// Cross-entropy of one example under the paradigm. For the LM paradigm the
/// loss sums over the label word's tokens, each conditioned
/// autoregressively after the prompt.
pub fn example_loss(
    model: &TransformerModel,
    ctx: &TaskContext,
    example: &LabeledExample,
    paradigm: Paradigm,
) -> Result<f32> {
    let (trace, loss) = traced_example_loss(model, ctx, example, paradigm)?;
    Ok(trace.graph.value(loss).item())
}

fn traced_example_loss(
    model: &TransformerModel,
    ctx: &TaskContext,
    example: &LabeledExample,
    paradigm: Paradigm,
) -> Result<(crate::model::ForwardTrace, crate::autodiff::NodeId)> {
    check_head(model, paradigm)?;
    match paradigm {
        Paradigm::PromptLm => {
            let label_tokens = ctx.verbalizer.tokens(example.label_id).to_vec();
            let reserve = label_tokens.len() - 1;
            let prompt_ids = ctx.input_ids(
                paradigm,
                &example.text,
                model.config.max_seq_len,
                ctx.verbalizer.max_label_tokens().saturating_sub(1).max(reserve),
            )?;
            let prompt_len = prompt_ids.len();
            let mut input = prompt_ids;
            input.extend_from_slice(&label_tokens[..label_tokens.len() - 1]);
            let positions: Vec<usize> =
                (0..label_tokens.len()).map(|j| prompt_len - 1 + j).collect();
            let mut trace = model.trace(&input)?;
            let logits = model.lm_logits_node(&mut trace, &positions)?;
            let loss = trace.graph.cross_entropy_rows(logits, &label_tokens)?;
            Ok((trace, loss))
        }
        Paradigm::VanillaCls | Paradigm::PromptCls => {
            let ids = ctx.input_ids(paradigm, &example.text, model.config.max_seq_len, 0)?;
            let mut trace = model.trace(&ids)?;
            let logits = model.cls_logits_node(&mut trace)?;
            let loss = trace
                .graph
                .cross_entropy_rows(logits, &[example.label_id as u32])?;
            Ok((trace, loss))
        }
    }
}

/// Loss + backward + gradient accumulation into the model, no optimizer
/// step.
fn accumulate_example(
    model: &mut TransformerModel,
    ctx: &TaskContext,
    example: &LabeledExample,
    paradigm: Paradigm,
) -> Result<f32> {
    let (mut trace, loss) = traced_example_loss(model, ctx, example, paradigm)?;
    let loss_value = trace.graph.value(loss).item();
    trace.graph.backward(loss)?;
    model.accumulate_grads(&trace);
    Ok(loss_value)
}

fn clip_grads(model: &mut TransformerModel, max_norm: f32) {
    let norm_sq: f32 = model
        .params()
        .iter()
        .map(|p| p.grad.iter().map(|g| g * g).sum::<f32>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in model.params_mut() {
            for g in p.grad.data_mut() {
                *g *= scale;
            }
        }
    }
}

/// Class prediction for one example under the paradigm (argmax; ties go to
/// the lowest class id).
pub fn predict(
    model: &TransformerModel,
    ctx: &TaskContext,
    text: &str,
    paradigm: Paradigm,
) -> Result<usize> {
    check_head(model, paradigm)?;
    let scores: Vec<f32> = match paradigm {
        Paradigm::PromptLm => {
            let ids = ctx.input_ids(
                paradigm,
                text,
                model.config.max_seq_len,
                ctx.verbalizer.max_label_tokens().saturating_sub(1),
            )?;
            score_labels_ids(model, &ctx.verbalizer, &ids)?
        }
        Paradigm::VanillaCls | Paradigm::PromptCls => {
            let ids = ctx.input_ids(paradigm, text, model.config.max_seq_len, 0)?;
            model.cls_logits(&ids)?.data().to_vec()
        }
    };
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Fraction of argmax-correct predictions.
pub fn evaluate_accuracy(
    model: &TransformerModel,
    ctx: &TaskContext,
    examples: &[LabeledExample],
    paradigm: Paradigm,
) -> Result<f32> {
    if examples.is_empty() {
        return Err(Error::Eval("cannot evaluate on an empty example list".into()));
    }
    let mut correct = 0usize;
    for ex in examples {
        if predict(model, ctx, &ex.text, paradigm)? == ex.label_id {
            correct += 1;
        }
    }
    Ok(correct as f32 / examples.len() as f32)
}

// ── fine-tuning loop ──────────────────────────────────────────────────

/// Fine-tunes a copy of `model` on the split under `config`, returning the
/// best-validation-epoch snapshot and the history. The input model is left
/// untouched.
pub fn finetune(
    model: &TransformerModel,
    split: &FewShotSplit,
    task: &TaskDef,
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<(TransformerModel, TrainHistory)> {
    config.validate()?;
    check_head(model, config.paradigm)?;
    let ctx = TaskContext::new(task, vocab, &split.demonstrations)?;
    let mut model = model.clone();
    model.zero_grads();
    let mut optimizer = AdamW::new(config);
    let mut history = TrainHistory::default();
    let mut best_snapshot: Option<Vec<Tensor>> = None;
    let mut best_acc = f32::NEG_INFINITY;
    let mut best_epoch = 0usize;

    let mut order: Vec<usize> = (0..split.train.len()).collect();
    for epoch in 1..=config.max_epochs {
        let mut rng = rng_for(config.seed, &format!("epoch-shuffle-{epoch}"));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            for &idx in chunk {
                let loss =
                    accumulate_example(&mut model, &ctx, &split.train[idx], config.paradigm)
                        .map_err(|e| wrap_training(e, epoch, idx))?;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        example: idx,
                        message: format!("non-finite loss {loss}"),
                    });
                }
                epoch_loss += loss as f64;
            }
            if let Some(max_norm) = config.grad_clip {
                clip_grads(&mut model, max_norm);
            }
            optimizer
                .step(&mut model.params_mut())
                .map_err(|e| wrap_training(e, epoch, step))?;
            model.zero_grads();
        }
        history
            .train_loss
            .push((epoch_loss / split.train.len() as f64) as f32);

        let val_acc = evaluate_accuracy(&model, &ctx, &split.val, config.paradigm)?;
        history.val_accuracy.push(val_acc);
        if val_acc > best_acc {
            best_acc = val_acc;
            best_epoch = epoch;
            best_snapshot = Some(model.params().iter().map(|p| p.value.clone()).collect());
        }
        if epoch - best_epoch >= config.patience {
            history.stopped_early = true;
            break;
        }
    }

    history.best_epoch = best_epoch;
    history.best_val_accuracy = best_acc;
    if let Some(snapshot) = best_snapshot {
        for (param, value) in model.params_mut().into_iter().zip(snapshot) {
            param.value = value;
        }
    }
    model.zero_grads();
    Ok((model, history))
}

fn wrap_training(err: Error, epoch: usize, example: usize) -> Error {
    match err {
        e @ Error::Training { .. } => e,
        other => Error::Training {
            epoch,
            example,
            message: other.to_string(),
        },
    }
}

// ── toy pretraining ───────────────────────────────────────────────────

/// Next-token-prediction training over encoded corpus sequences; stands in
/// for a pretrained checkpoint at desk scale. Returns the mean per-token
/// loss of each epoch.
pub fn pretrain_lm(
    model: &mut TransformerModel,
    sequences: &[Vec<u32>],
    epochs: usize,
    learning_rate: f32,
    seed: u64,
) -> Result<Vec<f32>> {
    if model.config.head != HeadType::LanguageModeling {
        return Err(Error::Config("pretraining requires a language modeling head".into()));
    }
    if sequences.iter().all(|s| s.len() < 2) {
        return Err(Error::Data("pretraining corpus has no sequences of length >= 2".into()));
    }
    let config = TrainConfig {
        learning_rate,
        seed,
        ..TrainConfig::default()
    };
    let mut optimizer = AdamW::new(&config);
    model.zero_grads();
    let mut losses = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    for epoch in 1..=epochs {
        let mut rng = rng_for(seed, &format!("pretrain-shuffle-{epoch}"));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut tokens = 0usize;
        for &idx in &order {
            let seq = &sequences[idx];
            if seq.len() < 2 {
                continue;
            }
            let mut trace = model.trace(seq)?;
            let positions: Vec<usize> = (0..seq.len() - 1).collect();
            let logits = model.lm_logits_node(&mut trace, &positions)?;
            let loss = trace.graph.cross_entropy_rows(logits, &seq[1..])?;
            let loss_value = trace.graph.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    example: idx,
                    message: format!("non-finite pretraining loss {loss_value}"),
                });
            }
            trace.graph.backward(loss)?;
            model.accumulate_grads(&trace);
            optimizer.step(&mut model.params_mut())?;
            model.zero_grads();
            epoch_loss += loss_value as f64;
            tokens += seq.len() - 1;
        }
        losses.push((epoch_loss / tokens.max(1) as f64) as f32);
    }
    Ok(losses)
}
