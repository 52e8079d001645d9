//! Prompt templates, verbalizers, prompt assembly, and label-word scoring.
//!
//! A pattern renders one (text, label) pair into natural language, e.g.
//! "Dialogue: I enjoyed it a lot! Emotion: Happy". A prompt concatenates one
//! rendered demonstration per class followed by the query pattern with the
//! label left blank, so the model fills it in as the next token(s).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::log_sum_exp;
use crate::model::TransformerModel;
use crate::vocab::{Vocab, BOS_ID, UNK_ID};

/// Cloze-style pattern pieces. The answer prefix carries its leading space;
/// a single space joins the label on when one is present.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub input_prefix: String,
    pub answer_prefix: String,
    #[serde(default = "default_separator")]
    pub separator: String,
}

fn default_separator() -> String {
    " ".to_string()
}

impl PromptTemplate {
    pub fn new(input_prefix: &str, answer_prefix: &str) -> Self {
        PromptTemplate {
            input_prefix: input_prefix.to_string(),
            answer_prefix: answer_prefix.to_string(),
            separator: default_separator(),
        }
    }

    /// 𝒫(s, l): with a label the pattern reads "<prefix>s<cue> l"; with the
    /// empty label it ends exactly at the cue.
    pub fn render_pattern(&self, text: &str, label: Option<&str>) -> String {
        let mut out = format!("{}{}{}", self.input_prefix, text, self.answer_prefix);
        if let Some(l) = label {
            out.push(' ');
            out.push_str(l);
        }
        out
    }

    /// X(s): demonstrations in label order, query pattern last with the
    /// label blank.
    pub fn build_prompt(&self, demonstrations: &[(&str, &str)], query: &str) -> String {
        let mut parts: Vec<String> = demonstrations
            .iter()
            .map(|(s, l)| self.render_pattern(s, Some(l)))
            .collect();
        parts.push(self.render_pattern(query, None));
        parts.join(&self.separator)
    }
}

/// Injective map from class ids to label words, with the token-id sequences
/// induced by the active vocabulary.
#[derive(Clone, Debug)]
pub struct Verbalizer {
    words: Vec<String>,
    token_ids: Vec<Vec<u32>>,
}

impl Verbalizer {
    pub fn new(label_words: &[String], vocab: &Vocab) -> Result<Verbalizer> {
        if label_words.len() < 2 {
            return Err(Error::Config(format!(
                "a verbalizer needs at least 2 label words, got {}",
                label_words.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        let mut token_ids = Vec::with_capacity(label_words.len());
        for word in label_words {
            if !seen.insert(word.as_str()) {
                return Err(Error::Config(format!(
                    "label word {word:?} appears twice; the verbalizer must be injective"
                )));
            }
            let ids = vocab.encode_continuation(word);
            if ids.is_empty() {
                return Err(Error::Config(format!(
                    "label word {word:?} tokenizes to an empty sequence"
                )));
            }
            if ids.contains(&UNK_ID) {
                return Err(Error::Config(format!(
                    "label word {word:?} is not covered by the vocabulary"
                )));
            }
            token_ids.push(ids);
        }
        Ok(Verbalizer {
            words: label_words.to_vec(),
            token_ids,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, label_id: usize) -> &str {
        &self.words[label_id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokens(&self, label_id: usize) -> &[u32] {
        &self.token_ids[label_id]
    }

    pub fn label_id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Longest label-word token sequence; prompts reserve this much room.
    pub fn max_label_tokens(&self) -> usize {
        self.token_ids.iter().map(|t| t.len()).max().unwrap_or(0)
    }
}

/// A prompt encoded per demonstration, so truncation can drop whole
/// demonstrations from the front while the query pattern stays intact.
#[derive(Clone, Debug)]
pub struct EncodedPrompt {
    pub demo_ids: Vec<Vec<u32>>,
    pub query_ids: Vec<u32>,
}

impl EncodedPrompt {
    pub fn new(
        vocab: &Vocab,
        template: &PromptTemplate,
        demonstrations: &[(&str, &str)],
        query: &str,
    ) -> EncodedPrompt {
        // The single-space separator contributes no tokens of its own, so
        // per-pattern encoding concatenates to exactly the full prompt.
        let demo_ids = demonstrations
            .iter()
            .map(|(s, l)| vocab.encode_continuation(&template.render_pattern(s, Some(l))))
            .collect();
        let query_ids = vocab.encode_continuation(&template.render_pattern(query, None));
        EncodedPrompt { demo_ids, query_ids }
    }

    /// Total input length including BOS and `reserved` continuation slots.
    fn total_len(&self, reserved: usize) -> usize {
        1 + self.demo_ids.iter().map(Vec::len).sum::<usize>() + self.query_ids.len() + reserved
    }

    /// Model input ids (BOS first), dropping the oldest demonstrations until
    /// the prompt plus `reserved` extra tokens fits in `max_seq_len`.
    pub fn truncate_to_ids(&self, max_seq_len: usize, reserved: usize) -> Result<Vec<u32>> {
        let mut skip = 0;
        while 1 + self.demo_ids[skip..].iter().map(Vec::len).sum::<usize>()
            + self.query_ids.len()
            + reserved
            > max_seq_len
        {
            if skip == self.demo_ids.len() {
                return Err(Error::Prompt(format!(
                    "query pattern alone needs {} tokens but only {} fit",
                    1 + self.query_ids.len() + reserved,
                    max_seq_len
                )));
            }
            skip += 1;
        }
        let mut ids = Vec::with_capacity(self.total_len(reserved) .min(max_seq_len));
        ids.push(BOS_ID);
        for demo in &self.demo_ids[skip..] {
            ids.extend_from_slice(demo);
        }
        ids.extend_from_slice(&self.query_ids);
        Ok(ids)
    }
}

/// Per-class summed log-probability of each label word's token sequence,
/// scored autoregressively after `prompt_ids` (BOS-leading model input).
/// The predicted class is the argmax.
pub fn score_labels_ids(
    model: &TransformerModel,
    verbalizer: &Verbalizer,
    prompt_ids: &[u32],
) -> Result<Vec<f32>> {
    let prompt_len = prompt_ids.len();
    // One forward over the bare prompt covers every label's first token.
    let first_logits = model.lm_logits(prompt_ids)?;
    let first_lse = log_sum_exp(first_logits.data());
    let mut scores = Vec::with_capacity(verbalizer.num_classes());
    for class in 0..verbalizer.num_classes() {
        let toks = verbalizer.tokens(class);
        let mut score = first_logits.data()[toks[0] as usize] - first_lse;
        if toks.len() > 1 {
            // Extend the input with all but the last label token and read
            // the logits row that predicts each following token.
            let mut ids = prompt_ids.to_vec();
            ids.extend_from_slice(&toks[..toks.len() - 1]);
            let hidden_rows: Vec<usize> = (0..toks.len() - 1).map(|j| prompt_len + j).collect();
            let mut trace = model.trace(&ids)?;
            let logits = model.lm_logits_node(&mut trace, &hidden_rows)?;
            let values = trace.graph.value(logits);
            for (row, &tok) in toks[1..].iter().enumerate() {
                let r = values.row(row);
                score += r[tok as usize] - log_sum_exp(r);
            }
        }
        scores.push(score);
    }
    Ok(scores)
}

/// String-level entry point: encodes and truncates the prompt, then scores.
pub fn score_labels(
    model: &TransformerModel,
    vocab: &Vocab,
    verbalizer: &Verbalizer,
    template: &PromptTemplate,
    demonstrations: &[(&str, &str)],
    query: &str,
) -> Result<Vec<f32>> {
    let encoded = EncodedPrompt::new(vocab, template, demonstrations, query);
    let ids = encoded.truncate_to_ids(
        model.config.max_seq_len,
        verbalizer.max_label_tokens().saturating_sub(1),
    )?;
    score_labels_ids(model, verbalizer, &ids)
}

// ── task registry ─────────────────────────────────────────────────────

/// A classification task: its template and ordered label words.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskDef {
    pub template: PromptTemplate,
    pub label_words: Vec<String>,
}

impl TaskDef {
    pub fn new(template: PromptTemplate, label_words: &[&str]) -> TaskDef {
        TaskDef {
            template,
            label_words: label_words.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.label_words.len()
    }

    /// Desk-scale synthetic task over `class_count` classes.
    pub fn synthetic(class_count: usize) -> TaskDef {
        TaskDef {
            template: PromptTemplate::new("Input: ", " Label:"),
            label_words: synthetic_label_words(class_count),
        }
    }
}

pub fn synthetic_label_words(class_count: usize) -> Vec<String> {
    const NAMES: [&str; 8] = [
        "Alpha", "Beta", "Gamma", "Delta", "Epsilon", "Zeta", "Eta", "Theta",
    ];
    (0..class_count)
        .map(|c| {
            NAMES
                .get(c)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("Class{c}"))
        })
        .collect()
}

/// The four built-in tasks plus the synthetic stand-in, keyed by id.
pub fn builtin_tasks() -> BTreeMap<String, TaskDef> {
    let mut tasks = BTreeMap::new();
    tasks.insert(
        "agnews".to_string(),
        TaskDef::new(
            PromptTemplate::new("Article: ", " Answer:"),
            &["World", "Sports", "Business", "Technology"],
        ),
    );
    tasks.insert(
        "emoc".to_string(),
        TaskDef::new(
            PromptTemplate::new("Dialogue: ", " Emotion:"),
            &["Happy", "Sad", "Angry", "Others"],
        ),
    );
    tasks.insert(
        "sst2".to_string(),
        TaskDef::new(
            PromptTemplate::new("Review: ", " Sentiment:"),
            &["Positive", "Negative"],
        ),
    );
    tasks.insert(
        "trec".to_string(),
        TaskDef::new(
            PromptTemplate::new("Question: ", " Answer Type:"),
            &[
                "Abbreviation", "Entity", "Description", "Person", "Location", "Number",
            ],
        ),
    );
    tasks.insert("synthetic".to_string(), TaskDef::synthetic(4));
    tasks
}

/// JSON registry: { "task-id": { "template": {...}, "label_words": [...] } }.
/// New tasks need no code change.
pub fn load_task_registry(path: &Path) -> Result<BTreeMap<String, TaskDef>> {
    let text = std::fs::read_to_string(path)?;
    let tasks: BTreeMap<String, TaskDef> = serde_json::from_str(&text)?;
    for (id, task) in &tasks {
        if task.label_words.len() < 2 {
            return Err(Error::Config(format!(
                "task {id:?} defines {} label words; at least 2 required",
                task.label_words.len()
            )));
        }
    }
    Ok(tasks)
}

/// Built-ins plus an optional registry file; registry entries win on id
/// clashes.
pub fn resolve_task(id: &str, registry: Option<&Path>) -> Result<TaskDef> {
    let mut tasks = builtin_tasks();
    if let Some(path) = registry {
        tasks.extend(load_task_registry(path)?);
    }
    tasks
        .remove(id)
        .ok_or_else(|| Error::Config(format!("unknown task {id:?}")))
}
