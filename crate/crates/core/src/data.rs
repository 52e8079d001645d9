//! Dataset ingestion, few-shot sampling, and the synthetic task generator.
//!
//! The few-shot protocol: one demonstration per class drawn first and
//! excluded from everything else, then 200 training and 1,000 validation
//! examples disjointly from the train pool, and up to 1,000 test examples
//! from the test pool — all fully determined by the seed.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::{synthetic_label_words, TaskDef};
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label_id: usize,
    pub label_word: String,
}

/// Source pools: demonstrations/train/val come from `train`, test from
/// `test`.
#[derive(Clone, Debug, Default)]
pub struct TaskDataset {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Protocol sizes; the defaults are the experimental setup's. Reduced sizes
/// exist for small-scale tests only.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test_cap: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 200,
            val: 1000,
            test_cap: 1000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FewShotSplit {
    /// Exactly one example per class, in label order.
    pub demonstrations: Vec<LabeledExample>,
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub seed: u64,
}

/// Seed-deterministic few-shot sampling. Demonstrations are chosen first
/// (uniformly, one per class) and removed from the pool; train and val are
/// then disjoint draws from what remains.
pub fn sample_few_shot(
    dataset: &TaskDataset,
    seed: u64,
    class_count: usize,
    sizes: SplitSizes,
) -> Result<FewShotSplit> {
    let mut rng = rng_for(seed, "few-shot-split");

    let mut demonstrations = Vec::with_capacity(class_count);
    let mut taken = vec![false; dataset.train.len()];
    for class in 0..class_count {
        let pool: Vec<usize> = (0..dataset.train.len())
            .filter(|&i| dataset.train[i].label_id == class)
            .collect();
        if pool.is_empty() {
            return Err(Error::Data(format!(
                "no examples of class {class} available for a demonstration"
            )));
        }
        let pick = pool[rng.random_range(0..pool.len())];
        taken[pick] = true;
        demonstrations.push(dataset.train[pick].clone());
    }

    let mut remaining: Vec<usize> = (0..dataset.train.len()).filter(|&i| !taken[i]).collect();
    let needed = sizes.train + sizes.val;
    if remaining.len() < needed {
        return Err(Error::Data(format!(
            "train pool too small: need {} demonstrations + {} train + {} val = {}, have {}",
            class_count,
            sizes.train,
            sizes.val,
            class_count + needed,
            dataset.train.len()
        )));
    }
    remaining.shuffle(&mut rng);
    let train = remaining[..sizes.train]
        .iter()
        .map(|&i| dataset.train[i].clone())
        .collect();
    let val = remaining[sizes.train..needed]
        .iter()
        .map(|&i| dataset.train[i].clone())
        .collect();

    if dataset.test.is_empty() {
        return Err(Error::Data("test pool is empty".into()));
    }
    let mut test_idx: Vec<usize> = (0..dataset.test.len()).collect();
    test_idx.shuffle(&mut rng);
    test_idx.truncate(sizes.test_cap);
    let test = test_idx.iter().map(|&i| dataset.test[i].clone()).collect();

    Ok(FewShotSplit {
        demonstrations,
        train,
        val,
        test,
        seed,
    })
}

// ── file ingestion ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Csv,
    Jsonl,
}

impl DataFormat {
    /// By extension: .csv or .jsonl/.json.
    pub fn infer(path: &Path) -> Result<DataFormat> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(DataFormat::Csv),
            Some("jsonl") | Some("json") => Ok(DataFormat::Jsonl),
            other => Err(Error::Data(format!(
                "cannot infer data format from extension {other:?} of {}",
                path.display()
            ))),
        }
    }
}

#[derive(Deserialize)]
struct RawRow {
    text: String,
    label: String,
}

/// Loads labeled examples, mapping label strings through the task's ordered
/// label-word list.
pub fn load_dataset(
    path: &Path,
    format: DataFormat,
    label_words: &[String],
) -> Result<Vec<LabeledExample>> {
    let map_label = |label: &str, line: usize| -> Result<usize> {
        label_words
            .iter()
            .position(|w| w == label)
            .ok_or_else(|| {
                Error::Data(format!(
                    "{}:{line}: unknown label {label:?}; expected one of {label_words:?}",
                    path.display()
                ))
            })
    };

    let mut out = Vec::new();
    match format {
        DataFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .from_path(path)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let headers = reader
                .headers()
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
                .clone();
            if headers.iter().collect::<Vec<_>>() != ["text", "label"] {
                return Err(Error::Data(format!(
                    "{}: expected header \"text,label\", got {:?}",
                    path.display(),
                    headers.iter().collect::<Vec<_>>()
                )));
            }
            for (i, row) in reader.deserialize::<RawRow>().enumerate() {
                let line = i + 2; // header is line 1
                let row =
                    row.map_err(|e| Error::Data(format!("{}:{line}: {e}", path.display())))?;
                let label_id = map_label(&row.label, line)?;
                out.push(LabeledExample {
                    text: row.text,
                    label_id,
                    label_word: row.label,
                });
            }
        }
        DataFormat::Jsonl => {
            let text = std::fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let row: RawRow = serde_json::from_str(line).map_err(|e| {
                    Error::Data(format!("{}:{}: {e}", path.display(), i + 1))
                })?;
                let label_id = map_label(&row.label, i + 1)?;
                out.push(LabeledExample {
                    text: row.text,
                    label_id,
                    label_word: row.label,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "{}: no examples found",
            path.display()
        )));
    }
    Ok(out)
}

// ── synthetic task ────────────────────────────────────────────────────

/// Shape of the synthetic classification task. Each class owns a disjoint
/// set of signal tokens; every example is noise tokens followed by one
/// signal token, so the Bayes-optimal accuracy is 1.0 and learnability
/// isolates pipeline correctness.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub noise_tokens: usize,
    pub signal_tokens_per_class: usize,
    pub min_text_len: usize,
    pub max_text_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            class_count: 4,
            noise_tokens: 64,
            signal_tokens_per_class: 2,
            min_text_len: 4,
            max_text_len: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "synthetic task needs at least 2 classes, got {}",
                self.class_count
            )));
        }
        if self.noise_tokens == 0
            || self.signal_tokens_per_class == 0
            || self.min_text_len < 2
            || self.max_text_len < self.min_text_len
        {
            return Err(Error::Config("invalid synthetic task shape".into()));
        }
        Ok(())
    }

    pub fn noise_word(&self, i: usize) -> String {
        format!("w{i:03}")
    }

    pub fn signal_word(&self, class: usize, j: usize) -> String {
        format!("key{class}x{j}")
    }

    /// Every word the generator can emit; handy for vocabulary sizing.
    pub fn all_words(&self) -> Vec<String> {
        let mut words: Vec<String> = (0..self.noise_tokens).map(|i| self.noise_word(i)).collect();
        for c in 0..self.class_count {
            for j in 0..self.signal_tokens_per_class {
                words.push(self.signal_word(c, j));
            }
        }
        words
    }

    fn example(&self, rng: &mut impl Rng, class: usize) -> LabeledExample {
        let len = rng.random_range(self.min_text_len..=self.max_text_len);
        let mut words: Vec<String> = (0..len - 1)
            .map(|_| self.noise_word(rng.random_range(0..self.noise_tokens)))
            .collect();
        let j = rng.random_range(0..self.signal_tokens_per_class);
        words.push(self.signal_word(class, j));
        LabeledExample {
            text: words.join(" "),
            label_id: class,
            label_word: synthetic_label_words(self.class_count)[class].clone(),
        }
    }
}

/// Seed-deterministic synthetic dataset with balanced classes.
pub fn generate_synthetic_task(
    seed: u64,
    spec: &SyntheticSpec,
    train_size: usize,
    test_size: usize,
) -> Result<TaskDataset> {
    spec.validate()?;
    let mut rng = rng_for(seed, "synthetic-task");
    let gen = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<LabeledExample> {
        (0..n).map(|i| spec.example(rng, i % spec.class_count)).collect()
    };
    let mut train = gen(train_size, &mut rng);
    train.shuffle(&mut rng);
    let mut test = gen(test_size, &mut rng);
    test.shuffle(&mut rng);
    Ok(TaskDataset { train, test })
}

/// Next-token-prediction corpus for toy pretraining: each line concatenates
/// one to five rendered patterns of fresh examples, so sequences cover the
/// position range and in-context shape that prompts use later.
pub fn synthetic_corpus(
    seed: u64,
    spec: &SyntheticSpec,
    task: &TaskDef,
    lines: usize,
    max_tokens_per_line: usize,
) -> Result<Vec<String>> {
    spec.validate()?;
    let mut rng = rng_for(seed, "synthetic-corpus");
    let mut out = Vec::with_capacity(lines);
    for _ in 0..lines {
        let want = rng.random_range(1..=5usize);
        let mut parts: Vec<String> = Vec::with_capacity(want);
        let mut tokens = 1; // BOS
        for _ in 0..want {
            let class = rng.random_range(0..spec.class_count);
            let ex = spec.example(&mut rng, class);
            let pattern = task.template.render_pattern(&ex.text, Some(&ex.label_word));
            let len = crate::vocab::tokenize(&pattern).len();
            if !parts.is_empty() && tokens + len > max_tokens_per_line {
                break;
            }
            tokens += len;
            parts.push(pattern);
        }
        out.push(parts.join(" "));
    }
    Ok(out)
}

/// Independent frequency-count classifier: predicts the class whose signal
/// tokens appear most often. Used as the learnability oracle.
pub fn count_oracle_accuracy(spec: &SyntheticSpec, examples: &[LabeledExample]) -> f64 {
    let mut correct = 0usize;
    for ex in examples {
        let mut counts = vec![0usize; spec.class_count];
        for word in ex.text.split_whitespace() {
            for c in 0..spec.class_count {
                for j in 0..spec.signal_tokens_per_class {
                    if word == spec.signal_word(c, j) {
                        counts[c] += 1;
                    }
                }
            }
        }
        let best = counts
            .iter()
            .enumerate()
            .max_by_key(|(i, &c)| (c, std::cmp::Reverse(*i)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if best == ex.label_id {
            correct += 1;
        }
    }
    correct as f64 / examples.len() as f64
}
