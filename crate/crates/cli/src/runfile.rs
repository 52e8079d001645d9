//! Run files: one TOML or JSON document drives a whole experiment, so runs
//! are reproducible artifacts. Unknown keys are rejected outright.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use layerslim_core::data::{
    generate_synthetic_task, load_dataset, DataFormat, SplitSizes, SyntheticSpec, TaskDataset,
};
use layerslim_core::experiment::ExperimentGrid;
use layerslim_core::model::{HeadType, ModelConfig, TransformerModel};
use layerslim_core::prompting::{resolve_task, TaskDef};
use layerslim_core::training::TrainConfig;
use layerslim_core::vocab::Vocab;
use layerslim_core::{checkpoint, Error, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub output_dir: Option<PathBuf>,
    /// Parallel grid cells; 1 keeps everything on one thread.
    pub parallelism: Option<usize>,
    pub model: Option<ModelSection>,
    pub task: Option<TaskSection>,
    pub split: Option<SplitSizes>,
    pub train: Option<TrainConfig>,
    pub grid: Option<ExperimentGrid>,
    pub pretrain: Option<PretrainSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub checkpoint: Option<PathBuf>,
    pub config: Option<ModelConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub id: String,
    pub registry: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub format: Option<DataFormat>,
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    #[serde(default = "default_synth_seed")]
    pub seed: u64,
    #[serde(default)]
    pub spec: SyntheticSpec,
    #[serde(default = "default_train_pool")]
    pub train_pool: usize,
    #[serde(default = "default_test_pool")]
    pub test_pool: usize,
}

fn default_synth_seed() -> u64 {
    7
}
fn default_train_pool() -> usize {
    2400
}
fn default_test_pool() -> usize {
    1200
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pretrain_epochs")]
    pub epochs: usize,
    #[serde(default = "default_pretrain_lr")]
    pub learning_rate: f32,
    /// One sequence per line; defaults to the synthetic patterned corpus.
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_corpus_lines")]
    pub corpus_lines: usize,
    #[serde(default = "default_vocab_max")]
    pub vocab_max: usize,
    pub model: PretrainModel,
}

fn default_pretrain_epochs() -> usize {
    3
}
fn default_pretrain_lr() -> f32 {
    1e-3
}
fn default_corpus_lines() -> usize {
    3000
}
fn default_vocab_max() -> usize {
    2048
}

/// Architecture for pretraining; the vocabulary size comes from the built
/// vocab, the head is always language modeling.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainModel {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_tie")]
    pub tie_lm_head: bool,
}

fn default_tie() -> bool {
    true
}

impl PretrainModel {
    pub fn into_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            head: HeadType::LanguageModeling,
            tie_lm_head: self.tie_lm_head,
        }
    }
}

impl RunFile {
    /// Parses TOML (default) or JSON (by extension) and validates what can
    /// be validated without touching referenced files.
    pub fn load(path: &Path) -> Result<RunFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let run: RunFile = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        if let Some(train) = &run.train {
            train.validate()?;
        }
        if let Some(model) = &run.model {
            if let Some(config) = &model.config {
                config.validate()?;
            }
            if model.checkpoint.is_none() && model.config.is_none() {
                return Err(Error::Config(
                    "[model] needs either `checkpoint` or `config`".into(),
                ));
            }
        }
        if let Some(task) = &run.task {
            if let Some(spec) = &task.synthetic {
                spec.spec.validate()?;
            }
        }
        Ok(run)
    }

    pub fn output_dir(&self, cli_override: Option<&Path>) -> PathBuf {
        cli_override
            .map(|p| p.to_path_buf())
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn task_section(&self) -> Result<&TaskSection> {
        self.task
            .as_ref()
            .ok_or_else(|| Error::Config("run file is missing the [task] section".into()))
    }

    pub fn resolve_task(&self) -> Result<(String, TaskDef)> {
        let section = self.task_section()?;
        let task = resolve_task(&section.id, section.registry.as_deref())?;
        Ok((section.id.clone(), task))
    }

    /// Loads file-backed data if paths are given, otherwise generates the
    /// synthetic dataset.
    pub fn load_dataset(&self, task: &TaskDef) -> Result<TaskDataset> {
        let section = self.task_section()?;
        match (&section.train_data, &section.test_data) {
            (Some(train), Some(test)) => {
                let fmt = |p: &Path| match section.format {
                    Some(f) => Ok(f),
                    None => DataFormat::infer(p),
                };
                Ok(TaskDataset {
                    train: load_dataset(train, fmt(train)?, &task.label_words)?,
                    test: load_dataset(test, fmt(test)?, &task.label_words)?,
                })
            }
            (None, None) => {
                let synth = section.synthetic.as_ref().ok_or_else(|| {
                    Error::Config(
                        "task needs either train_data/test_data paths or a [task.synthetic] block"
                            .into(),
                    )
                })?;
                if synth.spec.class_count != task.num_classes() {
                    return Err(Error::Config(format!(
                        "synthetic class_count {} does not match task {:?} with {} labels",
                        synth.spec.class_count,
                        section.id,
                        task.num_classes()
                    )));
                }
                generate_synthetic_task(synth.seed, &synth.spec, synth.train_pool, synth.test_pool)
            }
            _ => Err(Error::Config(
                "train_data and test_data must be given together".into(),
            )),
        }
    }

    pub fn load_vocab(&self) -> Result<Vocab> {
        let section = self.task_section()?;
        let path = section.vocab.as_ref().ok_or_else(|| {
            Error::Config("task.vocab is required when loading a checkpointed model".into())
        })?;
        Vocab::load(path)
    }

    pub fn load_model(&self) -> Result<TransformerModel> {
        let section = self
            .model
            .as_ref()
            .ok_or_else(|| Error::Config("run file is missing the [model] section".into()))?;
        if let Some(path) = &section.checkpoint {
            checkpoint::load(path)
        } else {
            let config = section.config.clone().expect("validated on load");
            TransformerModel::init(config, self.train.as_ref().map(|t| t.seed).unwrap_or(0))
        }
    }

    pub fn split_sizes(&self) -> SplitSizes {
        self.split.unwrap_or_default()
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone().unwrap_or_default()
    }

    /// Worker count for grid cells: runfile `parallelism`, capped by the
    /// LAYERSLIM_THREADS environment variable.
    pub fn effective_parallelism(&self) -> usize {
        let configured = self.parallelism.unwrap_or(1).max(1);
        match std::env::var("LAYERSLIM_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
        {
            Some(cap) if cap >= 1 => configured.min(cap),
            _ => configured,
        }
    }
}
