//! Seed-averaged experiment grids over (layer count × paradigm × seed), plus
//! emission of the result table, cell-level CSV, and accuracy-vs-layers plot
//! data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{sample_few_shot, SplitSizes, TaskDataset};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::prompting::TaskDef;
use crate::surgery::{count_params_model, drop_top_layers, humanize_params};
use crate::training::{evaluate_accuracy, finetune, Paradigm, TaskContext, TrainConfig, TrainHistory};
use crate::vocab::Vocab;

/// The five protocol seeds.
pub const DEFAULT_SEEDS: [u64; 5] = [0, 42, 421, 520, 1218];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    /// Layers retained per row, e.g. {48, 24, 12, 2, 1}.
    pub layer_counts: Vec<usize>,
    pub paradigms: Vec<Paradigm>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

impl ExperimentGrid {
    pub fn validate(&self, base_layers: usize) -> Result<()> {
        if self.layer_counts.is_empty() || self.paradigms.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid axes must be non-empty".into()));
        }
        for &l in &self.layer_counts {
            if l == 0 || l > base_layers {
                return Err(Error::Config(format!(
                    "cannot retain {l} layers of a {base_layers}-layer model"
                )));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("grid seeds must be distinct".into()));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<(usize, Paradigm, u64)> {
        let mut out = Vec::new();
        for &layers in &self.layer_counts {
            for &paradigm in &self.paradigms {
                for &seed in &self.seeds {
                    out.push((layers, paradigm, seed));
                }
            }
        }
        out
    }
}

/// One (layer count, paradigm, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub layer_count: usize,
    pub paradigm: Paradigm,
    pub seed: u64,
    /// Test accuracy in [0,1]; `None` when the cell failed.
    pub accuracy: Option<f32>,
    pub params_total: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_accuracy: f32,
    pub stopped_early: bool,
    pub error: Option<String>,
    /// Full per-epoch history; not part of the CSV emission.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub history: Option<TrainHistory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub task: String,
    pub cells: Vec<CellResult>,
}

impl ExperimentResult {
    /// Mean test accuracy over the seeds that succeeded, per
    /// (layer count, paradigm).
    pub fn means(&self) -> BTreeMap<(usize, Paradigm), f32> {
        let mut sums: BTreeMap<(usize, Paradigm), (f64, usize)> = BTreeMap::new();
        for cell in &self.cells {
            if let Some(acc) = cell.accuracy {
                let e = sums.entry((cell.layer_count, cell.paradigm)).or_insert((0.0, 0));
                e.0 += acc as f64;
                e.1 += 1;
            }
        }
        sums.into_iter()
            .map(|(k, (sum, n))| (k, (sum / n as f64) as f32))
            .collect()
    }

    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.accuracy.is_none()).count()
    }

    fn layer_counts_desc(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.cells.iter().map(|c| c.layer_count).collect();
        layers.sort_unstable_by(|a, b| b.cmp(a));
        layers.dedup();
        layers
    }

    fn paradigms_in_plot_order(&self) -> Vec<Paradigm> {
        [Paradigm::PromptLm, Paradigm::PromptCls, Paradigm::VanillaCls]
            .into_iter()
            .filter(|p| self.cells.iter().any(|c| c.paradigm == *p))
            .collect()
    }
}

/// Runs every grid cell: prune → attach the paradigm's head → sample the
/// few-shot split → fine-tune → evaluate on test. Cell failures are
/// recorded, not fatal.
pub fn run_grid(
    base_model: &TransformerModel,
    task_id: &str,
    task: &TaskDef,
    vocab: &Vocab,
    dataset: &TaskDataset,
    grid: &ExperimentGrid,
    train: &TrainConfig,
    sizes: SplitSizes,
    parallelism: usize,
) -> Result<ExperimentResult> {
    grid.validate(base_model.n_layers())?;
    let specs = grid.cells();
    let run_cell = |&(layer_count, paradigm, seed): &(usize, Paradigm, u64)| -> CellResult {
        match run_one_cell(base_model, task, vocab, dataset, train, sizes, layer_count, paradigm, seed)
        {
            Ok(cell) => cell,
            Err(e) => CellResult {
                layer_count,
                paradigm,
                seed,
                accuracy: None,
                params_total: 0,
                best_epoch: 0,
                epochs_run: 0,
                best_val_accuracy: 0.0,
                stopped_early: false,
                error: Some(e.to_string()),
                history: None,
            },
        }
    };

    #[cfg(feature = "parallel")]
    let cells: Vec<CellResult> = if parallelism > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| specs.par_iter().map(run_cell).collect())
    } else {
        specs.iter().map(run_cell).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let cells: Vec<CellResult> = {
        let _ = parallelism;
        specs.iter().map(run_cell).collect()
    };

    Ok(ExperimentResult {
        task: task_id.to_string(),
        cells,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_one_cell(
    base_model: &TransformerModel,
    task: &TaskDef,
    vocab: &Vocab,
    dataset: &TaskDataset,
    train: &TrainConfig,
    sizes: SplitSizes,
    layer_count: usize,
    paradigm: Paradigm,
    seed: u64,
) -> Result<CellResult> {
    let pruned = drop_top_layers(base_model, base_model.n_layers() - layer_count)?;
    let model = if paradigm.uses_lm_head() {
        pruned
    } else {
        pruned.with_classification_head(task.num_classes())?
    };
    let split = sample_few_shot(dataset, seed, task.num_classes(), sizes)?;
    let config = TrainConfig {
        seed,
        paradigm,
        ..train.clone()
    };
    let (best, history) = finetune(&model, &split, task, vocab, &config)?;
    let ctx = TaskContext::new(task, vocab, &split.demonstrations)?;
    let accuracy = evaluate_accuracy(&best, &ctx, &split.test, paradigm)?;
    Ok(CellResult {
        layer_count,
        paradigm,
        seed,
        accuracy: Some(accuracy),
        params_total: count_params_model(&model).total_params,
        best_epoch: history.best_epoch,
        epochs_run: history.epochs_run(),
        best_val_accuracy: history.best_val_accuracy,
        stopped_early: history.stopped_early,
        error: None,
        history: Some(history),
    })
}

// ── emission ──────────────────────────────────────────────────────────

/// Cell-level CSV; the seed-averaged means are recomputable from it.
pub fn render_results_csv(result: &ExperimentResult) -> String {
    let mut out = String::from(
        "task,layers,paradigm,seed,status,accuracy,params,best_epoch,epochs_run,best_val_accuracy,stopped_early,error\n",
    );
    for c in &result.cells {
        let status = if c.accuracy.is_some() { "ok" } else { "failed" };
        let accuracy = c.accuracy.map(|a| a.to_string()).unwrap_or_default();
        let error = c.error.clone().unwrap_or_default().replace(',', ";").replace('\n', " ");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            result.task,
            c.layer_count,
            c.paradigm.name(),
            c.seed,
            status,
            accuracy,
            c.params_total,
            c.best_epoch,
            c.epochs_run,
            c.best_val_accuracy,
            c.stopped_early,
            error
        ));
    }
    out
}

/// Rebuilds a result from its cell-level CSV (used by the report command).
pub fn parse_results_csv(text: &str) -> Result<ExperimentResult> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let mut task = String::new();
    let mut cells = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let rec = record.map_err(|e| Error::Data(format!("results.csv line {}: {e}", i + 2)))?;
        let field = |j: usize| -> Result<&str> {
            rec.get(j)
                .ok_or_else(|| Error::Data(format!("results.csv line {}: missing column {j}", i + 2)))
        };
        let parse_err = |what: &str| Error::Data(format!("results.csv line {}: bad {what}", i + 2));
        task = field(0)?.to_string();
        let status = field(4)?;
        cells.push(CellResult {
            layer_count: field(1)?.parse().map_err(|_| parse_err("layers"))?,
            paradigm: field(2)?.parse()?,
            seed: field(3)?.parse().map_err(|_| parse_err("seed"))?,
            accuracy: if status == "ok" {
                Some(field(5)?.parse().map_err(|_| parse_err("accuracy"))?)
            } else {
                None
            },
            params_total: field(6)?.parse().map_err(|_| parse_err("params"))?,
            best_epoch: field(7)?.parse().map_err(|_| parse_err("best_epoch"))?,
            epochs_run: field(8)?.parse().map_err(|_| parse_err("epochs_run"))?,
            best_val_accuracy: field(9)?.parse().map_err(|_| parse_err("best_val_accuracy"))?,
            stopped_early: field(10)?.parse().map_err(|_| parse_err("stopped_early"))?,
            error: match field(11)? {
                "" => None,
                e => Some(e.to_string()),
            },
            history: None,
        });
    }
    if cells.is_empty() {
        return Err(Error::Data("results.csv contains no cells".into()));
    }
    Ok(ExperimentResult { task, cells })
}

/// Markdown result tables, one per paradigm: rows sorted by descending layer
/// count, accuracies in percent with two decimals, humanized Param column.
/// Rows averaged over fewer seeds than requested are marked with `*`.
pub fn render_table(result: &ExperimentResult) -> String {
    let means = result.means();
    let mut out = format!("# Results: {}\n", result.task);
    for paradigm in result.paradigms_in_plot_order() {
        out.push_str(&format!("\n## {}\n\n", paradigm.name()));
        out.push_str(&format!("| n | Param | {} | Average |\n", result.task));
        out.push_str("|--:|------:|------:|--------:|\n");
        for layers in result.layer_counts_desc() {
            let cells: Vec<&CellResult> = result
                .cells
                .iter()
                .filter(|c| c.layer_count == layers && c.paradigm == paradigm)
                .collect();
            if cells.is_empty() {
                continue;
            }
            let params = cells.iter().map(|c| c.params_total).max().unwrap_or(0);
            let ok = cells.iter().filter(|c| c.accuracy.is_some()).count();
            let acc = means
                .get(&(layers, paradigm))
                .map(|m| format!("{:.2}{}", m * 100.0, if ok < cells.len() { "*" } else { "" }))
                .unwrap_or_else(|| "failed".to_string());
            out.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                layers,
                humanize_params(params),
                acc,
                acc
            ));
        }
    }
    out
}

/// Plot series in TSV: x = layer count (ascending), one column per paradigm
/// labeled as in the accuracy-vs-layers figure (LM, P-CLS, CLS), y = mean
/// accuracy in percent.
pub fn emit_plot_data(result: &ExperimentResult) -> Result<String> {
    let paradigms = result.paradigms_in_plot_order();
    if paradigms.is_empty() {
        return Err(Error::Config("no paradigm series to plot".into()));
    }
    let means = result.means();
    let mut layers = result.layer_counts_desc();
    layers.reverse();
    let mut out = String::from("layers");
    for p in &paradigms {
        out.push('\t');
        out.push_str(p.plot_label());
    }
    out.push('\n');
    for l in layers {
        out.push_str(&l.to_string());
        for p in &paradigms {
            out.push('\t');
            match means.get(&(l, *p)) {
                Some(m) => out.push_str(&(m * 100.0).to_string()),
                None => out.push_str("NA"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}
