//! Subcommand implementations.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use serde_json::json;

use layerslim_core::checkpoint;
use layerslim_core::data::synthetic_corpus;
use layerslim_core::experiment::{
    emit_plot_data, parse_results_csv, render_results_csv, render_table, run_grid,
};
use layerslim_core::model::{ModelConfig, TransformerModel};
use layerslim_core::prompting::Verbalizer;
use layerslim_core::surgery::{count_params_model, drop_top_layers, reduction_percent};
use layerslim_core::training::{evaluate_accuracy, finetune as finetune_run, pretrain_lm, TaskContext};
use layerslim_core::vocab::{tokenize, Vocab};
use layerslim_core::{Error, Result};

use crate::log_event;
use crate::runfile::RunFile;

const OK: ExitCode = ExitCode::SUCCESS;

pub fn pretrain(run_path: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let run = RunFile::load(run_path)?;
    let section = run
        .pretrain
        .as_ref()
        .ok_or_else(|| Error::Config("run file is missing the [pretrain] section".into()))?;
    let (task_id, task) = run.resolve_task()?;
    let out_dir = run.output_dir(out);
    std::fs::create_dir_all(&out_dir)?;

    let corpus: Vec<String> = match &section.corpus {
        Some(path) => std::fs::read_to_string(path)?
            .lines()
            .map(|l| l.to_string())
            .collect(),
        None => {
            let synth = run
                .task_section()?
                .synthetic
                .as_ref()
                .ok_or_else(|| {
                    Error::Config("pretraining without a corpus file needs [task.synthetic]".into())
                })?;
            synthetic_corpus(
                section.seed,
                &synth.spec,
                &task,
                section.corpus_lines,
                section.model.max_seq_len,
            )?
        }
    };

    // Template words and label words are forced into the vocabulary; the
    // verbalizer check below makes label coverage a startup error.
    let mut forced: Vec<String> = tokenize(&task.template.input_prefix);
    forced.extend(tokenize(&task.template.answer_prefix));
    forced.extend(task.label_words.iter().cloned());
    let forced_refs: Vec<&str> = forced.iter().map(|s| s.as_str()).collect();
    let vocab = Vocab::build(corpus.iter(), section.vocab_max, &forced_refs)?;
    Verbalizer::new(&task.label_words, &vocab)?;

    let config = section.model.into_config(vocab.len());
    let mut model = TransformerModel::init(config, section.seed)?;
    let params = count_params_model(&model);
    log_event(json!({
        "event": "pretrain-start", "task": task_id, "corpus_lines": corpus.len(),
        "vocab": vocab.len(), "params": params.total_params,
    }));

    let sequences: Vec<Vec<u32>> = corpus.iter().map(|line| vocab.encode(line)).collect();
    let start = Instant::now();
    let losses = pretrain_lm(
        &mut model,
        &sequences,
        section.epochs,
        section.learning_rate,
        section.seed,
    )?;
    for (i, loss) in losses.iter().enumerate() {
        log_event(json!({"event": "pretrain-epoch", "epoch": i + 1, "loss": loss}));
    }

    let ckpt = out_dir.join("model.lslm");
    checkpoint::save(&model, &ckpt)?;
    vocab.save(&out_dir.join("vocab.txt"))?;
    std::fs::write(
        out_dir.join("pretrain_loss.json"),
        serde_json::to_string_pretty(&losses)?,
    )?;
    println!(
        "pretrained {} params on {} sequences in {:.1}s: loss {:.4} -> {:.4}",
        params.humanized_total(),
        sequences.len(),
        start.elapsed().as_secs_f64(),
        losses.first().copied().unwrap_or(f32::NAN),
        losses.last().copied().unwrap_or(f32::NAN),
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(OK)
}

pub fn prune(input: &Path, keep: usize, out: &Path) -> Result<ExitCode> {
    let model = checkpoint::load(input)?;
    if keep == 0 || keep > model.n_layers() {
        return Err(Error::Config(format!(
            "--keep must be in 1..={}, got {keep}",
            model.n_layers()
        )));
    }
    let before = count_params_model(&model);
    let pruned = drop_top_layers(&model, model.n_layers() - keep)?;
    let after = count_params_model(&pruned);
    checkpoint::save(&pruned, out)?;

    let reduction = reduction_percent(&before, &after);
    log_event(json!({
        "event": "prune", "kept_layers": keep, "dropped": model.n_layers() - keep,
        "params_before": before.total_params, "params_after": after.total_params,
        "reduction_percent": reduction,
    }));
    println!("before: {}", serde_json::to_string(&before)?);
    println!("after:  {}", serde_json::to_string(&after)?);
    println!(
        "kept {keep} of {} layers: {} -> {} params (~{reduction:.0}% reduction)",
        model.n_layers(),
        before.humanized_total(),
        after.humanized_total(),
    );
    Ok(OK)
}

pub fn finetune(run_path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<ExitCode> {
    let run = RunFile::load(run_path)?;
    let (task_id, task) = run.resolve_task()?;
    let vocab = run.load_vocab()?;
    let dataset = run.load_dataset(&task)?;
    let model = run.load_model()?;
    let mut config = run.train_config();
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let model = if config.paradigm.uses_lm_head() {
        model
    } else {
        model.with_classification_head(task.num_classes())?
    };
    let split = layerslim_core::data::sample_few_shot(
        &dataset,
        config.seed,
        task.num_classes(),
        run.split_sizes(),
    )?;
    log_event(json!({
        "event": "finetune-start", "task": task_id, "paradigm": config.paradigm.name(),
        "seed": config.seed, "layers": model.n_layers(),
    }));
    let start = Instant::now();
    let (best, history) = finetune_run(&model, &split, &task, &vocab, &config)?;
    let ctx = TaskContext::new(&task, &vocab, &split.demonstrations)?;
    let test_acc = evaluate_accuracy(&best, &ctx, &split.test, config.paradigm)?;

    let out_dir = run.output_dir(out);
    std::fs::create_dir_all(&out_dir)?;
    checkpoint::save(&best, &out_dir.join("finetuned.lslm"))?;
    std::fs::write(
        out_dir.join("history.json"),
        serde_json::to_string_pretty(&history)?,
    )?;
    log_event(json!({
        "event": "finetune-done", "epochs": history.epochs_run(),
        "best_epoch": history.best_epoch, "best_val_accuracy": history.best_val_accuracy,
        "test_accuracy": test_acc, "seconds": start.elapsed().as_secs_f64(),
    }));
    println!(
        "fine-tuned {} layers ({}) seed {}: val {:.4} @ epoch {}, test {:.4}",
        best.n_layers(),
        config.paradigm.name(),
        config.seed,
        history.best_val_accuracy,
        history.best_epoch,
        test_acc
    );
    Ok(OK)
}

pub fn evaluate(run_path: &Path, checkpoint_override: Option<&Path>) -> Result<ExitCode> {
    let run = RunFile::load(run_path)?;
    let (task_id, task) = run.resolve_task()?;
    let vocab = run.load_vocab()?;
    let dataset = run.load_dataset(&task)?;
    let model = match checkpoint_override {
        Some(path) => checkpoint::load(path)?,
        None => run.load_model()?,
    };
    let config = run.train_config();
    let split = layerslim_core::data::sample_few_shot(
        &dataset,
        config.seed,
        task.num_classes(),
        run.split_sizes(),
    )?;
    let ctx = TaskContext::new(&task, &vocab, &split.demonstrations)?;
    let accuracy = evaluate_accuracy(&model, &ctx, &split.test, config.paradigm)?;
    log_event(json!({
        "event": "evaluate", "task": task_id, "paradigm": config.paradigm.name(),
        "seed": config.seed, "test_examples": split.test.len(), "accuracy": accuracy,
    }));
    println!("test accuracy: {accuracy:.4} ({} examples)", split.test.len());
    Ok(OK)
}

pub fn grid(run_path: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let run = RunFile::load(run_path)?;
    let grid = run
        .grid
        .clone()
        .ok_or_else(|| Error::Config("run file is missing the [grid] section".into()))?;
    let (task_id, task) = run.resolve_task()?;
    let vocab = run.load_vocab()?;
    let dataset = run.load_dataset(&task)?;
    let model = run.load_model()?;
    let parallelism = run.effective_parallelism();
    log_event(json!({
        "event": "grid-start", "task": task_id, "layers": grid.layer_counts,
        "paradigms": grid.paradigms.iter().map(|p| p.name()).collect::<Vec<_>>(),
        "seeds": grid.seeds, "parallelism": parallelism,
    }));
    let start = Instant::now();
    let result = run_grid(
        &model,
        &task_id,
        &task,
        &vocab,
        &dataset,
        &grid,
        &run.train_config(),
        run.split_sizes(),
        parallelism,
    )?;

    let out_dir = run.output_dir(out);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("results.csv"), render_results_csv(&result))?;
    std::fs::write(out_dir.join("table.md"), render_table(&result))?;
    std::fs::write(out_dir.join("plot.tsv"), emit_plot_data(&result)?)?;
    for cell in &result.cells {
        if let Some(history) = &cell.history {
            let name = format!(
                "history_l{}_{}_seed{}.json",
                cell.layer_count,
                cell.paradigm.name(),
                cell.seed
            );
            std::fs::write(out_dir.join(name), serde_json::to_string_pretty(history)?)?;
        }
        log_event(json!({
            "event": "cell", "layers": cell.layer_count, "paradigm": cell.paradigm.name(),
            "seed": cell.seed, "accuracy": cell.accuracy, "error": cell.error,
        }));
    }

    let failed = result.failed_cells();
    let total = result.cells.len();
    println!("{}", render_table(&result));
    println!(
        "grid: {}/{total} cells ok in {:.1}s -> {}",
        total - failed,
        start.elapsed().as_secs_f64(),
        out_dir.display()
    );
    if failed == total {
        return Ok(ExitCode::from(4));
    }
    Ok(OK)
}

pub fn report(results_dir: &Path) -> Result<ExitCode> {
    let csv_path = results_dir.join("results.csv");
    let text = std::fs::read_to_string(&csv_path)
        .map_err(|e| Error::Config(format!("{}: {e}", csv_path.display())))?;
    let result = parse_results_csv(&text)?;
    std::fs::write(results_dir.join("table.md"), render_table(&result))?;
    std::fs::write(results_dir.join("plot.tsv"), emit_plot_data(&result)?)?;
    println!("{}", render_table(&result));
    Ok(OK)
}

pub fn import(input: &Path, map: &Path, config: &Path, out: &Path) -> Result<ExitCode> {
    let mapping: std::collections::BTreeMap<String, String> =
        serde_json::from_str(&std::fs::read_to_string(map)?)?;
    let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(config)?)?;
    let (model, ignored) = checkpoint::import_external(input, &mapping, config)?;
    for note in &ignored {
        log_event(json!({"event": "import-ignored", "note": note}));
    }
    checkpoint::save(&model, out)?;
    let report = count_params_model(&model);
    println!(
        "imported {} layers / {} params ({} archive tensors ignored) -> {}",
        model.n_layers(),
        report.humanized_total(),
        ignored.len(),
        out.display()
    );
    Ok(OK)
}
