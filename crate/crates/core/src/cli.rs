//! Command implementations behind the `comve` binary.
//!
//! Exit codes: 0 success, 1 selfcheck failure, 2 usage/config/input error,
//! 3 numeric failure during training or evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint::{self, CheckpointHeader, TemplateRecord};
use crate::config::{DataSource, RunConfig};
use crate::dataset::{
    generate_synthetic, load_explanation_csv, load_validation_csv, option_letter,
    read_explanation_data, read_validation_data, write_explanation_csv, write_predictions_csv,
    write_validation_csv, SyntheticSpec, TemplateSpec,
};
use crate::error::{Error, Result};
use crate::model::{Example, HeadKind, Model, Task, TaskFormat};
use crate::report::{
    build_report, fallacy_rate, labels_from_choice, AblationRow, ReportHead, SentenceLabel,
    REFERENCE_A, REFERENCE_B,
};
use crate::selfcheck;
use crate::tokenizer::Vocab;
use crate::training::{accuracy, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SELFCHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable holding the log filter (`error`, `info`, `debug`…).
pub const LOG_ENV: &str = "COMVE_LOG";

#[derive(Debug, Parser)]
#[command(name = "comve", version, about = "Siamese candidate scoring for commonsense validation and explanation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a TOML run configuration.
    Train(TrainArgs),
    /// Score a labelled dataset with a checkpoint.
    Eval(EvalArgs),
    /// Write predictions for an unlabelled dataset.
    Predict(PredictArgs),
    /// Run the built-in gradient, invariant and optimizer checks.
    Selfcheck,
    /// Write a synthetic corpus for both tasks as CSV files.
    GenSynthetic(GenArgs),
    /// Evaluate several checkpoints and tabulate them next to published numbers.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub answers: PathBuf,
    /// Defaults to `predictions.csv` next to the checkpoint.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = SyntheticSpec::default().categories)]
    pub categories: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().objects_per_category)]
    pub objects_per_category: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub answers: PathBuf,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Add the published dev accuracies as a reference column.
    #[arg(long)]
    pub reference: bool,
    #[arg(required = true)]
    pub checkpoints: Vec<PathBuf>,
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| EXIT_OK),
        Command::Eval(a) => cmd_eval(&a).map(|_| EXIT_OK),
        Command::Predict(a) => cmd_predict(&a).map(|_| EXIT_OK),
        Command::Selfcheck => Ok(cmd_selfcheck()),
        Command::GenSynthetic(a) => cmd_gen_synthetic(&a).map(|_| EXIT_OK),
        Command::Report(a) => cmd_report(&a).map(|_| EXIT_OK),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}

pub fn load_examples(task: Task, data: &Path, answers: &Path) -> Result<Vec<Example>> {
    Ok(match task {
        Task::A => load_validation_csv(data, answers)?
            .into_iter()
            .map(Example::Validation)
            .collect(),
        Task::B => load_explanation_csv(data, answers)?
            .into_iter()
            .map(Example::Explanation)
            .collect(),
    })
}

fn read_unlabelled(task: Task, data: &Path) -> Result<Vec<Example>> {
    Ok(match task {
        Task::A => read_validation_data(data)?
            .into_iter()
            .map(Example::Validation)
            .collect(),
        Task::B => read_explanation_data(data)?
            .into_iter()
            .map(Example::Explanation)
            .collect(),
    })
}

fn write_examples(examples: &[Example], data: &Path, answers: &Path) -> Result<()> {
    let mut validation = Vec::new();
    let mut explanation = Vec::new();
    for e in examples {
        match e {
            Example::Validation(v) => validation.push(v.clone()),
            Example::Explanation(x) => explanation.push(x.clone()),
        }
    }
    if explanation.is_empty() {
        write_validation_csv(&validation, data, answers)
    } else {
        write_explanation_csv(&explanation, data, answers)
    }
}

fn example_texts(examples: &[Example]) -> Vec<&str> {
    let mut out = Vec::new();
    for e in examples {
        match e {
            Example::Validation(v) => out.extend(v.sentences()),
            Example::Explanation(x) => {
                out.push(x.false_sent.as_str());
                out.extend(x.options.iter().map(String::as_str));
            }
        }
    }
    out
}

/// Template text with its `{slot}` markers removed.
fn template_words(pattern: &str) -> String {
    let mut out = String::new();
    let mut depth = 0;
    for c in pattern.chars() {
        match c {
            '{' => depth += 1,
            '}' => depth -= 1,
            _ if depth == 0 => out.push(c),
            _ => {}
        }
    }
    out
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train and dev examples for a run; synthetic splits are also written to
/// `<output_dir>/data/` so they can be evaluated later.
fn run_data(cfg: &RunConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    match &cfg.data {
        DataSource::Files {
            train_data,
            train_answers,
            dev_data,
            dev_answers,
        } => Ok((
            load_examples(cfg.task, train_data, train_answers)?,
            load_examples(cfg.task, dev_data, dev_answers)?,
        )),
        DataSource::Synthetic(s) => {
            let split = |seed: u64, n: usize| -> Result<Vec<Example>> {
                let c = generate_synthetic(seed, n, s.spec())?;
                Ok(match cfg.task {
                    Task::A => c.validation.into_iter().map(Example::Validation).collect(),
                    Task::B => c.explanation.into_iter().map(Example::Explanation).collect(),
                })
            };
            let train = split(s.seed, s.train)?;
            let dev = split(s.seed.wrapping_add(1), s.dev)?;
            let dir = cfg.output_dir.join("data");
            create_dir(&dir)?;
            write_examples(&train, &dir.join("train_data.csv"), &dir.join("train_answers.csv"))?;
            write_examples(&dev, &dir.join("dev_data.csv"), &dir.join("dev_answers.csv"))?;
            Ok((train, dev))
        }
    }
}

/// What `train` produced.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub best_dev_accuracy: f64,
    pub final_dev_accuracy: f64,
    pub log: String,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

pub const TRAIN_LOG_HEADER: &str = "epoch\ttrain_loss\ttrain_acc\tdev_acc";

/// Trains per `cfg`, writing `best.ckpt` (highest dev accuracy, earliest
/// epoch on ties), `final.ckpt`, `vocab.txt` and `train.log` into the
/// output directory.
pub fn train_run(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (train, dev) = run_data(cfg)?;
    create_dir(&cfg.output_dir)?;

    let mut corpus: Vec<String> = example_texts(&train).into_iter().map(String::from).collect();
    if let Some(t) = &cfg.template {
        corpus.push(template_words(&t.pattern));
    }
    let vocab = Vocab::build(&corpus, cfg.encoder.max_vocab_size)?;
    vocab.save(&cfg.output_dir.join("vocab.txt"))?;

    let format = cfg.format();
    let train_p = format.prepare_all(&vocab, &train)?;
    let dev_p = format.prepare_all(&vocab, &dev)?;
    let enc_cfg = cfg.encoder.encoder_config(vocab.len());
    let model = Model::new(enc_cfg, cfg.head, cfg.train.seed)?;
    info!(
        "task {:?}, head {:?}, {} train / {} dev examples, vocab {}, {} parameters",
        cfg.task,
        cfg.head,
        train_p.len(),
        dev_p.len(),
        vocab.len(),
        model.store.num_scalars()
    );
    let mut trainer = Trainer::new(model, cfg.train)?;

    let header = |epoch: usize, dev_accuracy: f64| CheckpointHeader {
        encoder: enc_cfg,
        head: cfg.head,
        task: cfg.task,
        template: cfg.template.as_ref().map(|t| TemplateRecord {
            name: t.name.clone(),
            pattern: t.pattern.clone(),
        }),
        vocab: vocab.tokens().to_vec(),
        epoch,
        dev_accuracy: Some(dev_accuracy),
    };
    let best_path = cfg.output_dir.join("best.ckpt");
    let final_path = cfg.output_dir.join("final.ckpt");

    let mut log = format!("{TRAIN_LOG_HEADER}\n");
    let mut best = f64::NEG_INFINITY;
    let mut last = 0.0;
    for epoch in 1..=cfg.train.epochs {
        let m = trainer.train_epoch(&train_p)?;
        let dev_acc = crate::training::evaluate(&trainer.model, &dev_p).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("dev evaluation after epoch {epoch}: {msg}")),
            other => other,
        })?;
        let line = format!(
            "{epoch}\t{:.6}\t{:.6}\t{:.6}",
            m.mean_loss, m.train_accuracy, dev_acc
        );
        info!("{line}");
        log.push_str(&line);
        log.push('\n');
        if dev_acc > best {
            best = dev_acc;
            checkpoint::save(&best_path, &header(epoch, dev_acc), &trainer.model)?;
        }
        last = dev_acc;
    }
    checkpoint::save(&final_path, &header(cfg.train.epochs, last), &trainer.model)?;
    write_file(&cfg.output_dir.join("train.log"), &log)?;
    Ok(TrainOutcome {
        best_dev_accuracy: best,
        final_dev_accuracy: last,
        log,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
    })
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutcome> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = &a.output_dir {
        cfg.output_dir = dir.clone();
    }
    let out = train_run(&cfg)?;
    println!("best dev accuracy: {:.6}", out.best_dev_accuracy);
    println!("final dev accuracy: {:.6}", out.final_dev_accuracy);
    println!("checkpoint: {}", out.best_checkpoint.display());
    Ok(out)
}

/// Format and vocabulary a checkpoint was trained with.
pub fn checkpoint_format(header: &CheckpointHeader) -> Result<(TaskFormat, Vocab)> {
    let template = header
        .template
        .as_ref()
        .map(|t| TemplateSpec::new(t.name.clone(), t.pattern.clone()))
        .transpose()?;
    let format = TaskFormat {
        task: header.task,
        head: header.head,
        template,
        max_len: header.encoder.max_sequence_length,
    };
    format.validate()?;
    Ok((format, Vocab::from_tokens(header.vocab.clone())?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    /// `None` when the data has no gold labels.
    pub accuracy: Option<f64>,
    /// Validation task only.
    pub fallacy_rate: Option<f64>,
    /// `(id, predicted_label)` rows, labels as written to CSV.
    pub predictions: Vec<(String, String)>,
}

/// Per-sentence labels implied by one validation prediction.
///
/// A binary input that supports option `j` is a judgement on sentence
/// `1 − j` (vanilla: "Sᵢ makes sense"; phrase: "Sᵢ makes more sense than
/// Sⱼ"), so its hard class becomes that sentence's label.
fn sentence_labels(
    head: HeadKind,
    id: &str,
    supports: &[usize],
    predicted: usize,
    input_labels: &[usize],
) -> Vec<SentenceLabel> {
    match head {
        HeadKind::Siamese => labels_from_choice(id, predicted).to_vec(),
        HeadKind::Binary => supports
            .iter()
            .zip(input_labels)
            .map(|(&s, &l)| SentenceLabel::new(id, 1 - s, l))
            .collect(),
    }
}

pub fn evaluate_examples(
    header: &CheckpointHeader,
    model: &Model,
    examples: &[Example],
    labelled: bool,
) -> Result<EvalOutcome> {
    if examples.is_empty() {
        return Err(Error::Input("no examples to evaluate".into()));
    }
    let (format, vocab) = checkpoint_format(header)?;
    let prepared = format.prepare_all(&vocab, examples)?;
    let mut predicted = Vec::with_capacity(prepared.len());
    let mut gold = Vec::with_capacity(prepared.len());
    let mut labels = Vec::new();
    let mut rows = Vec::with_capacity(prepared.len());
    for p in &prepared {
        let pred = model.predict(p)?;
        predicted.push(pred.predicted_index);
        gold.push(p.gold);
        if header.task == Task::A {
            labels.extend(sentence_labels(
                header.head,
                &p.id,
                &p.supports,
                pred.predicted_index,
                &pred.input_labels,
            ));
        }
        let label = match header.task {
            Task::A => pred.predicted_index.to_string(),
            Task::B => option_letter(pred.predicted_index).to_string(),
        };
        rows.push((p.id.clone(), label));
    }
    Ok(EvalOutcome {
        accuracy: if labelled {
            Some(accuracy(&predicted, &gold)?)
        } else {
            None
        },
        fallacy_rate: match header.task {
            Task::A => Some(fallacy_rate(&labels)?),
            Task::B => None,
        },
        predictions: rows,
    })
}

fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Model)> {
    checkpoint::load(path).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalOutcome> {
    let (header, model) = load_checkpoint(&a.checkpoint)?;
    let examples = load_examples(header.task, &a.data, &a.answers)?;
    let out = evaluate_examples(&header, &model, &examples, true)?;
    let pred_path = a.predictions.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("predictions.csv")
    });
    write_predictions_csv(&pred_path, &out.predictions)?;
    println!("examples: {}", examples.len());
    if let Some(acc) = out.accuracy {
        println!("accuracy: {acc:.6}");
    }
    if let Some(f) = out.fallacy_rate {
        println!("fallacy_rate: {f:.6}");
    }
    println!("predictions: {}", pred_path.display());
    Ok(out)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<EvalOutcome> {
    let (header, model) = load_checkpoint(&a.checkpoint)?;
    let examples = read_unlabelled(header.task, &a.data)?;
    let out = evaluate_examples(&header, &model, &examples, false)?;
    write_predictions_csv(&a.output, &out.predictions)?;
    println!("examples: {}", examples.len());
    println!("predictions: {}", a.output.display());
    Ok(out)
}

pub fn cmd_selfcheck() -> i32 {
    let results = selfcheck::run_all();
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("all {} checks passed", results.len());
        EXIT_OK
    } else {
        println!("{failed} of {} checks failed", results.len());
        EXIT_SELFCHECK
    }
}

pub fn cmd_gen_synthetic(a: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        categories: a.categories,
        objects_per_category: a.objects_per_category,
    };
    let corpus = generate_synthetic(a.seed, a.count, spec)?;
    create_dir(&a.out_dir)?;
    write_validation_csv(
        &corpus.validation,
        &a.out_dir.join("subtaskA_data.csv"),
        &a.out_dir.join("subtaskA_answers.csv"),
    )?;
    write_explanation_csv(
        &corpus.explanation,
        &a.out_dir.join("subtaskB_data.csv"),
        &a.out_dir.join("subtaskB_answers.csv"),
    )?;
    println!("wrote {} examples per task to {}", a.count, a.out_dir.display());
    Ok(())
}

fn run_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(dir) => format!("{}/{stem}", dir.to_string_lossy()),
        None => stem,
    }
}

pub fn cmd_report(a: &ReportArgs) -> Result<String> {
    let mut rows = Vec::with_capacity(a.checkpoints.len());
    let mut task = None;
    for path in &a.checkpoints {
        let (header, model) = load_checkpoint(path)?;
        if task.is_some_and(|t| t != header.task) {
            return Err(Error::Config(format!(
                "{} was trained on a different task than the other checkpoints",
                path.display()
            )));
        }
        task = Some(header.task);
        let examples = load_examples(header.task, &a.data, &a.answers)?;
        let out = evaluate_examples(&header, &model, &examples, true)?;
        rows.push(AblationRow {
            model_name: run_name(path),
            head_kind: match (header.head, &header.template) {
                (HeadKind::Siamese, _) => ReportHead::Siamese,
                (HeadKind::Binary, None) => ReportHead::Binary,
                (HeadKind::Binary, Some(_)) => ReportHead::BinaryPhrase,
            },
            pooling: header.encoder.pooling,
            dev_accuracy: out.accuracy.unwrap_or(0.0),
            fallacy_rate: out.fallacy_rate,
        });
    }
    let reference = match (a.reference, task) {
        (true, Some(Task::A)) => Some(&REFERENCE_A[..]),
        (true, Some(Task::B)) => Some(&REFERENCE_B[..]),
        _ => None,
    };
    let report = build_report(&rows, reference)?;
    print!("{}", report.text);
    if let Some(csv) = &a.csv {
        write_file(csv, &report.csv)?;
    }
    Ok(report.text)
}
