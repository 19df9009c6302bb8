//! Command implementations behind the `doclm` binary:
//! `synth | train | eval | predict | repl`.
//!
//! Exit codes are part of the contract: 0 success, 1 validation failure,
//! 2 runtime failure.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::checkpoint;
use crate::config::{ConfigError, RunConfig, SplitPaths};
use crate::data::{
    load_alpaca_like, load_document_file, load_docvqa_like, load_funsd_like, load_rvlcdip_like,
    synth_generate, to_task_samples, derive_class_labels, derive_entity_labels, ByteCodec,
    DataError, Document, LoadReport, SynthManifest, SyntheticSpec,
};
use crate::metrics::EvalReport;
use crate::model::{ModelBundle, ModelError};
use crate::prompts::{
    parse_classification_output, parse_extraction_output, render_prompt, TaskFields, TaskKind,
};
use crate::train::{self, EvalData, TrainData, TrainError, TrainState};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<checkpoint::CheckpointError> for CliError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::EmptyData => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "doclm",
    about = "Layout-aware document understanding with a fused causal language model",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a deterministic synthetic corpus with a manifest
    Synth(SynthArgs),
    /// Train a model from a config file, checkpointing every epoch
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data split and print the metric table
    Eval(EvalArgs),
    /// Answer one task for one document
    Predict(PredictArgs),
    /// Interactive question loop over one document
    Repl(ReplArgs),
}

/// Flat overrides applied on top of the config file. Every flag here mirrors
/// one config field.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Override train.seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override train.epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override train.batch_size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Override train.lr_peak
    #[arg(long)]
    pub lr_peak: Option<f64>,
    /// Override train.max_steps (caps total optimizer steps)
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Override out_dir
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Override train.freeze_encoder
    #[arg(long)]
    pub freeze_encoder: Option<bool>,
    /// Override train.eval_every (epochs between validation runs; 0 disables)
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Override train.loss_on_prompt (also score prompt tokens)
    #[arg(long)]
    pub loss_on_prompt: Option<bool>,
    /// Override train.max_new_tokens (generation budget per sample)
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

/// Long flags accepted as config overrides; the help text must list each.
pub const OVERRIDE_FLAGS: [&str; 10] = [
    "--seed",
    "--epochs",
    "--batch-size",
    "--lr-peak",
    "--max-steps",
    "--out-dir",
    "--freeze-encoder",
    "--eval-every",
    "--loss-on-prompt",
    "--max-new-tokens",
];

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr_peak {
            t.lr_peak = v;
        }
        if let Some(v) = self.max_steps {
            t.max_steps = Some(v);
        }
        if let Some(v) = self.freeze_encoder {
            t.freeze_encoder = v;
        }
        if let Some(v) = self.eval_every {
            t.eval_every = v;
        }
        if let Some(v) = self.loss_on_prompt {
            t.loss_on_prompt = v;
        }
        if let Some(v) = self.max_new_tokens {
            t.max_new_tokens = v;
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output corpus directory
    #[arg(long)]
    pub out: PathBuf,
    /// Training documents to generate
    #[arg(long, default_value_t = 32)]
    pub docs: usize,
    /// Number of document classes
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Corpus seed; fully determines the output
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Extra held-out documents written to a separate split
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    /// Layout grid side (multiple of 4)
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
    /// Rendered page image side in pixels
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    /// Distractor words per document
    #[arg(long, default_value_t = 6)]
    pub distractors: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration file (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Resume from a checkpoint written by a previous run
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run configuration file (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to evaluate
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Data split to score: train, val, or test
    #[arg(long)]
    pub split: String,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PredictTask {
    Classification,
    Extraction,
    Docqa,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Run configuration file (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to load
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Document file (JSON lines, any documented document schema)
    #[arg(long)]
    pub doc: PathBuf,
    /// Task to perform
    #[arg(long, value_enum)]
    pub task: PredictTask,
    /// Question text (document QA only)
    #[arg(long)]
    pub question: Option<String>,
    /// Document id inside the file; defaults to the first record
    #[arg(long)]
    pub record: Option<String>,
    /// Comma-separated label set; derived from the file when omitted
    #[arg(long)]
    pub labels: Option<String>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct ReplArgs {
    /// Run configuration file (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to load
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Document file (JSON lines)
    #[arg(long)]
    pub doc: PathBuf,
    /// Document id inside the file; defaults to the first record
    #[arg(long)]
    pub record: Option<String>,
    #[command(flatten)]
    pub overrides: Overrides,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Repl(a) => {
            let stdin = std::io::stdin();
            let mut input = stdin.lock();
            let mut out = std::io::stdout();
            cmd_repl(&a, &mut input, &mut out)
        }
    }
}

// ── synth ────────────────────────────────────────────────────────────

fn image_record(doc: &Document) -> serde_json::Value {
    let img = doc.image.as_ref().expect("synthetic docs carry an image");
    let gray: Vec<u16> = img
        .pixels
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u16)
        .collect();
    json!({"h": img.h, "w": img.w, "gray": gray})
}

/// One JSONL record in the documented schema for the given task family.
fn document_record(doc: &Document, kind: TaskKind) -> serde_json::Value {
    let words: Vec<&str> = doc.words.iter().map(|w| w.text.as_str()).collect();
    let boxes: Vec<[f64; 4]> = doc.words.iter().map(|w| w.box_px).collect();
    let mut rec = json!({
        "id": doc.id,
        "page_size": [doc.page_size.0, doc.page_size.1],
        "words": words,
        "boxes": boxes,
        "image": image_record(doc),
    });
    let obj = rec.as_object_mut().expect("record is an object");
    match kind {
        TaskKind::Classification => {
            obj.insert("label".into(), json!(doc.annotations.label));
        }
        TaskKind::Extraction => {
            let entities: Vec<_> = doc
                .annotations
                .entities
                .iter()
                .map(|(t, l)| json!({"text": t, "label": l}))
                .collect();
            obj.insert("entities".into(), json!(entities));
        }
        TaskKind::DocQa => {
            let qas: Vec<_> = doc
                .annotations
                .qas
                .iter()
                .map(|qa| json!({"question": qa.question, "answers": qa.answers}))
                .collect();
            obj.insert("qas".into(), json!(qas));
        }
        TaskKind::NlpInstruction => unreachable!("instruction records are not documents"),
    }
    rec
}

fn write_corpus_split(dir: &Path, docs: &[Document]) -> Result<Vec<(String, String)>, CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for (name, kind) in [
        ("classification.jsonl", TaskKind::Classification),
        ("extraction.jsonl", TaskKind::Extraction),
        ("docqa.jsonl", TaskKind::DocQa),
    ] {
        let path = dir.join(name);
        let mut body = String::new();
        for doc in docs {
            body.push_str(&document_record(doc, kind).to_string());
            body.push('\n');
        }
        fs::write(&path, body)
            .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))?;
        files.push((name.to_string(), path.display().to_string()));
    }
    Ok(files)
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        n_docs: a.docs,
        n_classes: a.classes,
        seed: a.seed,
        grid: a.grid,
        image_size: a.image_size,
        n_distractors: a.distractors,
        ..SyntheticSpec::default()
    };
    let docs = synth_generate(&spec)?;
    let mut manifest = SynthManifest::for_corpus(&spec, &docs);
    for (name, path) in write_corpus_split(&a.out.join("train"), &docs)? {
        manifest.files.insert(format!("train/{name}"), path);
    }
    if a.holdout > 0 {
        let hold_spec = SyntheticSpec {
            n_docs: a.holdout,
            start_index: a.docs,
            ..spec.clone()
        };
        let hold_docs = synth_generate(&hold_spec)?;
        for (name, path) in write_corpus_split(&a.out.join("holdout"), &hold_docs)? {
            manifest.files.insert(format!("holdout/{name}"), path);
        }
    }
    let manifest_path = a.out.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", manifest_path.display())))?;
    println!(
        "wrote {} train docs ({} classes) to {}",
        a.docs,
        a.classes,
        a.out.display()
    );
    for (label, n) in &manifest.per_class {
        println!("  {label}: {n}");
    }
    if a.holdout > 0 {
        println!("  plus {} held-out docs", a.holdout);
    }
    Ok(())
}

// ── shared data loading ──────────────────────────────────────────────

fn dataset_name(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

struct SplitData {
    docs: Vec<Document>,
    vrdu: Vec<crate::prompts::TaskSample>,
    nlp: Vec<crate::prompts::TaskSample>,
    rejects: usize,
    skipped: usize,
}

fn report_rejects(rep: &LoadReport, path: &Path) {
    for r in &rep.rejects {
        eprintln!(
            "warning: {}: record {} rejected: {}",
            path.display(),
            r.record,
            r.reason
        );
    }
}

fn load_split(split: &SplitPaths) -> Result<SplitData, CliError> {
    let mut data = SplitData {
        docs: Vec::new(),
        vrdu: Vec::new(),
        nlp: Vec::new(),
        rejects: 0,
        skipped: 0,
    };
    let absorb = |rep: LoadReport, kind: TaskKind, path: &Path, data: &mut SplitData| -> Result<(), CliError> {
        report_rejects(&rep, path);
        data.rejects += rep.rejects.len();
        let base = data.docs.len();
        let out = to_task_samples(&rep.docs, kind, &dataset_name(path), None)?;
        data.skipped += out.skipped;
        data.vrdu.extend(out.samples.into_iter().map(|mut s| {
            s.doc_index = s.doc_index.map(|i| i + base);
            s
        }));
        data.docs.extend(rep.docs);
        Ok(())
    };
    if let Some(p) = &split.classification {
        absorb(load_rvlcdip_like(p)?, TaskKind::Classification, p, &mut data)?;
    }
    if let Some(p) = &split.extraction {
        absorb(load_funsd_like(p)?, TaskKind::Extraction, p, &mut data)?;
    }
    if let Some(p) = &split.docqa {
        absorb(load_docvqa_like(p)?, TaskKind::DocQa, p, &mut data)?;
    }
    if let Some(p) = &split.instructions {
        let rep = load_alpaca_like(p)?;
        for r in &rep.rejects {
            eprintln!(
                "warning: {}: record {} rejected: {}",
                p.display(),
                r.record,
                r.reason
            );
        }
        data.rejects += rep.rejects.len();
        data.nlp.extend(rep.samples);
    }
    Ok(data)
}

fn build_model(cfg: &RunConfig) -> Result<ModelBundle, CliError> {
    Ok(ModelBundle::init(
        cfg.encoder.clone(),
        cfg.decoder.clone(),
        cfg.train.seed,
    )?)
}

fn load_model_from_checkpoint(
    cfg: &RunConfig,
    path: &Path,
) -> Result<(ModelBundle, checkpoint::Checkpoint), CliError> {
    let ck = checkpoint::load(path)?;
    let mut model = build_model(cfg)?;
    checkpoint::apply(&mut model, &ck)?;
    Ok((model, ck))
}

// ── train ────────────────────────────────────────────────────────────

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    a.overrides.apply(&mut cfg);
    cfg.validate(true)?;
    let split = load_split(&cfg.data.train)?;
    if split.skipped > 0 {
        eprintln!("warning: {} records skipped (missing annotations)", split.skipped);
    }
    let val = match &cfg.data.val {
        Some(v) => {
            let d = load_split(v)?;
            let mut samples = d.vrdu;
            samples.extend(d.nlp);
            Some(EvalData {
                docs: d.docs,
                samples,
            })
        }
        None => None,
    };
    let data = TrainData {
        docs: split.docs,
        vrdu: split.vrdu,
        nlp: split.nlp,
        val,
    };

    let (mut model, mut state) = match &a.resume {
        Some(ck_path) => {
            let (model, ck) = load_model_from_checkpoint(&cfg, ck_path)?;
            let opt = match ck.opt {
                Some(snap) => crate::train::AdamState::from_snapshot(snap),
                None => crate::train::AdamState::new(&model.params),
            };
            let state = TrainState {
                opt,
                next_epoch: ck.meta.epoch,
                global_step: ck.meta.step,
            };
            println!(
                "resuming from {} (epoch {}, step {})",
                ck_path.display(),
                ck.meta.epoch,
                ck.meta.step
            );
            (model, state)
        }
        None => {
            let model = build_model(&cfg)?;
            let state = TrainState::fresh(&model);
            (model, state)
        }
    };

    fs::create_dir_all(&cfg.out_dir).map_err(|e| {
        CliError::Validation(format!("cannot create {}: {e}", cfg.out_dir.display()))
    })?;
    // archive the effective config next to the checkpoints
    fs::write(cfg.out_dir.join("config.toml"), cfg.emit())
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let trace = train::train_with_state(&mut model, &data, &cfg.train, &mut state, Some(&cfg.out_dir))?;
    let last = trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps ({} document / {} instruction samples); final batch loss {:.4}",
        state.global_step,
        data.vrdu.len(),
        data.nlp.len(),
        last
    );
    println!(
        "checkpoint: {}",
        cfg.out_dir.join("checkpoint-final.bin").display()
    );
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

fn print_report_table(reports: &[EvalReport]) {
    println!(
        "{:<16} {:<10} {:>8} {:>8} {:>10}",
        "task", "metric", "value", "samples", "malformed"
    );
    for r in reports {
        println!(
            "{:<16} {:<10} {:>8.4} {:>8} {:>10}",
            r.task.name(),
            r.metric,
            r.value,
            r.sample_count(),
            r.malformed_count
        );
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    a.overrides.apply(&mut cfg);
    cfg.validate(false)?;
    let Some(split) = cfg.split(&a.split) else {
        return Err(CliError::Validation(format!(
            "config has no data split named {:?}",
            a.split
        )));
    };
    let data = load_split(split)?;
    let (model, _ck) = load_model_from_checkpoint(&cfg, &a.checkpoint)?;
    let reports = train::evaluate(&model, &data.docs, &data.vrdu, cfg.train.max_new_tokens)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| {
        CliError::Validation(format!("cannot create {}: {e}", cfg.out_dir.display()))
    })?;
    for r in &reports {
        let path = cfg
            .out_dir
            .join(format!("report-{}-{}.json", a.split, r.task.name()));
        fs::write(
            &path,
            serde_json::to_string_pretty(r).map_err(|e| CliError::Runtime(e.to_string()))?,
        )
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    if !data.nlp.is_empty() {
        eprintln!(
            "note: {} instruction samples present; no in-scope metric, skipped",
            data.nlp.len()
        );
    }
    print_report_table(&reports);
    Ok(())
}

// ── predict / repl ───────────────────────────────────────────────────

fn pick_document(path: &Path, record: Option<&str>) -> Result<Document, CliError> {
    let rep = load_document_file(path)?;
    report_rejects(&rep, path);
    if let Some(r) = &rep.rejects.first() {
        if rep.docs.is_empty() {
            return Err(CliError::Validation(format!(
                "{}: record {} is malformed: {}",
                path.display(),
                r.record,
                r.reason
            )));
        }
    }
    let doc = match record {
        Some(id) => rep.docs.into_iter().find(|d| d.id == id).ok_or_else(|| {
            CliError::Validation(format!("{}: no record with id {id:?}", path.display()))
        })?,
        None => rep.docs.into_iter().next().ok_or_else(|| {
            CliError::Validation(format!("{}: no documents", path.display()))
        })?,
    };
    Ok(doc)
}

fn parse_label_flag(labels: &Option<String>) -> Option<Vec<String>> {
    labels.as_ref().map(|s| {
        s.split(',')
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect()
    })
}

fn cmd_predict(a: &PredictArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    a.overrides.apply(&mut cfg);
    cfg.validate(false)?;
    let (model, _) = load_model_from_checkpoint(&cfg, &a.checkpoint)?;
    let doc = pick_document(&a.doc, a.record.as_deref())?;
    let all_docs = std::slice::from_ref(&doc);

    let fields = match a.task {
        PredictTask::Classification => {
            let labels = parse_label_flag(&a.labels).unwrap_or_else(|| derive_class_labels(all_docs));
            if labels.is_empty() {
                return Err(CliError::Validation(
                    "no classification labels: pass --labels or use a labeled document".into(),
                ));
            }
            OwnedFields::Classification(labels)
        }
        PredictTask::Extraction => {
            let labels = parse_label_flag(&a.labels).unwrap_or_else(|| derive_entity_labels(all_docs));
            if labels.is_empty() {
                return Err(CliError::Validation(
                    "no entity labels: pass --labels or use an annotated document".into(),
                ));
            }
            OwnedFields::Extraction(labels)
        }
        PredictTask::Docqa => {
            let Some(q) = &a.question else {
                return Err(CliError::Validation(
                    "document QA needs --question".into(),
                ));
            };
            OwnedFields::DocQa(q.clone())
        }
    };

    let features = model.encode(&doc)?;
    let answer = ask(&model, &features, &fields)?;
    match &fields {
        OwnedFields::Classification(labels) => {
            match parse_classification_output(&answer, labels) {
                Some(label) => println!("{label}"),
                None => println!("[rejected] {answer}"),
            }
        }
        OwnedFields::Extraction(labels) => {
            let parsed = parse_extraction_output(&answer, labels);
            for (text, label) in &parsed.pairs {
                println!("{text}, {label}");
            }
            if parsed.malformed_lines > 0 {
                eprintln!("note: {} malformed output lines dropped", parsed.malformed_lines);
            }
        }
        OwnedFields::DocQa(_) => println!("{answer}"),
    }
    Ok(())
}

/// Owned task fields, so prediction can build them from CLI flags.
enum OwnedFields {
    Classification(Vec<String>),
    Extraction(Vec<String>),
    DocQa(String),
}

impl OwnedFields {
    fn as_fields(&self) -> TaskFields<'_> {
        match self {
            OwnedFields::Classification(labels) => TaskFields::Classification { labels },
            OwnedFields::Extraction(labels) => TaskFields::Extraction { labels },
            OwnedFields::DocQa(question) => TaskFields::DocQa { question },
        }
    }
}

fn ask(
    model: &ModelBundle,
    features: &crate::encoder::DocumentFeatures,
    fields: &OwnedFields,
) -> Result<String, CliError> {
    let prompt = render_prompt(&fields.as_fields())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let mut prompt_ids = vec![ByteCodec::BOS];
    prompt_ids.extend(ByteCodec::encode(&prompt));
    let out = model
        .generate_greedy(Some(features), &prompt_ids, 96)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(ByteCodec::decode(&out))
}

/// The question loop: encode once, then answer each question line. Empty lines
/// re-prompt without touching the model; end of input exits cleanly.
pub fn cmd_repl(
    a: &ReplArgs,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    a.overrides.apply(&mut cfg);
    cfg.validate(false)?;
    let (model, _) = load_model_from_checkpoint(&cfg, &a.checkpoint)?;
    let doc = pick_document(&a.doc, a.record.as_deref())?;
    let features = model.encode(&doc)?;

    let io_err = |e: std::io::Error| CliError::Runtime(e.to_string());
    writeln!(out, "loaded {} ({} words); ask away", doc.id, doc.words.len()).map_err(io_err)?;
    let mut line = String::new();
    loop {
        write!(out, "> ").map_err(io_err)?;
        out.flush().map_err(io_err)?;
        line.clear();
        if input.read_line(&mut line).map_err(io_err)? == 0 {
            writeln!(out).map_err(io_err)?;
            return Ok(());
        }
        let question = line.trim();
        if question.is_empty() {
            continue;
        }
        let fields = OwnedFields::DocQa(question.to_string());
        let answer = ask(&model, &features, &fields)?;
        writeln!(out, "{answer}").map_err(io_err)?;
    }
}
