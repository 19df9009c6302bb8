//! Joint fine-tuning over document and instruction samples.
//!
//! Mini-batches are task-homogeneous: the two streams are shuffled and
//! chunked separately, then the batch list itself is shuffled, so document
//! and instruction batches interleave without ever mixing. A batch is
//! processed one sample at a time with gradient accumulation (mean-loss
//! semantics, fixed order), clipped to a global norm, and applied with
//! decoupled weight decay. Only parameters that participated in the step are
//! updated, so an instruction-only epoch leaves the encoder and adapter
//! untouched bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointMeta};
use crate::data::{derive_class_labels, derive_entity_labels, ByteCodec, DataError, Document};
use crate::decoder::{Decoder, FusionError};
use crate::encoder::{DocumentEncoder, EncoderError, FEATURE_LEN};
use crate::metrics::{anls_scores, classification_accuracy, entity_f1, MetricError};
use crate::model::ModelBundle;
use crate::prompts::{parse_classification_output, parse_extraction_output, TaskKind, TaskSample};
use crate::tensor::{Binding, ParamId, ParamSet, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("no training samples")]
    EmptyData,
    #[error("lr schedule: total_steps is zero")]
    ZeroTotalSteps,
    #[error("step {step} ({tag} batch, first record {record}): non-finite loss {loss}")]
    NonFiniteLoss {
        step: u64,
        tag: BatchTag,
        record: String,
        loss: f64,
    },
    #[error("batch tagged {tag} contains sample {record} of kind {kind:?}")]
    MixedBatch {
        tag: BatchTag,
        record: String,
        kind: TaskKind,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_peak: f64,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Evaluate on the validation split every this many epochs; 0 disables.
    pub eval_every: usize,
    pub freeze_encoder: bool,
    pub grad_clip: f64,
    /// Caps the total number of optimizer steps (the LR schedule spans the
    /// capped horizon). None runs all epochs.
    pub max_steps: Option<usize>,
    /// Ablation switch: also score prompt tokens in the loss.
    pub loss_on_prompt: bool,
    /// Generation budget per sample during evaluation.
    pub max_new_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr_peak: 2.5e-3,
            epochs: 12,
            warmup_ratio: 0.05,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 7,
            eval_every: 0,
            freeze_encoder: false,
            grad_clip: 1.0,
            max_steps: None,
            loss_on_prompt: false,
            max_new_tokens: 64,
        }
    }
}

impl TrainConfig {
    /// The published full-scale recipe: AdamW at 1e-5 peak with cosine decay,
    /// 0.05 warmup, 0.01 weight decay, batch 16, 20 epochs.
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 16,
            lr_peak: 1e-5,
            epochs: 20,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return fail(format!(
                "warmup_ratio must be in (0, 1), got {}",
                self.warmup_ratio
            ));
        }
        if self.lr_peak <= 0.0 || !self.lr_peak.is_finite() {
            return fail(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.max_new_tokens == 0 {
            return fail("max_new_tokens must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchTag {
    VrDu,
    Nlp,
}

impl fmt::Display for BatchTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BatchTag::VrDu => "vrdu",
            BatchTag::Nlp => "nlp",
        })
    }
}

/// Indices into the stream named by `tag`; a batch never mixes streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tag: BatchTag,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
}

impl BatchPlan {
    /// Every sample index appears exactly once, and no batch mixes tags.
    pub fn check(&self, n_vrdu: usize, n_nlp: usize) -> Result<(), String> {
        let mut seen_v = vec![false; n_vrdu];
        let mut seen_n = vec![false; n_nlp];
        for b in &self.batches {
            for &i in &b.indices {
                let seen = match b.tag {
                    BatchTag::VrDu => &mut seen_v[i],
                    BatchTag::Nlp => &mut seen_n[i],
                };
                if *seen {
                    return Err(format!("index {i} appears twice in {} stream", b.tag));
                }
                *seen = true;
            }
        }
        if seen_v.iter().any(|s| !s) || seen_n.iter().any(|s| !s) {
            return Err("a sample is missing from the plan".into());
        }
        Ok(())
    }
}

fn derived_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Shuffles each stream, chunks it into same-tag batches, then shuffles the
/// combined batch list. Deterministic in `epoch_seed`.
pub fn plan_batches(n_vrdu: usize, n_nlp: usize, batch_size: usize, epoch_seed: u64) -> BatchPlan {
    let chunked = |n: usize, tag: BatchTag, stream: u64| -> Vec<Batch> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derived_seed(epoch_seed, stream)));
        idx.chunks(batch_size)
            .map(|c| Batch {
                tag,
                indices: c.to_vec(),
            })
            .collect()
    };
    let mut batches = chunked(n_vrdu, BatchTag::VrDu, 1);
    batches.extend(chunked(n_nlp, BatchTag::Nlp, 2));
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(derived_seed(epoch_seed, 3)));
    BatchPlan { batches }
}

/// Linear warmup to the peak over `floor(warmup_ratio * total)` steps, then
/// cosine decay to zero at `total`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if total_steps == 0 {
        return Err(TrainError::ZeroTotalSteps);
    }
    debug_assert!(step <= total_steps);
    let warmup = ((cfg.warmup_ratio * total_steps as f64).floor() as usize).min(total_steps);
    if step < warmup {
        return Ok(cfg.lr_peak * step as f64 / warmup as f64);
    }
    let span = (total_steps - warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    Ok(cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First/second moments and per-parameter update counters, parallel to the
/// parameter store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: Vec<u64>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.numel()])
            .collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            t: vec![0; params.len()],
        }
    }

    pub fn from_snapshot(snap: crate::checkpoint::OptSnapshot) -> Self {
        AdamState {
            m: snap.m,
            v: snap.v,
            t: snap.t,
        }
    }
}

/// Scales gradients of the given parameters so their global L2 norm is at
/// most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(params: &mut ParamSet, touched: &[ParamId], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for &id in touched {
        if let Some(g) = &params.get(id).grad {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for &id in touched {
            if let Some(g) = &mut params.get_mut(id).grad {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
    norm
}

/// Bias-corrected Adam update plus decoupled weight decay. Decay is applied
/// to the parameter first (`p *= 1 - lr*wd`), then the moment update; each
/// parameter keeps its own step counter so bias correction tracks how often
/// it actually participated.
pub fn adamw_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    touched: &[ParamId],
    lr: f64,
    cfg: &TrainConfig,
) {
    for &id in touched {
        let p = params.get_mut(id);
        let Some(g) = p.grad.as_ref() else { continue };
        debug_assert_eq!(g.len(), p.tensor.numel());
        let i = id.0;
        state.t[i] += 1;
        let t = state.t[i] as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let decay = 1.0 - lr * cfg.weight_decay;
        let data = p.tensor.data_mut();
        let g = p.grad.as_ref().expect("checked above");
        for j in 0..data.len() {
            data[j] *= decay;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Training corpus: documents plus the two sample streams. `val` feeds the
/// periodic evaluation.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub docs: Vec<Document>,
    pub vrdu: Vec<TaskSample>,
    pub nlp: Vec<TaskSample>,
    pub val: Option<EvalData>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalData {
    pub docs: Vec<Document>,
    pub samples: Vec<TaskSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTraceRow {
    pub step: u64,
    pub epoch: u64,
    pub tag: BatchTag,
    pub lr: f64,
    pub loss: f64,
}

/// Optimizer state and progress counters; survives across resume.
pub struct TrainState {
    pub opt: AdamState,
    pub next_epoch: u64,
    pub global_step: u64,
}

impl TrainState {
    pub fn fresh(model: &ModelBundle) -> Self {
        TrainState {
            opt: AdamState::new(&model.params),
            next_epoch: 0,
            global_step: 0,
        }
    }
}

fn steps_per_epoch(data: &TrainData, batch_size: usize) -> usize {
    let c = |n: usize| n.div_ceil(batch_size);
    c(data.vrdu.len()) + c(data.nlp.len())
}

/// Builds the loss graph for one sample on a fresh tape and returns the tape,
/// binding, and unscaled loss value node.
fn sample_loss(
    model: &ModelBundle,
    data: &TrainData,
    tag: BatchTag,
    sample: &TaskSample,
    loss_on_prompt: bool,
) -> Result<(Tape, Binding, crate::tensor::Var), TrainError> {
    let mut tape = Tape::new();
    let mut bind = Binding::new(&model.params);
    bind.bind_prefix(&mut tape, &model.params, "decoder.");
    let (prefix, prefix_len) = match tag {
        BatchTag::VrDu => {
            bind.bind_prefix(&mut tape, &model.params, "encoder.");
            bind.bind_prefix(&mut tape, &model.params, "adapter.");
            let doc = &data.docs[sample
                .doc_index
                .expect("document sample carries a doc index")];
            let (f, _) = model.encoder.encode_on(&mut tape, &bind, doc)?;
            let p = model.adapter.project_on(&mut tape, &bind, f)?;
            (Some(p), FEATURE_LEN)
        }
        BatchTag::Nlp => (None, 0),
    };
    let (prompt_ids, response_ids) = Decoder::prompt_response_ids(sample);
    let mut ids = prompt_ids.clone();
    ids.extend(&response_ids);
    let x = model.decoder.build_input(&mut tape, &bind, prefix, &ids)?;
    let loss = model.decoder.loss_from_parts(
        &mut tape,
        &bind,
        x,
        prefix_len,
        &prompt_ids,
        &response_ids,
        loss_on_prompt,
    )?;
    Ok((tape, bind, loss))
}

/// Runs the training loop from `state`, mutating the model in place. Returns
/// the loss trace rows produced by this call. With an output directory, a
/// checkpoint lands after every epoch and rows append to `trace.csv`.
pub fn train_with_state(
    model: &mut ModelBundle,
    data: &TrainData,
    cfg: &TrainConfig,
    state: &mut TrainState,
    out_dir: Option<&Path>,
) -> Result<Vec<LossTraceRow>, TrainError> {
    cfg.validate()?;
    if data.vrdu.is_empty() && data.nlp.is_empty() {
        return Err(TrainError::EmptyData);
    }
    model.set_encoder_frozen(cfg.freeze_encoder);
    let spe = steps_per_epoch(data, cfg.batch_size);
    let mut total_steps = cfg.epochs * spe;
    if let Some(cap) = cfg.max_steps {
        total_steps = total_steps.min(cap);
    }
    if total_steps == 0 {
        return Err(TrainError::ZeroTotalSteps);
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut trace = Vec::new();

    'epochs: for epoch in state.next_epoch..cfg.epochs as u64 {
        if state.global_step >= total_steps as u64 {
            break;
        }
        let plan = plan_batches(
            data.vrdu.len(),
            data.nlp.len(),
            cfg.batch_size,
            derived_seed(cfg.seed, epoch + 1),
        );
        debug_assert!(plan.check(data.vrdu.len(), data.nlp.len()).is_ok());
        for batch in &plan.batches {
            if state.global_step >= total_steps as u64 {
                break 'epochs;
            }
            // the homogeneity contract is re-checked on every step
            for &i in &batch.indices {
                let sample = match batch.tag {
                    BatchTag::VrDu => &data.vrdu[i],
                    BatchTag::Nlp => &data.nlp[i],
                };
                let matches = match batch.tag {
                    BatchTag::VrDu => sample.kind.is_vrdu(),
                    BatchTag::Nlp => !sample.kind.is_vrdu(),
                };
                if !matches {
                    return Err(TrainError::MixedBatch {
                        tag: batch.tag,
                        record: sample.record_id.clone(),
                        kind: sample.kind,
                    });
                }
            }

            model.params.zero_grads();
            let inv_batch = 1.0 / batch.indices.len() as f64;
            let mut batch_loss = 0.0;
            let mut touched: Vec<ParamId> = Vec::new();
            for &i in &batch.indices {
                let sample = match batch.tag {
                    BatchTag::VrDu => &data.vrdu[i],
                    BatchTag::Nlp => &data.nlp[i],
                };
                let (mut tape, bind, loss) =
                    sample_loss(model, data, batch.tag, sample, cfg.loss_on_prompt)?;
                let scaled = tape.scale(loss, inv_batch);
                tape.backward(scaled)?;
                batch_loss += tape.value(loss)[0] * inv_batch;
                for id in bind.accumulate_grads(&tape, &mut model.params) {
                    if !touched.contains(&id) {
                        touched.push(id);
                    }
                }
            }
            if !batch_loss.is_finite() {
                let first = match batch.tag {
                    BatchTag::VrDu => &data.vrdu[batch.indices[0]],
                    BatchTag::Nlp => &data.nlp[batch.indices[0]],
                };
                return Err(TrainError::NonFiniteLoss {
                    step: state.global_step,
                    tag: batch.tag,
                    record: first.record_id.clone(),
                    loss: batch_loss,
                });
            }
            touched.sort_by_key(|id| id.0);
            clip_global_norm(&mut model.params, &touched, cfg.grad_clip);
            let lr = lr_at(state.global_step as usize, total_steps, cfg)?;
            adamw_step(&mut model.params, &mut state.opt, &touched, lr, cfg);
            trace.push(LossTraceRow {
                step: state.global_step,
                epoch,
                tag: batch.tag,
                lr,
                loss: batch_loss,
            });
            state.global_step += 1;
        }
        state.next_epoch = epoch + 1;

        if let Some(dir) = out_dir {
            let meta = CheckpointMeta {
                encoder: model.encoder.cfg.clone(),
                decoder: model.decoder.cfg.clone(),
                step: state.global_step,
                epoch: state.next_epoch,
            };
            checkpoint::save(
                dir.join(format!("checkpoint-epoch-{epoch:04}.bin")),
                &meta,
                &model.params,
                Some(&state.opt),
            )?;
            checkpoint::save(dir.join("checkpoint-final.bin"), &meta, &model.params, Some(&state.opt))?;
        }
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every as u64 == 0 {
            if let Some(val) = &data.val {
                let reports = evaluate(model, &val.docs, &val.samples, cfg.max_new_tokens)?;
                if let Some(dir) = out_dir {
                    for r in &reports {
                        let path = dir.join(format!("eval-epoch-{epoch:04}-{}.json", r.task.name()));
                        fs::write(path, serde_json::to_vec_pretty(r).map_err(std::io::Error::other)?)?;
                    }
                }
            }
        }
    }

    if let Some(dir) = out_dir {
        append_trace(&dir.join("trace.csv"), &trace)?;
    }
    Ok(trace)
}

/// Fresh-state convenience wrapper around [`train_with_state`].
pub fn train(
    model: &mut ModelBundle,
    data: &TrainData,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<LossTraceRow>, TrainError> {
    let mut state = TrainState::fresh(model);
    train_with_state(model, data, cfg, &mut state, out_dir)
}

/// Appends rows to a loss-trace CSV, writing the header for a new file.
pub fn append_trace(path: &Path, rows: &[LossTraceRow]) -> Result<(), std::io::Error> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "step,epoch,tag,lr,loss")?;
    }
    for r in rows {
        writeln!(f, "{},{},{},{},{}", r.step, r.epoch, r.tag, r.lr, r.loss)?;
    }
    Ok(())
}

/// Per-kind evaluation: greedy generation, task parsing, corpus metric.
/// Instruction-only samples have no scoped metric and are skipped.
pub fn evaluate(
    model: &ModelBundle,
    docs: &[Document],
    samples: &[TaskSample],
    max_new: usize,
) -> Result<Vec<crate::metrics::EvalReport>, TrainError> {
    use crate::metrics::{EvalReport, SampleScore};

    // features are per document; samples may share them
    let mut projected: BTreeMap<usize, crate::tensor::Tensor> = BTreeMap::new();
    let generate = |sample: &TaskSample,
                        projected: &mut BTreeMap<usize, crate::tensor::Tensor>|
     -> Result<String, TrainError> {
        let prefix = match sample.doc_index {
            Some(di) => {
                if !projected.contains_key(&di) {
                    let f = model.encode(&docs[di]).map_err(unwrap_model)?;
                    let p = model.project(&f).map_err(unwrap_model)?;
                    projected.insert(di, p);
                }
                Some(&projected[&di])
            }
            None => None,
        };
        let mut prompt_ids = vec![ByteCodec::BOS];
        prompt_ids.extend(ByteCodec::encode(&sample.prompt()));
        let out = model
            .decoder
            .generate_greedy(&model.params, prefix, &prompt_ids, max_new)?;
        Ok(ByteCodec::decode(&out))
    };

    let mut reports = Vec::new();
    for kind in [TaskKind::Classification, TaskKind::Extraction, TaskKind::DocQa] {
        let subset: Vec<&TaskSample> = samples.iter().filter(|s| s.kind == kind).collect();
        if subset.is_empty() {
            continue;
        }
        let report: EvalReport = match kind {
            TaskKind::Classification => {
                let labels = derive_class_labels(docs);
                let mut preds = Vec::new();
                let mut golds = Vec::new();
                let mut per_sample = Vec::new();
                let mut malformed = 0usize;
                for s in &subset {
                    let text = generate(s, &mut projected)?;
                    let parsed = parse_classification_output(&text, &labels);
                    if parsed.is_none() {
                        malformed += 1;
                    }
                    let gold = docs[s.doc_index.unwrap()]
                        .annotations
                        .label
                        .clone()
                        .unwrap_or_default();
                    let score = if parsed.as_deref() == Some(gold.as_str()) {
                        1.0
                    } else {
                        0.0
                    };
                    per_sample.push(SampleScore {
                        id: s.record_id.clone(),
                        score,
                    });
                    preds.push(parsed);
                    golds.push(gold);
                }
                let value = classification_accuracy(&preds, &golds)?;
                EvalReport {
                    task: kind,
                    metric: "accuracy".into(),
                    value,
                    numerator: per_sample.iter().map(|s| s.score).sum(),
                    denominator: golds.len() as f64,
                    malformed_count: malformed,
                    precision: None,
                    recall: None,
                    per_label: None,
                    per_sample,
                }
            }
            TaskKind::Extraction => {
                let labels = derive_entity_labels(docs);
                let mut preds = Vec::new();
                let mut golds = Vec::new();
                let mut per_sample = Vec::new();
                let mut malformed = 0usize;
                for s in &subset {
                    let text = generate(s, &mut projected)?;
                    let parsed = parse_extraction_output(&text, &labels);
                    malformed += parsed.malformed_lines;
                    let gold = docs[s.doc_index.unwrap()].annotations.entities.clone();
                    let doc_f1 = entity_f1(
                        std::slice::from_ref(&parsed.pairs),
                        std::slice::from_ref(&gold),
                    )?;
                    per_sample.push(SampleScore {
                        id: s.record_id.clone(),
                        score: doc_f1.f1,
                    });
                    preds.push(parsed.pairs);
                    golds.push(gold);
                }
                let scores = entity_f1(&preds, &golds)?;
                let per_label = crate::metrics::per_label_counts(&preds, &golds);
                EvalReport {
                    task: kind,
                    metric: "entity_f1".into(),
                    value: scores.f1,
                    numerator: scores.matched as f64,
                    denominator: scores.gold_total as f64,
                    malformed_count: malformed,
                    precision: Some(scores.precision),
                    recall: Some(scores.recall),
                    per_label: Some(per_label),
                    per_sample,
                }
            }
            TaskKind::DocQa => {
                let mut preds = Vec::new();
                let mut golds = Vec::new();
                let mut ids = Vec::new();
                for s in &subset {
                    let text = generate(s, &mut projected)?;
                    let doc = &docs[s.doc_index.unwrap()];
                    let qi: usize = s
                        .record_id
                        .rsplit_once("#q")
                        .and_then(|(_, n)| n.parse().ok())
                        .unwrap_or(0);
                    golds.push(doc.annotations.qas[qi].answers.clone());
                    preds.push(text);
                    ids.push(s.record_id.clone());
                }
                let scores = anls_scores(&preds, &golds, crate::metrics::ANLS_THRESHOLD)?;
                let value = scores.iter().sum::<f64>() / scores.len() as f64;
                EvalReport {
                    task: kind,
                    metric: "anls".into(),
                    value,
                    numerator: scores.iter().sum(),
                    denominator: scores.len() as f64,
                    malformed_count: 0,
                    precision: None,
                    recall: None,
                    per_label: None,
                    per_sample: ids
                        .into_iter()
                        .zip(scores)
                        .map(|(id, score)| SampleScore { id, score })
                        .collect(),
                }
            }
            TaskKind::NlpInstruction => unreachable!(),
        };
        reports.push(report);
    }
    Ok(reports)
}

fn unwrap_model(e: crate::model::ModelError) -> TrainError {
    match e {
        crate::model::ModelError::Encoder(e) => TrainError::Encoder(e),
        crate::model::ModelError::Fusion(e) => TrainError::Fusion(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, to_task_samples, SyntheticSpec};
    use crate::decoder::DecoderConfig;
    use crate::encoder::EncoderConfig;
    use crate::tensor::Tensor;

    fn tiny_model(seed: u64) -> ModelBundle {
        ModelBundle::init(
            EncoderConfig {
                d_enc: 16,
                n_layers: 1,
                n_heads: 2,
                patch_grid: 2,
                image_size: 8,
                ..EncoderConfig::default()
            },
            DecoderConfig {
                d_dec: 16,
                n_layers: 1,
                n_heads: 2,
                ..DecoderConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn nlp_samples(n: usize) -> Vec<TaskSample> {
        (0..n)
            .map(|i| TaskSample {
                kind: TaskKind::NlpInstruction,
                doc_index: None,
                instruction: format!("Repeat token {i}."),
                target: format!("tok{i}"),
                dataset: "unit".into(),
                record_id: format!("n{i}"),
            })
            .collect()
    }

    fn tiny_corpus(n_docs: usize, seed: u64) -> TrainData {
        let docs = synth_generate(&SyntheticSpec {
            n_docs,
            image_size: 8,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let vrdu = to_task_samples(&docs, TaskKind::Classification, "unit", None)
            .unwrap()
            .samples;
        TrainData {
            docs,
            vrdu,
            nlp: Vec::new(),
            val: None,
        }
    }

    #[test]
    fn plan_batches_chunk_arithmetic() {
        let plan = plan_batches(32, 16, 16, 99);
        assert_eq!(plan.batches.len(), 3);
        let vrdu = plan.batches.iter().filter(|b| b.tag == BatchTag::VrDu).count();
        let nlp = plan.batches.iter().filter(|b| b.tag == BatchTag::Nlp).count();
        assert_eq!((vrdu, nlp), (2, 1));
        plan.check(32, 16).unwrap();
    }

    #[test]
    fn plan_batches_degenerate_and_deterministic() {
        let plan = plan_batches(10, 0, 4, 5);
        assert!(plan.batches.iter().all(|b| b.tag == BatchTag::VrDu));
        assert_eq!(plan.batches.len(), 3); // 4+4+2
        assert_eq!(plan_batches(10, 7, 4, 5), plan_batches(10, 7, 4, 5));
        assert_ne!(plan_batches(10, 7, 4, 5), plan_batches(10, 7, 4, 6));
    }

    #[test]
    fn lr_schedule_fixtures() {
        let cfg = TrainConfig::full_scale(); // lr 1e-5, warmup 0.05
        let total = 1000;
        let warmup = 50;
        assert_eq!(lr_at(0, total, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(warmup, total, &cfg).unwrap(), 1e-5);
        assert!(lr_at(total, total, &cfg).unwrap().abs() < 1e-12);
        // continuity at the junction
        let left = lr_at(warmup - 1, total, &cfg).unwrap() + cfg.lr_peak / warmup as f64;
        let right = lr_at(warmup, total, &cfg).unwrap();
        assert!((left - right).abs() < 1e-12 * cfg.lr_peak);
        assert!(matches!(lr_at(0, 0, &cfg), Err(TrainError::ZeroTotalSteps)));
    }

    #[test]
    fn adamw_zero_gradient_is_pure_decay() {
        let mut params = ParamSet::new();
        let id = params.add("p", Tensor::new(vec![1], vec![1.0]).unwrap());
        params.get_mut(id).ensure_grad();
        let mut state = AdamState::new(&params);
        let cfg = TrainConfig {
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        adamw_step(&mut params, &mut state, &[id], 0.1, &cfg);
        assert!((params.get(id).tensor.data()[0] - 0.999).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let mut params = ParamSet::new();
        let id = params.add("p", Tensor::new(vec![2], vec![0.5, 0.5]).unwrap());
        params.get_mut(id).ensure_grad().copy_from_slice(&[0.3, -0.7]);
        let mut state = AdamState::new(&params);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let lr = 0.01;
        adamw_step(&mut params, &mut state, &[id], lr, &cfg);
        let d = params.get(id).tensor.data();
        assert!((d[0] - (0.5 - lr)).abs() < 1e-6);
        assert!((d[1] - (0.5 + lr)).abs() < 1e-6);
    }

    #[test]
    fn adamw_identical_state_gives_identical_updates() {
        let mut params = ParamSet::new();
        let a = params.add("a", Tensor::new(vec![2], vec![0.4, -0.2]).unwrap());
        let b = params.add("b", Tensor::new(vec![2], vec![0.4, -0.2]).unwrap());
        for id in [a, b] {
            params.get_mut(id).ensure_grad().copy_from_slice(&[0.05, 0.02]);
        }
        let mut state = AdamState::new(&params);
        adamw_step(&mut params, &mut state, &[a, b], 0.01, &TrainConfig::default());
        assert_eq!(params.get(a).tensor.data(), params.get(b).tensor.data());
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut params = ParamSet::new();
        let a = params.add("a", Tensor::zeros(vec![3]));
        let b = params.add("b", Tensor::zeros(vec![2]));
        params.get_mut(a).ensure_grad().copy_from_slice(&[3.0, 4.0, 0.0]);
        params.get_mut(b).ensure_grad().copy_from_slice(&[0.0, 12.0]);
        let pre = clip_global_norm(&mut params, &[a, b], 1.0);
        assert!((pre - 13.0).abs() < 1e-12);
        let mut sq = 0.0;
        for id in [a, b] {
            sq += params.get(id).grad.as_ref().unwrap().iter().map(|v| v * v).sum::<f64>();
        }
        assert!(sq.sqrt() <= 1.0 + 1e-9);
    }

    #[test]
    fn nlp_only_training_loss_decreases() {
        let mut model = tiny_model(21);
        let data = TrainData {
            docs: Vec::new(),
            vrdu: Vec::new(),
            nlp: nlp_samples(2),
            val: None,
        };
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 80,
            lr_peak: 5e-3,
            seed: 1,
            ..TrainConfig::default()
        };
        let trace = train(&mut model, &data, &cfg, None).unwrap();
        assert_eq!(trace.len(), 80);
        assert!(
            trace.last().unwrap().loss < trace.first().unwrap().loss * 0.25,
            "loss did not drop: {} -> {}",
            trace.first().unwrap().loss,
            trace.last().unwrap().loss
        );
    }

    #[test]
    fn nlp_only_epoch_leaves_encoder_and_adapter_untouched() {
        let mut model = tiny_model(22);
        let before: Vec<(String, Vec<u64>)> = model
            .params
            .iter()
            .filter(|(_, p)| !p.name.starts_with("decoder."))
            .map(|(_, p)| (p.name.clone(), p.tensor.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let data = TrainData {
            docs: Vec::new(),
            vrdu: Vec::new(),
            nlp: nlp_samples(3),
            val: None,
        };
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 2,
            seed: 2,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &cfg, None).unwrap();
        for (name, bits) in before {
            let p = model.params.get(model.params.find(&name).unwrap());
            let now: Vec<u64> = p.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, now, "{name} changed during an instruction-only run");
            assert!(p.grad.is_none() || p.grad.as_ref().unwrap().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn frozen_encoder_stays_bit_identical_under_vrdu_training() {
        let mut model = tiny_model(23);
        let before: Vec<Vec<u64>> = model
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with("encoder."))
            .map(|(_, p)| p.tensor.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let data = tiny_corpus(2, 77);
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 1,
            freeze_encoder: true,
            seed: 3,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &cfg, None).unwrap();
        let after: Vec<Vec<u64>> = model
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with("encoder."))
            .map(|(_, p)| p.tensor.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
        // adapter and decoder did move
        let moved = model
            .params
            .iter()
            .any(|(_, p)| p.name.starts_with("adapter.") && p.grad.is_some());
        assert!(moved);
    }

    #[test]
    fn vrdu_gradients_reach_encoder_and_adapter() {
        let model = tiny_model(24);
        let data = tiny_corpus(1, 55);
        let (mut tape, bind, loss) =
            sample_loss(&model, &data, BatchTag::VrDu, &data.vrdu[0], false).unwrap();
        tape.backward(loss).unwrap();
        let mut params = model.params.clone();
        let touched = bind.accumulate_grads(&tape, &mut params);
        let names: Vec<String> = touched
            .iter()
            .map(|&id| params.get(id).name.clone())
            .collect();
        assert!(names.iter().any(|n| n.starts_with("encoder.")));
        assert!(names.iter().any(|n| n.starts_with("adapter.")));
        assert!(names.iter().any(|n| n.starts_with("decoder.")));
        let wid = params.find("adapter.w").unwrap();
        assert!(params.get(wid).grad.as_ref().unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn same_seed_same_trace_bits() {
        let run = || {
            let mut model = tiny_model(31);
            let data = tiny_corpus(2, 88);
            let cfg = TrainConfig {
                batch_size: 2,
                epochs: 2,
                seed: 9,
                ..TrainConfig::default()
            };
            train(&mut model, &data, &cfg, None)
                .unwrap()
                .iter()
                .map(|r| (r.step, r.loss.to_bits(), r.lr.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let data = tiny_corpus(2, 66);
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 2,
            seed: 4,
            ..TrainConfig::default()
        };

        let mut straight = tiny_model(41);
        let full_trace = train(&mut straight, &data, &cfg, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut resumed = tiny_model(41);
        let mut state = TrainState::fresh(&resumed);
        let one_epoch = TrainConfig { epochs: 1, ..cfg.clone() };
        // first epoch with the same total-step horizon: cap epochs via state
        let part1 = {
            let mut m = tiny_model(41);
            let mut s = TrainState::fresh(&m);
            // run only epoch 0 of the 2-epoch schedule by training with
            // epochs=2 but stopping after epoch 0 via max_steps
            let spe = steps_per_epoch(&data, cfg.batch_size);
            let capped = TrainConfig { max_steps: Some(spe), ..cfg.clone() };
            let t = train_with_state(&mut m, &data, &capped, &mut s, Some(dir.path())).unwrap();
            (m, s, t)
        };
        let (m1, s1, t1) = part1;
        // reload from the epoch checkpoint and continue
        let ck = checkpoint::load(dir.path().join("checkpoint-final.bin")).unwrap();
        checkpoint::apply(&mut resumed, &ck).unwrap();
        state.opt = AdamState::from_snapshot(ck.opt.clone().unwrap());
        state.next_epoch = ck.meta.epoch;
        state.global_step = ck.meta.step;
        let t2 = train_with_state(&mut resumed, &data, &cfg, &mut state, None).unwrap();

        let mut joined = t1.clone();
        joined.extend(t2.clone());
        assert_eq!(joined.len(), full_trace.len());
        for (a, b) in joined.iter().zip(&full_trace) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
        // resumed trace starts where the checkpoint stopped
        assert_eq!(t2.first().unwrap().step, ck.meta.step);
        for ((_, a), (_, b)) in resumed.params.iter().zip(straight.params.iter()) {
            assert_eq!(
                a.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "{} diverged after resume",
                a.name
            );
        }
        let _ = (m1, s1, one_epoch);
    }

    #[test]
    fn evaluate_produces_well_formed_reports() {
        let model = tiny_model(51);
        let docs = synth_generate(&SyntheticSpec {
            n_docs: 3,
            image_size: 8,
            seed: 13,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut samples = to_task_samples(&docs, TaskKind::Classification, "u", None)
            .unwrap()
            .samples;
        samples.extend(to_task_samples(&docs, TaskKind::Extraction, "u", None).unwrap().samples);
        samples.extend(to_task_samples(&docs, TaskKind::DocQa, "u", None).unwrap().samples);
        let reports = evaluate(&model, &docs, &samples, 8).unwrap();
        assert_eq!(reports.len(), 3);
        for r in &reports {
            assert!(r.value >= 0.0 && r.value <= 1.0);
            assert!(!r.per_sample.is_empty());
        }
        // absent task kinds simply produce no report
        let cls_only: Vec<TaskSample> = samples
            .iter()
            .filter(|s| s.kind == TaskKind::Classification)
            .cloned()
            .collect();
        let reports = evaluate(&model, &docs, &cls_only, 8).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].metric, "accuracy");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let model = tiny_model(52);
        let docs = synth_generate(&SyntheticSpec {
            n_docs: 2,
            image_size: 8,
            seed: 14,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let samples = to_task_samples(&docs, TaskKind::Classification, "u", None)
            .unwrap()
            .samples;
        let a = evaluate(&model, &docs, &samples, 6).unwrap();
        let b = evaluate(&model, &docs, &samples, 6).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
