//! Evaluation measures: classification accuracy, entity-level F1, and ANLS.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::TaskKind;

/// DocVQA-convention similarity cutoff: per-question scores below this count
/// as zero.
pub const ANLS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{op}: got {preds} predictions for {golds} gold entries")]
    LengthMismatch {
        op: &'static str,
        preds: usize,
        golds: usize,
    },
    #[error("anls: question {index} has no gold answers")]
    EmptyGold { index: usize },
}

/// Minimal insert/delete/substitute count over Unicode code points.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn canon(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Normalized Levenshtein similarity in [0, 1]; both strings lowercased and
/// whitespace-trimmed first, two empty strings compare as 1.
pub fn nls(pred: &str, gold: &str) -> f64 {
    let p = canon(pred);
    let g = canon(gold);
    let denom = p.chars().count().max(g.chars().count());
    if denom == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&p, &g) as f64 / denom as f64
}

/// Average normalized Levenshtein similarity: per question the best score over
/// gold answers, zeroed below `threshold`, then the mean over questions.
pub fn anls(preds: &[String], golds: &[Vec<String>], threshold: f64) -> Result<f64, MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            op: "anls",
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let scores = anls_scores(preds, golds, threshold)?;
    if scores.is_empty() {
        return Ok(0.0);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Per-question thresholded scores, in input order.
pub fn anls_scores(
    preds: &[String],
    golds: &[Vec<String>],
    threshold: f64,
) -> Result<Vec<f64>, MetricError> {
    preds
        .iter()
        .zip(golds)
        .enumerate()
        .map(|(i, (p, gs))| {
            if gs.is_empty() {
                return Err(MetricError::EmptyGold { index: i });
            }
            let best = gs.iter().map(|g| nls(p, g)).fold(0.0f64, f64::max);
            Ok(if best < threshold { 0.0 } else { best })
        })
        .collect()
}

/// One (text, label) extraction, compared exactly after trimming both fields.
pub type EntityPair = (String, String);

fn pair_counts(pairs: &[EntityPair]) -> BTreeMap<(String, String), usize> {
    let mut m = BTreeMap::new();
    for (t, l) in pairs {
        *m.entry((t.trim().to_string(), l.trim().to_string())).or_insert(0) += 1;
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub pred_total: usize,
    pub gold_total: usize,
}

/// Micro-averaged entity-level F1 over parallel per-document entity multisets.
/// Duplicated (text, label) pairs count separately.
pub fn entity_f1(preds: &[Vec<EntityPair>], golds: &[Vec<EntityPair>]) -> Result<F1Scores, MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            op: "entity_f1",
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let mut matched = 0;
    let mut pred_total = 0;
    let mut gold_total = 0;
    for (p, g) in preds.iter().zip(golds) {
        pred_total += p.len();
        gold_total += g.len();
        let pc = pair_counts(p);
        let gc = pair_counts(g);
        for (key, &n) in &pc {
            matched += n.min(gc.get(key).copied().unwrap_or(0));
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(matched, pred_total);
    let recall = ratio(matched, gold_total);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(F1Scores {
        precision,
        recall,
        f1,
        matched,
        pred_total,
        gold_total,
    })
}

/// Per-label matched/predicted/gold counts, so alternative micro-averaging
/// conventions stay recoverable from a report.
pub fn per_label_counts(
    preds: &[Vec<EntityPair>],
    golds: &[Vec<EntityPair>],
) -> BTreeMap<String, (usize, usize, usize)> {
    let mut out: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (p, g) in preds.iter().zip(golds) {
        let pc = pair_counts(p);
        let gc = pair_counts(g);
        for ((_, label), n) in &pc {
            out.entry(label.clone()).or_default().1 += n;
        }
        for ((_, label), n) in &gc {
            out.entry(label.clone()).or_default().2 += n;
        }
        for (key, &n) in &pc {
            let m = n.min(gc.get(key).copied().unwrap_or(0));
            out.entry(key.1.clone()).or_default().0 += m;
        }
    }
    out
}

/// Fraction of exact label matches; a `None` prediction is a parser reject and
/// counts as wrong.
pub fn classification_accuracy(
    preds: &[Option<String>],
    golds: &[String],
) -> Result<f64, MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            op: "classification_accuracy",
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let correct = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_deref() == Some(g.as_str()))
        .count();
    Ok(correct as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub score: f64,
}

/// One evaluated task: the headline value plus enough counts to recompute it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub metric: String,
    pub value: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub malformed_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_label: Option<BTreeMap<String, (usize, usize, usize)>>,
    pub per_sample: Vec<SampleScore>,
}

impl EvalReport {
    pub fn sample_count(&self) -> usize {
        self.per_sample.len()
    }
}
