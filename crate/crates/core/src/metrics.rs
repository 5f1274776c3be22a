//! Macro F1, conversational F1, corpus BLEU and Distinct-n.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue_graph::Dialogue;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("{preds} predictions for {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// Which classes enter the macro average.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MacroClasses {
    /// Classes present in gold or predictions.
    #[default]
    Observed,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Per-class scores for every class id below `n_classes`.
pub fn per_class_scores(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<Vec<ClassScore>, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    if let Some(&label) = preds.iter().chain(golds).find(|&&l| l >= n_classes) {
        return Err(MetricsError::LabelOutOfRange { label, classes: n_classes });
    }
    let mut tp = vec![0usize; n_classes];
    let mut pred_n = vec![0usize; n_classes];
    let mut gold_n = vec![0usize; n_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        pred_n[p] += 1;
        gold_n[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((0..n_classes)
        .map(|c| {
            let precision = ratio(tp[c], pred_n[c]);
            let recall = ratio(tp[c], gold_n[c]);
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassScore { precision, recall, f1, support: gold_n[c] }
        })
        .collect())
}

pub fn macro_f1(preds: &[usize], golds: &[usize], n_classes: usize, classes: MacroClasses) -> Result<f64, MetricsError> {
    let scores = per_class_scores(preds, golds, n_classes)?;
    let included: Vec<usize> = match classes {
        MacroClasses::All => (0..n_classes).collect(),
        MacroClasses::Observed => {
            let seen: HashSet<usize> = preds.iter().chain(golds).copied().collect();
            (0..n_classes).filter(|c| seen.contains(c)).collect()
        }
    };
    if included.is_empty() {
        return Ok(0.0);
    }
    Ok(included.iter().map(|&c| scores[c].f1).sum::<f64>() / included.len() as f64)
}

// ---------------------------------------------------------------------------
// Conversational F1

/// Argument of a relation instance: a token string or a speaker reference
/// such as `speaker2`.
pub fn speaker_of(argument: &[String]) -> Option<u32> {
    match argument {
        [only] => only.strip_prefix("speaker").and_then(|k| k.parse().ok()),
        _ => None,
    }
}

fn mentioned_in(dialogue: &Dialogue, turn: usize, argument: &[String]) -> bool {
    let u = &dialogue.utterances[turn];
    if let Some(k) = speaker_of(argument) {
        return u.speaker == k;
    }
    !argument.is_empty() && u.tokens.windows(argument.len()).any(|w| w == argument)
}

/// Number of leading turns needed for both arguments to have appeared, or
/// `None` if one never does. A speaker argument appears in that speaker's turns.
pub fn truncation_turns(dialogue: &Dialogue, a1: &[String], a2: &[String]) -> Option<usize> {
    let first = |arg: &[String]| (0..dialogue.utterances.len()).find(|&t| mentioned_in(dialogue, t, arg));
    Some(first(a1)?.max(first(a2)?) + 1)
}

pub struct ConversationalInstance<'a> {
    pub dialogue: &'a Dialogue,
    pub a1: Vec<String>,
    pub a2: Vec<String>,
    pub gold: usize,
    /// Caller's index, handed back to the predictor.
    pub key: usize,
}

pub struct ConversationalScore {
    pub f1: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Macro F1 with each dialogue cut at the turn where both arguments have
/// first appeared. `predict` receives the truncated dialogue.
pub fn f1_conversational<F>(
    instances: &[ConversationalInstance<'_>],
    mut predict: F,
    n_classes: usize,
    classes: MacroClasses,
) -> Result<ConversationalScore, MetricsError>
where
    F: FnMut(&Dialogue, &ConversationalInstance<'_>) -> usize,
{
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    let mut skipped = 0;
    for inst in instances {
        let Some(turns) = truncation_turns(inst.dialogue, &inst.a1, &inst.a2) else {
            log::warn!("dialogue {}: argument never mentioned, skipped", inst.dialogue.id);
            skipped += 1;
            continue;
        };
        let cut = inst.dialogue.truncated(turns);
        preds.push(predict(&cut, inst));
        golds.push(inst.gold);
    }
    let f1 = macro_f1(&preds, &golds, n_classes, classes)?;
    Ok(ConversationalScore { f1, evaluated: golds.len(), skipped })
}

// ---------------------------------------------------------------------------
// Generation metrics

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over orders `1..=n` with one reference per hypothesis:
/// clipped n-gram precision, geometric mean, brevity penalty, add-one
/// smoothing for orders above 1.
pub fn bleu_n<T: Hash + Eq>(hypotheses: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64, MetricsError> {
    if hypotheses.len() != references.len() {
        return Err(MetricsError::LengthMismatch { preds: hypotheses.len(), golds: references.len() });
    }
    let hyp_len: usize = hypotheses.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    if n == 0 || hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, r) in hypotheses.iter().zip(references) {
            let rc = ngram_counts(r, k);
            for (g, c) in ngram_counts(h, k) {
                matched += c.min(rc.get(g).copied().unwrap_or(0));
                total += c;
            }
        }
        let p = if k == 1 {
            if total == 0 {
                0.0
            } else {
                matched as f64 / total as f64
            }
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistinctDenominator {
    /// Total generated words, for every order.
    #[default]
    Words,
    /// Total generated n-grams of the order being measured.
    Ngrams,
}

/// Distinct n-grams across the corpus divided by the chosen denominator.
pub fn distinct_n<T: Hash + Eq>(hypotheses: &[Vec<T>], n: usize, denominator: DistinctDenominator) -> f64 {
    let mut distinct: HashSet<&[T]> = HashSet::new();
    let mut ngrams = 0;
    let mut words = 0;
    for h in hypotheses {
        words += h.len();
        if n > 0 {
            for w in h.windows(n) {
                distinct.insert(w);
                ngrams += 1;
            }
        }
    }
    let denom = match denominator {
        DistinctDenominator::Words => words,
        DistinctDenominator::Ngrams => ngrams,
    };
    if denom == 0 {
        0.0
    } else {
        distinct.len() as f64 / denom as f64
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub support: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Two aligned columns: metric name, value with four decimals.
    pub fn to_table(&self) -> String {
        let width = self.metrics.keys().chain(self.support.keys()).map(String::len).max().unwrap_or(0).max(6);
        let mut out = format!("{:<width$}  value\n", "metric");
        for (k, v) in &self.metrics {
            out.push_str(&format!("{k:<width$}  {v:.4}\n"));
        }
        if !self.support.is_empty() {
            out.push_str(&format!("{:<width$}  support\n", "class"));
            for (k, v) in &self.support {
                out.push_str(&format!("{k:<width$}  {v}\n"));
            }
        }
        out
    }
}
