//! Relation classification and response generation heads, plus decoding.

use std::cmp::Ordering;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoders::{
    causal_mask, dual_attention, multi_head_attention, AttnParams, DualAttentionParams, EncoderConfig, EncoderError,
    FeedForward, LayerNormParams, Linear,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskError {
    #[error("empty argument span")]
    EmptySpan,
    #[error("span {start}..{end} outside a sequence of {n}")]
    SpanOutOfRange { start: usize, end: usize, n: usize },
    #[error("relation {gold} out of range for {classes} classes")]
    RelationOutOfRange { gold: usize, classes: usize },
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("target does not end with the end-of-sequence id")]
    MissingEos,
    #[error("dual decoder needs a graph memory")]
    MissingGraphMemory,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, TaskError>;

// ---------------------------------------------------------------------------
// Relation classification

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationInstance {
    pub dialogue: String,
    pub a1: Range<usize>,
    pub a2: Range<usize>,
    pub relation: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct RelationHead {
    pub classifier: Linear,
    pub classes: usize,
}

impl RelationHead {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self { classifier: Linear::new(store, name, 2 * d, classes, rng), classes }
    }
}

/// Mean of rows `span` of `h`, as a `[1, d]` row.
pub fn span_mean(tape: &mut Tape, h: Var, span: &Range<usize>) -> Result<Var> {
    let n = tape.shape(h)[0];
    if span.start >= span.end {
        return Err(TaskError::EmptySpan);
    }
    if span.end > n {
        return Err(TaskError::SpanOutOfRange { start: span.start, end: span.end, n });
    }
    let rows = tape.slice_rows(h, span.start, span.end)?;
    Ok(tape.mean_rows(rows)?)
}

/// `W_3 [h_a1; h_a2] + b_3` with mean-pooled argument spans, as `[1, |R|]`.
pub fn relation_logits(
    tape: &mut Tape,
    store: &ParamStore,
    head: &RelationHead,
    fused: Var,
    a1: &Range<usize>,
    a2: &Range<usize>,
) -> Result<Var> {
    let h1 = span_mean(tape, fused, a1)?;
    let h2 = span_mean(tape, fused, a2)?;
    let pair = tape.concat(&[h1, h2])?;
    head.classifier.apply(tape, store, pair).map_err(Into::into)
}

/// `P_rel = softmax(W_3 [h_a1; h_a2] + b_3)`.
pub fn relation_classify(
    tape: &mut Tape,
    store: &ParamStore,
    head: &RelationHead,
    fused: Var,
    a1: &Range<usize>,
    a2: &Range<usize>,
) -> Result<Var> {
    let logits = relation_logits(tape, store, head, fused, a1, a2)?;
    Ok(tape.softmax(logits)?)
}

/// `-log P(gold)` computed from logits.
pub fn re_loss(tape: &mut Tape, logits: Var, gold: usize) -> Result<Var> {
    let classes = *tape.shape(logits).last().unwrap_or(&0);
    if gold >= classes {
        return Err(TaskError::RelationOutOfRange { gold, classes });
    }
    Ok(tape.cross_entropy(logits, &[gold])?)
}

/// Mean of [`re_loss`] over a batch.
pub fn re_batch_loss(tape: &mut Tape, logits: &[Var], golds: &[usize]) -> Result<Var> {
    if logits.is_empty() || logits.len() != golds.len() {
        return Err(TaskError::Encoder(EncoderError::LengthMismatch { expected: golds.len(), got: logits.len() }));
    }
    let losses = logits.iter().zip(golds).map(|(&l, &g)| re_loss(tape, l, g)).collect::<Result<Vec<_>>>()?;
    let all = tape.concat(&losses)?;
    let total = tape.sum(all)?;
    Ok(tape.scale(total, 1.0 / golds.len() as f64)?)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationInstance {
    pub dialogue: String,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub enum CrossAttention {
    Single(AttnParams),
    Dual(DualAttentionParams),
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub self_attn: AttnParams,
    pub ln1: LayerNormParams,
    pub cross: CrossAttention,
    pub ln2: LayerNormParams,
    pub ffn: FeedForward,
    pub ln3: LayerNormParams,
}

/// Transformer decoder whose cross-attention reads the text memory alone or
/// the text and graph memories through dual attention.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: EncoderConfig,
    pub bos: usize,
    pub eos: usize,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub output: Linear,
}

impl Decoder {
    /// `cfg.word_vocab` is the target vocabulary size.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        dual: bool,
        bos: usize,
        eos: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let bound = crate::encoders::EMBEDDING_BOUND;
        let tok_emb = store.add(format!("{name}.tok_emb"), Tensor::uniform(vec![cfg.word_vocab, d], bound, rng));
        let pos_emb = store.add(format!("{name}.pos_emb"), Tensor::uniform(vec![cfg.max_len, d], bound, rng));
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = format!("{name}.layer{l}");
                DecoderLayer {
                    self_attn: AttnParams::new(store, &format!("{n}.self"), d, None, rng),
                    ln1: LayerNormParams::new(store, &format!("{n}.ln1"), d),
                    cross: if dual {
                        CrossAttention::Dual(DualAttentionParams::new(store, &format!("{n}.dual"), d, rng))
                    } else {
                        CrossAttention::Single(AttnParams::new(store, &format!("{n}.cross"), d, None, rng))
                    },
                    ln2: LayerNormParams::new(store, &format!("{n}.ln2"), d),
                    ffn: FeedForward::new(store, &n, d, cfg.d_ff, rng),
                    ln3: LayerNormParams::new(store, &format!("{n}.ln3"), d),
                }
            })
            .collect();
        let output = Linear::new(store, &format!("{name}.out"), d, cfg.word_vocab, rng);
        Ok(Self { cfg: *cfg, bos, eos, tok_emb, pos_emb, layers, output })
    }

    pub fn is_dual(&self) -> bool {
        matches!(self.layers.first().map(|l| l.cross), Some(CrossAttention::Dual(_)))
    }
}

/// Encoder outputs the decoder attends to.
#[derive(Debug, Clone, Copy)]
pub struct Memory {
    pub text: Var,
    pub graph: Option<Var>,
}

/// Encoder outputs detached from any tape, for decoding loops that build a
/// fresh tape per step.
#[derive(Debug, Clone)]
pub struct MemoryValues {
    pub text: Tensor,
    pub graph: Option<Tensor>,
}

impl MemoryValues {
    pub fn from_tape(tape: &Tape, memory: &Memory) -> Self {
        Self { text: tape.tensor(memory.text), graph: memory.graph.map(|g| tape.tensor(g)) }
    }

    pub fn on(&self, tape: &mut Tape) -> Memory {
        Memory { text: tape.constant(self.text.clone()), graph: self.graph.clone().map(|g| tape.constant(g)) }
    }
}

/// Next-token logits `[T, V]` for every position of `prefix`, causally masked.
pub fn decoder_logits(
    tape: &mut Tape,
    store: &ParamStore,
    dec: &Decoder,
    prefix: &[usize],
    memory: &Memory,
) -> Result<Var> {
    let t = prefix.len();
    if t == 0 {
        return Err(TaskError::EmptyTarget);
    }
    if t > dec.cfg.max_len {
        return Err(EncoderError::TooLong { len: t, max: dec.cfg.max_len }.into());
    }
    if let Some(&id) = prefix.iter().find(|&&id| id >= dec.cfg.word_vocab) {
        return Err(EncoderError::OutOfVocab { id, vocab: dec.cfg.word_vocab }.into());
    }
    if dec.is_dual() && memory.graph.is_none() {
        return Err(TaskError::MissingGraphMemory);
    }
    let heads = dec.cfg.heads;
    let te = tape.param(store, dec.tok_emb);
    let pe = tape.param(store, dec.pos_emb);
    let w = tape.embedding_lookup(te, prefix)?;
    let positions: Vec<usize> = (0..t).collect();
    let p = tape.embedding_lookup(pe, &positions)?;
    let mut x = tape.add(w, p)?;
    let mask = tape.constant(causal_mask(t));
    for layer in &dec.layers {
        let a = multi_head_attention(tape, store, &layer.self_attn, heads, x, x, None, Some(mask))?;
        let a = tape.dropout(a.output)?;
        let s = tape.add(x, a)?;
        let s = layer.ln1.apply(tape, store, s)?;
        let c = match &layer.cross {
            CrossAttention::Single(p) => multi_head_attention(tape, store, p, heads, s, memory.text, None, None)?.output,
            CrossAttention::Dual(p) => {
                let hg = memory.graph.ok_or(TaskError::MissingGraphMemory)?;
                dual_attention(tape, store, p, heads, s, memory.text, hg)?.context
            }
        };
        let c = tape.dropout(c)?;
        let y = tape.add(s, c)?;
        let y = layer.ln2.apply(tape, store, y)?;
        let f = layer.ffn.apply(tape, store, y)?;
        let f = tape.dropout(f)?;
        let z = tape.add(y, f)?;
        x = layer.ln3.apply(tape, store, z)?;
    }
    Ok(dec.output.apply(tape, store, x)?)
}

/// `P_voc` for the token following `prev_tokens` (which starts with BOS).
pub fn decode_step(
    tape: &mut Tape,
    store: &ParamStore,
    dec: &Decoder,
    prev_tokens: &[usize],
    memory: &Memory,
) -> Result<Var> {
    let logits = decoder_logits(tape, store, dec, prev_tokens, memory)?;
    let t = prev_tokens.len();
    let last = tape.slice_rows(logits, t - 1, t)?;
    Ok(tape.softmax(last)?)
}

/// Teacher-forced `-Σ_t log P(y_t | y_<t)`; `target` ends with EOS.
pub fn gen_loss(tape: &mut Tape, store: &ParamStore, dec: &Decoder, target: &[usize], memory: &Memory) -> Result<Var> {
    if target.is_empty() {
        return Err(TaskError::EmptyTarget);
    }
    if target.last() != Some(&dec.eos) {
        return Err(TaskError::MissingEos);
    }
    let mut input = Vec::with_capacity(target.len());
    input.push(dec.bos);
    input.extend_from_slice(&target[..target.len() - 1]);
    let logits = decoder_logits(tape, store, dec, &input, memory)?;
    Ok(tape.cross_entropy(logits, target)?)
}

// ---------------------------------------------------------------------------
// Decoding

/// A decoded sequence, without BOS. `log_prob` is the summed token log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Log-probability per token, EOS included.
    pub fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }

    /// Tokens with a trailing EOS removed.
    pub fn content(&self, eos: usize) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == eos => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Higher score first, then earlier finish, then smaller token ids.
fn better(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score()
        .partial_cmp(&a.score())
        .unwrap_or(Ordering::Equal)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Greedy decoding. `step(prefix)` returns next-token log-probabilities for a
/// prefix that starts with `bos`. Ties go to the smaller token id.
pub fn greedy_with<F>(mut step: F, bos: usize, eos: usize, max_len: usize) -> Hypothesis
where
    F: FnMut(&[usize]) -> Vec<f64>,
{
    let mut prefix = vec![bos];
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = step(&prefix);
        let best = argmax(&lp);
        log_prob += lp[best];
        prefix.push(best);
        if best == eos {
            break;
        }
    }
    Hypothesis { tokens: prefix[1..].to_vec(), log_prob }
}

/// Beam search keeping the `beam` best extensions per step (EOS included).
/// A hypothesis finishes on EOS or at `max_len` tokens. The greedy
/// hypothesis joins the finished pool, so the result never scores below it.
pub fn beam_search_with<F>(mut step: F, bos: usize, eos: usize, beam: usize, max_len: usize) -> Hypothesis
where
    F: FnMut(&[usize]) -> Vec<f64>,
{
    let beam = beam.max(1);
    let mut finished = vec![greedy_with(&mut step, bos, eos, max_len)];
    let mut live = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0 }];
    for t in 1..=max_len {
        let mut candidates = Vec::new();
        for h in &live {
            let mut prefix = Vec::with_capacity(h.tokens.len() + 1);
            prefix.push(bos);
            prefix.extend_from_slice(&h.tokens);
            for (v, lp) in step(&prefix).into_iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(v);
                candidates.push(Hypothesis { tokens, log_prob: h.log_prob + lp });
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob.partial_cmp(&a.log_prob).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beam);
        live.clear();
        for c in candidates {
            if c.tokens.last() == Some(&eos) || t == max_len {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    finished.sort_by(better);
    finished.swap_remove(0)
}

fn step_log_probs(store: &ParamStore, dec: &Decoder, memory: &MemoryValues, prefix: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mem = memory.on(&mut tape);
    let p = decode_step(&mut tape, store, dec, prefix, &mem)?;
    Ok(tape.value(p).iter().map(|x| x.ln()).collect())
}

/// Decodes with the model; `max_len` counts generated tokens.
pub fn greedy(store: &ParamStore, dec: &Decoder, memory: &MemoryValues, max_len: usize) -> Result<Hypothesis> {
    beam_search(store, dec, memory, 1, max_len)
}

pub fn beam_search(
    store: &ParamStore,
    dec: &Decoder,
    memory: &MemoryValues,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    let max_len = max_len.min(dec.cfg.max_len - 1);
    let mut err = None;
    let h = beam_search_with(
        |prefix| match step_log_probs(store, dec, memory, prefix) {
            Ok(lp) => lp,
            Err(e) => {
                err.get_or_insert(e);
                vec![0.0; dec.cfg.word_vocab]
            }
        },
        dec.bos,
        dec.eos,
        beam,
        max_len,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(h),
    }
}

// ---------------------------------------------------------------------------
// Prediction dumps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationPrediction {
    pub id: String,
    pub pred: String,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPrediction {
    pub id: String,
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
}
