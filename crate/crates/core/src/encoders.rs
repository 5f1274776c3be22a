//! Sequence, graph, hierarchical and dual encoders.
//!
//! Matrices follow the row-vector convention: a layer computes `x · W` with
//! `W: [in, out]`, and hidden states are `[length, d]` matrices.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::penman::{Alignment, AmrGraph};

/// Additive score used to hide masked attention positions.
/// Uniform bound giving embedding tables unit variance.
pub const EMBEDDING_BOUND: f64 = 1.7320508075688772;

pub const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("empty input")]
    EmptyInput,
    #[error("input of length {len} exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("id {id} out of range for a vocabulary of {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("alignment index {index} out of range for {n} positions")]
    AlignmentOutOfRange { index: usize, n: usize },
    #[error("aligned node `{0}` is not in the graph")]
    UnknownNode(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub rel_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub word_vocab: usize,
    pub concept_vocab: usize,
    pub relation_vocab: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            rel_dim: 16,
            dropout: 0.1,
            max_len: 256,
            word_vocab: 1,
            concept_vocab: 1,
            relation_vocab: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("rel_dim", self.rel_dim),
            ("max_len", self.max_len),
            ("word_vocab", self.word_vocab),
            ("concept_vocab", self.concept_vocab),
            ("relation_vocab", self.relation_vocab),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(EncoderError::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Hidden states plus the attention weights of every layer and head, kept
/// for inspection.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub hidden: Var,
    pub attention: Vec<Vec<Var>>,
}

// ---------------------------------------------------------------------------
// Building blocks

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self { gain: store.add_ones(format!("{name}.gain"), vec![d]), bias: store.add_zeros(format!("{name}.bias"), vec![d]) }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        Ok(tape.layer_norm(x, g, b)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add_weight(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: store.add_zeros(format!("{name}.bias"), vec![fan_out]),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }
}

/// Projections of one multi-head attention block. `wr` is present for
/// relation-aware attention.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub wr: Option<ParamId>,
}

impl AttnParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rel_dim: Option<usize>, rng: &mut impl Rng) -> Self {
        Self {
            wq: store.add_weight(format!("{name}.wq"), d, d, rng),
            wk: store.add_weight(format!("{name}.wk"), d, d, rng),
            wv: store.add_weight(format!("{name}.wv"), d, d, rng),
            wo: store.add_weight(format!("{name}.wo"), d, d, rng),
            wr: rel_dim.map(|r| store.add_weight(format!("{name}.wr"), r, d, rng)),
        }
    }
}

pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Multi-head attention of `query: [T, d]` over `memory: [M, d]`.
///
/// With `relations: [T*M, rel_dim]` (requires `T == M`), each head adds the
/// projected relation `W^R r_ij` to both keys and values, split across heads
/// like the other projections. `mask: [T, M]` is added to the raw scores.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    p: &AttnParams,
    heads: usize,
    query: Var,
    memory: Var,
    relations: Option<Var>,
    mask: Option<Var>,
) -> Result<Attended> {
    let d = *tape.shape(query).last().unwrap_or(&0);
    let dh = d / heads;
    let wq = tape.param(store, p.wq);
    let wk = tape.param(store, p.wk);
    let wv = tape.param(store, p.wv);
    let wo = tape.param(store, p.wo);
    let q = tape.matmul(query, wq)?;
    let k = tape.matmul(memory, wk)?;
    let v = tape.matmul(memory, wv)?;
    let rw = match (relations, p.wr) {
        (Some(r), Some(wr)) => {
            let wr = tape.param(store, wr);
            Some(tape.matmul(r, wr)?)
        }
        _ => None,
    };
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice(q, lo, hi)?;
        let kh = tape.slice(k, lo, hi)?;
        let vh = tape.slice(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let mut s = tape.matmul(qh, kt)?;
        let rh = match rw {
            Some(rw) => Some(tape.slice(rw, lo, hi)?),
            None => None,
        };
        if let Some(rh) = rh {
            let rs = tape.rel_scores(qh, rh)?;
            s = tape.add(s, rs)?;
        }
        s = tape.scale(s, scale)?;
        if let Some(m) = mask {
            s = tape.add(s, m)?;
        }
        let a = tape.softmax(s)?;
        let mut o = tape.matmul(a, vh)?;
        if let Some(rh) = rh {
            let rm = tape.rel_mix(a, rh)?;
            o = tape.add(o, rm)?;
        }
        outs.push(o);
        weights.push(a);
    }
    let cat = tape.concat(&outs)?;
    Ok(Attended { output: tape.matmul(cat, wo)?, weights })
}

/// `[T, T]` additive mask hiding positions after the query.
pub fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            data[i * t + j] = MASKED;
        }
    }
    Tensor::new(vec![t, t], data).expect("square mask")
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.ffn1"), d, d_ff, rng),
            outer: Linear::new(store, &format!("{name}.ffn2"), d_ff, d, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.apply(tape, store, x)?;
        let h = tape.relu(h)?;
        self.outer.apply(tape, store, h)
    }
}

/// Post-norm transformer layer: attention, residual + norm, FFN, residual + norm.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub attn: AttnParams,
    pub ln1: LayerNormParams,
    pub ffn: FeedForward,
    pub ln2: LayerNormParams,
}

impl LayerParams {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, relational: bool, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        Self {
            attn: AttnParams::new(store, &format!("{name}.attn"), d, relational.then_some(cfg.rel_dim), rng),
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), d),
            ffn: FeedForward::new(store, name, d, cfg.d_ff, rng),
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), d),
        }
    }
}

pub fn encoder_layer(
    tape: &mut Tape,
    store: &ParamStore,
    p: &LayerParams,
    heads: usize,
    x: Var,
    relations: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let att = multi_head_attention(tape, store, &p.attn, heads, x, x, relations, None)?;
    let a = tape.dropout(att.output)?;
    let y = tape.add(x, a)?;
    let y = p.ln1.apply(tape, store, y)?;
    let f = p.ffn.apply(tape, store, y)?;
    let f = tape.dropout(f)?;
    let z = tape.add(y, f)?;
    Ok((p.ln2.apply(tape, store, z)?, att.weights))
}

/// Runs `layers` in order over `x`.
pub fn transformer_stack(
    tape: &mut Tape,
    store: &ParamStore,
    layers: &[LayerParams],
    heads: usize,
    x: Var,
    relations: Option<Var>,
) -> Result<EncoderState> {
    let mut h = x;
    let mut attention = Vec::with_capacity(layers.len());
    for p in layers {
        let (next, w) = encoder_layer(tape, store, p, heads, h, relations)?;
        h = next;
        attention.push(w);
    }
    Ok(EncoderState { hidden: h, attention })
}

fn check_ids(ids: &[usize], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&id| id >= vocab) {
        Some(&id) => Err(EncoderError::OutOfVocab { id, vocab }),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Encoders

#[derive(Debug, Clone)]
pub struct SeqEncoder {
    pub cfg: EncoderConfig,
    pub word_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerParams>,
}

impl SeqEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let bound = EMBEDDING_BOUND;
        let word_emb = store.add(format!("{name}.word_emb"), Tensor::uniform(vec![cfg.word_vocab, d], bound, rng));
        let pos_emb = store.add(format!("{name}.pos_emb"), Tensor::uniform(vec![cfg.max_len, d], bound, rng));
        let layers = (0..cfg.layers).map(|l| LayerParams::new(store, &format!("{name}.layer{l}"), cfg, false, rng)).collect();
        Ok(Self { cfg: *cfg, word_emb, pos_emb, layers })
    }
}

/// Word plus learned positional embeddings, then `L` self-attention layers.
pub fn seq_encode(tape: &mut Tape, store: &ParamStore, enc: &SeqEncoder, ids: &[usize]) -> Result<EncoderState> {
    if ids.is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    if ids.len() > enc.cfg.max_len {
        return Err(EncoderError::TooLong { len: ids.len(), max: enc.cfg.max_len });
    }
    check_ids(ids, enc.cfg.word_vocab)?;
    let we = tape.param(store, enc.word_emb);
    let pe = tape.param(store, enc.pos_emb);
    let w = tape.embedding_lookup(we, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let p = tape.embedding_lookup(pe, &positions)?;
    let x = tape.add(w, p)?;
    transformer_stack(tape, store, &enc.layers, enc.cfg.heads, x, None)
}

/// Relation-aware encoder. Without node embeddings it refines states
/// supplied by the caller (the hierarchical adapter).
#[derive(Debug, Clone)]
pub struct GraphEncoder {
    pub cfg: EncoderConfig,
    pub node_emb: Option<ParamId>,
    pub rel_emb: ParamId,
    pub layers: Vec<LayerParams>,
}

impl GraphEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        node_embeddings: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let node_emb = node_embeddings.then(|| {
            store.add(format!("{name}.concept_emb"), Tensor::uniform(vec![cfg.concept_vocab, d], EMBEDDING_BOUND, rng))
        });
        let rel_emb = store.add(
            format!("{name}.rel_emb"),
            Tensor::uniform(vec![cfg.relation_vocab, cfg.rel_dim], EMBEDDING_BOUND, rng),
        );
        let layers = (0..cfg.layers).map(|l| LayerParams::new(store, &format!("{name}.layer{l}"), cfg, true, rng)).collect();
        Ok(Self { cfg: *cfg, node_emb, rel_emb, layers })
    }
}

/// Relation-aware layers over given node states `x: [M, d]` and the
/// row-major `M*M` relation ids.
pub fn graph_layers(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &GraphEncoder,
    x: Var,
    relation_ids: &[usize],
) -> Result<EncoderState> {
    let m = tape.shape(x)[0];
    if relation_ids.len() != m * m {
        return Err(EncoderError::LengthMismatch { expected: m * m, got: relation_ids.len() });
    }
    check_ids(relation_ids, enc.cfg.relation_vocab)?;
    let table = tape.param(store, enc.rel_emb);
    let r = tape.embedding_lookup(table, relation_ids)?;
    transformer_stack(tape, store, &enc.layers, enc.cfg.heads, x, Some(r))
}

/// Embeds concept ids, then applies the relation-aware layers. No positions.
pub fn graph_encode(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &GraphEncoder,
    node_ids: &[usize],
    relation_ids: &[usize],
) -> Result<EncoderState> {
    if node_ids.is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    let table = enc.node_emb.ok_or_else(|| EncoderError::Config("graph encoder has no node embeddings".into()))?;
    check_ids(node_ids, enc.cfg.concept_vocab)?;
    let table = tape.param(store, table);
    let x = tape.embedding_lookup(table, node_ids)?;
    graph_layers(tape, store, enc, x, relation_ids)
}

/// Single-head relation-aware score `(W^Q h_i) · (W^K h_j + W^R r_ij) / sqrt(dim)`
/// on plain values, with `[in, out]` weight matrices.
pub fn graph_attention_score(
    h_i: &[f64],
    h_j: &[f64],
    r_ij: &[f64],
    wq: &Tensor,
    wk: &Tensor,
    wr: &Tensor,
    dim: usize,
) -> f64 {
    fn project(x: &[f64], w: &Tensor) -> Vec<f64> {
        let out = w.cols();
        let mut y = vec![0.0; out];
        for (p, &xp) in x.iter().enumerate() {
            for (c, yc) in y.iter_mut().enumerate() {
                *yc += xp * w.data()[p * out + c];
            }
        }
        y
    }
    let q = project(h_i, wq);
    let k = project(h_j, wk);
    let r = project(r_ij, wr);
    q.iter().zip(k.iter().zip(&r)).map(|(q, (k, r))| q * (k + r)).sum::<f64>() / (dim as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct HierEncoder {
    pub seq: SeqEncoder,
    pub adapter: GraphEncoder,
    pub fuse: LayerNormParams,
}

impl HierEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            seq: SeqEncoder::new(store, &format!("{name}.seq"), cfg, rng)?,
            adapter: GraphEncoder::new(store, &format!("{name}.adapter"), cfg, false, rng)?,
            fuse: LayerNormParams::new(store, &format!("{name}.fuse"), cfg.d_model),
        })
    }
}

/// `LayerNorm(H^S + GraphLayers(H^S, projected relations))`.
pub fn hier_encode(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &HierEncoder,
    ids: &[usize],
    projected: &[usize],
) -> Result<EncoderState> {
    let n = ids.len();
    if projected.len() != n * n {
        return Err(EncoderError::LengthMismatch { expected: n * n, got: projected.len() });
    }
    let hs = seq_encode(tape, store, &enc.seq, ids)?;
    let refined = graph_layers(tape, store, &enc.adapter, hs.hidden, projected)?;
    let sum = tape.add(hs.hidden, refined.hidden)?;
    let hidden = enc.fuse.apply(tape, store, sum)?;
    let mut attention = hs.attention;
    attention.extend(refined.attention);
    Ok(EncoderState { hidden, attention })
}

/// For each of `n_words` words, the graph row it fuses with: the
/// earliest-declared aligned node, or `dummy` when none is aligned.
pub fn fusion_index(graph: &AmrGraph, alignment: &Alignment, n_words: usize, dummy: usize) -> Result<Vec<usize>> {
    let mut best: Vec<Option<usize>> = vec![None; n_words];
    for (node, tokens) in alignment.entries() {
        let pos = graph.position(node).ok_or_else(|| EncoderError::UnknownNode(node.to_string()))?;
        for &t in tokens {
            if t >= n_words {
                return Err(EncoderError::AlignmentOutOfRange { index: t, n: n_words });
            }
            best[t] = Some(best[t].map_or(pos, |b| b.min(pos)));
        }
    }
    Ok(best.into_iter().map(|b| b.unwrap_or(dummy)).collect())
}

/// `ĥ_i = LayerNorm(h_i^S + h^G_{index[i]})`.
pub fn dual_fuse_nodes(
    tape: &mut Tape,
    store: &ParamStore,
    ln: &LayerNormParams,
    hs: Var,
    hg: Var,
    index: &[usize],
) -> Result<Var> {
    let n = tape.shape(hs)[0];
    let m = tape.shape(hg)[0];
    if index.len() != n {
        return Err(EncoderError::LengthMismatch { expected: n, got: index.len() });
    }
    if let Some(&bad) = index.iter().find(|&&j| j >= m) {
        return Err(EncoderError::AlignmentOutOfRange { index: bad, n: m });
    }
    let picked = tape.embedding_lookup(hg, index)?;
    let sum = tape.add(hs, picked)?;
    ln.apply(tape, store, sum)
}

#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub seq: SeqEncoder,
    pub graph: GraphEncoder,
    pub fuse: LayerNormParams,
}

impl DualEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            seq: SeqEncoder::new(store, &format!("{name}.seq"), cfg, rng)?,
            graph: GraphEncoder::new(store, &format!("{name}.graph"), cfg, true, rng)?,
            fuse: LayerNormParams::new(store, &format!("{name}.fuse"), cfg.d_model),
        })
    }
}

/// Separate attention over the text and graph memories, joined by
/// `c = W^c [c^S; c^G] + b^c`.
#[derive(Debug, Clone, Copy)]
pub struct DualAttentionParams {
    pub text: AttnParams,
    pub graph: AttnParams,
    pub combine: Linear,
}

impl DualAttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            text: AttnParams::new(store, &format!("{name}.text"), d, None, rng),
            graph: AttnParams::new(store, &format!("{name}.graph"), d, None, rng),
            combine: Linear::new(store, &format!("{name}.combine"), 2 * d, d, rng),
        }
    }
}

pub struct DualContext {
    pub context: Var,
    pub text_weights: Vec<Var>,
    pub graph_weights: Vec<Var>,
}

pub fn dual_attention(
    tape: &mut Tape,
    store: &ParamStore,
    p: &DualAttentionParams,
    heads: usize,
    s: Var,
    hs: Var,
    hg: Var,
) -> Result<DualContext> {
    let cs = multi_head_attention(tape, store, &p.text, heads, s, hs, None, None)?;
    let cg = multi_head_attention(tape, store, &p.graph, heads, s, hg, None, None)?;
    let joined = tape.concat(&[cs.output, cg.output])?;
    let context = p.combine.apply(tape, store, joined)?;
    Ok(DualContext { context, text_weights: cs.weights, graph_weights: cg.weights })
}
