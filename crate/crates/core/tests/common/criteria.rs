//! One check per acceptance criterion. Each returns a detail line on success
//! and the first counterexample on failure.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::time::Instant;

use dialogue_amr::autodiff::{adam_step, rng_stream, AdamState, ParamId, ParamStore, Tape, Tensor, Var};
use dialogue_amr::dialogue_graph::{build_for, is_pronoun, DialogueGraph, EdgeKind, GraphOptions, SamePolicy};
use dialogue_amr::encoders::{
    dual_attention, dual_fuse_nodes, graph_encode, hier_encode, seq_encode, DualAttentionParams, DualEncoder,
    EncoderConfig, GraphEncoder, HierEncoder, SeqEncoder,
};
use dialogue_amr::harness::{
    build_vocabs, evaluate, generate_corpus, run_ablation, synthetic_dialogue, train, Corpus, Model, ModelKind,
    RunConfig, Split, SyntheticSpec, TaskKind,
};
use dialogue_amr::metrics::{bleu_n, distinct_n, macro_f1, DistinctDenominator, MacroClasses};
use dialogue_amr::penman::{parse_penman, serialize_penman, AmrGraph};
use dialogue_amr::projection::{project_edges, ProjectionOptions};
use dialogue_amr::tasks::{
    beam_search, beam_search_with, decode_step, gen_loss, greedy_with, re_loss, relation_logits, Decoder, Hypothesis,
    Memory, MemoryValues, RelationHead,
};
use rand::Rng;

use super::{
    canonical, check_inputs, check_inputs_on, check_params, projection_oracle, random_alignment, random_amr,
    random_dialogue, random_graph, random_options, readout, GRAD_TOL,
};

pub type Check = Result<String, String>;

fn secs(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

// ---------------------------------------------------------------------------
// 1. PENMAN round trip

pub fn roundtrip_one(g: &AmrGraph) -> Result<(), String> {
    let text = serialize_penman(g);
    let back = parse_penman(&text).map_err(|e| format!("{e} while reparsing {text}"))?;
    if canonical(&back) != canonical(g) {
        return Err(format!("reparsed graph differs: {text}"));
    }
    let again = serialize_penman(&back);
    if again != text {
        return Err(format!("serialization not idempotent:\n{text}\n{again}"));
    }
    Ok(())
}

pub fn penman_roundtrip(n: usize, seed: u64) -> Check {
    let start = Instant::now();
    for k in 0..n {
        let g = random_amr(&mut rng_stream(seed, k as u64), 30);
        roundtrip_one(&g).map_err(|e| format!("graph {k}: {e}"))?;
    }
    Ok(format!("{n} graphs, 0 failures, {:.2}s", secs(start)))
}

// ---------------------------------------------------------------------------
// 2. Dialogue graph invariants

#[derive(Default)]
pub struct EdgeTally {
    pub same: usize,
    pub coref: usize,
}

/// Reachability is only promised when speaker edges link the sentence roots.
pub fn graph_invariants_one(dg: &DialogueGraph, reachable: bool, tally: &mut EdgeTally) -> Result<(), String> {
    let g = dg.graph();
    let n = g.nodes().len();
    let pos = |id: &str| g.position(id).ok_or_else(|| format!("edge endpoint {id} missing"));
    let mut adj = vec![Vec::new(); n];
    for e in g.edges() {
        let (a, b) = (pos(&e.source)?, pos(&e.target)?);
        adj[a].push(b);
        adj[b].push(a);
    }
    let root = pos(dg.dummy())?;
    let mut seen = vec![false; n];
    seen[root] = true;
    let mut queue = VecDeque::from([root]);
    while let Some(i) = queue.pop_front() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s).filter(|_| reachable) {
        return Err(format!("node {} unreachable from the dummy root", g.nodes()[i].id));
    }
    for (e, &kind) in g.edges().iter().zip(dg.kinds()) {
        if !matches!(kind, EdgeKind::Same | EdgeKind::Coref) {
            continue;
        }
        let (a, b) = (pos(&e.source)?, pos(&e.target)?);
        match (dg.utterance_of(a), dg.utterance_of(b)) {
            (Some(ua), Some(ub)) if ua > ub => {}
            other => return Err(format!("{kind:?} edge {} -> {} spans utterances {other:?}", e.source, e.target)),
        }
        if kind == EdgeKind::Same {
            tally.same += 1;
            let (ca, cb) = (&g.nodes()[a].concept, &g.nodes()[b].concept);
            if is_pronoun(ca) || is_pronoun(cb) {
                return Err(format!("SAME edge touches a pronoun: {ca} -> {cb}"));
            }
        } else {
            tally.coref += 1;
        }
    }
    Ok(())
}

pub fn graph_invariants(n: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut tally = EdgeTally::default();
    let spec = SyntheticSpec { seed, n_dialogues: n, ..SyntheticSpec::default() };
    let all_pairs = GraphOptions { same_policy: SamePolicy::AllPairs, ..GraphOptions::default() };
    for r in generate_corpus(&spec) {
        let d = r.to_dialogue().map_err(|e| format!("{}: {e}", r.id))?;
        for opts in [GraphOptions::default(), all_pairs] {
            let dg = build_for(&d, &opts).map_err(|e| format!("{}: {e}", r.id))?;
            graph_invariants_one(&dg, true, &mut tally).map_err(|e| format!("{}: {e}", r.id))?;
        }
    }
    for k in 0..n {
        let mut rng = rng_stream(seed, k as u64);
        let d = random_dialogue(&mut rng);
        let opts = random_options(&mut rng);
        let dg = dialogue_amr::dialogue_graph::build_dialogue_graph(&d.utterances, &d.clusters, &opts)
            .map_err(|e| format!("random dialogue {k}: {e}"))?;
        graph_invariants_one(&dg, opts.speaker, &mut tally).map_err(|e| format!("random dialogue {k}: {e}"))?;
    }
    if tally.same == 0 || tally.coref == 0 {
        return Err(format!("vacuous run: {} SAME, {} COREF edges", tally.same, tally.coref));
    }
    Ok(format!(
        "{n} synthetic + {n} random dialogues, 100% reachable, {} SAME / {} COREF edges checked, {:.2}s",
        tally.same,
        tally.coref,
        secs(start)
    ))
}

// ---------------------------------------------------------------------------
// 3. Projection

pub fn projection_agreement(n: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut labelled = 0usize;
    for k in 0..n {
        let mut rng = rng_stream(seed, k as u64);
        let dg = random_graph(&mut rng);
        let tokens = rng.gen_range(1..=40);
        let alignment = random_alignment(&mut rng, &dg, tokens);
        let opts = ProjectionOptions { normalize_inverse: rng.gen(), bidirectional: rng.gen() };
        let m = project_edges(&dg, &alignment, tokens, &opts).map_err(|e| format!("pair {k}: {e}"))?;
        let want = projection_oracle(&dg, &alignment, tokens, &opts);
        for i in 0..tokens {
            if m.get(i, i) != "SELF" {
                return Err(format!("pair {k}: diagonal ({i},{i}) is {}", m.get(i, i)));
            }
            for j in 0..tokens {
                let w = &want[i * tokens + j];
                if m.get(i, j) != w {
                    return Err(format!("pair {k}: cell ({i},{j}) is {} but the oracle says {w}", m.get(i, j)));
                }
                labelled += usize::from(i != j && w != "NONE");
            }
        }
    }
    Ok(format!("{n} pairs, exact, {labelled} labelled off-diagonal cells, {:.2}s", secs(start)))
}

// ---------------------------------------------------------------------------
// 4. Gradients

fn t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, &mut rng_stream(seed, 1))
}

type Case = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

fn primitive_cases() -> Vec<(&'static str, Vec<Tensor>, Case)> {
    vec![
        ("matmul", vec![t(&[3, 4], 1), t(&[4, 2], 2)], Box::new(|tp, v| {
            let o = tp.matmul(v[0], v[1]).unwrap();
            readout(tp, o, 1)
        })),
        ("transpose", vec![t(&[3, 4], 3)], Box::new(|tp, v| {
            let o = tp.transpose(v[0]).unwrap();
            readout(tp, o, 2)
        })),
        ("add", vec![t(&[3, 4], 4), t(&[3, 4], 5)], Box::new(|tp, v| {
            let o = tp.add(v[0], v[1]).unwrap();
            readout(tp, o, 3)
        })),
        ("broadcast add", vec![t(&[3, 4], 6), t(&[4], 7)], Box::new(|tp, v| {
            let o = tp.add(v[0], v[1]).unwrap();
            readout(tp, o, 4)
        })),
        ("mul", vec![t(&[3, 4], 8), t(&[3, 4], 9)], Box::new(|tp, v| {
            let o = tp.mul(v[0], v[1]).unwrap();
            readout(tp, o, 5)
        })),
        ("scale", vec![t(&[2, 3], 10)], Box::new(|tp, v| {
            let o = tp.scale(v[0], -1.7).unwrap();
            readout(tp, o, 6)
        })),
        ("concat", vec![t(&[3, 2], 11), t(&[3, 3], 12)], Box::new(|tp, v| {
            let o = tp.concat(&[v[0], v[1]]).unwrap();
            readout(tp, o, 7)
        })),
        ("slice", vec![t(&[3, 5], 13)], Box::new(|tp, v| {
            let o = tp.slice(v[0], 1, 4).unwrap();
            readout(tp, o, 8)
        })),
        ("slice_rows", vec![t(&[4, 3], 14)], Box::new(|tp, v| {
            let o = tp.slice_rows(v[0], 1, 3).unwrap();
            readout(tp, o, 9)
        })),
        ("embedding_lookup", vec![t(&[5, 3], 15)], Box::new(|tp, v| {
            let o = tp.embedding_lookup(v[0], &[0, 2, 2, 4]).unwrap();
            readout(tp, o, 10)
        })),
        ("relu", vec![t(&[3, 4], 16)], Box::new(|tp, v| {
            let o = tp.relu(v[0]).unwrap();
            readout(tp, o, 11)
        })),
        ("softmax", vec![t(&[3, 4], 17)], Box::new(|tp, v| {
            let o = tp.softmax(v[0]).unwrap();
            readout(tp, o, 12)
        })),
        ("layer_norm", vec![t(&[3, 4], 18), t(&[4], 19), t(&[4], 20)], Box::new(|tp, v| {
            let o = tp.layer_norm(v[0], v[1], v[2]).unwrap();
            readout(tp, o, 13)
        })),
        ("cross_entropy", vec![t(&[3, 5], 21)], Box::new(|tp, v| tp.cross_entropy(v[0], &[4, 0, 2]).unwrap())),
        ("sum", vec![t(&[3, 4], 22)], Box::new(|tp, v| {
            let w = tp.constant(t(&[3, 4], 99));
            let o = tp.mul(v[0], w).unwrap();
            tp.sum(o).unwrap()
        })),
        ("mean_rows", vec![t(&[4, 3], 23)], Box::new(|tp, v| {
            let o = tp.mean_rows(v[0]).unwrap();
            readout(tp, o, 14)
        })),
        ("rel_scores", vec![t(&[3, 4], 24), t(&[9, 4], 25)], Box::new(|tp, v| {
            let o = tp.rel_scores(v[0], v[1]).unwrap();
            readout(tp, o, 15)
        })),
        ("rel_mix", vec![t(&[3, 3], 26), t(&[9, 4], 27)], Box::new(|tp, v| {
            let o = tp.rel_mix(v[0], v[1]).unwrap();
            readout(tp, o, 16)
        })),
    ]
}

pub fn small_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        rel_dim: 4,
        dropout: 0.0,
        max_len: 16,
        word_vocab: 7,
        concept_vocab: 6,
        relation_vocab: 5,
    }
}

const WORDS: [usize; 5] = [1, 3, 3, 6, 0];
const NODES: [usize; 4] = [0, 2, 5, 1];
const RELATIONS: [usize; 16] = [0, 1, 3, 4, 2, 0, 1, 1, 4, 4, 0, 2, 3, 1, 2, 0];
const FUSION: [usize; 5] = [0, 3, 1, 1, 2];
const TARGET: [usize; 3] = [3, 4, 2];

fn composed_cases() -> Vec<(&'static str, f64)> {
    let cfg = small_config();
    let mut out = Vec::new();
    {
        let mut store = ParamStore::new();
        let enc = SeqEncoder::new(&mut store, "seq", &cfg, &mut rng_stream(11, 0)).unwrap();
        out.push(("seq encoder", check_params(&mut store, |tp, st| {
            let h = seq_encode(tp, st, &enc, &WORDS).unwrap().hidden;
            readout(tp, h, 21)
        })));
    }
    {
        let mut store = ParamStore::new();
        let enc = GraphEncoder::new(&mut store, "graph", &cfg, true, &mut rng_stream(12, 0)).unwrap();
        out.push(("graph encoder", check_params(&mut store, |tp, st| {
            let h = graph_encode(tp, st, &enc, &NODES, &RELATIONS).unwrap().hidden;
            readout(tp, h, 22)
        })));
    }
    {
        let mut store = ParamStore::new();
        let enc = HierEncoder::new(&mut store, "hier", &cfg, &mut rng_stream(13, 0)).unwrap();
        out.push(("hier encoder", check_params(&mut store, |tp, st| {
            let h = hier_encode(tp, st, &enc, &WORDS[..4], &RELATIONS).unwrap().hidden;
            readout(tp, h, 23)
        })));
    }
    {
        let mut store = ParamStore::new();
        let enc = DualEncoder::new(&mut store, "dual", &cfg, &mut rng_stream(14, 0)).unwrap();
        out.push(("dual fusion", check_params(&mut store, |tp, st| {
            let hs = seq_encode(tp, st, &enc.seq, &WORDS).unwrap().hidden;
            let hg = graph_encode(tp, st, &enc.graph, &NODES, &RELATIONS).unwrap().hidden;
            let h = dual_fuse_nodes(tp, st, &enc.fuse, hs, hg, &FUSION).unwrap();
            readout(tp, h, 24)
        })));
    }
    {
        let mut store = ParamStore::new();
        let p = DualAttentionParams::new(&mut store, "att", 8, &mut rng_stream(15, 0));
        out.push(("dual attention", check_params(&mut store, |tp, st| {
            let s = tp.constant(t(&[2, 8], 31));
            let hs = tp.constant(t(&[5, 8], 32));
            let hg = tp.constant(t(&[4, 8], 33));
            let c = dual_attention(tp, st, &p, 2, s, hs, hg).unwrap().context;
            readout(tp, c, 25)
        })));
    }
    {
        let mut store = ParamStore::new();
        let mut rng = rng_stream(16, 0);
        let enc = DualEncoder::new(&mut store, "dual", &cfg, &mut rng).unwrap();
        let head = RelationHead::new(&mut store, "rel", 8, 5, &mut rng);
        out.push(("relation head", check_params(&mut store, |tp, st| {
            let hs = seq_encode(tp, st, &enc.seq, &WORDS).unwrap().hidden;
            let hg = graph_encode(tp, st, &enc.graph, &NODES, &RELATIONS).unwrap().hidden;
            let h = dual_fuse_nodes(tp, st, &enc.fuse, hs, hg, &FUSION).unwrap();
            let logits = relation_logits(tp, st, &head, h, &(0..2), &(3..5)).unwrap();
            re_loss(tp, logits, 2).unwrap()
        })));
    }
    {
        let mut store = ParamStore::new();
        let mut rng = rng_stream(17, 0);
        let enc = SeqEncoder::new(&mut store, "seq", &cfg, &mut rng).unwrap();
        let dec = Decoder::new(&mut store, "dec", &cfg, false, 1, 2, &mut rng).unwrap();
        out.push(("generation head", check_params(&mut store, |tp, st| {
            let hs = seq_encode(tp, st, &enc, &WORDS).unwrap().hidden;
            gen_loss(tp, st, &dec, &TARGET, &Memory { text: hs, graph: None }).unwrap()
        })));
    }
    {
        let mut store = ParamStore::new();
        let mut rng = rng_stream(18, 0);
        let enc = DualEncoder::new(&mut store, "dual", &cfg, &mut rng).unwrap();
        let dec = Decoder::new(&mut store, "dec", &cfg, true, 1, 2, &mut rng).unwrap();
        out.push(("dual generation head", check_params(&mut store, |tp, st| {
            let hs = seq_encode(tp, st, &enc.seq, &WORDS).unwrap().hidden;
            let hg = graph_encode(tp, st, &enc.graph, &NODES, &RELATIONS).unwrap().hidden;
            gen_loss(tp, st, &dec, &TARGET, &Memory { text: hs, graph: Some(hg) }).unwrap()
        })));
    }
    out
}

/// Worst relative error for every primitive and composed module.
pub fn gradient_report() -> Vec<(&'static str, f64)> {
    let mut out: Vec<(&'static str, f64)> =
        primitive_cases().into_iter().map(|(name, inputs, f)| (name, check_inputs(&inputs, f))).collect();
    out.push(("dropout", check_inputs_on(|| Tape::training(0.3, rng_stream(9, 9)), &[t(&[4, 5], 40)], |tp, v| {
        let o = tp.dropout(v[0]).unwrap();
        readout(tp, o, 17)
    })));
    out.extend(composed_cases());
    out
}

pub fn gradients() -> Check {
    let start = Instant::now();
    let report = gradient_report();
    let (name, worst) = report.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    if let Some((bad, err)) = report.iter().find(|(_, e)| e.is_nan() || *e >= GRAD_TOL) {
        return Err(format!("{bad}: relative error {err:.3e}"));
    }
    Ok(format!("{} checks, worst {worst:.2e} ({name}), {:.1}s", report.len(), secs(start)))
}

// ---------------------------------------------------------------------------
// 5. Degeneracy

fn copy(dst: &mut ParamStore, d: ParamId, src: &ParamStore, s: ParamId) {
    *dst.get_mut(d) = src.get(s).clone();
}

fn zero(store: &mut ParamStore, id: ParamId) {
    store.get_mut(id).data_mut().fill(0.0);
}

/// Graph encoder with zeroed relation parameters against a sequence encoder
/// sharing its weights with positions removed.
pub fn degeneracy_one(seed: u64) -> Result<(), String> {
    let mut rng = rng_stream(seed, 5);
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let cfg = EncoderConfig { heads, d_model: 8, word_vocab: 6, ..small_config() };
    let mut gs = ParamStore::new();
    let genc = GraphEncoder::new(&mut gs, "g", &cfg, true, &mut rng).map_err(|e| e.to_string())?;
    zero(&mut gs, genc.rel_emb);
    for l in &genc.layers {
        zero(&mut gs, l.attn.wr.expect("relational layer"));
    }
    let mut ss = ParamStore::new();
    let senc = SeqEncoder::new(&mut ss, "s", &cfg, &mut rng).map_err(|e| e.to_string())?;
    copy(&mut ss, senc.word_emb, &gs, genc.node_emb.expect("node embeddings"));
    zero(&mut ss, senc.pos_emb);
    for (s, g) in senc.layers.iter().zip(&genc.layers) {
        let pairs = [
            (s.attn.wq, g.attn.wq),
            (s.attn.wk, g.attn.wk),
            (s.attn.wv, g.attn.wv),
            (s.attn.wo, g.attn.wo),
            (s.ln1.gain, g.ln1.gain),
            (s.ln1.bias, g.ln1.bias),
            (s.ffn.inner.weight, g.ffn.inner.weight),
            (s.ffn.inner.bias, g.ffn.inner.bias),
            (s.ffn.outer.weight, g.ffn.outer.weight),
            (s.ffn.outer.bias, g.ffn.outer.bias),
            (s.ln2.gain, g.ln2.gain),
            (s.ln2.bias, g.ln2.bias),
        ];
        for (d, src) in pairs {
            copy(&mut ss, d, &gs, src);
        }
    }
    let m = rng.gen_range(1..=10);
    let ids: Vec<usize> = (0..m).map(|_| rng.gen_range(0..cfg.concept_vocab)).collect();
    let rels: Vec<usize> = (0..m * m).map(|_| rng.gen_range(0..cfg.relation_vocab)).collect();
    let mut tg = Tape::new();
    let hg = graph_encode(&mut tg, &gs, &genc, &ids, &rels).map_err(|e| e.to_string())?.hidden;
    let mut ts = Tape::new();
    let hs = seq_encode(&mut ts, &ss, &senc, &ids).map_err(|e| e.to_string())?.hidden;
    if tg.value(hg) != ts.value(hs) {
        let diff = tg.value(hg).iter().zip(ts.value(hs)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        return Err(format!("outputs differ by up to {diff:e} (m={m}, heads={heads})"));
    }
    Ok(())
}

pub fn degeneracy(n: usize, seed: u64) -> Check {
    for k in 0..n {
        degeneracy_one(seed.wrapping_mul(1000) + k as u64).map_err(|e| format!("input {k}: {e}"))?;
    }
    Ok(format!("{n} inputs, bit-identical"))
}

// ---------------------------------------------------------------------------
// 6. Overfitting one instance

pub fn overfit_config(task: TaskKind) -> RunConfig {
    let mut c = RunConfig { task, model: ModelKind::Dual, seed: 3, ..RunConfig::default() };
    c.encoder.d_model = 32;
    c.encoder.d_ff = 64;
    c.encoder.rel_dim = 16;
    c.encoder.heads = 4;
    c.encoder.dropout = 0.0;
    c.training.min_count = 1;
    c.training.lr = 1e-3;
    c
}

/// Steps until the single-instance loss drops below `target`.
pub fn overfit(task: TaskKind, target: f64, max_steps: usize) -> Check {
    let start = Instant::now();
    let config = overfit_config(task);
    let record = synthetic_dialogue(&SyntheticSpec { seed: 5, ..SyntheticSpec::default() }, 0);
    let vocabs = build_vocabs(&config, std::slice::from_ref(&record)).map_err(|e| e.to_string())?;
    let mut model = Model::new(&config, vocabs).map_err(|e| e.to_string())?;
    let ex = model.prepare(&record).map_err(|e| e.to_string())?.remove(0);
    let adam = config.training.adam();
    let mut state = AdamState::new(&model.store);
    let mut loss = f64::INFINITY;
    for step in 0..=max_steps {
        model.store.zero_grad();
        let mut tape = Tape::new();
        let l = model.loss(&mut tape, &ex).map_err(|e| e.to_string())?;
        loss = tape.scalar(l);
        if loss < target {
            return Ok(format!("loss {loss:.4} after {step} steps, {:.1}s", secs(start)));
        }
        if step == max_steps {
            break;
        }
        tape.backward(l).map_err(|e| e.to_string())?;
        tape.accumulate_param_grads(&mut model.store);
        adam_step(&mut model.store, &mut state, &adam);
    }
    Err(format!("loss still {loss:.4} after {max_steps} steps"))
}

// ---------------------------------------------------------------------------
// 7. Beam search

/// Best finished sequence by length-normalized score, then length, then
/// token order, over every sequence of at most `max_len` tokens.
pub fn exhaustive_best(step: &dyn Fn(&[usize]) -> Vec<f64>, bos: usize, eos: usize, max_len: usize) -> Hypothesis {
    fn walk(
        step: &dyn Fn(&[usize]) -> Vec<f64>,
        eos: usize,
        max_len: usize,
        prefix: &mut Vec<usize>,
        lp: f64,
        out: &mut Vec<Hypothesis>,
    ) {
        for (v, p) in step(prefix).into_iter().enumerate() {
            prefix.push(v);
            let total = lp + p;
            if v == eos || prefix.len() - 1 == max_len {
                out.push(Hypothesis { tokens: prefix[1..].to_vec(), log_prob: total });
            } else {
                walk(step, eos, max_len, prefix, total, out);
            }
            prefix.pop();
        }
    }
    let mut all = Vec::new();
    walk(step, eos, max_len, &mut vec![bos], 0.0, &mut all);
    all.into_iter()
        .min_by(|a, b| {
            b.score()
                .partial_cmp(&a.score())
                .unwrap()
                .then(a.tokens.len().cmp(&b.tokens.len()))
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .expect("non-empty")
}

pub const FIXTURE_BOS: usize = 3;
pub const FIXTURE_EOS: usize = 2;

/// Three-token vocabulary where the locally best first token leads nowhere.
pub fn beam_fixture(prefix: &[usize]) -> Vec<f64> {
    let p: [f64; 3] = match &prefix[1..] {
        [] => [0.5, 0.4, 0.1],
        [1] => [0.05, 0.05, 0.9],
        [1, 0] => [0.1, 0.2, 0.7],
        _ => [0.34, 0.33, 0.33],
    };
    p.iter().map(|x| x.ln()).collect()
}

fn model_step(store: &ParamStore, dec: &Decoder, mem: &MemoryValues, prefix: &[usize]) -> Vec<f64> {
    let mut tape = Tape::new();
    let m = mem.on(&mut tape);
    let p = decode_step(&mut tape, store, dec, prefix, &m).unwrap();
    tape.value(p).iter().map(|x| x.ln()).collect()
}

pub fn beam_checks(decodes: usize, seed: u64) -> Check {
    let cfg = EncoderConfig { word_vocab: 6, ..small_config() };
    for k in 0..decodes {
        let mut rng = rng_stream(seed, k as u64);
        let mut store = ParamStore::new();
        let dual = k % 2 == 1;
        let dec = Decoder::new(&mut store, "dec", &cfg, dual, 0, 1, &mut rng).unwrap();
        let mem = MemoryValues {
            text: Tensor::uniform(vec![rng.gen_range(1..6), 8], 1.0, &mut rng),
            graph: dual.then(|| Tensor::uniform(vec![rng.gen_range(1..6), 8], 1.0, &mut rng)),
        };
        let beam = beam_search(&store, &dec, &mem, 1, 8).map_err(|e| e.to_string())?;
        let greedy = greedy_with(|p| model_step(&store, &dec, &mem, p), 0, 1, 8);
        if beam != greedy {
            return Err(format!("decode {k}: beam=1 gave {:?}, greedy {:?}", beam.tokens, greedy.tokens));
        }
    }
    let best = exhaustive_best(&beam_fixture, FIXTURE_BOS, FIXTURE_EOS, 4);
    let greedy = greedy_with(beam_fixture, FIXTURE_BOS, FIXTURE_EOS, 4);
    let beam = beam_search_with(beam_fixture, FIXTURE_BOS, FIXTURE_EOS, 5, 4);
    if greedy.tokens == best.tokens {
        return Err("fixture does not separate greedy from the optimum".into());
    }
    if beam != best {
        return Err(format!("beam=5 gave {:?}, exhaustive {:?}", beam.tokens, best.tokens));
    }
    Ok(format!("{decodes} beam=1 decodes equal greedy; beam=5 finds {:?} (greedy {:?})", best.tokens, greedy.tokens))
}

// ---------------------------------------------------------------------------
// 8. Metrics

/// Macro F1 over observed classes from an explicit confusion matrix.
pub fn confusion_macro_f1(preds: &[usize], golds: &[usize], classes: usize) -> f64 {
    let mut cm = vec![vec![0usize; classes]; classes];
    for (&p, &g) in preds.iter().zip(golds) {
        cm[g][p] += 1;
    }
    let mut f1s = Vec::new();
    for c in 0..classes {
        let tp = cm[c][c] as f64;
        let row: usize = cm[c].iter().sum();
        let col: usize = cm.iter().map(|r| r[c]).sum();
        if row + col == 0 {
            continue;
        }
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (row + col) as f64 };
        f1s.push(f1);
    }
    f1s.iter().sum::<f64>() / f1s.len().max(1) as f64
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

pub fn metric_fixtures() -> Check {
    let mut lines = Vec::new();
    let bleu = bleu_n(&[words("the cat sat")], &[words("the cat sat down")], 1).map_err(|e| e.to_string())?;
    let expected = (1.0f64 - 4.0 / 3.0).exp();
    if (bleu - expected).abs() > 1e-6 || (bleu - 0.7165).abs() > 5e-5 {
        return Err(format!("BLEU-1 {bleu} vs {expected}"));
    }
    lines.push(format!("BLEU-1 {bleu:.4}"));
    let d1 = distinct_n(&[words("a a a")], 1, DistinctDenominator::Words);
    let d2 = distinct_n(&[words("a b a b")], 2, DistinctDenominator::Words);
    if d1 != 1.0 / 3.0 || d2 != 0.5 {
        return Err(format!("distinct-1 {d1}, distinct-2 {d2}"));
    }
    lines.push(format!("distinct {d1:.4}/{d2}"));
    let (golds, preds) = ([0, 0, 1, 2], [0, 1, 1, 2]);
    let f1 = macro_f1(&preds, &golds, 3, MacroClasses::Observed).map_err(|e| e.to_string())?;
    let oracle = confusion_macro_f1(&preds, &golds, 3);
    if f1 != oracle {
        return Err(format!("macro F1 {f1} vs confusion oracle {oracle}"));
    }
    lines.push(format!("macro-F1 {f1:.4}"));
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(vec![1, 36]));
    let loss = re_loss(&mut tape, logits, 17).map_err(|e| e.to_string())?;
    let l = tape.scalar(loss);
    if (l - 36f64.ln()).abs() > 1e-6 || (l - 3.5835).abs() > 5e-5 {
        return Err(format!("uniform loss {l}"));
    }
    lines.push(format!("uniform loss {l:.4}"));
    Ok(lines.join(", "))
}

// ---------------------------------------------------------------------------
// 9. Ablation direction

pub const ABLATION_CONFIG: &str = include_str!("../../../../configs/ablation.toml");
pub const ABLATION_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub fn ablation_direction() -> Check {
    let start = Instant::now();
    let base = RunConfig::from_toml(ABLATION_CONFIG).map_err(|e| e.to_string())?;
    let table = run_ablation(&base, &ABLATION_SEEDS, |seed| {
        Ok(Corpus::synthetic(&SyntheticSpec { seed, ..base.corpus.clone() }))
    })
    .map_err(|e| e.to_string())?;
    let mean = |row: &str| table.row(row).map(|r| r.mean).ok_or_else(|| format!("missing row {row}"));
    let full = mean("Dialog-AMR(Dual)")?;
    let text = mean("Text")?;
    let mut summary = format!("full {:.1}", 100.0 * full);
    let mut failures = Vec::new();
    for row in ["-Speaker", "-Ident. concept", "-Coref"] {
        let m = mean(row)?;
        summary.push_str(&format!(", {row} {:.1}", 100.0 * m));
        if m > full {
            failures.push(format!("{row} beats full"));
        }
        if m < text {
            failures.push(format!("{row} below Text"));
        }
    }
    summary.push_str(&format!(", Text {:.1}", 100.0 * text));
    if full - text < 0.03 {
        failures.push("full - Text under 3 points".into());
    }
    if table.row("Text").is_none_or(|r| r.graph_builds != 0 || r.graph_encoder_calls != 0) {
        failures.push("Text model touched graph code".into());
    }
    summary.push_str(&format!(" (dev {} x100, {} seeds, {:.0}s)", table.metric, ABLATION_SEEDS.len(), secs(start)));
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}: {summary}", failures.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// 10. Determinism

pub fn determinism_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.corpus.n_dialogues = 60;
    c.encoder.d_model = 16;
    c.encoder.d_ff = 32;
    c.encoder.rel_dim = 8;
    c.encoder.layers = 1;
    c.encoder.graph_layers = 1;
    c.encoder.decoder_layers = 1;
    c.training.epochs = 2;
    c.training.min_count = 1;
    c
}

/// gen-data, train and eval into `dir`; returns every written file's bytes.
pub fn end_to_end(config: &RunConfig, dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let data = dir.join("data");
    let model_dir = dir.join("model");
    Corpus::synthetic(&config.corpus).write(&data).map_err(|e| e.to_string())?;
    let corpus = Corpus::load(&data).map_err(|e| e.to_string())?;
    let outcome = train(config, &corpus).map_err(|e| e.to_string())?;
    outcome.model.save(&model_dir).map_err(|e| e.to_string())?;
    std::fs::write(model_dir.join("train_log.jsonl"), outcome.log_jsonl()).map_err(|e| e.to_string())?;
    let model = Model::load(&model_dir).map_err(|e| e.to_string())?;
    let eval = evaluate(&model, corpus.get(Split::Dev)).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("report.json"), eval.report.to_json()).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("predictions.jsonl"), eval.predictions_jsonl()).map_err(|e| e.to_string())?;
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in std::fs::read_dir(&p).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.insert(rel, std::fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(files)
}

pub fn determinism(scratch: &Path) -> Check {
    let start = Instant::now();
    let mut summary = Vec::new();
    for task in [TaskKind::Understanding, TaskKind::Generation] {
        let config = RunConfig { task, ..determinism_config() };
        let a = end_to_end(&config, &scratch.join(format!("{task:?}-a")))?;
        let b = end_to_end(&config, &scratch.join(format!("{task:?}-b")))?;
        if a.keys().ne(b.keys()) {
            return Err(format!("{task:?}: different file sets"));
        }
        for (name, bytes) in &a {
            if b[name] != *bytes {
                return Err(format!("{task:?}: {name} differs between runs"));
            }
        }
        summary.push(format!("{task:?} {} files", a.len()));
    }
    Ok(format!("{} byte-identical, {:.1}s", summary.join(", "), secs(start)))
}
