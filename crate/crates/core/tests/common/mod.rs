//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

pub mod criteria;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use dialogue_amr::autodiff::{rng_stream, ParamId, ParamStore, Tape, Tensor, Var};
use dialogue_amr::dialogue_graph::{
    build_dialogue_graph, CorefClusters, DialogueGraph, EdgeKind, GraphOptions, NodeRef, SamePolicy, Utterance,
};
use dialogue_amr::penman::{Alignment, AmrGraph, Edge, Node};
use dialogue_amr::projection::{inverse_label, ProjectionOptions};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rng_stream(seed, 0xA11CE)
}

// ---------------------------------------------------------------------------
// Random AMR graphs

const CONCEPTS: [&str; 12] =
    ["want-01", "boy", "girl", "go-02", "believe-01", "dog", "city", "see-01", "person", "he", "she", "big"];
const ROLES: [&str; 8] = ["ARG0", "ARG1", "ARG2", "mod", "op1", "op2", "time", "location"];
fn role(rng: &mut impl Rng, inverse_share: f64) -> String {
    let r = ROLES[rng.gen_range(0..ROLES.len())];
    if rng.gen_bool(inverse_share) {
        format!("{r}-of")
    } else {
        r.to_string()
    }
}

const CONSTANTS: [(&str, &str); 4] = [("polarity", "-"), ("quant", "5"), ("value", "\"Ann\""), ("mode", "imperative")];

/// Random rooted DAG: a spanning tree over variables, a few re-entrant
/// edges (always from lower to higher index, so no cycles) and some
/// constant leaves. `max_nodes` counts constants too.
pub fn random_amr(rng: &mut impl Rng, max_nodes: usize) -> AmrGraph {
    random_amr_with(rng, max_nodes, 0.0)
}

/// As [`random_amr`], with a share of roles written in inverse form.
pub fn random_amr_with(rng: &mut impl Rng, max_nodes: usize, inverse_share: f64) -> AmrGraph {
    let total = rng.gen_range(1..=max_nodes.max(1));
    let n_const = if total > 1 { rng.gen_range(0..=total / 4) } else { 0 };
    let n_vars = total - n_const;
    let mut nodes: Vec<Node> = (0..n_vars)
        .map(|i| Node { id: format!("n{i}"), concept: CONCEPTS[rng.gen_range(0..CONCEPTS.len())].into(), constant: false })
        .collect();
    let mut edges = BTreeSet::new();
    for i in 1..n_vars {
        let parent = rng.gen_range(0..i);
        edges.insert(Edge { source: format!("n{parent}"), label: role(rng, inverse_share), target: format!("n{i}") });
    }
    if n_vars > 2 {
        for _ in 0..rng.gen_range(0..=n_vars / 3) {
            let a = rng.gen_range(0..n_vars - 1);
            let b = rng.gen_range(a + 1..n_vars);
            edges.insert(Edge { source: format!("n{a}"), label: role(rng, inverse_share), target: format!("n{b}") });
        }
    }
    for c in 0..n_const {
        let (role, value) = CONSTANTS[rng.gen_range(0..CONSTANTS.len())];
        let parent = rng.gen_range(0..n_vars);
        let id = format!("c{c}");
        nodes.push(Node { id: id.clone(), concept: value.into(), constant: true });
        edges.insert(Edge { source: format!("n{parent}"), label: role.into(), target: id });
    }
    AmrGraph::new(nodes, edges.into_iter().collect(), "n0").expect("generator builds valid graphs")
}

/// Root, variables with concepts, and an edge multiset.
pub type Canonical = (String, BTreeSet<(String, String)>, BTreeMap<(String, String, String), usize>);

/// Graph identity up to the naming of constant nodes: root, variable nodes
/// and edges with constant targets replaced by their value.
pub fn canonical(g: &AmrGraph) -> Canonical {
    let constants: HashMap<&str, &str> =
        g.nodes().iter().filter(|n| n.constant).map(|n| (n.id.as_str(), n.concept.as_str())).collect();
    let vars = g.nodes().iter().filter(|n| !n.constant).map(|n| (n.id.clone(), n.concept.clone())).collect();
    let mut edges = BTreeMap::new();
    for e in g.edges() {
        let target = match constants.get(e.target.as_str()) {
            Some(v) => format!("={v}"),
            None => e.target.clone(),
        };
        *edges.entry((e.source.clone(), e.label.clone(), target)).or_insert(0) += 1;
    }
    (g.root().to_string(), vars, edges)
}

// ---------------------------------------------------------------------------
// Random dialogues

pub struct RandomDialogue {
    pub utterances: Vec<Utterance>,
    pub clusters: CorefClusters,
}

/// Utterances with random small AMRs and alignments over their own tokens,
/// plus random coreference clusters across utterances.
pub fn random_dialogue(rng: &mut impl Rng) -> RandomDialogue {
    let turns = rng.gen_range(1..=5);
    let mut utterances = Vec::new();
    for _ in 0..turns {
        let n_graphs = rng.gen_range(1..=2);
        let graphs: Vec<AmrGraph> = (0..n_graphs).map(|_| random_amr_with(rng, 7, 0.3)).collect();
        let n_tokens = rng.gen_range(1..=8);
        let tokens = (0..n_tokens).map(|i| format!("w{i}")).collect();
        let alignments = graphs
            .iter()
            .map(|g| {
                let mut a = Alignment::new(n_tokens);
                for node in g.nodes() {
                    if rng.gen_bool(0.7) {
                        for _ in 0..rng.gen_range(1..=2) {
                            a.insert(node.id.clone(), rng.gen_range(0..n_tokens));
                        }
                    }
                }
                a
            })
            .collect();
        utterances.push(Utterance::new(rng.gen_range(1..=3), tokens, graphs, alignments));
    }
    let mut clusters = Vec::new();
    let mut used = BTreeSet::new();
    for _ in 0..rng.gen_range(0..=2) {
        let mut members = Vec::new();
        for _ in 0..rng.gen_range(2..=3) {
            let u = rng.gen_range(0..utterances.len());
            let g = rng.gen_range(0..utterances[u].graphs.len());
            let nodes = utterances[u].graphs[g].nodes();
            let node = &nodes[rng.gen_range(0..nodes.len())];
            if !node.constant && used.insert((u, g, node.id.clone())) {
                members.push(NodeRef::new(u, g, node.id.clone()));
            }
        }
        members.sort_by(|a, b| (a.utterance, a.graph, &a.node).cmp(&(b.utterance, b.graph, &b.node)));
        members.dedup();
        if members.len() >= 2 {
            clusters.push(members);
        }
    }
    RandomDialogue { utterances, clusters: CorefClusters::new(clusters) }
}

pub fn random_options(rng: &mut impl Rng) -> GraphOptions {
    GraphOptions {
        speaker: rng.gen(),
        same: rng.gen(),
        coref: rng.gen(),
        same_policy: if rng.gen() { SamePolicy::Chain } else { SamePolicy::AllPairs },
        dedupe_coref: rng.gen(),
    }
}

pub fn random_graph(rng: &mut impl Rng) -> DialogueGraph {
    let d = random_dialogue(rng);
    let opts = random_options(rng);
    build_dialogue_graph(&d.utterances, &d.clusters, &opts).expect("random dialogues are valid")
}

// ---------------------------------------------------------------------------
// Projection oracle

fn family(kind: EdgeKind) -> u8 {
    match kind {
        EdgeKind::Amr => 0,
        EdgeKind::Coref => 1,
        EdgeKind::Same => 2,
        EdgeKind::Speaker(_) => 3,
    }
}

/// Cell-by-cell projection: for every token pair, scan every edge (and its
/// reverse when bidirectional) and keep the best `(family, label)`.
pub fn projection_oracle(dg: &DialogueGraph, alignment: &Alignment, n: usize, opts: &ProjectionOptions) -> Vec<String> {
    let g = dg.graph();
    let aligned = |node: &str, t: usize| alignment.tokens(node).any(|x| x == t);
    let mut out = vec!["NONE".to_string(); n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                out[i * n + j] = "SELF".into();
                continue;
            }
            let mut best: Option<(u8, String)> = None;
            for (e, &kind) in g.edges().iter().zip(dg.kinds()) {
                let (mut src, mut tgt, mut label) = (e.source.as_str(), e.target.as_str(), e.label.clone());
                let inverse = label.ends_with("-of") && label != "consist-of" && !label.starts_with("prep-");
                if opts.normalize_inverse && kind == EdgeKind::Amr && inverse {
                    std::mem::swap(&mut src, &mut tgt);
                    label = label.trim_end_matches("-of").to_string();
                }
                let mut offers = vec![(src, tgt, label.clone())];
                if opts.bidirectional {
                    offers.push((tgt, src, inverse_label(&label)));
                }
                for (s, t, l) in offers {
                    if aligned(s, i) && aligned(t, j) {
                        let cand = (family(kind), l);
                        if best.as_ref().is_none_or(|b| cand < *b) {
                            best = Some(cand);
                        }
                    }
                }
            }
            if let Some((_, l)) = best {
                out[i * n + j] = l;
            }
        }
    }
    out
}

/// Random alignment of merged-graph nodes onto `n` tokens.
pub fn random_alignment(rng: &mut impl Rng, dg: &DialogueGraph, n: usize) -> Alignment {
    let mut a = Alignment::new(n);
    for node in dg.graph().nodes() {
        if rng.gen_bool(0.6) {
            for _ in 0..rng.gen_range(1..=3) {
                a.insert(node.id.clone(), rng.gen_range(0..n));
            }
        }
    }
    a
}

// ---------------------------------------------------------------------------
// Gradient checking

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Relative error with a floor on the denominator so that two vanishing
/// gradients compare as equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Error of `analytic` against the central difference from `f(x+h)`,
/// `f(x)` and `f(x-h)`. If that fails and the one-sided differences jump
/// apart, a ReLU kink lies inside the step; the nearer one-sided
/// difference is used instead.
pub fn fd_error(analytic: f64, up: f64, mid: f64, down: f64) -> f64 {
    let central = rel_err(analytic, (up - down) / (2.0 * FD_STEP));
    let (fwd, bwd) = ((up - mid) / FD_STEP, (mid - down) / FD_STEP);
    if central < GRAD_TOL || (fwd - bwd).abs() < 1e-3 {
        central
    } else {
        rel_err(analytic, fwd).min(rel_err(analytic, bwd))
    }
}

/// Turns any tensor into a scalar through fixed random weights.
pub fn readout(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::uniform(shape, 1.0, &mut rng_stream(seed, 77)));
    let prod = tape.mul(out, w).expect("same shape");
    tape.sum(prod).expect("sum")
}

fn sample(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|k| k * n / max).collect()
    }
}

/// Largest relative error between tape gradients and central differences
/// over the inputs of `f`.
pub fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    check_inputs_on(Tape::new, inputs, f)
}

/// As [`check_inputs`] on tapes from `make`, which must be reproducible.
pub fn check_inputs_on(make: impl Fn() -> Tape, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let run = |inputs: &[Tensor]| {
        let mut tape = make();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let loss = f(&mut tape, &vars);
        (tape, vars, loss)
    };
    let (mut tape, vars, loss) = run(inputs);
    tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Vec<f64>> =
        vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()])).collect();
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for idx in sample(t.numel(), 64) {
            let orig = t.data()[idx];
            work[k].data_mut()[idx] = orig + FD_STEP;
            let (tape_up, _, up) = run(&work);
            work[k].data_mut()[idx] = orig - FD_STEP;
            let (tape_down, _, down) = run(&work);
            work[k].data_mut()[idx] = orig;
            let (tape_mid, _, mid) = run(&work);
            let f = |t: &Tape, v: Var| t.scalar(v);
            worst = worst.max(fd_error(analytic[k][idx], f(&tape_up, up), f(&tape_mid, mid), f(&tape_down, down)));
        }
    }
    worst
}

/// Same check over every parameter in `store`, sampling up to 24 entries
/// per tensor.
pub fn check_params(store: &mut ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Var) -> f64 {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    tape.backward(loss).expect("scalar loss");
    let grads: HashMap<usize, Vec<f64>> = tape.param_grads().map(|(id, g)| (id.index(), g.to_vec())).collect();
    let eval = |store: &ParamStore| {
        let mut t = Tape::new();
        let l = f(&mut t, store);
        t.scalar(l)
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.get(id).numel();
        let analytic = grads.get(&id.index()).cloned().unwrap_or_else(|| vec![0.0; n]);
        for idx in sample(n, 24) {
            let orig = store.get(id).data()[idx];
            store.get_mut(id).data_mut()[idx] = orig + FD_STEP;
            let up = eval(store);
            store.get_mut(id).data_mut()[idx] = orig - FD_STEP;
            let down = eval(store);
            store.get_mut(id).data_mut()[idx] = orig;
            worst = worst.max(fd_error(analytic[idx], up, eval(store), down));
        }
    }
    worst
}

pub fn shuffled<T: Clone>(items: &[T], rng: &mut impl Rng) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    v
}
