//! Merging utterance-level AMRs into one dialogue-level graph.
//!
//! A dummy root points at every sentence root with a speaker-tagged edge,
//! identical non-pronoun concepts in different utterances are joined by
//! `SAME` edges and coreferent nodes by `COREF` edges. Both cross-utterance
//! kinds point from the later utterance to the earlier one.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::penman::{self, Alignment, AlignmentError, AmrGraph, Edge, GraphError, Node, PenmanError};

pub const DUMMY_ID: &str = "dummy";
pub const DUMMY_CONCEPT: &str = "dummy";
pub const SAME_LABEL: &str = "SAME";
pub const COREF_LABEL: &str = "COREF";

/// Concepts never joined by `SAME` edges.
pub const PRONOUNS: &[&str] = &[
    "i", "you", "he", "she", "it", "we", "they", "this", "that", "these", "those", "one", "someone", "something",
    "anyone", "anything", "everyone", "everything",
];

pub fn is_pronoun(concept: &str) -> bool {
    PRONOUNS.contains(&concept)
}

pub fn speaker_label(speaker: u32) -> String {
    format!("SPEAKER{speaker}")
}

#[derive(Debug, Error)]
pub enum DialogueError {
    #[error("dialogue has no utterances")]
    Empty,
    #[error("utterance {utterance} has no sentence graphs")]
    NoGraphs { utterance: usize },
    #[error("utterance {utterance}: {graphs} graphs but {alignments} alignments")]
    AlignmentCount { utterance: usize, graphs: usize, alignments: usize },
    #[error("utterance {utterance}, graph {graph}: {source}")]
    Penman {
        utterance: usize,
        graph: usize,
        #[source]
        source: PenmanError,
    },
    #[error("utterance {utterance}, graph {graph}: {source}")]
    Alignment {
        utterance: usize,
        graph: usize,
        #[source]
        source: AlignmentError,
    },
    #[error("utterance {utterance}, graph {graph}: alignment covers {found} tokens, utterance has {expected}")]
    AlignmentLength { utterance: usize, graph: usize, expected: usize, found: usize },
    #[error("coreference reference ({utterance}, {graph}, `{node}`) does not resolve to a node")]
    DanglingReference { utterance: usize, graph: usize, node: String },
    #[error("coreference reference ({utterance}, {graph}, `{node}`) appears in more than one cluster")]
    OverlappingClusters { utterance: usize, graph: usize, node: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub speaker: u32,
    pub tokens: Vec<String>,
    pub graphs: Vec<AmrGraph>,
    /// One alignment per graph, over utterance-local token indices.
    pub alignments: Vec<Alignment>,
}

impl Utterance {
    pub fn new(speaker: u32, tokens: Vec<String>, graphs: Vec<AmrGraph>, alignments: Vec<Alignment>) -> Self {
        Self { speaker, tokens, graphs, alignments }
    }

    fn validate(&self, index: usize) -> Result<(), DialogueError> {
        if self.graphs.is_empty() {
            return Err(DialogueError::NoGraphs { utterance: index });
        }
        if self.graphs.len() != self.alignments.len() {
            return Err(DialogueError::AlignmentCount {
                utterance: index,
                graphs: self.graphs.len(),
                alignments: self.alignments.len(),
            });
        }
        for (g, a) in self.alignments.iter().enumerate() {
            if a.n_tokens() != self.tokens.len() {
                return Err(DialogueError::AlignmentLength {
                    utterance: index,
                    graph: g,
                    expected: self.tokens.len(),
                    found: a.n_tokens(),
                });
            }
        }
        Ok(())
    }
}

/// Address of a node inside one sentence graph of one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub utterance: usize,
    pub graph: usize,
    pub node: String,
}

impl NodeRef {
    pub fn new(utterance: usize, graph: usize, node: impl Into<String>) -> Self {
        Self { utterance, graph, node: node.into() }
    }

    pub fn merged_id(&self) -> String {
        merged_id(self.utterance, self.graph, &self.node)
    }
}

pub fn merged_id(utterance: usize, graph: usize, node: &str) -> String {
    format!("u{utterance}_s{graph}_{node}")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorefClusters {
    pub clusters: Vec<Vec<NodeRef>>,
}

impl CorefClusters {
    pub fn new(clusters: Vec<Vec<NodeRef>>) -> Self {
        Self { clusters }
    }

    /// Every reference must resolve and clusters must be pairwise disjoint.
    pub fn validate(&self, utterances: &[Utterance]) -> Result<(), DialogueError> {
        let mut seen = HashSet::new();
        for r in self.clusters.iter().flatten() {
            let resolves = utterances
                .get(r.utterance)
                .and_then(|u| u.graphs.get(r.graph))
                .is_some_and(|g| g.contains(&r.node));
            if !resolves {
                return Err(DialogueError::DanglingReference {
                    utterance: r.utterance,
                    graph: r.graph,
                    node: r.node.clone(),
                });
            }
            if !seen.insert(r) {
                return Err(DialogueError::OverlappingClusters {
                    utterance: r.utterance,
                    graph: r.graph,
                    node: r.node.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub coref: CorefClusters,
}

impl Dialogue {
    pub fn new(id: impl Into<String>, utterances: Vec<Utterance>, coref: CorefClusters) -> Result<Self, DialogueError> {
        if utterances.is_empty() {
            return Err(DialogueError::Empty);
        }
        for (i, u) in utterances.iter().enumerate() {
            u.validate(i)?;
        }
        coref.validate(&utterances)?;
        Ok(Self { id: id.into(), utterances, coref })
    }

    /// The first `turns` utterances, with clusters restricted to them.
    pub fn truncated(&self, turns: usize) -> Dialogue {
        let turns = turns.clamp(1, self.utterances.len());
        let clusters = self
            .coref
            .clusters
            .iter()
            .map(|c| c.iter().filter(|r| r.utterance < turns).cloned().collect::<Vec<_>>())
            .filter(|c| !c.is_empty())
            .collect();
        Dialogue {
            id: self.id.clone(),
            utterances: self.utterances[..turns].to_vec(),
            coref: CorefClusters::new(clusters),
        }
    }

    pub fn token_count(&self) -> usize {
        self.utterances.iter().map(|u| u.tokens.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// JSON-lines input

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub speaker: u32,
    pub tokens: Vec<String>,
    pub penman: Vec<String>,
    #[serde(default)]
    pub alignments: Vec<String>,
}

/// Gold relation between two arguments of a dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationRecord {
    pub a1: Vec<String>,
    pub a2: Vec<String>,
    pub relation: String,
    /// Node each argument is anchored to, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a1_node: Option<(usize, usize, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a2_node: Option<(usize, usize, String)>,
}

/// One line of a dialogue file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueRecord {
    #[serde(default)]
    pub id: String,
    pub utterances: Vec<UtteranceRecord>,
    #[serde(default)]
    pub coref: Vec<Vec<(usize, usize, String)>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relations: Vec<RelationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Vec<String>>,
}

impl DialogueRecord {
    pub fn to_dialogue(&self) -> Result<Dialogue, DialogueError> {
        let mut utterances = Vec::with_capacity(self.utterances.len());
        for (ui, u) in self.utterances.iter().enumerate() {
            let mut graphs = Vec::with_capacity(u.penman.len());
            for (gi, text) in u.penman.iter().enumerate() {
                graphs.push(
                    penman::parse_penman(text)
                        .map_err(|source| DialogueError::Penman { utterance: ui, graph: gi, source })?,
                );
            }
            let mut alignments = Vec::with_capacity(graphs.len());
            if u.alignments.is_empty() {
                alignments.extend(graphs.iter().map(|_| Alignment::new(u.tokens.len())));
            } else {
                for (gi, text) in u.alignments.iter().enumerate() {
                    let Some(g) = graphs.get(gi) else {
                        return Err(DialogueError::AlignmentCount {
                            utterance: ui,
                            graphs: graphs.len(),
                            alignments: u.alignments.len(),
                        });
                    };
                    alignments.push(
                        penman::read_alignment(text, g, u.tokens.len())
                            .map_err(|source| DialogueError::Alignment { utterance: ui, graph: gi, source })?,
                    );
                }
            }
            utterances.push(Utterance::new(u.speaker, u.tokens.clone(), graphs, alignments));
        }
        let clusters = self
            .coref
            .iter()
            .map(|c| c.iter().map(|(u, g, n)| NodeRef::new(*u, *g, n.clone())).collect())
            .collect();
        Dialogue::new(self.id.clone(), utterances, CorefClusters::new(clusters))
    }
}

/// Parses a JSON-lines dialogue file. Errors carry the 1-based line number.
pub fn read_dialogue_records(text: &str) -> Result<Vec<DialogueRecord>, (usize, serde_json::Error)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e)))
        .collect()
}

// ---------------------------------------------------------------------------
// Graph construction

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    Amr,
    Speaker(u32),
    Same,
    Coref,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamePolicy {
    /// Each later occurrence links to its nearest earlier occurrence.
    #[default]
    Chain,
    /// Each later occurrence links to every occurrence in earlier utterances.
    AllPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphOptions {
    pub speaker: bool,
    pub same: bool,
    pub coref: bool,
    pub same_policy: SamePolicy,
    /// Skip a COREF edge when a SAME edge already joins the same pair.
    pub dedupe_coref: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self { speaker: true, same: true, coref: true, same_policy: SamePolicy::Chain, dedupe_coref: false }
    }
}

impl GraphOptions {
    pub fn none() -> Self {
        Self { speaker: false, same: false, coref: false, ..Self::default() }
    }
}

/// Source of a merged node inside the original utterance graphs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub utterance: usize,
    pub graph: usize,
    pub node: String,
}

#[derive(Debug, Clone)]
pub struct DialogueGraph {
    graph: AmrGraph,
    kinds: Vec<EdgeKind>,
    /// Parallel to `graph.nodes()`; `None` only for the dummy root.
    provenance: Vec<Option<Provenance>>,
    sentence_roots: usize,
}

impl DialogueGraph {
    pub fn graph(&self) -> &AmrGraph {
        &self.graph
    }

    pub fn dummy(&self) -> &str {
        DUMMY_ID
    }

    /// Edge kinds, parallel to `graph().edges()`.
    pub fn kinds(&self) -> &[EdgeKind] {
        &self.kinds
    }

    pub fn provenance(&self, node_index: usize) -> Option<&Provenance> {
        self.provenance.get(node_index).and_then(Option::as_ref)
    }

    pub fn sentence_roots(&self) -> usize {
        self.sentence_roots
    }

    pub fn utterance_of(&self, node_index: usize) -> Option<usize> {
        self.provenance(node_index).map(|p| p.utterance)
    }

    pub fn count_kind(&self, pred: impl Fn(EdgeKind) -> bool) -> usize {
        self.kinds.iter().filter(|&&k| pred(k)).count()
    }

    fn push_edges(&mut self, edges: Vec<Edge>, kind: EdgeKind) {
        let DialogueGraph { graph, kinds, .. } = self;
        let mut all: Vec<Edge> = graph.edges().to_vec();
        kinds.extend(std::iter::repeat_n(kind, edges.len()));
        all.extend(edges);
        *graph = AmrGraph::from_parts(graph.nodes().to_vec(), all, graph.root().to_string())
            .expect("added edges connect existing nodes");
    }

    /// Merged nodes in (utterance, graph, declaration) order, dummy excluded.
    fn ordered_nodes(&self) -> impl Iterator<Item = (usize, &Provenance)> {
        self.provenance.iter().enumerate().filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
    }
}

/// Renames and concatenates every sentence graph under a dummy root,
/// without any connecting edges.
pub fn merge_utterances(utterances: &[Utterance]) -> DialogueGraph {
    let mut nodes = vec![Node { id: DUMMY_ID.into(), concept: DUMMY_CONCEPT.into(), constant: false }];
    let mut provenance = vec![None];
    let mut edges = Vec::new();
    let mut roots = 0;
    for (ui, u) in utterances.iter().enumerate() {
        for (gi, g) in u.graphs.iter().enumerate() {
            roots += 1;
            for n in g.nodes() {
                nodes.push(Node { id: merged_id(ui, gi, &n.id), concept: n.concept.clone(), constant: n.constant });
                provenance.push(Some(Provenance { utterance: ui, graph: gi, node: n.id.clone() }));
            }
            for e in g.edges() {
                edges.push(Edge {
                    source: merged_id(ui, gi, &e.source),
                    label: e.label.clone(),
                    target: merged_id(ui, gi, &e.target),
                });
            }
        }
    }
    let kinds = vec![EdgeKind::Amr; edges.len()];
    let graph = AmrGraph::from_parts(nodes, edges, DUMMY_ID.into()).expect("renamed ids are unique");
    DialogueGraph { graph, kinds, provenance, sentence_roots: roots }
}

/// Merges the utterances and links the dummy root to every sentence root
/// with a `SPEAKER<k>` edge.
pub fn add_speaker_edges(utterances: &[Utterance]) -> DialogueGraph {
    let mut dg = merge_utterances(utterances);
    for (ui, u) in utterances.iter().enumerate() {
        let edges = u
            .graphs
            .iter()
            .enumerate()
            .map(|(gi, g)| Edge {
                source: DUMMY_ID.into(),
                label: speaker_label(u.speaker),
                target: merged_id(ui, gi, g.root()),
            })
            .collect();
        dg.push_edges(edges, EdgeKind::Speaker(u.speaker));
    }
    dg
}

/// `SAME` edges between identical non-pronoun concepts of different
/// utterances, later to earlier. Constants are attribute values and never linked.
pub fn same_edges(dg: &DialogueGraph, policy: SamePolicy) -> Vec<Edge> {
    let nodes = dg.graph.nodes();
    let mut by_concept: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, p) in dg.ordered_nodes() {
        let n = &nodes[i];
        if n.constant || is_pronoun(&n.concept) {
            continue;
        }
        by_concept.entry(n.concept.as_str()).or_default().push((p.utterance, i));
    }
    let mut out = Vec::new();
    for occurrences in by_concept.values() {
        // `occurrences` is already in (utterance, graph, declaration) order.
        for (k, &(u, i)) in occurrences.iter().enumerate() {
            let mut earlier = occurrences[..k].iter().filter(|&&(eu, _)| eu < u);
            let targets: Vec<usize> = match policy {
                SamePolicy::Chain => earlier.next_back().map(|&(_, j)| j).into_iter().collect(),
                SamePolicy::AllPairs => earlier.map(|&(_, j)| j).collect(),
            };
            out.extend(targets.into_iter().map(|j| Edge {
                source: nodes[i].id.clone(),
                label: SAME_LABEL.into(),
                target: nodes[j].id.clone(),
            }));
        }
    }
    out.sort();
    out
}

/// `COREF` edges inside each cluster: every member points to the nearest
/// earlier member from a strictly earlier utterance.
pub fn coref_edges(dg: &DialogueGraph, clusters: &CorefClusters) -> Result<Vec<Edge>, DialogueError> {
    let position: HashMap<String, usize> =
        dg.graph.nodes().iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
    let mut out = Vec::new();
    for cluster in &clusters.clusters {
        let mut members = Vec::with_capacity(cluster.len());
        for r in cluster {
            let id = r.merged_id();
            let &idx = position.get(&id).ok_or_else(|| DialogueError::DanglingReference {
                utterance: r.utterance,
                graph: r.graph,
                node: r.node.clone(),
            })?;
            members.push((r.utterance, r.graph, idx, id));
        }
        members.sort();
        for (k, (u, _, _, id)) in members.iter().enumerate() {
            if let Some((_, _, _, target)) = members[..k].iter().rev().find(|m| m.0 < *u) {
                out.push(Edge { source: id.clone(), label: COREF_LABEL.into(), target: target.clone() });
            }
        }
    }
    Ok(out)
}

/// Full dialogue graph, each edge family gated by `options`. Deterministic.
pub fn build_dialogue_graph(
    utterances: &[Utterance],
    clusters: &CorefClusters,
    options: &GraphOptions,
) -> Result<DialogueGraph, DialogueError> {
    if utterances.is_empty() {
        return Err(DialogueError::Empty);
    }
    clusters.validate(utterances)?;
    let mut dg = if options.speaker { add_speaker_edges(utterances) } else { merge_utterances(utterances) };
    let mut same = Vec::new();
    if options.same {
        same = same_edges(&dg, options.same_policy);
        dg.push_edges(same.clone(), EdgeKind::Same);
    }
    if options.coref {
        let mut coref = coref_edges(&dg, clusters)?;
        if options.dedupe_coref {
            let linked: HashSet<(&str, &str)> = same.iter().map(|e| (e.source.as_str(), e.target.as_str())).collect();
            coref.retain(|e| !linked.contains(&(e.source.as_str(), e.target.as_str())));
        }
        dg.push_edges(coref, EdgeKind::Coref);
    }
    Ok(dg)
}

pub fn build_for(dialogue: &Dialogue, options: &GraphOptions) -> Result<DialogueGraph, DialogueError> {
    build_dialogue_graph(&dialogue.utterances, &dialogue.coref, options)
}

// ---------------------------------------------------------------------------
// DOT export

pub fn edge_color(kind: EdgeKind) -> &'static str {
    match kind {
        EdgeKind::Amr => "black",
        EdgeKind::Speaker(_) => "blue",
        EdgeKind::Same => "darkgreen",
        EdgeKind::Coref => "red",
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz rendering; added edges are colored by kind.
pub fn to_dot(dg: &DialogueGraph, name: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "digraph \"{}\" {{", dot_escape(name));
    let _ = writeln!(out, "  node [shape=box, fontname=\"Helvetica\"];");
    for n in dg.graph.nodes() {
        let label = if n.constant { n.concept.clone() } else { format!("{} / {}", n.id, n.concept) };
        let shape = if n.id == DUMMY_ID { ", shape=ellipse, style=bold" } else { "" };
        let _ = writeln!(out, "  \"{}\" [label=\"{}\"{shape}];", dot_escape(&n.id), dot_escape(&label));
    }
    for (e, &kind) in dg.graph.edges().iter().zip(&dg.kinds) {
        let color = edge_color(kind);
        let _ = writeln!(
            out,
            "  \"{}\" -> \"{}\" [label=\"{}\", color={color}, fontcolor={color}];",
            dot_escape(&e.source),
            dot_escape(&e.target),
            dot_escape(&e.label)
        );
    }
    out.push_str("}\n");
    out
}
