//! Projecting dialogue-graph edges onto token pairs through alignments.
//!
//! Cell `(i, j)` of the result holds the label of an edge whose source is
//! aligned to token `i` and whose target is aligned to token `j`; the
//! diagonal is `SELF` and everything else is `NONE`. When two edges land on
//! the same cell the winner is chosen by edge family (AMR roles, then
//! `COREF`, then `SAME`, then speaker edges) and then by the smallest label,
//! so the result never depends on edge order.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue_graph::{Dialogue, DialogueGraph, EdgeKind};
use crate::penman::{Alignment, AmrGraph};

pub const SELF_LABEL: &str = "SELF";
pub const NONE_LABEL: &str = "NONE";
pub const SEP_TOKEN: &str = "[SEP]";

pub const SELF_ID: usize = 0;
pub const NONE_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProjectionError {
    #[error("alignment refers to node `{0}` which is not in the graph")]
    UnknownNode(String),
    #[error("alignment index {index} out of range for {n} tokens")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("matrix dump line {line}: {msg}")]
    Dump { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionOptions {
    /// Rewrite `:X-of` edges as `:X` edges in the opposite direction.
    pub normalize_inverse: bool,
    /// Also label the reverse cell of every edge with the inverse label
    /// (`ARG0` ↔ `ARG0-of`, `COREF` ↔ `COREF-of`).
    pub bidirectional: bool,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self { normalize_inverse: true, bidirectional: false }
    }
}

/// Roles that end in `-of` without being inverses.
fn is_inverse_role(label: &str) -> bool {
    label.ends_with("-of") && label != "consist-of" && !label.starts_with("prep-")
}

pub fn inverse_label(label: &str) -> String {
    if is_inverse_role(label) {
        label[..label.len() - 3].to_string()
    } else {
        format!("{label}-of")
    }
}

fn priority(kind: EdgeKind) -> u8 {
    match kind {
        EdgeKind::Amr => 0,
        EdgeKind::Coref => 1,
        EdgeKind::Same => 2,
        EdgeKind::Speaker(_) => 3,
    }
}

/// Token-by-token relation labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationMatrix {
    n: usize,
    /// Local label table: `SELF`, `NONE`, then the labels used, sorted.
    labels: Vec<String>,
    cells: Vec<u32>,
}

impl RelationMatrix {
    /// Diagonal `SELF`, everything else `NONE`.
    pub fn identity(n: usize) -> Self {
        let mut cells = vec![NONE_ID as u32; n * n];
        for i in 0..n {
            cells[i * n + i] = SELF_ID as u32;
        }
        Self { n, labels: vec![SELF_LABEL.into(), NONE_LABEL.into()], cells }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> &str {
        &self.labels[self.cells[i * self.n + j] as usize]
    }

    /// Labels other than `SELF`/`NONE` that occur in the matrix.
    pub fn used_labels(&self) -> impl Iterator<Item = &str> {
        self.labels[2..].iter().map(String::as_str)
    }

    /// `(i, j, label)` for every cell that is not `NONE`, row-major.
    pub fn non_none(&self) -> impl Iterator<Item = (usize, usize, &str)> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c as usize != NONE_ID)
            .map(move |(k, &c)| (k / self.n, k % self.n, self.labels[c as usize].as_str()))
    }

    /// Row-major relation ids under `vocab`; unseen labels map to `NONE`.
    pub fn ids(&self, vocab: &RelationVocab) -> Vec<usize> {
        let local: Vec<usize> = self.labels.iter().map(|l| vocab.id(l)).collect();
        self.cells.iter().map(|&c| local[c as usize]).collect()
    }

    /// Header line `n<TAB>N`, then `i<TAB>j<TAB>label` per non-`NONE` cell.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("n\t{}\n", self.n);
        for (i, j, l) in self.non_none() {
            let _ = writeln!(out, "{i}\t{j}\t{l}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, ProjectionError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let err = |line: usize, msg: &str| ProjectionError::Dump { line: line + 1, msg: msg.into() };
        let (hl, header) = lines.next().ok_or_else(|| err(0, "missing header"))?;
        let n: usize = header
            .strip_prefix("n\t")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| err(hl, "expected `n<TAB>count`"))?;
        let mut entries = Vec::new();
        for (ln, line) in lines {
            let parts: Vec<&str> = line.split('\t').collect();
            let [i, j, label] = parts[..] else { return Err(err(ln, "expected three fields")) };
            let (i, j): (usize, usize) = match (i.parse(), j.parse()) {
                (Ok(i), Ok(j)) if i < n && j < n => (i, j),
                _ => return Err(err(ln, "bad cell index")),
            };
            entries.push((i, j, label.to_string()));
        }
        let mut labels: Vec<String> =
            entries.iter().map(|e| e.2.clone()).filter(|l| l != SELF_LABEL && l != NONE_LABEL).collect();
        labels.sort();
        labels.dedup();
        let mut table = vec![SELF_LABEL.to_string(), NONE_LABEL.to_string()];
        table.extend(labels);
        let mut m = Self { n, cells: vec![NONE_ID as u32; n * n], labels: Vec::new() };
        for (i, j, l) in entries {
            m.cells[i * n + j] = table.iter().position(|t| *t == l).unwrap() as u32;
        }
        m.labels = table;
        Ok(m)
    }
}

struct Candidate {
    class: u8,
    label: String,
}

fn project(
    graph: &AmrGraph,
    kinds: &[EdgeKind],
    tokens_of: &[Vec<usize>],
    n: usize,
    opts: &ProjectionOptions,
) -> RelationMatrix {
    let mut best: HashMap<(usize, usize), Candidate> = HashMap::new();
    let mut offer = |src: usize, tgt: usize, class: u8, label: &str| {
        for &wi in &tokens_of[src] {
            for &wj in &tokens_of[tgt] {
                if wi == wj {
                    continue;
                }
                let better = match best.get(&(wi, wj)) {
                    None => true,
                    Some(c) => (class, label) < (c.class, c.label.as_str()),
                };
                if better {
                    best.insert((wi, wj), Candidate { class, label: label.to_string() });
                }
            }
        }
    };
    for (e, &kind) in graph.edges().iter().zip(kinds) {
        let (mut s, mut t) = (graph.position(&e.source).unwrap(), graph.position(&e.target).unwrap());
        let mut label = e.label.clone();
        if opts.normalize_inverse && kind == EdgeKind::Amr && is_inverse_role(&label) {
            std::mem::swap(&mut s, &mut t);
            label = inverse_label(&label);
        }
        let class = priority(kind);
        offer(s, t, class, &label);
        if opts.bidirectional {
            offer(t, s, class, &inverse_label(&label));
        }
    }
    let used: BTreeSet<&str> = best.values().map(|c| c.label.as_str()).collect();
    let mut labels = vec![SELF_LABEL.to_string(), NONE_LABEL.to_string()];
    labels.extend(used.iter().map(|s| s.to_string()));
    let index: HashMap<&str, u32> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i as u32)).collect();
    let mut m = RelationMatrix::identity(n);
    for ((i, j), c) in &best {
        m.cells[i * n + j] = index[c.label.as_str()];
    }
    m.labels = labels;
    m
}

/// Projects every edge of `g` onto the token pairs its endpoints align to.
pub fn project_edges(
    g: &DialogueGraph,
    alignment: &Alignment,
    n: usize,
    opts: &ProjectionOptions,
) -> Result<RelationMatrix, ProjectionError> {
    let graph = g.graph();
    let mut tokens_of = vec![Vec::new(); graph.nodes().len()];
    for (node, toks) in alignment.entries() {
        let pos = graph.position(node).ok_or_else(|| ProjectionError::UnknownNode(node.to_string()))?;
        for &t in toks {
            if t >= n {
                return Err(ProjectionError::IndexOutOfRange { index: t, n });
            }
        }
        tokens_of[pos] = toks.iter().copied().collect();
    }
    Ok(project(graph, g.kinds(), &tokens_of, n, opts))
}

/// Node-by-node relation matrix of the graph itself (nodes in declaration order).
pub fn node_relation_matrix(g: &DialogueGraph, opts: &ProjectionOptions) -> RelationMatrix {
    let m = g.graph().nodes().len();
    let tokens_of: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    project(g.graph(), g.kinds(), &tokens_of, m, opts)
}

/// Relation label ↔ id mapping: `SELF` = 0, `NONE` = 1, then sorted labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationVocab {
    labels: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl RelationVocab {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = labels.into_iter().filter(|l| *l != SELF_LABEL && *l != NONE_LABEL).collect();
        let mut all = vec![SELF_LABEL.to_string(), NONE_LABEL.to_string()];
        all.extend(set.into_iter().map(str::to_string));
        Self::from_vec(all)
    }

    fn from_vec(labels: Vec<String>) -> Self {
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self { labels, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindexed(self) -> Self {
        Self::from_vec(self.labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, label: &str) -> usize {
        self.index.get(label).copied().unwrap_or(NONE_ID)
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Deterministic vocabulary over every label used by `matrices`.
pub fn relation_vocab<'a>(matrices: impl IntoIterator<Item = &'a RelationMatrix>) -> RelationVocab {
    let mut labels = BTreeSet::new();
    for m in matrices {
        labels.extend(m.used_labels());
    }
    RelationVocab::from_labels(labels)
}

/// Dialogue tokens concatenated with a separator after every utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueLayout {
    pub tokens: Vec<String>,
    /// Global index of each utterance's first token.
    pub offsets: Vec<usize>,
}

impl DialogueLayout {
    pub fn new(dialogue: &Dialogue) -> Self {
        let mut tokens = Vec::with_capacity(dialogue.token_count() + dialogue.utterances.len());
        let mut offsets = Vec::with_capacity(dialogue.utterances.len());
        for u in &dialogue.utterances {
            offsets.push(tokens.len());
            tokens.extend(u.tokens.iter().cloned());
            tokens.push(SEP_TOKEN.to_string());
        }
        Self { tokens, offsets }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Utterance alignments shifted to global positions and keyed by merged node ids.
    /// `n` may exceed the layout length when extra segments follow the dialogue.
    pub fn global_alignment(&self, dialogue: &Dialogue, n: usize) -> Alignment {
        let mut out = Alignment::new(n);
        for (ui, u) in dialogue.utterances.iter().enumerate() {
            for (gi, a) in u.alignments.iter().enumerate() {
                for (node, toks) in a.entries() {
                    let id = crate::dialogue_graph::merged_id(ui, gi, node);
                    for &t in toks {
                        out.insert(id.clone(), self.offsets[ui] + t);
                    }
                }
            }
        }
        out
    }
}
