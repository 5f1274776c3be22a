//! PENMAN graph notation and node-to-token alignment files.
//!
//! Graphs are kept exactly as written: an inverse role such as `:ARG0-of` is
//! stored as an edge from the textual parent to the child with the label
//! `ARG0-of`. Consumers that want normalized directions (the projection
//! step) flip those themselves. Constants (`:polarity -`, quoted strings,
//! numbers) become leaf nodes flagged as constants, with generated ids.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("root `{0}` is not a declared node")]
    MissingRoot(String),
    #[error("edge endpoint `{0}` is not a declared node")]
    UnknownEndpoint(String),
    #[error("node `{0}` is not reachable from the root")]
    Disconnected(String),
    #[error("edges form a cycle through `{0}`")]
    Cycle(String),
    #[error("node `{0}` has an empty concept")]
    EmptyConcept(String),
    #[error("constant node `{0}` has outgoing edges")]
    ConstantWithChildren(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PenmanError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: variable `{var}` declared twice")]
    DuplicateVariable { var: String, line: usize, col: usize },
    #[error("{line}:{col}: reference to undeclared variable `{var}`")]
    UndeclaredVariable { var: String, line: usize, col: usize },
    #[error("{line}:{col}: {source}")]
    Invalid {
        line: usize,
        col: usize,
        #[source]
        source: GraphError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AlignmentError {
    #[error("line {line}: expected `node<TAB>indices`")]
    Malformed { line: usize },
    #[error("line {line}: unknown node `{node}`")]
    UnknownNode { line: usize, node: String },
    #[error("line {line}: token index {index} out of range for {n_tokens} tokens")]
    IndexOutOfRange { line: usize, index: usize, n_tokens: usize },
    #[error("line {line}: node `{node}` listed twice")]
    DuplicateNode { line: usize, node: String },
    #[error("line {line}: `{text}` is not a token index")]
    BadIndex { line: usize, text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub concept: String,
    /// Constants are attribute values; they never carry outgoing edges.
    #[serde(default)]
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub source: String,
    pub label: String,
    pub target: String,
}

/// Rooted, directed, labeled concept graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AmrGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    root: String,
    index: HashMap<String, usize>,
}

impl AmrGraph {
    /// Builds a graph and checks every invariant: unique ids, declared root
    /// and endpoints, reachability from the root and no directed cycle.
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>, root: impl Into<String>) -> Result<Self, GraphError> {
        let graph = Self::from_parts(nodes, edges, root.into())?;
        graph.check_structure()?;
        Ok(graph)
    }

    /// Checks ids and endpoints only; reachability and acyclicity are left to
    /// the caller. Used for merged dialogue graphs with edge kinds disabled.
    pub(crate) fn from_parts(nodes: Vec<Node>, edges: Vec<Edge>, root: String) -> Result<Self, GraphError> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if n.concept.is_empty() {
                return Err(GraphError::EmptyConcept(n.id.clone()));
            }
            if index.insert(n.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateNode(n.id.clone()));
            }
        }
        if !index.contains_key(&root) {
            return Err(GraphError::MissingRoot(root));
        }
        for e in &edges {
            for end in [&e.source, &e.target] {
                if !index.contains_key(end) {
                    return Err(GraphError::UnknownEndpoint(end.clone()));
                }
            }
            if nodes[index[&e.source]].constant {
                return Err(GraphError::ConstantWithChildren(e.source.clone()));
            }
        }
        Ok(Self { nodes, edges, root, index })
    }

    fn check_structure(&self) -> Result<(), GraphError> {
        let n = self.nodes.len();
        let mut children = vec![Vec::new(); n];
        for e in &self.edges {
            children[self.index[&e.source]].push(self.index[&e.target]);
        }
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; n];
        let root = self.index[&self.root];
        let mut stack = vec![(root, 0usize)];
        state[root] = 1;
        while let Some(top) = stack.last_mut() {
            let node = top.0;
            if let Some(&child) = children[node].get(top.1) {
                top.1 += 1;
                match state[child] {
                    0 => {
                        state[child] = 1;
                        stack.push((child, 0));
                    }
                    1 => return Err(GraphError::Cycle(self.nodes[child].id.clone())),
                    _ => {}
                }
            } else {
                state[node] = 2;
                stack.pop();
            }
        }
        if let Some(i) = state.iter().position(|&s| s == 0) {
            return Err(GraphError::Disconnected(self.nodes[i].id.clone()));
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    /// Position of a node in declaration order.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }
}

// ---------------------------------------------------------------------------
// Lexing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    LParen,
    RParen,
    Slash,
    Role(String),
    Quoted(String),
    Symbol(String),
}

#[derive(Debug, Clone, Copy)]
struct Pos {
    line: usize,
    col: usize,
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    col: usize,
    at_line_start: bool,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Self { chars: text.chars().peekable(), line: 1, col: 1, at_line_start: true }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
            self.at_line_start = true;
        } else {
            self.col += 1;
            if !c.is_whitespace() {
                self.at_line_start = false;
            }
        }
        Some(c)
    }

    fn pos(&self) -> Pos {
        Pos { line: self.line, col: self.col }
    }

    fn skip_trivia(&mut self) {
        while let Some(&c) = self.chars.peek() {
            if c == '#' && self.at_line_start {
                while let Some(c) = self.bump() {
                    if c == '\n' {
                        break;
                    }
                }
            } else if c.is_whitespace() {
                self.bump();
            } else {
                break;
            }
        }
    }

    fn is_symbol_char(c: char) -> bool {
        !(c.is_whitespace() || matches!(c, '(' | ')' | '"' | '/'))
    }

    fn next(&mut self) -> Result<Option<(Tok, Pos)>, PenmanError> {
        self.skip_trivia();
        let pos = self.pos();
        let Some(&c) = self.chars.peek() else { return Ok(None) };
        let tok = match c {
            '(' => {
                self.bump();
                Tok::LParen
            }
            ')' => {
                self.bump();
                Tok::RParen
            }
            '/' => {
                self.bump();
                Tok::Slash
            }
            '"' => {
                let mut s = String::from('"');
                self.bump();
                let mut escaped = false;
                loop {
                    match self.bump() {
                        None => {
                            return Err(PenmanError::Syntax {
                                line: pos.line,
                                col: pos.col,
                                msg: "unterminated string".into(),
                            })
                        }
                        Some(c) => {
                            s.push(c);
                            if escaped {
                                escaped = false;
                            } else if c == '\\' {
                                escaped = true;
                            } else if c == '"' {
                                break;
                            }
                        }
                    }
                }
                Tok::Quoted(s)
            }
            ':' => {
                self.bump();
                let mut s = String::new();
                while let Some(&c) = self.chars.peek() {
                    if Self::is_symbol_char(c) && c != ':' {
                        s.push(c);
                        self.bump();
                    } else {
                        break;
                    }
                }
                if s.is_empty() {
                    return Err(PenmanError::Syntax { line: pos.line, col: pos.col, msg: "empty role".into() });
                }
                Tok::Role(s)
            }
            _ => {
                let mut s = String::new();
                while let Some(&c) = self.chars.peek() {
                    if Self::is_symbol_char(c) {
                        s.push(c);
                        self.bump();
                    } else {
                        break;
                    }
                }
                Tok::Symbol(s)
            }
        };
        Ok(Some((tok, pos)))
    }
}

// ---------------------------------------------------------------------------
// Parsing

struct Expr {
    var: String,
    var_pos: Pos,
    concept: String,
    children: Vec<(String, Value)>,
}

enum Value {
    Node(Expr),
    Atom { text: String, quoted: bool, pos: Pos },
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    peeked: Option<(Tok, Pos)>,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Self { lexer: Lexer::new(text), peeked: None }
    }

    fn peek(&mut self) -> Result<Option<&(Tok, Pos)>, PenmanError> {
        if self.peeked.is_none() {
            self.peeked = self.lexer.next()?;
        }
        Ok(self.peeked.as_ref())
    }

    fn next(&mut self) -> Result<Option<(Tok, Pos)>, PenmanError> {
        match self.peeked.take() {
            Some(t) => Ok(Some(t)),
            None => self.lexer.next(),
        }
    }

    fn eof_error(&self) -> PenmanError {
        let p = self.lexer.pos();
        PenmanError::Syntax { line: p.line, col: p.col, msg: "unexpected end of input".into() }
    }

    fn expect_symbol(&mut self, what: &str) -> Result<(String, Pos), PenmanError> {
        match self.next()? {
            Some((Tok::Symbol(s), pos)) => Ok((s, pos)),
            Some((tok, pos)) => Err(PenmanError::Syntax {
                line: pos.line,
                col: pos.col,
                msg: format!("expected {what}, found {}", describe(&tok)),
            }),
            None => Err(self.eof_error()),
        }
    }

    fn expr(&mut self) -> Result<Expr, PenmanError> {
        match self.next()? {
            Some((Tok::LParen, _)) => {}
            Some((tok, pos)) => {
                return Err(PenmanError::Syntax {
                    line: pos.line,
                    col: pos.col,
                    msg: format!("expected `(`, found {}", describe(&tok)),
                })
            }
            None => return Err(self.eof_error()),
        }
        let (var, var_pos) = self.expect_symbol("a variable")?;
        match self.next()? {
            Some((Tok::Slash, _)) => {}
            Some((tok, pos)) => {
                return Err(PenmanError::Syntax {
                    line: pos.line,
                    col: pos.col,
                    msg: format!("expected `/`, found {}", describe(&tok)),
                })
            }
            None => return Err(self.eof_error()),
        }
        let concept = match self.next()? {
            Some((Tok::Symbol(s), _)) | Some((Tok::Quoted(s), _)) => s,
            Some((tok, pos)) => {
                return Err(PenmanError::Syntax {
                    line: pos.line,
                    col: pos.col,
                    msg: format!("expected a concept, found {}", describe(&tok)),
                })
            }
            None => return Err(self.eof_error()),
        };
        let mut children = Vec::new();
        loop {
            match self.next()? {
                Some((Tok::RParen, _)) => break,
                Some((Tok::Role(role), _)) => {
                    let value = match self.peek()? {
                        Some((Tok::LParen, _)) => Value::Node(self.expr()?),
                        Some(_) => match self.next()? {
                            Some((Tok::Symbol(s), pos)) => Value::Atom { text: s, quoted: false, pos },
                            Some((Tok::Quoted(s), pos)) => Value::Atom { text: s, quoted: true, pos },
                            Some((tok, pos)) => {
                                return Err(PenmanError::Syntax {
                                    line: pos.line,
                                    col: pos.col,
                                    msg: format!("expected a value after `:{role}`, found {}", describe(&tok)),
                                })
                            }
                            None => return Err(self.eof_error()),
                        },
                        None => return Err(self.eof_error()),
                    };
                    children.push((role, value));
                }
                Some((tok, pos)) => {
                    return Err(PenmanError::Syntax {
                        line: pos.line,
                        col: pos.col,
                        msg: format!("expected a role or `)`, found {}", describe(&tok)),
                    })
                }
                None => return Err(self.eof_error()),
            }
        }
        Ok(Expr { var, var_pos, concept, children })
    }
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::LParen => "`(`".into(),
        Tok::RParen => "`)`".into(),
        Tok::Slash => "`/`".into(),
        Tok::Role(r) => format!("role `:{r}`"),
        Tok::Quoted(s) | Tok::Symbol(s) => format!("`{s}`"),
    }
}

/// Bare symbols shaped like AMR variables (`b`, `x2`, `wo3`) that are never
/// declared are reported as undeclared references instead of constants.
fn looks_like_variable(s: &str) -> bool {
    let letters = s.chars().take_while(|c| c.is_ascii_lowercase()).count();
    (1..=2).contains(&letters) && s[letters..].chars().all(|c| c.is_ascii_digit())
}

fn collect_vars(expr: &Expr, seen: &mut HashSet<String>) -> Result<(), PenmanError> {
    if !seen.insert(expr.var.clone()) {
        return Err(PenmanError::DuplicateVariable {
            var: expr.var.clone(),
            line: expr.var_pos.line,
            col: expr.var_pos.col,
        });
    }
    for (_, v) in &expr.children {
        if let Value::Node(child) = v {
            collect_vars(child, seen)?;
        }
    }
    Ok(())
}

struct Builder<'a> {
    declared: &'a HashSet<String>,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    constants: usize,
}

impl Builder<'_> {
    fn fresh_constant_id(&mut self, parent: &str) -> String {
        loop {
            let id = format!("{parent}~{}", self.constants);
            self.constants += 1;
            if !self.declared.contains(&id) {
                return id;
            }
        }
    }

    fn visit(&mut self, expr: &Expr) -> Result<(), PenmanError> {
        self.nodes.push(Node { id: expr.var.clone(), concept: expr.concept.clone(), constant: false });
        for (role, value) in &expr.children {
            match value {
                Value::Node(child) => {
                    self.edges.push(Edge { source: expr.var.clone(), label: role.clone(), target: child.var.clone() });
                    self.visit(child)?;
                }
                Value::Atom { text, quoted, pos } => {
                    if !quoted && self.declared.contains(text) {
                        self.edges.push(Edge { source: expr.var.clone(), label: role.clone(), target: text.clone() });
                        continue;
                    }
                    let attribute_role = matches!(role.as_str(), "polarity" | "mode");
                    if !quoted && !attribute_role && looks_like_variable(text) {
                        return Err(PenmanError::UndeclaredVariable { var: text.clone(), line: pos.line, col: pos.col });
                    }
                    let id = self.fresh_constant_id(&expr.var);
                    self.nodes.push(Node { id: id.clone(), concept: text.clone(), constant: true });
                    self.edges.push(Edge { source: expr.var.clone(), label: role.clone(), target: id });
                }
            }
        }
        Ok(())
    }
}

fn build_graph(expr: Expr) -> Result<AmrGraph, PenmanError> {
    let mut declared = HashSet::new();
    collect_vars(&expr, &mut declared)?;
    let mut b = Builder { declared: &declared, nodes: Vec::new(), edges: Vec::new(), constants: 0 };
    b.visit(&expr)?;
    let Builder { nodes, edges, .. } = b;
    AmrGraph::new(nodes, edges, expr.var.clone()).map_err(|source| PenmanError::Invalid {
        line: expr.var_pos.line,
        col: expr.var_pos.col,
        source,
    })
}

/// Parses exactly one PENMAN expression. Leading `#` comment lines are skipped.
pub fn parse_penman(text: &str) -> Result<AmrGraph, PenmanError> {
    let mut parser = Parser::new(text);
    let expr = parser.expr()?;
    if let Some((tok, pos)) = parser.next()? {
        return Err(PenmanError::Syntax {
            line: pos.line,
            col: pos.col,
            msg: format!("trailing input {}", describe(&tok)),
        });
    }
    build_graph(expr)
}

/// Parses a file holding any number of graphs, usually separated by blank lines.
pub fn parse_penman_file(text: &str) -> Result<Vec<AmrGraph>, PenmanError> {
    let mut parser = Parser::new(text);
    let mut graphs = Vec::new();
    while parser.peek()?.is_some() {
        graphs.push(build_graph(parser.expr()?)?);
    }
    Ok(graphs)
}

/// Canonical single-line PENMAN. Children are ordered by role label, then
/// target concept; a node reached a second time is written as its bare variable.
pub fn serialize_penman(g: &AmrGraph) -> String {
    let mut children: Vec<Vec<&Edge>> = vec![Vec::new(); g.nodes.len()];
    for e in &g.edges {
        children[g.index[&e.source]].push(e);
    }
    for list in &mut children {
        list.sort_by(|a, b| {
            let (ca, cb) = (&g.nodes[g.index[&a.target]].concept, &g.nodes[g.index[&b.target]].concept);
            (&a.label, ca, &a.target).cmp(&(&b.label, cb, &b.target))
        });
    }
    let mut out = String::new();
    let mut visited = vec![false; g.nodes.len()];
    write_node(g, &children, g.index[&g.root], &mut visited, &mut out);
    out
}

fn write_node(g: &AmrGraph, children: &[Vec<&Edge>], i: usize, visited: &mut [bool], out: &mut String) {
    let node = &g.nodes[i];
    if node.constant {
        out.push_str(&node.concept);
        return;
    }
    if visited[i] {
        out.push_str(&node.id);
        return;
    }
    visited[i] = true;
    let _ = write!(out, "({} / {}", node.id, node.concept);
    for e in &children[i] {
        let _ = write!(out, " :{} ", e.label);
        write_node(g, children, g.index[&e.target], visited, out);
    }
    out.push(')');
}

// ---------------------------------------------------------------------------
// Alignments

/// One-to-K mapping from graph nodes to 0-based token indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    entries: BTreeMap<String, BTreeSet<usize>>,
    n_tokens: usize,
}

impl Alignment {
    pub fn new(n_tokens: usize) -> Self {
        Self { entries: BTreeMap::new(), n_tokens }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// Tokens aligned to `node`; empty for unaligned nodes.
    pub fn tokens(&self, node: &str) -> impl Iterator<Item = usize> + '_ {
        self.entries.get(node).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &BTreeSet<usize>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds a link; callers are responsible for the index bound.
    pub fn insert(&mut self, node: impl Into<String>, token: usize) {
        debug_assert!(token < self.n_tokens);
        self.entries.entry(node.into()).or_default().insert(token);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.values().all(BTreeSet::is_empty)
    }

    /// Writes the TSV form read back by [`read_alignment`].
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (node, toks) in &self.entries {
            let idx: Vec<String> = toks.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{node}\t{}", idx.join(" "));
        }
        out
    }
}

/// Reads `node<TAB>i j k` lines. Nodes not listed stay unaligned.
pub fn read_alignment(text: &str, g: &AmrGraph, n_tokens: usize) -> Result<Alignment, AlignmentError> {
    let mut alignment = Alignment::new(n_tokens);
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (node, rest) = raw.split_once('\t').ok_or(AlignmentError::Malformed { line })?;
        if !g.contains(node) {
            return Err(AlignmentError::UnknownNode { line, node: node.to_string() });
        }
        if alignment.entries.contains_key(node) {
            return Err(AlignmentError::DuplicateNode { line, node: node.to_string() });
        }
        let mut set = BTreeSet::new();
        for piece in rest.split_whitespace() {
            let index: usize = piece.parse().map_err(|_| AlignmentError::BadIndex { line, text: piece.to_string() })?;
            if index >= n_tokens {
                return Err(AlignmentError::IndexOutOfRange { line, index, n_tokens });
            }
            set.insert(index);
        }
        alignment.entries.insert(node.to_string(), set);
    }
    Ok(alignment)
}
