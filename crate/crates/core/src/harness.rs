//! Synthetic corpora, training, evaluation and ablation runs.
//!
//! Everything here is deterministic in `(seed, config, corpus)`: random
//! streams are derived from the run seed, logs carry no timestamps and maps
//! are ordered.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{adam_step, rng_stream, AdamConfig, AdamState, ParamStore, Tape};
use crate::dialogue_graph::{
    build_for, merged_id, Dialogue, DialogueError, DialogueRecord, GraphOptions, RelationRecord, SamePolicy,
    UtteranceRecord,
};
use crate::encoders::{
    dual_fuse_nodes, fusion_index, graph_encode, hier_encode, seq_encode, DualEncoder, EncoderConfig, EncoderError,
    HierEncoder, SeqEncoder,
};
use crate::metrics::{
    bleu_n, distinct_n, f1_conversational, macro_f1, ConversationalInstance, DistinctDenominator, EvalReport,
    MacroClasses, MetricsError,
};
use crate::projection::{
    node_relation_matrix, project_edges, relation_vocab, DialogueLayout, ProjectionError, ProjectionOptions,
    RelationVocab, SEP_TOKEN,
};
use crate::tasks::{
    argmax, beam_search, gen_loss, re_loss, relation_logits, Decoder, GenerationPrediction, Memory, MemoryValues,
    RelationHead, RelationPrediction, TaskError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Data { path: PathBuf, line: usize, msg: String },
    #[error("dialogue {id}: {source}")]
    Dialogue { id: String, source: DialogueError },
    #[error("dialogue {id}: {source}")]
    Projection { id: String, source: ProjectionError },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Mismatch(String),
}

type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Relation label, third-person verb, base verb, AMR predicate.
pub const RELATIONS: [(&str, &str, &str, &str); 8] = [
    ("per:positive_impression", "likes", "like", "like-01"),
    ("per:negative_impression", "hates", "hate", "hate-01"),
    ("per:boss", "employs", "employ", "employ-01"),
    ("per:girl/boyfriend", "dates", "date", "date-02"),
    ("per:acquaintance", "knows", "know", "know-01"),
    ("per:spouse", "married", "marry", "marry-01"),
    ("per:parents", "raised", "raise", "raise-03"),
    ("per:friends", "helps", "help", "help-01"),
];

const INTRO_VERBS: [(&str, &str); 4] =
    [("arrived", "arrive-01"), ("left", "leave-11"), ("called", "call-02"), ("waited", "wait-01")];

const FILLERS: [(&[&str], &str, &str); 4] = [
    (&["okay"], "(o / okay-01)", "o\t0\n"),
    (&["i", "see"], "(s / see-01 :ARG0 (i / i))", "s\t1\ni\t0\n"),
    (&["really", "?"], "(r / real-04)", "r\t0\n"),
    (&["go", "on"], "(g / go-on-15)", "g\t0 1\n"),
];

const SYLLABLES: [&str; 16] = ["ka", "lo", "mi", "ru", "ze", "ta", "vo", "ni", "sa", "pe", "do", "gu", "ri", "fa", "no", "bi"];

/// How the two mentions of an entity are linked in a synthetic dialogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkKind {
    /// Pronouns resolved through a coreference cluster.
    Coref,
    /// The name is repeated, so only identical concepts connect the mentions.
    Repeat,
    /// First- and second-person statements whose speaker is not in the text.
    Speaker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_dialogues: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    /// Link kinds drawn uniformly per dialogue.
    pub links: Vec<LinkKind>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_dialogues: 400,
            min_turns: 4,
            max_turns: 5,
            links: vec![LinkKind::Coref, LinkKind::Repeat, LinkKind::Speaker],
        }
    }
}

struct Person {
    name: String,
    female: bool,
}

impl Person {
    fn random(rng: &mut impl Rng) -> Self {
        let name = (0..4).map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())]).collect();
        Self { name, female: rng.gen() }
    }

    fn subject(&self) -> &'static str {
        if self.female {
            "she"
        } else {
            "he"
        }
    }

    fn object(&self) -> &'static str {
        if self.female {
            "her"
        } else {
            "him"
        }
    }
}

fn utterance(speaker: u32, tokens: &[&str], penman: String, alignment: &str) -> UtteranceRecord {
    UtteranceRecord {
        speaker,
        tokens: tokens.iter().map(|t| t.to_string()).collect(),
        penman: vec![penman],
        alignments: vec![alignment.to_string()],
    }
}

fn intro(speaker: u32, pair: &[Person; 2], verb: (&str, &str)) -> UtteranceRecord {
    let [x, y] = pair;
    utterance(
        speaker,
        &[&x.name, "and", &y.name, verb.0],
        format!("(v / {} :ARG1 (a / and :op1 (x / {}) :op2 (y / {})))", verb.1, x.name, y.name),
        "v\t3\na\t1\nx\t0\ny\t2\n",
    )
}

fn statement(speaker: u32, subject: (&str, &str), verb: (&str, &str), object: (&str, &str)) -> UtteranceRecord {
    utterance(
        speaker,
        &[subject.0, verb.0, object.0],
        format!("(v / {} :ARG0 (p / {}) :ARG1 (q / {}))", verb.1, subject.1, object.1),
        "v\t1\np\t0\nq\t2\n",
    )
}

/// One synthetic dialogue with two relation instances and a response.
///
/// Two speakers each introduce a pair of people; later turns state one
/// relation per pair. The statement is tied to its pair only through the
/// dialogue-level link, so the text alone leaves a two-way ambiguity.
pub fn synthetic_dialogue(spec: &SyntheticSpec, index: usize) -> DialogueRecord {
    let (seed, min_turns, max_turns) = (spec.seed, spec.min_turns, spec.max_turns);
    let mut rng = rng_stream(seed, index as u64);
    let link = *spec.links.choose(&mut rng).unwrap_or(&LinkKind::Coref);
    let first: u32 = rng.gen_range(1..=2);
    let second = 3 - first;
    let pairs = [[Person::random(&mut rng), Person::random(&mut rng)], [Person::random(&mut rng), Person::random(&mut rng)]];
    let rel_a = rng.gen_range(0..RELATIONS.len());
    let rel_b = (rel_a + rng.gen_range(1..RELATIONS.len())) % RELATIONS.len();
    let rels = [rel_a, rel_b];

    let mut utterances = vec![
        intro(first, &pairs[0], INTRO_VERBS[rng.gen_range(0..INTRO_VERBS.len())]),
        intro(second, &pairs[1], INTRO_VERBS[rng.gen_range(0..INTRO_VERBS.len())]),
    ];
    // (pair or speaker slot, utterance) for the later turns; fillers carry None.
    let mut rest: Vec<(Option<usize>, UtteranceRecord)> = Vec::new();
    for (k, pair) in pairs.iter().enumerate() {
        let (_, third, base, concept) = RELATIONS[rels[k]];
        let u = match link {
            LinkKind::Coref => {
                let (s, o) = (&pair[0], &pair[1]);
                let obj_concept = o.subject();
                statement(rng.gen_range(1..=2), (s.subject(), s.subject()), (third, concept), (o.object(), obj_concept))
            }
            LinkKind::Repeat => statement(
                rng.gen_range(1..=2),
                (&pair[0].name, &pair[0].name),
                (third, concept),
                (&pair[1].name, &pair[1].name),
            ),
            LinkKind::Speaker => statement(k as u32 + 1, ("i", "i"), (base, concept), ("you", "you")),
        };
        rest.push((Some(k), u));
    }
    let turns = rng.gen_range(min_turns.max(4)..=max_turns.max(min_turns.max(4)));
    for _ in 4..turns {
        let (tokens, penman, align) = FILLERS[rng.gen_range(0..FILLERS.len())];
        rest.push((None, utterance(rng.gen_range(1..=2), tokens, penman.to_string(), align)));
    }
    rest.shuffle(&mut rng);
    let mut statement_turn = [0usize; 2];
    for (slot, u) in rest {
        if let Some(k) = slot {
            statement_turn[k] = utterances.len();
        }
        utterances.push(u);
    }

    let mut coref = Vec::new();
    let mut relations = Vec::new();
    match link {
        LinkKind::Speaker => {
            let intro_of = |speaker: u32| if speaker == first { 0 } else { 1 };
            for (k, (a, b)) in [(1u32, 2u32), (2, 1)].into_iter().enumerate() {
                relations.push(RelationRecord {
                    a1: vec![format!("speaker{a}")],
                    a2: vec![format!("speaker{b}")],
                    relation: RELATIONS[rels[k]].0.to_string(),
                    a1_node: Some((intro_of(a), 0, "v".into())),
                    a2_node: Some((intro_of(b), 0, "v".into())),
                });
            }
        }
        _ => {
            for (k, pair) in pairs.iter().enumerate() {
                if link == LinkKind::Coref {
                    coref.push(vec![(k, 0, "x".to_string()), (statement_turn[k], 0, "p".to_string())]);
                    coref.push(vec![(k, 0, "y".to_string()), (statement_turn[k], 0, "q".to_string())]);
                }
                relations.push(RelationRecord {
                    a1: vec![pair[0].name.clone()],
                    a2: vec![pair[1].name.clone()],
                    relation: RELATIONS[rels[k]].0.to_string(),
                    a1_node: Some((k, 0, "x".into())),
                    a2_node: Some((k, 0, "y".into())),
                });
            }
        }
    }
    let first_statement = statement_turn[0].min(statement_turn[1]);
    let response = vec!["so".to_string(), utterances[first_statement].tokens[1].clone(), "?".to_string()];
    DialogueRecord { id: format!("syn{seed}-{index:05}"), utterances, coref, relations, response: Some(response) }
}

pub fn generate_corpus(spec: &SyntheticSpec) -> Vec<DialogueRecord> {
    (0..spec.n_dialogues).map(|i| synthetic_dialogue(spec, i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Dev => "dev.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

fn id_hash(id: &str) -> [u8; 32] {
    Sha256::digest(id.as_bytes()).into()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<DialogueRecord>,
    pub dev: Vec<DialogueRecord>,
    pub test: Vec<DialogueRecord>,
}

impl Corpus {
    /// 8/1/1 split: dialogues ordered by the SHA-256 of their id, the first
    /// tenth (rounded) becomes dev, the next tenth test, the rest train.
    /// Each split keeps the original record order.
    pub fn split(records: Vec<DialogueRecord>) -> Self {
        let n = records.len();
        let tenth = (n as f64 / 10.0).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_cached_key(|&i| (id_hash(&records[i].id), i));
        let mut split = vec![Split::Train; n];
        for (rank, &i) in order.iter().enumerate() {
            if rank < tenth {
                split[i] = Split::Dev;
            } else if rank < 2 * tenth {
                split[i] = Split::Test;
            }
        }
        let mut corpus = Corpus::default();
        for (r, s) in records.into_iter().zip(split) {
            corpus.get_mut(s).push(r);
        }
        corpus
    }

    pub fn synthetic(spec: &SyntheticSpec) -> Self {
        Self::split(generate_corpus(spec))
    }

    pub fn get(&self, split: Split) -> &[DialogueRecord] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<DialogueRecord> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for split in [Split::Train, Split::Dev, Split::Test] {
            let path = dir.join(split.file_name());
            fs::write(&path, records_to_jsonl(self.get(split))).map_err(io_err(&path))?;
        }
        Ok(())
    }

    /// Reads `train.jsonl`, `dev.jsonl` and `test.jsonl` from `dir`; every
    /// record is checked to build a valid dialogue.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut corpus = Corpus::default();
        for split in [Split::Train, Split::Dev, Split::Test] {
            *corpus.get_mut(split) = load_records(&dir.join(split.file_name()))?;
        }
        Ok(corpus)
    }
}

pub fn records_to_jsonl(records: &[DialogueRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Parses a JSON-lines dialogue file, reporting the file and line of the first problem.
pub fn load_records(path: &Path) -> Result<Vec<DialogueRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let data = |msg: String| HarnessError::Data { path: path.to_path_buf(), line: i + 1, msg };
        let record: DialogueRecord = serde_json::from_str(line).map_err(|e| data(e.to_string()))?;
        record.to_dialogue().map_err(|e| data(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Vocabularies

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK_ID: usize = 0;

/// Token ↔ id table: specials first, then tokens meeting the count
/// threshold in sorted order. Unknown tokens map to `<unk>` (id 0).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(specials: &[&str], tokens: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
        let mut list: Vec<String> = specials.iter().map(|s| s.to_string()).collect();
        for (t, c) in counts {
            if c >= min_count && !specials.contains(&t) {
                list.push(t.to_string());
            }
        }
        Self::from_tokens(list)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindexed(self) -> Self {
        Self::from_tokens(self.tokens)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabs {
    pub words: Vocab,
    pub concepts: Vocab,
    pub relations: RelationVocab,
    pub labels: Vec<String>,
}

impl Vocabs {
    pub fn reindexed(self) -> Self {
        Self {
            words: self.words.reindexed(),
            concepts: self.concepts.reindexed(),
            relations: self.relations.reindexed(),
            labels: self.labels,
        }
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

// ---------------------------------------------------------------------------
// Run configuration

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    #[default]
    Understanding,
    Generation,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Text,
    UtterAmr,
    Hier,
    #[default]
    Dual,
}

impl ModelKind {
    pub fn uses_graph(self) -> bool {
        self != ModelKind::Text
    }
}

/// Dialogue-graph switches. Unset edge families default to on, except for
/// `utter-amr`, which never adds them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphFlags {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speaker: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub same: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coref: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub same_policy: Option<SamePolicy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dedupe_coref: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalize_inverse: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bidirectional: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    pub layers: usize,
    pub graph_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub rel_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            layers: 2,
            graph_layers: 2,
            decoder_layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            rel_dim: 16,
            dropout: 0.1,
            max_len: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs without dev improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub min_count: usize,
    pub beam: usize,
    pub max_decode_len: usize,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 10,
            max_steps: 0,
            min_count: 3,
            beam: 5,
            max_decode_len: 12,
        }
    }
}

impl TrainingSettings {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub model: ModelKind,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphFlags>,
    pub encoder: EncoderSettings,
    pub training: TrainingSettings,
    pub corpus: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::default(),
            model: ModelKind::default(),
            seed: 7,
            graph: None,
            encoder: EncoderSettings::default(),
            training: TrainingSettings::default(),
            corpus: SyntheticSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            let line = e.span().map_or(1, |s| text[..s.start].matches('\n').count() + 1);
            HarnessError::Data { path: path.to_path_buf(), line, msg: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.model, &self.graph) {
            (ModelKind::Text, Some(_)) => {
                return Err(HarnessError::Config("model `text` does not take graph options".into()));
            }
            (ModelKind::UtterAmr, Some(g)) if [g.speaker, g.same, g.coref].contains(&Some(true)) => {
                return Err(HarnessError::Config("model `utter-amr` does not add dialogue edges".into()));
            }
            _ => {}
        }
        if self.training.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be positive".into()));
        }
        if self.training.lr < 0.0 {
            return Err(HarnessError::Config("lr must be non-negative".into()));
        }
        self.encoder_config(&Vocabs::placeholder()).validate()?;
        Ok(())
    }

    /// Dialogue-graph options, `None` for the text model.
    pub fn graph_options(&self) -> Option<GraphOptions> {
        let flags = self.graph.unwrap_or_default();
        let edges = match self.model {
            ModelKind::Text => return None,
            ModelKind::UtterAmr => false,
            _ => true,
        };
        Some(GraphOptions {
            speaker: flags.speaker.unwrap_or(edges),
            same: flags.same.unwrap_or(edges),
            coref: flags.coref.unwrap_or(edges),
            same_policy: flags.same_policy.unwrap_or(SamePolicy::Chain),
            dedupe_coref: flags.dedupe_coref.unwrap_or(false),
        })
    }

    pub fn projection_options(&self) -> ProjectionOptions {
        let flags = self.graph.unwrap_or_default();
        ProjectionOptions {
            normalize_inverse: flags.normalize_inverse.unwrap_or(true),
            bidirectional: flags.bidirectional.unwrap_or(true),
        }
    }

    pub fn encoder_config(&self, vocabs: &Vocabs) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            layers: e.layers,
            heads: e.heads,
            d_model: e.d_model,
            d_ff: e.d_ff,
            rel_dim: e.rel_dim,
            dropout: e.dropout,
            max_len: e.max_len,
            word_vocab: vocabs.words.len().max(1),
            concept_vocab: vocabs.concepts.len().max(1),
            relation_vocab: vocabs.relations.len().max(2),
        }
    }

    /// Hyperparameters listed for the full-scale experiments. Not a CI
    /// target. Graph layers share the sequence hidden size here.
    pub fn full_scale_preset(task: TaskKind) -> Self {
        let mut cfg = RunConfig { task, ..RunConfig::default() };
        match task {
            TaskKind::Understanding => {
                cfg.encoder = EncoderSettings {
                    layers: 12,
                    graph_layers: 3,
                    decoder_layers: 0,
                    heads: 12,
                    d_model: 768,
                    d_ff: 3072,
                    rel_dim: 64,
                    dropout: 0.1,
                    max_len: 512,
                };
                cfg.training.batch_size = 48;
                cfg.training.lr = 3e-5;
                cfg.training.epochs = 30;
            }
            TaskKind::Generation => {
                cfg.encoder = EncoderSettings {
                    layers: 4,
                    graph_layers: 4,
                    decoder_layers: 4,
                    heads: 8,
                    d_model: 512,
                    d_ff: 1024,
                    rel_dim: 64,
                    dropout: 0.1,
                    max_len: 512,
                };
                cfg.training.batch_size = 20;
                cfg.training.lr = 1e-4;
                cfg.training.epochs = 200;
            }
        }
        cfg
    }
}

impl Vocabs {
    fn placeholder() -> Self {
        Vocabs {
            words: Vocab::from_tokens(vec![UNK.into()]),
            concepts: Vocab::from_tokens(vec![UNK.into()]),
            relations: RelationVocab::from_labels([]),
            labels: Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Prepared examples

#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub concepts: Vec<usize>,
    pub relations: Vec<usize>,
}

/// Model-ready ids for one relation instance or one response.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub ids: Vec<usize>,
    pub a1: Range<usize>,
    pub a2: Range<usize>,
    pub gold: usize,
    pub target: Vec<usize>,
    pub graph: Option<GraphInput>,
    pub projected: Option<Vec<usize>>,
    pub fusion: Option<Vec<usize>>,
}

/// Counts of graph work done by a model, used to confirm the text model never
/// touches graph code.
#[derive(Debug, Default)]
pub struct Counters {
    pub graph_builds: AtomicU64,
    pub graph_encoder_calls: AtomicU64,
}

impl Counters {
    pub fn graph_builds(&self) -> u64 {
        self.graph_builds.load(Ordering::Relaxed)
    }

    pub fn graph_encoder_calls(&self) -> u64 {
        self.graph_encoder_calls.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Text(SeqEncoder),
    Hier(HierEncoder),
    Dual(DualEncoder),
}

#[derive(Debug, Clone)]
pub enum Head {
    Relation(RelationHead),
    Decoder(Decoder),
}

pub struct Model {
    pub config: RunConfig,
    pub vocabs: Vocabs,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: Head,
    pub counters: Counters,
}

/// Serialized alongside a checkpoint so a model can be rebuilt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: RunConfig,
    pub vocabs: Vocabs,
}

/// Builds word, concept, relation and label vocabularies from training records.
pub fn build_vocabs(config: &RunConfig, train: &[DialogueRecord]) -> Result<Vocabs> {
    let mut words: Vec<&str> = Vec::new();
    let mut labels = BTreeSet::new();
    for r in train {
        for u in &r.utterances {
            words.extend(u.tokens.iter().map(String::as_str));
        }
        // Argument strings are not counted: they repeat dialogue tokens.
        for rel in &r.relations {
            labels.insert(rel.relation.clone());
        }
        if let Some(resp) = &r.response {
            words.extend(resp.iter().map(String::as_str));
        }
    }
    let min_count = config.training.min_count;
    let word_vocab = Vocab::build(&[UNK, BOS, EOS, SEP_TOKEN], words, min_count);
    let (concepts, relations) = match config.model {
        ModelKind::Text => (Vocab::from_tokens(vec![UNK.into()]), RelationVocab::from_labels([])),
        _ => {
            // Relation labels come from the fully linked graph so every
            // ablation of one corpus shares a relation vocabulary.
            let mut concepts = Vec::new();
            let mut matrices = Vec::new();
            let opts = config.projection_options();
            for r in train {
                let d = r.to_dialogue().map_err(|source| HarnessError::Dialogue { id: r.id.clone(), source })?;
                let dg = build_for(&d, &GraphOptions::default())
                    .map_err(|source| HarnessError::Dialogue { id: r.id.clone(), source })?;
                concepts.extend(dg.graph().nodes().iter().map(|n| n.concept.clone()));
                matrices.push(node_relation_matrix(&dg, &opts));
            }
            let concept_vocab =
                Vocab::build(&[UNK, crate::dialogue_graph::DUMMY_CONCEPT], concepts.iter().map(String::as_str), min_count);
            (concept_vocab, relation_vocab(&matrices))
        }
    };
    Ok(Vocabs { words: word_vocab, concepts, relations, labels: labels.into_iter().collect() })
}

impl Model {
    pub fn new(config: &RunConfig, vocabs: Vocabs) -> Result<Self> {
        config.validate()?;
        if config.task == TaskKind::Understanding && vocabs.labels.is_empty() {
            return Err(HarnessError::Mismatch("understanding task needs relation labels in the training data".into()));
        }
        let mut rng = rng_stream(config.seed, 0);
        let mut store = ParamStore::new();
        let ecfg = config.encoder_config(&vocabs);
        let gcfg = EncoderConfig { layers: config.encoder.graph_layers, ..ecfg };
        let encoder = match config.model {
            ModelKind::Text => Encoder::Text(SeqEncoder::new(&mut store, "enc", &ecfg, &mut rng)?),
            ModelKind::Hier => {
                let mut h = HierEncoder::new(&mut store, "hier", &ecfg, &mut rng)?;
                if gcfg.layers != ecfg.layers {
                    h.adapter = crate::encoders::GraphEncoder::new(&mut store, "hier.adapter_g", &gcfg, false, &mut rng)?;
                }
                Encoder::Hier(h)
            }
            ModelKind::UtterAmr | ModelKind::Dual => Encoder::Dual(DualEncoder {
                seq: SeqEncoder::new(&mut store, "dual.seq", &ecfg, &mut rng)?,
                graph: crate::encoders::GraphEncoder::new(&mut store, "dual.graph", &gcfg, true, &mut rng)?,
                fuse: crate::encoders::LayerNormParams::new(&mut store, "dual.fuse", ecfg.d_model),
            }),
        };
        let head = match config.task {
            TaskKind::Understanding => {
                Head::Relation(RelationHead::new(&mut store, "relation", ecfg.d_model, vocabs.labels.len(), &mut rng))
            }
            TaskKind::Generation => {
                let dcfg = EncoderConfig { layers: config.encoder.decoder_layers.max(1), ..ecfg };
                let dual = matches!(encoder, Encoder::Dual(_));
                Head::Decoder(Decoder::new(
                    &mut store,
                    "decoder",
                    &dcfg,
                    dual,
                    vocabs.words.id(BOS),
                    vocabs.words.id(EOS),
                    &mut rng,
                )?)
            }
        };
        Ok(Self { config: config.clone(), vocabs, store, encoder, head, counters: Counters::default() })
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta { config: self.config.clone(), vocabs: self.vocabs.clone() }
    }

    /// Writes `model.json` (config and vocabularies) and `model.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta = dir.join("model.json");
        fs::write(&meta, serde_json::to_string_pretty(&self.meta()).expect("meta serializes")).map_err(io_err(&meta))?;
        let ckpt = dir.join("model.ckpt");
        let mut buf = Vec::new();
        crate::autodiff::write_checkpoint(&self.store, &mut buf).map_err(io_err(&ckpt))?;
        fs::write(&ckpt, buf).map_err(io_err(&ckpt))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("model.json");
        let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| HarnessError::Data {
            path: meta_path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let mut model = Model::new(&meta.config, meta.vocabs.reindexed())?;
        let ckpt = dir.join("model.ckpt");
        let bytes = fs::read(&ckpt).map_err(io_err(&ckpt))?;
        let entries = crate::autodiff::read_checkpoint(bytes.as_slice()).map_err(io_err(&ckpt))?;
        model.store.load(entries).map_err(io_err(&ckpt))?;
        Ok(model)
    }

    /// Examples for every relation instance (understanding) or the response
    /// (generation) of `record`.
    pub fn prepare(&self, record: &DialogueRecord) -> Result<Vec<Example>> {
        let dialogue = record.to_dialogue().map_err(|source| HarnessError::Dialogue { id: record.id.clone(), source })?;
        match self.config.task {
            TaskKind::Understanding => record
                .relations
                .iter()
                .enumerate()
                .map(|(k, rel)| self.prepare_relation(&dialogue, rel, format!("{}#{k}", record.id)))
                .collect(),
            TaskKind::Generation => match &record.response {
                Some(resp) => Ok(vec![self.prepare_generation(&dialogue, resp)?]),
                None => Ok(Vec::new()),
            },
        }
    }

    pub fn prepare_all(&self, records: &[DialogueRecord]) -> Result<Vec<Example>> {
        let mut out = Vec::new();
        for r in records {
            out.extend(self.prepare(r)?);
        }
        Ok(out)
    }

    fn build_graph(&self, dialogue: &Dialogue) -> Result<Option<crate::dialogue_graph::DialogueGraph>> {
        let Some(opts) = self.config.graph_options() else { return Ok(None) };
        self.counters.graph_builds.fetch_add(1, Ordering::Relaxed);
        build_for(dialogue, &opts)
            .map(Some)
            .map_err(|source| HarnessError::Dialogue { id: dialogue.id.clone(), source })
    }

    fn graph_input(&self, dg: &crate::dialogue_graph::DialogueGraph) -> GraphInput {
        let concepts = dg.graph().nodes().iter().map(|n| self.vocabs.concepts.id(&n.concept)).collect();
        let relations = node_relation_matrix(dg, &self.config.projection_options()).ids(&self.vocabs.relations);
        GraphInput { concepts, relations }
    }

    /// Relation instance laid out as `dialogue [SEP] a1 [SEP] a2`; argument
    /// tokens are aligned to their anchor node when it lies inside `dialogue`.
    pub fn prepare_relation(&self, dialogue: &Dialogue, rel: &RelationRecord, id: String) -> Result<Example> {
        let layout = DialogueLayout::new(dialogue);
        let mut tokens = layout.tokens.clone();
        let a1 = tokens.len()..tokens.len() + rel.a1.len();
        tokens.extend(rel.a1.iter().cloned());
        tokens.push(SEP_TOKEN.to_string());
        let a2 = tokens.len()..tokens.len() + rel.a2.len();
        tokens.extend(rel.a2.iter().cloned());
        let gold = self
            .vocabs
            .label_id(&rel.relation)
            .ok_or_else(|| HarnessError::Mismatch(format!("{id}: relation `{}` not seen in training", rel.relation)))?;
        let mut ex = Example {
            id,
            ids: self.vocabs.words.ids(&tokens),
            a1: a1.clone(),
            a2: a2.clone(),
            gold,
            target: Vec::new(),
            graph: None,
            projected: None,
            fusion: None,
        };
        let Some(dg) = self.build_graph(dialogue)? else { return Ok(ex) };
        let n = tokens.len();
        let mut alignment = layout.global_alignment(dialogue, n);
        for (anchor, span) in [(&rel.a1_node, &a1), (&rel.a2_node, &a2)] {
            if let Some((u, g, node)) = anchor {
                let id = merged_id(*u, *g, node);
                if dg.graph().contains(&id) {
                    for t in span.clone() {
                        alignment.insert(id.clone(), t);
                    }
                }
            }
        }
        match self.config.model {
            ModelKind::Hier => {
                let m = project_edges(&dg, &alignment, n, &self.config.projection_options())
                    .map_err(|source| HarnessError::Projection { id: dialogue.id.clone(), source })?;
                ex.projected = Some(m.ids(&self.vocabs.relations));
            }
            _ => {
                ex.fusion = Some(fusion_index(dg.graph(), &alignment, n, 0)?);
                ex.graph = Some(self.graph_input(&dg));
            }
        }
        Ok(ex)
    }

    pub fn prepare_generation(&self, dialogue: &Dialogue, response: &[String]) -> Result<Example> {
        let layout = DialogueLayout::new(dialogue);
        let mut target = self.vocabs.words.ids(response);
        target.push(self.vocabs.words.id(EOS));
        let mut ex = Example {
            id: dialogue.id.clone(),
            ids: self.vocabs.words.ids(&layout.tokens),
            a1: 0..0,
            a2: 0..0,
            gold: 0,
            target,
            graph: None,
            projected: None,
            fusion: None,
        };
        if let Some(dg) = self.build_graph(dialogue)? {
            match self.config.model {
                ModelKind::Hier => {
                    let alignment = layout.global_alignment(dialogue, layout.len());
                    let m = project_edges(&dg, &alignment, layout.len(), &self.config.projection_options())
                        .map_err(|source| HarnessError::Projection { id: dialogue.id.clone(), source })?;
                    ex.projected = Some(m.ids(&self.vocabs.relations));
                }
                _ => ex.graph = Some(self.graph_input(&dg)),
            }
        }
        Ok(ex)
    }

    fn missing(what: &str) -> HarnessError {
        HarnessError::Mismatch(format!("example lacks {what} for this model"))
    }

    /// Encoder outputs: text memory and, for dual models, graph memory.
    pub fn encode(&self, tape: &mut Tape, ex: &Example) -> Result<Memory> {
        match &self.encoder {
            Encoder::Text(enc) => Ok(Memory { text: seq_encode(tape, &self.store, enc, &ex.ids)?.hidden, graph: None }),
            Encoder::Hier(enc) => {
                let projected = ex.projected.as_ref().ok_or_else(|| Self::missing("projected relations"))?;
                self.counters.graph_encoder_calls.fetch_add(1, Ordering::Relaxed);
                Ok(Memory { text: hier_encode(tape, &self.store, enc, &ex.ids, projected)?.hidden, graph: None })
            }
            Encoder::Dual(enc) => {
                let g = ex.graph.as_ref().ok_or_else(|| Self::missing("a graph"))?;
                let hs = seq_encode(tape, &self.store, &enc.seq, &ex.ids)?.hidden;
                self.counters.graph_encoder_calls.fetch_add(1, Ordering::Relaxed);
                let hg = graph_encode(tape, &self.store, &enc.graph, &g.concepts, &g.relations)?.hidden;
                Ok(Memory { text: hs, graph: Some(hg) })
            }
        }
    }

    pub fn relation_logits(&self, tape: &mut Tape, ex: &Example) -> Result<crate::autodiff::Var> {
        let Head::Relation(head) = &self.head else {
            return Err(HarnessError::Mismatch("model was built for generation".into()));
        };
        let mem = self.encode(tape, ex)?;
        let fused = match (&self.encoder, mem.graph) {
            (Encoder::Dual(enc), Some(hg)) => {
                let index = ex.fusion.as_ref().ok_or_else(|| Self::missing("a fusion index"))?;
                dual_fuse_nodes(tape, &self.store, &enc.fuse, mem.text, hg, index)?
            }
            _ => mem.text,
        };
        Ok(relation_logits(tape, &self.store, head, fused, &ex.a1, &ex.a2)?)
    }

    pub fn loss(&self, tape: &mut Tape, ex: &Example) -> Result<crate::autodiff::Var> {
        match &self.head {
            Head::Relation(_) => {
                let logits = self.relation_logits(tape, ex)?;
                Ok(re_loss(tape, logits, ex.gold)?)
            }
            Head::Decoder(dec) => {
                let mem = self.encode(tape, ex)?;
                Ok(gen_loss(tape, &self.store, dec, &ex.target, &mem)?)
            }
        }
    }

    pub fn predict_relation(&self, ex: &Example) -> Result<usize> {
        let mut tape = Tape::new();
        let logits = self.relation_logits(&mut tape, ex)?;
        Ok(argmax(tape.value(logits)))
    }

    /// Beam-search response ids, EOS stripped.
    pub fn generate(&self, ex: &Example) -> Result<Vec<usize>> {
        let Head::Decoder(dec) = &self.head else {
            return Err(HarnessError::Mismatch("model was built for relation classification".into()));
        };
        let mut tape = Tape::new();
        let mem = self.encode(&mut tape, ex)?;
        let values = MemoryValues::from_tape(&tape, &mem);
        let t = &self.config.training;
        let h = beam_search(&self.store, dec, &values, t.beam, t.max_decode_len)?;
        Ok(h.content(dec.eos).to_vec())
    }
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub report: EvalReport,
    pub relation_predictions: Vec<RelationPrediction>,
    pub generation_predictions: Vec<GenerationPrediction>,
}

impl Evaluation {
    pub fn predictions_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.relation_predictions {
            out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
            out.push('\n');
        }
        for p in &self.generation_predictions {
            out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
            out.push('\n');
        }
        out
    }
}

/// Name of the metric used for model selection.
pub fn primary_metric(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Understanding => "f1",
        TaskKind::Generation => "bleu1",
    }
}

pub fn evaluate(model: &Model, records: &[DialogueRecord]) -> Result<Evaluation> {
    match model.config.task {
        TaskKind::Understanding => evaluate_relations(model, records, true),
        TaskKind::Generation => evaluate_generation(model, records),
    }
}

fn evaluate_relations(model: &Model, records: &[DialogueRecord], conversational: bool) -> Result<Evaluation> {
    let n_classes = model.vocabs.labels.len();
    let mut eval = Evaluation::default();
    let (mut preds, mut golds) = (Vec::new(), Vec::new());
    for ex in model.prepare_all(records)? {
        let pred = model.predict_relation(&ex)?;
        eval.relation_predictions.push(RelationPrediction {
            id: ex.id.clone(),
            pred: model.vocabs.labels[pred].clone(),
            gold: model.vocabs.labels[ex.gold].clone(),
        });
        *eval.report.support.entry(model.vocabs.labels[ex.gold].clone()).or_insert(0) += 1;
        preds.push(pred);
        golds.push(ex.gold);
    }
    eval.report.insert("f1", macro_f1(&preds, &golds, n_classes, MacroClasses::Observed)?);
    if conversational {
        let mut dialogues = Vec::new();
        for r in records {
            dialogues.push(r.to_dialogue().map_err(|source| HarnessError::Dialogue { id: r.id.clone(), source })?);
        }
        let mut instances = Vec::new();
        let mut rels: Vec<&RelationRecord> = Vec::new();
        for (r, d) in records.iter().zip(&dialogues) {
            for rel in &r.relations {
                let Some(gold) = model.vocabs.label_id(&rel.relation) else { continue };
                instances.push(ConversationalInstance {
                    dialogue: d,
                    a1: rel.a1.clone(),
                    a2: rel.a2.clone(),
                    gold,
                    key: rels.len(),
                });
                rels.push(rel);
            }
        }
        let mut failure = None;
        let score = f1_conversational(
            &instances,
            |cut, inst| {
                let rel = rels[inst.key];
                match model.prepare_relation(cut, rel, cut.id.clone()).and_then(|ex| model.predict_relation(&ex)) {
                    Ok(p) => p,
                    Err(e) => {
                        failure.get_or_insert(e);
                        0
                    }
                }
            },
            n_classes,
            MacroClasses::Observed,
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        eval.report.insert("f1_c", score.f1);
    }
    Ok(eval)
}

fn evaluate_generation(model: &Model, records: &[DialogueRecord]) -> Result<Evaluation> {
    let mut eval = Evaluation::default();
    let (mut hyps, mut refs) = (Vec::new(), Vec::new());
    for r in records {
        let Some(resp) = &r.response else { continue };
        for ex in model.prepare(r)? {
            let ids = model.generate(&ex)?;
            let hyp: Vec<String> = ids.iter().map(|&i| model.vocabs.words.token(i).to_string()).collect();
            eval.generation_predictions.push(GenerationPrediction {
                id: ex.id.clone(),
                hypothesis: hyp.clone(),
                reference: resp.clone(),
            });
            hyps.push(hyp);
            refs.push(resp.clone());
        }
    }
    for n in 1..=4 {
        eval.report.insert(format!("bleu{n}"), bleu_n(&hyps, &refs, n)?);
    }
    for n in 1..=2 {
        eval.report.insert(format!("distinct{n}"), distinct_n(&hyps, n, DistinctDenominator::Words));
    }
    Ok(eval)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_dev: f64,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.log {
            out.push_str(&serde_json::to_string(l).expect("log serializes"));
            out.push('\n');
        }
        out
    }
}

/// Mean loss of `examples` under `model`, without dropout.
pub fn mean_loss(model: &Model, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::new();
        let l = model.loss(&mut tape, ex)?;
        total += tape.scalar(l);
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Trains on `corpus.train`, selecting the parameters with the best dev
/// metric (the training split stands in when dev is empty).
///
/// Dropout masks are keyed by example, so with `lr = 0` every epoch reports
/// the same loss.
pub fn train(config: &RunConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    let vocabs = build_vocabs(config, &corpus.train)?;
    let mut model = Model::new(config, vocabs)?;
    let train_ex = model.prepare_all(&corpus.train)?;
    if train_ex.is_empty() {
        return Err(HarnessError::Mismatch("no training examples for this task".into()));
    }
    let dev_records = if corpus.dev.is_empty() { &corpus.train } else { &corpus.dev };
    let t = config.training;
    let adam = t.adam();
    let mut state = AdamState::new(&model.store);
    let metric = primary_metric(config.task);
    let mut log = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, model.store.snapshot());
    let mut steps = 0usize;
    let mut losses = vec![0.0; train_ex.len()];
    'epochs: for epoch in 1..=t.epochs {
        let mut order: Vec<usize> = (0..train_ex.len()).collect();
        order.shuffle(&mut rng_stream(config.seed, epoch as u64));
        for batch in order.chunks(t.batch_size) {
            model.store.zero_grad();
            for &i in batch {
                let mut tape = if config.encoder.dropout > 0.0 {
                    Tape::training(config.encoder.dropout, rng_stream(config.seed ^ 0x5eed, 1 << 32 | i as u64))
                } else {
                    Tape::new()
                };
                let l = model.loss(&mut tape, &train_ex[i])?;
                losses[i] = tape.scalar(l);
                tape.backward(l).map_err(TaskError::from)?;
                tape.accumulate_param_grads(&mut model.store);
            }
            model.store.scale_grads(1.0 / batch.len() as f64);
            adam_step(&mut model.store, &mut state, &adam);
            steps += 1;
            if t.max_steps > 0 && steps >= t.max_steps {
                break;
            }
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let dev_metric = evaluate_selection(&model, dev_records)?.get(metric).unwrap_or(0.0);
        log::info!("epoch {epoch}: train loss {train_loss:.4}, dev {metric} {dev_metric:.4}");
        log.push(EpochLog { epoch, steps, train_loss, dev_metric });
        if dev_metric > best.0 {
            best = (dev_metric, epoch, model.store.snapshot());
        } else if t.patience > 0 && epoch - best.1 >= t.patience {
            break 'epochs;
        }
        if t.max_steps > 0 && steps >= t.max_steps {
            break;
        }
    }
    model.store.restore(&best.2);
    Ok(TrainOutcome { model, log, best_dev: best.0, best_epoch: best.1 })
}

/// Dev evaluation used during training: skips the conversational pass.
fn evaluate_selection(model: &Model, records: &[DialogueRecord]) -> Result<EvalReport> {
    Ok(match model.config.task {
        TaskKind::Understanding => evaluate_relations(model, records, false)?.report,
        TaskKind::Generation => evaluate_generation(model, records)?.report,
    })
}

// ---------------------------------------------------------------------------
// Ablation

pub const ABLATION_ROWS: [&str; 6] = ["Dialog-AMR(Dual)", "-Speaker", "-Ident. concept", "-Coref", "Utter-AMR", "Text"];

/// The six row configurations derived from `base`.
pub fn ablation_configs(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let flags = base.graph.unwrap_or_default();
    let with = |speaker: bool, same: bool, coref: bool| RunConfig {
        model: ModelKind::Dual,
        graph: Some(GraphFlags { speaker: Some(speaker), same: Some(same), coref: Some(coref), ..flags }),
        ..base.clone()
    };
    let utter_flags = GraphFlags { speaker: None, same: None, coref: None, ..flags };
    vec![
        (ABLATION_ROWS[0], with(true, true, true)),
        (ABLATION_ROWS[1], with(false, true, true)),
        (ABLATION_ROWS[2], with(true, false, true)),
        (ABLATION_ROWS[3], with(true, true, false)),
        (ABLATION_ROWS[4], RunConfig { model: ModelKind::UtterAmr, graph: Some(utter_flags), ..base.clone() }),
        (ABLATION_ROWS[5], RunConfig { model: ModelKind::Text, graph: None, ..base.clone() }),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub graph_builds: u64,
    pub graph_encoder_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub metric: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.setting.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<width$}  {:>8}  per-seed\n", "setting", format!("dev {}", self.metric));
        for r in &self.rows {
            let seeds: Vec<String> = r.per_seed.iter().map(|v| format!("{:.1}", 100.0 * v)).collect();
            out.push_str(&format!("{:<width$}  {:>8.1}  {}\n", r.setting, 100.0 * r.mean, seeds.join(" ")));
        }
        out
    }
}

/// Trains and evaluates every ablation row once per seed. For each seed the
/// corpus comes from `corpus_for(seed)` and the model seed is the same seed.
pub fn run_ablation(
    base: &RunConfig,
    seeds: &[u64],
    mut corpus_for: impl FnMut(u64) -> Result<Corpus>,
) -> Result<AblationTable> {
    let configs = ablation_configs(base);
    let mut rows: Vec<AblationRow> = configs
        .iter()
        .map(|(label, _)| AblationRow {
            setting: label.to_string(),
            per_seed: Vec::new(),
            mean: 0.0,
            graph_builds: 0,
            graph_encoder_calls: 0,
        })
        .collect();
    let metric = primary_metric(base.task);
    for &seed in seeds {
        let corpus = corpus_for(seed)?;
        for ((label, cfg), row) in configs.iter().zip(rows.iter_mut()) {
            let cfg = RunConfig { seed, ..cfg.clone() };
            let outcome = train(&cfg, &corpus)?;
            let dev = if corpus.dev.is_empty() { &corpus.train } else { &corpus.dev };
            let value = evaluate_selection(&outcome.model, dev)?.get(metric).unwrap_or(0.0);
            log::info!("ablation seed {seed} {label}: dev {metric} {value:.4}");
            row.per_seed.push(value);
            row.graph_builds += outcome.model.counters.graph_builds();
            row.graph_encoder_calls += outcome.model.counters.graph_encoder_calls();
        }
    }
    for row in &mut rows {
        row.mean = row.per_seed.iter().sum::<f64>() / row.per_seed.len().max(1) as f64;
    }
    Ok(AblationTable { metric: metric.to_string(), seeds: seeds.to_vec(), rows })
}
