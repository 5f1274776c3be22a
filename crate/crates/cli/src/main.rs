use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dialogue_amr::dialogue_graph::{build_for, to_dot, DialogueRecord, EdgeKind, GraphOptions};
use dialogue_amr::harness::{
    evaluate, load_records, run_ablation, train, Corpus, HarnessError, LinkKind, Model, RunConfig, Split,
    SyntheticSpec,
};
use dialogue_amr::penman::parse_penman_file;
use dialogue_amr::projection::{project_edges, DialogueLayout, ProjectionOptions};

#[derive(Debug, Parser)]
#[command(name = "damr", version, about = "Dialogue-level AMR graphs: build, project, train and evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a PENMAN file and print its graphs in canonical form.
    Parse {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Only validate; print node and edge counts.
        #[arg(long)]
        check: bool,
    },
    /// Build dialogue graphs from a JSON-lines dialogue file.
    BuildGraph {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[command(flatten)]
        graph: GraphFlags,
        /// Write every dialogue graph to one DOT file.
        #[arg(long, value_name = "FILE")]
        dot: Option<PathBuf>,
    },
    /// Project dialogue-graph edges onto tokens and print the matrices.
    Project {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[command(flatten)]
        graph: GraphFlags,
        /// Keep inverse labels (`ARG0-of`) instead of flipping them.
        #[arg(long)]
        keep_inverse: bool,
        /// Also label the reverse direction of every edge.
        #[arg(long)]
        bidirectional: bool,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus split into train/dev/test.
    GenData {
        /// Output directory for train.jsonl, dev.jsonl and test.jsonl.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of dialogues before splitting.
        #[arg(long, default_value_t = 400)]
        dialogues: usize,
        #[arg(long, default_value_t = 4)]
        min_turns: usize,
        #[arg(long, default_value_t = 5)]
        max_turns: usize,
        /// Link kinds to draw from.
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Link::Coref, Link::Repeat, Link::Speaker])]
        links: Vec<Link>,
    },
    /// Train a model and write it to a directory.
    Train {
        /// Run configuration (TOML).
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Corpus directory; a synthetic corpus from the config is used when absent.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Output directory for the model, checkpoint and log.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a trained model on one split.
    Eval {
        /// Directory written by `train`.
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        /// Corpus directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Dev)]
        split: SplitArg,
        /// Write the report as JSON.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
        /// Write per-instance predictions as JSON lines.
        #[arg(long, value_name = "FILE")]
        predictions: Option<PathBuf>,
    },
    /// Run the six-row ablation and print the table.
    Ablate {
        /// Base run configuration (TOML).
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Fixed corpus directory; otherwise a synthetic corpus per seed.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Write the table as JSON.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Write one dialogue graph as Graphviz DOT.
    ExportDot {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Dialogue id; the first dialogue when absent.
        #[arg(long)]
        id: Option<String>,
        #[command(flatten)]
        graph: GraphFlags,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, Args)]
struct GraphFlags {
    /// Leave out SPEAKER edges.
    #[arg(long)]
    no_speaker: bool,
    /// Leave out SAME edges.
    #[arg(long)]
    no_same: bool,
    /// Leave out COREF edges.
    #[arg(long)]
    no_coref: bool,
}

impl GraphFlags {
    fn options(self) -> GraphOptions {
        GraphOptions { speaker: !self.no_speaker, same: !self.no_same, coref: !self.no_coref, ..GraphOptions::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Link {
    Coref,
    Repeat,
    Speaker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

/// Failure mapped to an exit code.
enum Failure {
    Usage(String),
    Data(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Stdout writes that end quietly when the reader goes away.
macro_rules! emit {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout().lock(), $($arg)*);
    }};
}

macro_rules! emitln {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn data_err(path: &Path, e: impl Display) -> Failure {
    Failure::Data(format!("{}:{e}", path.display()))
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn dialogues(path: &Path) -> Result<Vec<DialogueRecord>, Failure> {
    Ok(load_records(path)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Parse { input, check } => {
            let graphs = parse_penman_file(&read(&input)?).map_err(|e| data_err(&input, e))?;
            if check {
                for (i, g) in graphs.iter().enumerate() {
                    emitln!("graph {i}: {} nodes, {} edges", g.nodes().len(), g.edges().len());
                }
                let nodes: usize = graphs.iter().map(|g| g.nodes().len()).sum();
                let edges: usize = graphs.iter().map(|g| g.edges().len()).sum();
                emitln!("total: {} graphs, {nodes} nodes, {edges} edges", graphs.len());
            } else {
                for g in &graphs {
                    emitln!("{}", dialogue_amr::penman::serialize_penman(g));
                }
            }
            Ok(())
        }
        Command::BuildGraph { input, graph, dot } => {
            let opts = graph.options();
            let mut dots = String::new();
            for r in dialogues(&input)? {
                let d = r.to_dialogue().map_err(|e| Failure::Data(format!("{}: {}: {e}", input.display(), r.id)))?;
                let dg = build_for(&d, &opts).map_err(|e| Failure::Data(format!("{}: {}: {e}", input.display(), r.id)))?;
                emitln!(
                    "{}\tnodes={}\tedges={}\tamr={}\tspeaker={}\tsame={}\tcoref={}",
                    r.id,
                    dg.graph().nodes().len(),
                    dg.graph().edges().len(),
                    dg.count_kind(|k| k == EdgeKind::Amr),
                    dg.count_kind(|k| matches!(k, EdgeKind::Speaker(_))),
                    dg.count_kind(|k| k == EdgeKind::Same),
                    dg.count_kind(|k| k == EdgeKind::Coref),
                );
                dots.push_str(&to_dot(&dg, &r.id));
            }
            if let Some(path) = dot {
                write(&path, &dots)?;
            }
            Ok(())
        }
        Command::Project { input, graph, keep_inverse, bidirectional, out } => {
            let opts = graph.options();
            let popts = ProjectionOptions { normalize_inverse: !keep_inverse, bidirectional };
            let mut text = String::new();
            for r in dialogues(&input)? {
                let fail = |e: &dyn Display| Failure::Data(format!("{}: {}: {e}", input.display(), r.id));
                let d = r.to_dialogue().map_err(|e| fail(&e))?;
                let dg = build_for(&d, &opts).map_err(|e| fail(&e))?;
                let layout = DialogueLayout::new(&d);
                let alignment = layout.global_alignment(&d, layout.len());
                let m = project_edges(&dg, &alignment, layout.len(), &popts).map_err(|e| fail(&e))?;
                text.push_str(&format!("# {}\n{}", r.id, m.to_tsv()));
            }
            match out {
                Some(path) => write(&path, &text),
                None => {
                    emit!("{text}");
                    Ok(())
                }
            }
        }
        Command::GenData { out, seed, dialogues, min_turns, max_turns, links } => {
            if min_turns > max_turns {
                return Err(Failure::Usage("--min-turns exceeds --max-turns".into()));
            }
            let links = links
                .into_iter()
                .map(|l| match l {
                    Link::Coref => LinkKind::Coref,
                    Link::Repeat => LinkKind::Repeat,
                    Link::Speaker => LinkKind::Speaker,
                })
                .collect();
            let spec = SyntheticSpec { seed, n_dialogues: dialogues, min_turns, max_turns, links };
            let corpus = Corpus::synthetic(&spec);
            corpus.write(&out)?;
            emitln!("train={} dev={} test={}", corpus.train.len(), corpus.dev.len(), corpus.test.len());
            Ok(())
        }
        Command::Train { config, data, out, seed, epochs } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            let corpus = match data {
                Some(dir) => Corpus::load(&dir)?,
                None => Corpus::synthetic(&cfg.corpus),
            };
            let outcome = train(&cfg, &corpus)?;
            outcome.model.save(&out)?;
            let log = outcome.log_jsonl();
            write(&out.join("train_log.jsonl"), &log)?;
            emit!("{log}");
            emitln!("best epoch {} dev {:.4}", outcome.best_epoch, outcome.best_dev);
            Ok(())
        }
        Command::Eval { model, data, split, report, predictions } => {
            let model = Model::load(&model)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Dev => Split::Dev,
                SplitArg::Test => Split::Test,
            };
            let records = load_records(&data.join(split.file_name()))?;
            let eval = evaluate(&model, &records)?;
            emit!("{}", eval.report.to_table());
            if let Some(path) = report {
                write(&path, &eval.report.to_json())?;
            }
            if let Some(path) = predictions {
                write(&path, &eval.predictions_jsonl())?;
            }
            Ok(())
        }
        Command::Ablate { config, data, seeds, report } => {
            let cfg = RunConfig::load(&config)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let table = run_ablation(&cfg, &seeds, |seed| match &data {
                Some(dir) => Corpus::load(dir),
                None => Ok(Corpus::synthetic(&SyntheticSpec { seed, ..cfg.corpus.clone() })),
            })?;
            emit!("{}", table.to_table());
            if let Some(path) = report {
                write(&path, &table.to_json())?;
            }
            Ok(())
        }
        Command::ExportDot { input, id, graph, out } => {
            let records = dialogues(&input)?;
            let record = match &id {
                Some(id) => records.iter().find(|r| &r.id == id),
                None => records.first(),
            }
            .ok_or_else(|| Failure::Usage(format!("no dialogue {} in {}", id.as_deref().unwrap_or(""), input.display())))?;
            let fail = |e: &dyn Display| Failure::Data(format!("{}: {}: {e}", input.display(), record.id));
            let d = record.to_dialogue().map_err(|e| fail(&e))?;
            let dg = build_for(&d, &graph.options()).map_err(|e| fail(&e))?;
            write(&out, &to_dot(&dg, &record.id))
        }
    }
}
