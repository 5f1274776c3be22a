//! Dialogue-level AMR graphs for dialogue understanding and generation.
//!
//! Pipeline: parse per-utterance AMR ([`penman`]), merge into one dialogue
//! graph ([`dialogue_graph`]), project its edges onto tokens
//! ([`projection`]), then encode with a sequence, graph, hierarchical or
//! dual encoder ([`encoders`]) for relation classification or response
//! generation ([`tasks`]).

pub mod autodiff;
pub mod dialogue_graph;
pub mod encoders;
pub mod harness;
pub mod metrics;
pub mod penman;
pub mod projection;
pub mod tasks;
