//! Knowledge-circuit toolkit.
//!
//! Decomposes a decoder-only transformer into a dense computation graph of
//! attention-head and MLP nodes, discovers the edge subsets ("circuits")
//! critical for specific (subject, relation, object) facts by edge ablation,
//! and analyzes circuits with logit-lens traces, head classification,
//! completeness evaluation, circuit overlap, and pre/post-edit diffing.
//!
//! Entry points:
//!
//! - [`model::Model`] — graph-decomposed execution (`run_full`, `run_masked`)
//! - [`discovery::discover`] — edge-ablation circuit discovery
//! - [`lens`] — logit lens, rank/probability traces, head profiles
//! - [`eval`] — Hit@k, completeness, circuit diffing, in-context studies
//! - [`io`] — circuit files, score logs, DOT export, trace CSVs
//! - The `kc` binary wires these into a command-line workflow.

pub mod bpe;
pub mod config;
pub mod data;
pub mod discovery;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod lens;
pub mod model;
pub mod synthetic;
pub mod weights;

pub use bpe::BpeTokenizer;
pub use config::{Activation, ModelConfig, NormKind, Positional};
pub use data::{KnowledgeDataset, KnowledgeTriplet, Split, TokenizedPrompt};
pub use discovery::{discover, edge_score, AblationKind, DiscoveryConfig, DiscoveryResult};
pub use error::{Error, Result};
pub use graph::{
    overlap, random_circuit, Circuit, ComputationGraph, ConnectivityRule, NodeId, Overlap,
    Provenance,
};
pub use lens::{
    classify_head, head_ablation_effect, head_profile, trace_target, unembed, ClassifyThresholds,
    HeadClass, HeadProfile, LensTrace,
};
pub use model::{ActivationCache, Model};
pub use weights::{load_weights, save_weights, Weights};
