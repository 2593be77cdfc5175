//! Adaptive planning-graph engine for multimodal multi-hop question answering.
//!
//! The crate is `no_std` (with `alloc`). Everything that talks to a model goes
//! through the [`gateway::ModelBackend`] trait, so the planner, retrieval
//! pipeline, reasoning step and the orchestration loop can run against scripted
//! backends offline. File formats, HTTP clients and the CLI live in the `apg`
//! crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod decision;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod graph;
pub mod index;
pub mod kb;
pub mod orchestrator;
pub mod planner;
pub mod prompts;
pub mod reasoning;
pub mod retrieval;

mod text;

#[cfg(test)]
mod testing;

pub use error::{Error, Result};
pub use gateway::{CallLedger, ChatRequest, Gateway, ModelBackend, Purpose, VisionRequest};
pub use graph::{Decision, Node, NodeId, NodeKind, PlanningGraph};
pub use index::{Candidate, EmbeddingEntry, KnowledgeBase, Modality, PayloadKind};
pub use kb::{KnowledgeBases, Source, SourceModality, Triplet};
pub use orchestrator::{RunConfig, RunResult};
pub use prompts::{TemplateName, TemplateSet};
