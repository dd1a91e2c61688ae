//! Distillation lab for multi-agent interaction graphs.
//!
//! The crate simulates multi-round discussions between scripted teacher
//! agents on synthetic reasoning tasks, records them as labeled interaction
//! graphs, and distills them into a small decoder-only student model with
//! three objectives: next-token prediction on correct chains, a margin loss
//! contrasting correct and incorrect chains, and a GCN-based node
//! classification loss over the discussion structure. The graph head is
//! train-time only; inference uses the bare student model.

pub mod checkpoint;
pub mod distill;
pub mod eval;
pub mod graph;
pub mod model;
pub mod seeding;
pub mod sim;
pub mod tensor;
pub mod train;

pub use graph::{CorpusStats, EdgeVariant, Mag, NodeRecord, StructureClass};
pub use sim::{AgentProfile, SimConfig, TaskFamily, TaskInstance};
