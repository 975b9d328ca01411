//! Hierarchical prompt parsing trees with directed-graph self-reflection for
//! class-incremental segmentation, at desk scale.

pub mod digraph;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod prompt_tree;
pub mod refine;
pub mod seeding;
pub mod stream;

pub use error::{HpptError, Result};
pub use prompt_tree::{ClassId, NodeId, ParsingTree, PartitionKind, PromptPartition};
