//! The three graph views: per-session frequency graph, corpus-wide
//! shortest-path item graph and batch-level Jaccard session graph.

pub mod current;
pub mod global;
pub mod local;

pub use current::CurrentSessionGraph;
pub use global::{CooccurrenceGraph, GlobalGraphMeta, GlobalItemGraph};
pub use local::{LocalSessionGraph, Neighbor};
