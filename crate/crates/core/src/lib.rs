//! Multi-graph co-training (MGCOT) for session-based next-item recommendation.
//!
//! Sessions are viewed through three graphs: the session's own transition
//! graph (current view), similar sessions in the batch (local view) and a
//! corpus-wide shortest-path item graph (global view). The current and local
//! views drive next-item scoring; the global view is contrasted against them.

pub mod attention;
pub mod autodiff;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graphs;
pub mod model;
pub mod params;
pub mod seeding;
pub mod sparse;
pub mod trainer;

pub use error::{MgcotError, Result};
