//! Local-first continuous analysis engine.
//!
//! Artifacts live in a content-addressed store. A run is identified by the
//! tuple of component versions it used, executes a DAG flow, and leaves a
//! feedback bundle plus lineage edges behind. Change events become
//! validation runs on a data subset; approved runs are released on `main`.
//!
//! Start with [`Repository::init`], then see [`flow::execute`],
//! [`pipeline::Pipeline`] and [`lineage::replay_check`].

pub mod cli;
pub mod error;
pub mod feedback;
pub mod flow;
pub mod lineage;
pub mod pipeline;
pub mod repo;
pub mod store;
pub mod tuple;

pub use error::{Error, Result};
pub use repo::Repository;
pub use store::{ArtifactId, ArtifactKind, ArtifactRecord, ContentHash};
pub use tuple::{ArtifactVersionTuple, DataScope, RunId, RunKind, RunRecord, RunStatus, VersionPin};
