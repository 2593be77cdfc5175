//! Std companion to `apg-core`: model backends (scripted mock and
//! OpenAI-compatible HTTP), configuration, template directories, source and
//! dataset files, the knowledge-base manifest, run traces, batch evaluation
//! and the modality-gap report.

pub mod batch;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gap;
pub mod http;
pub mod mock;
pub mod sources;
pub mod store;
pub mod templates;
pub mod trace;

pub use error::{Error, Result};
pub use mock::MockBackend;
