//! Batch-experiment harness: declarative configs, the artifact-writing
//! runner, CSV/summary serialization, and the named verification suites
//! behind the CLI.
//!
//! The flow is `config` (parse + validate + canonical hash) → `runner`
//! (dispatch, artifacts, manifest) → `verify` (acceptance criteria on
//! top of the library and the runner), with `csvio` as the shared
//! serialization layer. Everything here is deterministic given the
//! config, including across thread counts; see the module docs of
//! [`runner`] for the single documented exception (the manifest's
//! wall-clock field).

pub mod config;
pub mod csvio;
pub mod runner;
pub mod verify;
