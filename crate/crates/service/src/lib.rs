//! Front ends for the hidden-state analysis engine: the `hiddenscope` CLI,
//! an HTTP JSON service, and the client for the extraction sidecar.
//!
//! Both front ends go through [`pipeline`], so a report depends only on the
//! bundle and the request, never on how they arrived.

pub mod error;
pub mod pipeline;
pub mod report;
pub mod server;
pub mod sidecar;

pub use error::{Result, ServiceError};
pub use report::{analyze, AnalysisReport, AnalysisRequest, Op, Source};
