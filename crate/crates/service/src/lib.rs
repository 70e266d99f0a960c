//! HTTP service behind the annotation tool.
//!
//! Annotators paint importance with two brushes and preview the
//! bitrate-neutral re-encode. A blind A/B comparison at the end accepts the
//! annotation only if they pick their own re-encode.

pub mod api;
pub mod brush;
pub mod error;
pub mod session;
pub mod store;

pub use api::{router, serve, AppState, ServiceConfig};
pub use error::{Result, ServiceError};
