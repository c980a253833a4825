//! Live annotation sessions over HTTP/JSON. Each session freezes a ranked
//! selection of pairs at creation and records annotations in an
//! append-only log that is replayed on restart.

pub mod error;
pub mod http;
pub mod model;
pub mod service;

pub use error::{ErrorCode, ServiceError};
pub use http::{router, serve};
pub use service::{Service, DATA_DIR_ENV};
