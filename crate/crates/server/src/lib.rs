//! HTTP front end for the jobwatch monitor.
//!
//! [`api::router`] serves the JSON API over shared [`api::AppState`]; every
//! route except login requires a session, and every route that touches the
//! cluster goes through the core gateway.

pub mod api;
pub mod auth;
pub mod config;
pub mod detail;
pub mod error;

pub use api::{router, AppState, Backend};
pub use config::ServerConfig;
pub use error::ApiError;
