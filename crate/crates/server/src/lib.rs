//! Acquisition server: stream registration, server-side stamping, session
//! recording, health monitoring and the control, ingestion and WebSocket sockets.

pub mod client;
pub mod clock;
pub mod control;
pub mod error;
pub mod net;
pub mod server;
pub mod wire;
pub mod ws;

pub use error::{Result, ServerError};
pub use net::{spawn, Endpoints, ServerHandle};
pub use server::{Server, ServerConfig};
