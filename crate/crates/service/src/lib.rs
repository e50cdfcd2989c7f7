//! Interactive editing service: sessions, HTTP API and terminal REPL.

pub mod api;
pub mod engine;
pub mod repl;
pub mod session;
pub mod store;

pub use api::{router, AppState};
pub use engine::Engine;
pub use session::{Init, ServiceError, Session};
pub use store::SessionStore;
