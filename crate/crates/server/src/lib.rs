//! HTTP/JSON session service for interactive solving: pick anchors, correct
//! the jaw pass, edit and fine-tune weights, and export the result.
//!
//! Mutations carry the revision the client last saw and are applied one at
//! a time per session; a stale revision is rejected with 409 so the client
//! can refetch. Reads return the last published state and never block on a
//! running solve.

mod api;
mod error;
mod session;

use std::net::SocketAddr;

pub use api::{router, ActionRequest, ActionResponse, AppState, CreateResponse};
pub use error::{ApiError, ApiResult, ErrorBody};
pub use session::{
    Action, Delta, Job, JobStatus, RegionInfo, ReportSummary, Session, SessionData, SessionInputs, SessionReport,
    SessionState, WeightEdit,
};

/// Serve the API on `addr` until the process is stopped.
pub async fn serve(addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new())).await
}
