//! HTTP JSON API over an immutable [`Snapshot`].
//!
//! | method | path              | body / query               | response          |
//! |--------|-------------------|----------------------------|-------------------|
//! | GET    | `/instances/{id}` |                            | `InstanceView`    |
//! | POST   | `/intervene`      | `InterveneRequest`         | `InterventionView`|
//! | POST   | `/expert`         | `ExpertRequest`            | `ExpertView`      |
//! | GET    | `/curve`          | `rho`, optional `defer_only` | `CoverageCurve` |
//! | GET    | `/bounds`         |                            | `BoundsView`      |
//!
//! Errors come back as `{"error": {"code", "message", "group"}}`.

use std::io::ErrorKind;
use std::net::{Ipv4Addr, SocketAddr};
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use decode_core::eval::CoverageCurve;

use crate::api::{BoundsView, ExpertRequest, ExpertView, InstanceView, InterveneRequest, InterventionView, Snapshot};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
    pub group: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn bad_request(message: String) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                error: ErrorDetail {
                    code: "bad_request".into(),
                    message,
                    group: None,
                },
            },
        }
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        use decode_core::Error as E;
        let status = match &e {
            CliError::UnknownInstance(_) | CliError::UnknownCurve { .. } => StatusCode::NOT_FOUND,
            CliError::Usage(_) | CliError::Json(_) => StatusCode::BAD_REQUEST,
            CliError::Core(
                E::InvalidArgument(_)
                | E::OutOfRange { .. }
                | E::GroupConflict { .. }
                | E::DimensionMismatch(_)
                | E::Shape { .. }
                | E::Parse(_),
            ) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            body: ErrorBody {
                error: ErrorDetail {
                    code: e.code().into(),
                    message: e.to_string(),
                    group: e.group(),
                },
            },
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(r: PathRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
pub struct CurveQuery {
    pub rho: f64,
    #[serde(default)]
    pub defer_only: bool,
}

pub fn router(snapshot: Arc<Snapshot>) -> Router {
    Router::new()
        .route("/instances/{id}", get(get_instance))
        .route("/intervene", post(post_intervene))
        .route("/expert", post(post_expert))
        .route("/curve", get(get_curve))
        .route("/bounds", get(get_bounds))
        .with_state(snapshot)
}

async fn get_instance(
    State(s): State<Arc<Snapshot>>,
    id: std::result::Result<Path<u64>, PathRejection>,
) -> ApiResult<InstanceView> {
    let Path(id) = id?;
    Ok(Json(s.instance(id)?))
}

async fn post_intervene(
    State(s): State<Arc<Snapshot>>,
    body: std::result::Result<Json<InterveneRequest>, JsonRejection>,
) -> ApiResult<InterventionView> {
    let Json(req) = body?;
    Ok(Json(s.intervene(&req)?))
}

async fn post_expert(
    State(s): State<Arc<Snapshot>>,
    body: std::result::Result<Json<ExpertRequest>, JsonRejection>,
) -> ApiResult<ExpertView> {
    let Json(req) = body?;
    Ok(Json(s.expert(&req)?))
}

async fn get_curve(
    State(s): State<Arc<Snapshot>>,
    query: std::result::Result<Query<CurveQuery>, QueryRejection>,
) -> ApiResult<CoverageCurve> {
    let Query(q) = query?;
    Ok(Json(s.curve(q.rho, q.defer_only)?.clone()))
}

async fn get_bounds(State(s): State<Arc<Snapshot>>) -> Json<BoundsView> {
    Json(s.bounds())
}

/// Binds `127.0.0.1:port`; port 0 picks a free port.
pub async fn bind(port: u16) -> Result<TcpListener> {
    TcpListener::bind(SocketAddr::from((Ipv4Addr::LOCALHOST, port)))
        .await
        .map_err(|source| match source.kind() {
            ErrorKind::AddrInUse => CliError::PortInUse { port, source },
            _ => CliError::Io(source),
        })
}

pub async fn serve(listener: TcpListener, snapshot: Arc<Snapshot>) -> Result<()> {
    axum::serve(listener, router(snapshot)).await?;
    Ok(())
}
