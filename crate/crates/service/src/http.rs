//! HTTP interface.

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get};
use axum::{Json, Router};
use futures::StreamExt;
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::book::{AdvisoryRequest, BookError};
use crate::events::EventKind;
use crate::service::{Service, ServiceError};

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/advisories", get(list_advisories).post(create_advisory))
        .route("/advisories/{id}", delete(cancel_advisory))
        .route("/fleet", get(fleet))
        .route("/traffic", get(traffic))
        .route("/stream", get(stream))
        .layer(CorsLayer::permissive())
        .with_state(svc)
}

fn error_response(e: ServiceError) -> Response {
    let status = match &e {
        ServiceError::Book(BookError::OutOfRange { .. }) => StatusCode::UNPROCESSABLE_ENTITY,
        ServiceError::Book(BookError::NotFound { .. }) => StatusCode::NOT_FOUND,
        ServiceError::Book(BookError::NotActive { .. }) => StatusCode::CONFLICT,
        ServiceError::Book(BookError::IdsExhausted) => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    let body = match &e {
        ServiceError::Book(b) => json!({ "error": b, "message": e.to_string() }),
        _ => json!({ "error": { "error": "internal" }, "message": e.to_string() }),
    };
    (status, Json(body)).into_response()
}

async fn create_advisory(
    State(svc): State<Arc<Service>>,
    body: Result<Json<AdvisoryRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(rej) => {
            return (
                StatusCode::UNPROCESSABLE_ENTITY,
                Json(json!({ "error": { "error": "bad_request" }, "message": rej.body_text() })),
            )
                .into_response()
        }
    };
    match svc.create_advisory(&req) {
        Ok(r) => (StatusCode::CREATED, Json(r)).into_response(),
        Err(e) => error_response(e),
    }
}

async fn cancel_advisory(State(svc): State<Arc<Service>>, Path(id): Path<u16>) -> Response {
    match svc.cancel_advisory(id) {
        Ok(r) => Json(r).into_response(),
        Err(e) => error_response(e),
    }
}

async fn list_advisories(State(svc): State<Arc<Service>>) -> Response {
    Json(svc.advisories()).into_response()
}

async fn fleet(State(svc): State<Arc<Service>>) -> Response {
    Json(svc.fleet()).into_response()
}

async fn traffic(State(svc): State<Arc<Service>>) -> Response {
    Json(svc.traffic()).into_response()
}

async fn stream(State(svc): State<Arc<Service>>) -> Response {
    let mut sub = svc.hub().subscribe();
    let snapshot = serde_json::to_value(svc.snapshot()).expect("snapshot serializes");
    let first = sub.stamp(EventKind::Snapshot, snapshot).to_line();
    let stop = svc.shutdown_token().clone();
    let deltas = futures::stream::unfold((sub, stop), |(mut sub, stop)| async move {
        let next = tokio::select! {
            _ = stop.cancelled() => None,
            e = sub.next() => e,
        };
        next.map(|e| (Ok::<_, Infallible>(Bytes::from(e.to_line())), (sub, stop)))
    });
    let body = futures::stream::once(async move { Ok(Bytes::from(first)) }).chain(deltas);
    (
        [
            (header::CONTENT_TYPE, "application/x-ndjson"),
            (header::CACHE_CONTROL, "no-cache"),
        ],
        Body::from_stream(body),
    )
        .into_response()
}
