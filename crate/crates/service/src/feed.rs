//! Traffic-feed ingestion.
//!
//! Document format:
//!
//! ```json
//! {"events": [{"event_id": "fl511-1001", "roadway": "I-4", "direction": "EB",
//!   "kind": "congestion", "severity": 3, "description": "...",
//!   "lat": 28.54, "lon": -81.38, "updated_at": "2025-03-01T08:15:00Z"}]}
//! ```
//!
//! Bad entries are skipped with a diagnostic; only a document that is not
//! an object with an `events` array fails as a whole.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedKind {
    Incident,
    Congestion,
    Construction,
    Closure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedEvent {
    pub event_id: String,
    pub roadway: String,
    pub direction: String,
    pub kind: FeedKind,
    pub severity: u8,
    pub description: String,
    pub lat: f64,
    pub lon: f64,
    pub updated_at: String,
}

impl FeedEvent {
    /// One-line summary for prompts and logs.
    pub fn summary(&self) -> String {
        format!(
            "{} {} {:?} severity {}: {}",
            self.roadway, self.direction, self.kind, self.severity, self.description
        )
        .to_lowercase()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub index: usize,
    pub event_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct FeedSnapshot {
    pub events: Vec<FeedEvent>,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Error)]
pub enum FeedError {
    #[error("reading feed: {0}")]
    Io(#[from] std::io::Error),
    #[error("fetching feed: {0}")]
    Fetch(String),
    #[error("feed is not JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("feed document must be an object with an `events` array")]
    Shape,
}

fn str_field(obj: &serde_json::Map<String, Value>, key: &str) -> Result<String, String> {
    match obj.get(key) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
        Some(Value::String(_)) => Err(format!("`{key}` is empty")),
        Some(_) => Err(format!("`{key}` is not a string")),
        None => Err(format!("missing `{key}`")),
    }
}

fn coord(obj: &serde_json::Map<String, Value>, key: &str, limit: f64) -> Result<f64, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Err(format!("missing `{key}`")),
        Some(v) => match v.as_f64() {
            Some(x) if x.is_finite() && x.abs() <= limit => Ok(x),
            Some(x) => Err(format!("`{key}` = {x} out of range")),
            None => Err(format!("`{key}` is not a number")),
        },
    }
}

fn parse_entry(v: &Value) -> Result<FeedEvent, String> {
    let obj = v.as_object().ok_or("entry is not an object")?;
    let kind_s = str_field(obj, "kind")?;
    let kind: FeedKind = serde_json::from_value(Value::String(kind_s.clone()))
        .map_err(|_| format!("unknown kind `{kind_s}`"))?;
    let severity = match obj.get("severity").and_then(Value::as_u64) {
        Some(s @ 1..=5) => s as u8,
        Some(s) => return Err(format!("severity {s} outside 1..5")),
        None => return Err("missing or non-integer `severity`".into()),
    };
    Ok(FeedEvent {
        event_id: str_field(obj, "event_id")?,
        roadway: str_field(obj, "roadway")?,
        direction: str_field(obj, "direction")?,
        kind,
        severity,
        description: match obj.get("description") {
            Some(Value::String(s)) => s.clone(),
            None | Some(Value::Null) => String::new(),
            Some(_) => return Err("`description` is not a string".into()),
        },
        lat: coord(obj, "lat", 90.0)?,
        lon: coord(obj, "lon", 180.0)?,
        updated_at: str_field(obj, "updated_at")?,
    })
}

pub fn parse_feed(text: &str) -> Result<FeedSnapshot, FeedError> {
    let doc: Value = serde_json::from_str(text)?;
    let entries = doc
        .get("events")
        .and_then(Value::as_array)
        .ok_or(FeedError::Shape)?;
    let mut snapshot = FeedSnapshot::default();
    let mut seen = HashSet::new();
    for (index, entry) in entries.iter().enumerate() {
        let event_id = entry
            .get("event_id")
            .and_then(Value::as_str)
            .map(str::to_owned);
        let result = parse_entry(entry).and_then(|e| {
            if seen.insert(e.event_id.clone()) {
                Ok(e)
            } else {
                Err(format!("duplicate event_id `{}`", e.event_id))
            }
        });
        match result {
            Ok(e) => snapshot.events.push(e),
            Err(reason) => snapshot.diagnostics.push(Diagnostic {
                index,
                event_id,
                reason,
            }),
        }
    }
    Ok(snapshot)
}

pub fn load_feed_file(path: impl AsRef<Path>) -> Result<FeedSnapshot, FeedError> {
    parse_feed(&std::fs::read_to_string(path)?)
}

/// A source string starting with `http://` or `https://` is fetched,
/// anything else is read as a path.
pub async fn ingest_feed(source: &str) -> Result<FeedSnapshot, FeedError> {
    if source.starts_with("http://") || source.starts_with("https://") {
        let body = reqwest::get(source)
            .await
            .and_then(|r| r.error_for_status())
            .map_err(|e| FeedError::Fetch(e.to_string()))?
            .text()
            .await
            .map_err(|e| FeedError::Fetch(e.to_string()))?;
        parse_feed(&body)
    } else {
        let text = tokio::fs::read_to_string(source).await?;
        parse_feed(&text)
    }
}
