//! Route files: TOML with `[[route]]` segment tables, the same shape as in
//! scenario files (a scenario file works as a route file).

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

use cda_core::agent::{Route, Segment};

#[derive(Deserialize)]
struct RouteDoc {
    route: Vec<Segment>,
}

pub fn parse_routes(text: &str) -> Result<Route> {
    let doc: RouteDoc = toml::from_str(text).context("route document")?;
    Ok(Route::new(doc.route)?)
}

pub fn load_routes(path: &Path) -> Result<Route> {
    let text = std::fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    parse_routes(&text)
}

/// One 5 km segment, used when no route file is given.
pub fn default_route() -> Route {
    parse_routes(
        r#"
[[route]]
segment_id = 12
start = { lat = 28.5000, lon = -81.4000 }
end = { lat = 28.5450, lon = -81.4000 }
length_m = 5000.0
"#,
    )
    .expect("built-in route")
}
