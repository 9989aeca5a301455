//! MetaAction commands: the only path from model-generated text to vehicle
//! setpoints.
//!
//! Model output must contain exactly one fenced block:
//!
//! ````text
//! ```metaaction
//! {"action": "SetFollowGap", "params": {"gap_s": 2.5}}
//! ```
//! ````
//!
//! The block body is a JSON object with an `action` name from the catalog and
//! a flat `params` object whose values are numbers or strings. Text outside
//! the block is ignored. Parsing yields a [`MetaActionCommand`] or a typed
//! [`ParseRejection`]; [`validate`] checks it against a [`SafetyEnvelope`] and
//! the rate limit, producing the [`ValidatedCommand`] that [`apply`] requires.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::agent::{AdvisoryDecision, DriverNotice, NoticeSeverity, VehicleState};
use crate::num::Real;
use crate::wire::{speed_units_from_mps, AdvisoryCause, AdvisoryPayload, SPEED_UNIT_MPS};

pub const BLOCK_OPEN: &str = "```metaaction";
pub const BLOCK_CLOSE: &str = "```";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "params")]
pub enum MetaActionCommand {
    SetCruiseSpeed {
        speed_mps: f64,
    },
    SetFollowGap {
        gap_s: f64,
    },
    ApplyAdvisorySpeed {
        segment_id: u16,
        speed_mps: f64,
        duration_s: f64,
    },
    CancelAdvisory {
        segment_id: u16,
    },
    DriverNotice {
        text: String,
        severity: NoticeSeverity,
    },
}

impl MetaActionCommand {
    pub const ACTIONS: [&'static str; 5] = [
        "SetCruiseSpeed",
        "SetFollowGap",
        "ApplyAdvisorySpeed",
        "CancelAdvisory",
        "DriverNotice",
    ];

    pub fn action_name(&self) -> &'static str {
        match self {
            Self::SetCruiseSpeed { .. } => "SetCruiseSpeed",
            Self::SetFollowGap { .. } => "SetFollowGap",
            Self::ApplyAdvisorySpeed { .. } => "ApplyAdvisorySpeed",
            Self::CancelAdvisory { .. } => "CancelAdvisory",
            Self::DriverNotice { .. } => "DriverNotice",
        }
    }

    /// Renders the command as a fenced block that [`parse_command`] accepts.
    pub fn to_block(&self) -> String {
        let doc = serde_json::to_string(self).expect("command serializes");
        format!("{BLOCK_OPEN}\n{doc}\n{BLOCK_CLOSE}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ParseRejection {
    #[error("no metaaction block found")]
    NoBlock,
    #[error("{0} metaaction blocks found, expected exactly one")]
    MultipleBlocks(usize),
    #[error("metaaction block is not closed")]
    UnterminatedBlock,
    #[error("malformed command document: {0}")]
    Malformed(String),
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("{action} requires param `{param}`")]
    MissingParam {
        action: &'static str,
        param: &'static str,
    },
    #[error("param `{param}` must be {expected}")]
    MistypedParam {
        param: &'static str,
        expected: &'static str,
    },
    #[error("unexpected param `{0}`")]
    UnexpectedParam(String),
}

/// Extracts the single fenced block body.
fn extract_block(text: &str) -> Result<&str, ParseRejection> {
    let mut blocks = Vec::new();
    let mut open: Option<usize> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        match open {
            None if trimmed == BLOCK_OPEN => open = Some(offset + line.len()),
            Some(start) if trimmed == BLOCK_CLOSE => {
                blocks.push(&text[start..offset]);
                open = None;
            }
            _ => {}
        }
        offset += line.len();
    }
    if open.is_some() {
        return Err(ParseRejection::UnterminatedBlock);
    }
    match blocks.len() {
        0 => Err(ParseRejection::NoBlock),
        1 => Ok(blocks[0]),
        n => Err(ParseRejection::MultipleBlocks(n)),
    }
}

struct Params<'a> {
    action: &'static str,
    map: &'a Map<String, Value>,
}

impl Params<'_> {
    fn get(&self, param: &'static str) -> Result<&Value, ParseRejection> {
        self.map.get(param).ok_or(ParseRejection::MissingParam {
            action: self.action,
            param,
        })
    }

    fn number(&self, param: &'static str) -> Result<f64, ParseRejection> {
        self.get(param)?
            .as_f64()
            .ok_or(ParseRejection::MistypedParam {
                param,
                expected: "a number",
            })
    }

    fn segment(&self, param: &'static str) -> Result<u16, ParseRejection> {
        self.get(param)?
            .as_u64()
            .and_then(|v| u16::try_from(v).ok())
            .ok_or(ParseRejection::MistypedParam {
                param,
                expected: "an integer in 0..=65535",
            })
    }

    fn string(&self, param: &'static str) -> Result<&str, ParseRejection> {
        self.get(param)?
            .as_str()
            .ok_or(ParseRejection::MistypedParam {
                param,
                expected: "a string",
            })
    }

    fn only(&self, allowed: &[&str]) -> Result<(), ParseRejection> {
        match self.map.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(ParseRejection::UnexpectedParam(k.clone())),
            None => Ok(()),
        }
    }
}

/// Parses model output into a catalog command.
pub fn parse_command(text: &str) -> Result<MetaActionCommand, ParseRejection> {
    let body = extract_block(text)?;
    let doc: Value =
        serde_json::from_str(body).map_err(|e| ParseRejection::Malformed(e.to_string()))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| ParseRejection::Malformed("document is not an object".into()))?;
    if let Some(k) = obj.keys().find(|k| *k != "action" && *k != "params") {
        return Err(ParseRejection::Malformed(format!("unexpected key `{k}`")));
    }
    let name = obj
        .get("action")
        .ok_or_else(|| ParseRejection::Malformed("missing `action`".into()))?
        .as_str()
        .ok_or_else(|| ParseRejection::Malformed("`action` is not a string".into()))?;
    let action = *MetaActionCommand::ACTIONS
        .iter()
        .find(|a| **a == name)
        .ok_or_else(|| ParseRejection::UnknownAction(name.to_owned()))?;
    let empty = Map::new();
    let map = match obj.get("params") {
        None => &empty,
        Some(Value::Object(m)) => m,
        Some(_) => return Err(ParseRejection::Malformed("`params` is not an object".into())),
    };
    if let Some((k, _)) = map.iter().find(|(_, v)| !(v.is_number() || v.is_string())) {
        return Err(ParseRejection::Malformed(format!(
            "param `{k}` is not a number or string"
        )));
    }
    let p = Params { action, map };
    let cmd = match action {
        "SetCruiseSpeed" => {
            p.only(&["speed_mps"])?;
            MetaActionCommand::SetCruiseSpeed {
                speed_mps: p.number("speed_mps")?,
            }
        }
        "SetFollowGap" => {
            p.only(&["gap_s"])?;
            MetaActionCommand::SetFollowGap {
                gap_s: p.number("gap_s")?,
            }
        }
        "ApplyAdvisorySpeed" => {
            p.only(&["segment_id", "speed_mps", "duration_s"])?;
            MetaActionCommand::ApplyAdvisorySpeed {
                segment_id: p.segment("segment_id")?,
                speed_mps: p.number("speed_mps")?,
                duration_s: p.number("duration_s")?,
            }
        }
        "CancelAdvisory" => {
            p.only(&["segment_id"])?;
            MetaActionCommand::CancelAdvisory {
                segment_id: p.segment("segment_id")?,
            }
        }
        "DriverNotice" => {
            p.only(&["text", "severity"])?;
            let severity = match p.string("severity")? {
                "info" => NoticeSeverity::Info,
                "warn" => NoticeSeverity::Warn,
                _ => {
                    return Err(ParseRejection::MistypedParam {
                        param: "severity",
                        expected: "\"info\" or \"warn\"",
                    })
                }
            };
            MetaActionCommand::DriverNotice {
                text: p.string("text")?.to_owned(),
                severity,
            }
        }
        _ => unreachable!("catalog lookup above"),
    };
    Ok(cmd)
}

/// Bounds every accepted command must respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyEnvelope {
    pub speed_min: f64,
    pub speed_max: f64,
    pub gap_min: f64,
    pub gap_max: f64,
    /// Minimum seconds between accepted commands.
    pub rate_limit: f64,
    pub notice_max_len: usize,
}

impl Default for SafetyEnvelope {
    fn default() -> Self {
        Self {
            speed_min: 0.0,
            speed_max: 38.0,
            gap_min: 0.8,
            gap_max: 4.0,
            rate_limit: 1.0,
            notice_max_len: 200,
        }
    }
}

impl SafetyEnvelope {
    pub fn is_valid(&self) -> bool {
        self.speed_min < self.speed_max && self.gap_min < self.gap_max && self.rate_limit >= 0.0
    }
}

/// Longest advisory a 16-bit minute count can express.
pub const MAX_ADVISORY_DURATION_S: f64 = 65_535.0 * 60.0;

#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ValidationRejection {
    #[error("{field} = {value} outside [{min}, {max}]")]
    OutOfRange {
        field: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("rate limited, {remaining_s:.3}s remaining")]
    RateLimited { remaining_s: f64 },
    #[error("notice of {len} characters exceeds {max}")]
    NoticeTooLong { len: usize, max: usize },
}

/// A command that passed [`validate`]. Only constructible there.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedCommand {
    command: MetaActionCommand,
    accepted_at: f64,
}

impl ValidatedCommand {
    pub fn command(&self) -> &MetaActionCommand {
        &self.command
    }

    pub fn accepted_at(&self) -> f64 {
        self.accepted_at
    }
}

fn within(field: &'static str, value: f64, min: f64, max: f64) -> Result<(), ValidationRejection> {
    if value.is_finite() && min <= value && value <= max {
        Ok(())
    } else {
        Err(ValidationRejection::OutOfRange {
            field,
            value,
            min,
            max,
        })
    }
}

pub fn validate(
    cmd: MetaActionCommand,
    envelope: &SafetyEnvelope,
    last_accepted_at: Option<f64>,
    now: f64,
) -> Result<ValidatedCommand, ValidationRejection> {
    let e = envelope;
    match &cmd {
        MetaActionCommand::SetCruiseSpeed { speed_mps } => {
            within("speed_mps", *speed_mps, e.speed_min, e.speed_max)?
        }
        MetaActionCommand::SetFollowGap { gap_s } => within("gap_s", *gap_s, e.gap_min, e.gap_max)?,
        MetaActionCommand::ApplyAdvisorySpeed {
            speed_mps,
            duration_s,
            ..
        } => {
            within("speed_mps", *speed_mps, e.speed_min, e.speed_max)?;
            // The wire value is quantized; the quantized speed must fit too.
            let quantized = f64::from(speed_units_from_mps(*speed_mps)) * SPEED_UNIT_MPS;
            within("speed_mps", quantized, e.speed_min, e.speed_max)?;
            if !(duration_s.is_finite() && *duration_s > 0.0) || *duration_s > MAX_ADVISORY_DURATION_S
            {
                return Err(ValidationRejection::OutOfRange {
                    field: "duration_s",
                    value: *duration_s,
                    min: 0.0,
                    max: MAX_ADVISORY_DURATION_S,
                });
            }
        }
        MetaActionCommand::CancelAdvisory { .. } => {}
        MetaActionCommand::DriverNotice { text, .. } => {
            let len = text.chars().count();
            if len > e.notice_max_len {
                return Err(ValidationRejection::NoticeTooLong {
                    len,
                    max: e.notice_max_len,
                });
            }
        }
    }
    if let Some(last) = last_accepted_at {
        let elapsed = now - last;
        if elapsed < e.rate_limit {
            return Err(ValidationRejection::RateLimited {
                remaining_s: e.rate_limit - elapsed,
            });
        }
    }
    Ok(ValidatedCommand {
        command: cmd,
        accepted_at: now,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Applied {
    CruiseSpeed,
    FollowGap,
    Advisory(AdvisoryDecision),
    Notice,
}

/// Applies a validated command to a vehicle.
pub fn apply<T: Real>(validated: ValidatedCommand, state: &mut VehicleState<T>, now: f64) -> Applied {
    match validated.command {
        MetaActionCommand::SetCruiseSpeed { speed_mps } => {
            state.driver_set_speed = T::lit(speed_mps);
            Applied::CruiseSpeed
        }
        MetaActionCommand::SetFollowGap { gap_s } => {
            state.follow_gap_s = Some(T::lit(gap_s));
            Applied::FollowGap
        }
        MetaActionCommand::ApplyAdvisorySpeed {
            segment_id,
            speed_mps,
            duration_s,
        } => {
            let advisory_id = state
                .active_advisory()
                .filter(|a| a.payload.segment_id == segment_id)
                .map_or(0, |a| a.payload.advisory_id.saturating_add(1));
            let payload = AdvisoryPayload {
                advisory_id,
                segment_id,
                advisory_speed: speed_units_from_mps(speed_mps),
                start_minute_of_year: AdvisoryPayload::START_IMMEDIATE,
                duration_minutes: (duration_s / 60.0).ceil().clamp(1.0, 65_535.0) as u16,
                cause: AdvisoryCause::None,
            };
            Applied::Advisory(state.on_advisory(payload, now))
        }
        MetaActionCommand::CancelAdvisory { segment_id } => {
            let advisory_id = state
                .active_advisory()
                .filter(|a| a.payload.segment_id == segment_id)
                .map_or(0, |a| a.payload.advisory_id);
            let payload = AdvisoryPayload {
                advisory_id,
                segment_id,
                advisory_speed: AdvisoryPayload::CANCEL,
                start_minute_of_year: AdvisoryPayload::START_IMMEDIATE,
                duration_minutes: 0,
                cause: AdvisoryCause::None,
            };
            Applied::Advisory(state.on_advisory(payload, now))
        }
        MetaActionCommand::DriverNotice { text, severity } => {
            state.notices.push(DriverNotice {
                text,
                severity,
                at: now,
            });
            Applied::Notice
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[serde(untagged)]
pub enum Rejection {
    #[error("parse: {0}")]
    Parse(ParseRejection),
    #[error("validation: {0}")]
    Validation(ValidationRejection),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateRecord {
    pub at: f64,
    pub action: Option<&'static str>,
    pub outcome: Result<Applied, Rejection>,
}

/// Per-vehicle parse → validate → apply pipeline with its rate-limit clock
/// and a log of every outcome. Rejections leave the vehicle untouched.
#[derive(Debug, Clone)]
pub struct CommandGate {
    envelope: SafetyEnvelope,
    last_accepted_at: Option<f64>,
    log: Vec<GateRecord>,
}

impl CommandGate {
    pub fn new(envelope: SafetyEnvelope) -> Self {
        Self {
            envelope,
            last_accepted_at: None,
            log: Vec::new(),
        }
    }

    pub fn envelope(&self) -> &SafetyEnvelope {
        &self.envelope
    }

    pub fn log(&self) -> &[GateRecord] {
        &self.log
    }

    pub fn submit_text<T: Real>(
        &mut self,
        text: &str,
        state: &mut VehicleState<T>,
        now: f64,
    ) -> Result<Applied, Rejection> {
        match parse_command(text) {
            Ok(cmd) => self.submit(cmd, state, now),
            Err(e) => {
                let outcome = Err(Rejection::Parse(e));
                self.record(now, None, &outcome);
                outcome
            }
        }
    }

    pub fn submit<T: Real>(
        &mut self,
        cmd: MetaActionCommand,
        state: &mut VehicleState<T>,
        now: f64,
    ) -> Result<Applied, Rejection> {
        let action = Some(cmd.action_name());
        let outcome = match validate(cmd, &self.envelope, self.last_accepted_at, now) {
            Ok(v) => {
                self.last_accepted_at = Some(v.accepted_at());
                Ok(apply(v, state, now))
            }
            Err(e) => Err(Rejection::Validation(e)),
        };
        self.record(now, action, &outcome);
        outcome
    }

    fn record(&mut self, at: f64, action: Option<&'static str>, outcome: &Result<Applied, Rejection>) {
        self.log.push(GateRecord {
            at,
            action,
            outcome: outcome.clone(),
        });
    }
}

impl fmt::Display for GateRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let action = self.action.unwrap_or("-");
        match &self.outcome {
            Ok(applied) => write!(f, "{:.3} {action} applied {applied:?}", self.at),
            Err(r) => write!(f, "{:.3} {action} rejected: {r}", self.at),
        }
    }
}
