//! Topic names and wildcard patterns.
//!
//! Topics are `/`-separated non-empty tokens. Patterns may use `+` for one
//! token and a trailing `#` for any (possibly empty) suffix.
//!
//! Fixed scheme:
//! - `cda/{region}/veh/{vehicle_id}/bsm` vehicle uplink
//! - `cda/{region}/adv/{segment_id}` advisory downlink, retained

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopicError {
    #[error("empty topic")]
    Empty,
    #[error("empty segment in `{0}`")]
    EmptySegment(String),
    #[error("wildcard in topic name `{0}`")]
    Wildcard(String),
    #[error("`#` must be the final segment in `{0}`")]
    MisplacedHash(String),
    #[error("wildcard mixed with text in segment of `{0}`")]
    PartialWildcard(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Topic(String);

impl Topic {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicError> {
        let s = s.into();
        if s.is_empty() {
            return Err(TopicError::Empty);
        }
        for seg in s.split('/') {
            if seg.is_empty() {
                return Err(TopicError::EmptySegment(s));
            }
            if seg.contains(['+', '#']) {
                return Err(TopicError::Wildcard(s));
            }
        }
        Ok(Topic(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    pub fn bsm(region: &str, vehicle_id: u32) -> Result<Self, TopicError> {
        Topic::new(format!("cda/{region}/veh/{vehicle_id}/bsm"))
    }

    pub fn advisory(region: &str, segment_id: u16) -> Result<Self, TopicError> {
        Topic::new(format!("cda/{region}/adv/{segment_id}"))
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Topic {
    type Err = TopicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Topic::new(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicPattern(String);

impl TopicPattern {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicError> {
        let s = s.into();
        if s.is_empty() {
            return Err(TopicError::Empty);
        }
        let segments: Vec<&str> = s.split('/').collect();
        for (i, seg) in segments.iter().enumerate() {
            match *seg {
                "" => return Err(TopicError::EmptySegment(s)),
                "+" => {}
                "#" if i + 1 == segments.len() => {}
                "#" => return Err(TopicError::MisplacedHash(s)),
                other if other.contains(['+', '#']) => return Err(TopicError::PartialWildcard(s)),
                _ => {}
            }
        }
        Ok(TopicPattern(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Vehicle uplink for every region and vehicle.
    pub fn all_bsm() -> Self {
        TopicPattern("cda/+/veh/+/bsm".into())
    }

    pub fn matches(&self, topic: &Topic) -> bool {
        topic_matches(self, topic)
    }
}

impl From<Topic> for TopicPattern {
    fn from(t: Topic) -> Self {
        TopicPattern(t.0)
    }
}

impl fmt::Display for TopicPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for TopicPattern {
    type Err = TopicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopicPattern::new(s)
    }
}

pub fn topic_matches(pattern: &TopicPattern, topic: &Topic) -> bool {
    let mut topic_segs = topic.segments();
    for p in pattern.0.split('/') {
        if p == "#" {
            return true;
        }
        match topic_segs.next() {
            Some(_) if p == "+" => {}
            Some(t) if t == p => {}
            _ => return false,
        }
    }
    topic_segs.next().is_none()
}
