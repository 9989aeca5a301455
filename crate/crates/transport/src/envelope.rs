use bytes::Bytes;

use crate::topic::Topic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Qos {
    BestEffort,
    AtLeastOnce,
}

/// A published message as it travels through the broker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub topic: Topic,
    pub qos: Qos,
    /// Keep as the topic's retained message for late subscribers.
    pub retain: bool,
    /// Per-publisher counter, strictly increasing.
    pub seq: u64,
    /// Usually a wire-codec frame.
    pub body: Bytes,
}
