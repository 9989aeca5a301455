//! Live event stream: one JSON document per line, `{seq, kind, body}`.
//!
//! Each connection first gets a `snapshot` (advisories, fleet, traffic) and
//! then deltas. `seq` counts per connection from 1. A consumer that falls
//! more than the hub capacity behind is disconnected.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::broadcast;

pub const HUB_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Snapshot,
    AdvisoryCreated,
    AdvisoryPublished,
    AdvisoryCancelled,
    AdvisoryExpired,
    Fleet,
    Traffic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub body: Value,
}

impl StreamEvent {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("event serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct EventHub {
    tx: broadcast::Sender<(EventKind, Value)>,
}

impl Default for EventHub {
    fn default() -> Self {
        Self::new(HUB_CAPACITY)
    }
}

impl EventHub {
    pub fn new(capacity: usize) -> Self {
        Self {
            tx: broadcast::channel(capacity).0,
        }
    }

    pub fn emit(&self, kind: EventKind, body: impl Serialize) {
        let body = serde_json::to_value(body).expect("event body serializes");
        // No receivers is fine.
        let _ = self.tx.send((kind, body));
    }

    pub fn subscribe(&self) -> Subscription {
        Subscription {
            rx: self.tx.subscribe(),
            seq: 0,
        }
    }
}

/// One consumer's view of the hub, numbering its events.
pub struct Subscription {
    rx: broadcast::Receiver<(EventKind, Value)>,
    seq: u64,
}

impl Subscription {
    pub fn stamp(&mut self, kind: EventKind, body: Value) -> StreamEvent {
        self.seq += 1;
        StreamEvent {
            seq: self.seq,
            kind,
            body,
        }
    }

    /// `None` when the hub is gone or this consumer fell behind.
    pub async fn next(&mut self) -> Option<StreamEvent> {
        match self.rx.recv().await {
            Ok((kind, body)) => Some(self.stamp(kind, body)),
            Err(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn seq_is_per_subscription() {
        let hub = EventHub::new(8);
        let mut a = hub.subscribe();
        hub.emit(EventKind::Fleet, 1);
        let mut b = hub.subscribe();
        hub.emit(EventKind::Fleet, 2);
        assert_eq!(a.next().await.unwrap().seq, 1);
        assert_eq!(a.next().await.unwrap().seq, 2);
        let e = b.next().await.unwrap();
        assert_eq!((e.seq, e.body), (1, Value::from(2)));
    }

    #[tokio::test]
    async fn laggard_is_cut_off() {
        let hub = EventHub::new(4);
        let mut slow = hub.subscribe();
        for i in 0..10 {
            hub.emit(EventKind::Fleet, i);
        }
        assert!(slow.next().await.is_none());
    }

    #[test]
    fn line_format() {
        let e = StreamEvent {
            seq: 3,
            kind: EventKind::AdvisoryCreated,
            body: serde_json::json!({"advisory_id": 4}),
        };
        assert_eq!(e.to_line(), "{\"seq\":3,\"kind\":\"advisory_created\",\"body\":{\"advisory_id\":4}}\n");
    }
}
