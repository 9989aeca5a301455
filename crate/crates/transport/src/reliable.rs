//! Retransmission bookkeeping for at-least-once sends, driven by an
//! external clock.

use std::collections::BTreeMap;
use std::time::Duration;

use cda_core::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub timeout: Duration,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            timeout: Duration::from_millis(250),
            max_attempts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RetryAction<K, M> {
    Retransmit { key: K, message: M, attempt: u32 },
    GaveUp { key: K, message: M, attempts: u32 },
}

#[derive(Debug, Clone)]
struct InFlight<M> {
    message: M,
    attempts: u32,
    deadline: SimTime,
}

/// Messages awaiting acknowledgement, keyed by whatever the ACK carries.
#[derive(Debug, Clone)]
pub struct Outbox<K, M> {
    policy: RetryPolicy,
    pending: BTreeMap<K, InFlight<M>>,
}

impl<K: Ord + Clone, M: Clone> Outbox<K, M> {
    pub fn new(policy: RetryPolicy) -> Self {
        Self {
            policy,
            pending: BTreeMap::new(),
        }
    }

    fn timeout(&self) -> SimTime {
        SimTime::from_micros(self.policy.timeout.as_micros() as u64)
    }

    /// Records the first transmission.
    pub fn sent(&mut self, key: K, message: M, now: SimTime) {
        let deadline = now + self.timeout();
        self.pending.insert(
            key,
            InFlight {
                message,
                attempts: 1,
                deadline,
            },
        );
    }

    /// Returns the number of attempts it took, or `None` for an unknown or
    /// already acknowledged key.
    pub fn ack(&mut self, key: &K) -> Option<u32> {
        self.pending.remove(key).map(|f| f.attempts)
    }

    pub fn next_deadline(&self) -> Option<SimTime> {
        self.pending.values().map(|f| f.deadline).min()
    }

    /// Everything whose timer expired at or before `now`.
    pub fn poll(&mut self, now: SimTime) -> Vec<RetryAction<K, M>> {
        let timeout = self.timeout();
        let expired: Vec<K> = self
            .pending
            .iter()
            .filter(|(_, f)| f.deadline <= now)
            .map(|(k, _)| k.clone())
            .collect();
        let mut actions = Vec::with_capacity(expired.len());
        for key in expired {
            let entry = self.pending.get_mut(&key).expect("key listed above");
            if entry.attempts >= self.policy.max_attempts {
                let f = self.pending.remove(&key).expect("key listed above");
                actions.push(RetryAction::GaveUp {
                    key,
                    message: f.message,
                    attempts: f.attempts,
                });
            } else {
                entry.attempts += 1;
                entry.deadline = now + timeout;
                actions.push(RetryAction::Retransmit {
                    key,
                    message: entry.message.clone(),
                    attempt: entry.attempts,
                });
            }
        }
        actions
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}
