//! Transport-independent routing core shared by the TCP broker and the
//! simulated one.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::envelope::{Envelope, Qos};
use crate::topic::{Topic, TopicPattern};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RouterStats {
    pub published: u64,
    pub duplicates: u64,
    pub deliveries: u64,
    pub unrouted: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PublishOutcome<C> {
    /// Subscribers to deliver to, in client order. Empty when nobody listens.
    Routed(Vec<C>),
    /// An at-least-once retransmission of a sequence number already routed.
    /// Acknowledge it, do not forward it.
    Duplicate,
}

/// Subscription table plus retained messages.
///
/// At-least-once publishes are deduplicated per `(publisher, topic)` by
/// sequence number, so a retransmission never overtakes or repeats a
/// message that was already routed.
#[derive(Debug, Clone)]
pub struct Router<C> {
    subscriptions: BTreeMap<C, BTreeSet<TopicPattern>>,
    retained: BTreeMap<Topic, Envelope>,
    last_seq: HashMap<(C, Topic), u64>,
    stats: RouterStats,
}

impl<C> Default for Router<C> {
    fn default() -> Self {
        Self {
            subscriptions: BTreeMap::new(),
            retained: BTreeMap::new(),
            last_seq: HashMap::new(),
            stats: RouterStats::default(),
        }
    }
}

impl<C: Ord + Clone + std::hash::Hash> Router<C> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> RouterStats {
        self.stats
    }

    pub fn retained(&self, topic: &Topic) -> Option<&Envelope> {
        self.retained.get(topic)
    }

    pub fn publish(&mut self, from: &C, env: &Envelope) -> PublishOutcome<C> {
        if env.qos == Qos::AtLeastOnce {
            let key = (from.clone(), env.topic.clone());
            match self.last_seq.get(&key) {
                Some(&last) if env.seq <= last => {
                    self.stats.duplicates += 1;
                    return PublishOutcome::Duplicate;
                }
                _ => {
                    self.last_seq.insert(key, env.seq);
                }
            }
        }
        self.stats.published += 1;
        if env.retain {
            if env.body.is_empty() {
                self.retained.remove(&env.topic);
            } else {
                self.retained.insert(env.topic.clone(), env.clone());
            }
        }
        let targets: Vec<C> = self
            .subscriptions
            .iter()
            .filter(|(_, patterns)| patterns.iter().any(|p| p.matches(&env.topic)))
            .map(|(c, _)| c.clone())
            .collect();
        if targets.is_empty() {
            self.stats.unrouted += 1;
        }
        self.stats.deliveries += targets.len() as u64;
        PublishOutcome::Routed(targets)
    }

    /// Adds a subscription and returns the retained messages it matches.
    pub fn subscribe(&mut self, client: &C, pattern: TopicPattern) -> Vec<Envelope> {
        let retained = self
            .retained
            .values()
            .filter(|e| pattern.matches(&e.topic))
            .cloned()
            .collect();
        self.subscriptions
            .entry(client.clone())
            .or_default()
            .insert(pattern);
        retained
    }

    pub fn unsubscribe(&mut self, client: &C, pattern: &TopicPattern) -> bool {
        let Some(set) = self.subscriptions.get_mut(client) else {
            return false;
        };
        let removed = set.remove(pattern);
        if set.is_empty() {
            self.subscriptions.remove(client);
        }
        removed
    }

    /// Drops every subscription and sequence record of a client.
    pub fn disconnect(&mut self, client: &C) {
        self.subscriptions.remove(client);
        self.last_seq.retain(|(c, _), _| c != client);
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscriptions.len()
    }
}
