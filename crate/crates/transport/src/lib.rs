//! Topic-routed transport for wire-codec frames: a TCP broker with retained
//! messages and at-least-once delivery, its client, and a UDP datagram
//! channel.
//!
//! [`router::Router`] and [`reliable::Outbox`] hold no I/O; the scenario
//! simulator drives them with simulated time.

pub mod broker;
pub mod client;
pub mod datagram;
pub mod envelope;
pub mod protocol;
pub mod reliable;
pub mod router;
pub mod topic;

pub use broker::{broker_serve, BrokerConfig, BrokerHandle};
pub use client::{Client, ClientError, ClientOptions};
pub use datagram::{DatagramChannel, DatagramError, MAX_DATAGRAM};
pub use envelope::{Envelope, Qos};
pub use protocol::{ControlCodec, ControlFrame, ProtocolError};
pub use reliable::{Outbox, RetryAction, RetryPolicy};
pub use router::{PublishOutcome, Router};
pub use topic::{Topic, TopicError, TopicPattern};
