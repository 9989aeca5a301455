//! Broker client over framed TCP.
//!
//! At-least-once publishes are stop-and-wait: each waits for its ACK (with
//! retransmission) before returning, so per-topic order is kept. An optional
//! [`ImpairedLink`] injects loss and delay on the way out and loss on ACKs.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use futures::stream::{SplitSink, SplitStream};
use futures::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio_util::codec::Framed;
use tracing::debug;

use cda_core::link::{ImpairedLink, LinkProfile};

use crate::envelope::{Envelope, Qos};
use crate::protocol::{ControlCodec, ControlFrame, ProtocolError};
use crate::reliable::RetryPolicy;
use crate::topic::{Topic, TopicPattern};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("connection closed")]
    Closed,
    #[error("no ACK for seq {seq} after {attempts} attempts")]
    DeliveryFailed { seq: u64, attempts: u32 },
    #[error("timed out waiting for PONG")]
    PingTimeout,
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub retry: RetryPolicy,
    /// Impairment applied to this client's traffic.
    pub link: Option<(LinkProfile, u64)>,
    pub inbox_capacity: usize,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            link: None,
            inbox_capacity: 1024,
        }
    }
}

#[derive(Debug, Default)]
pub struct ClientStats {
    pub transmissions: AtomicU64,
    pub dropped_out: AtomicU64,
    pub dropped_acks: AtomicU64,
}

type Sink = SplitSink<Framed<TcpStream, ControlCodec>, ControlFrame>;

struct Inner {
    sink: tokio::sync::Mutex<Sink>,
    acks: Mutex<HashMap<u64, oneshot::Sender<()>>>,
    pongs: Mutex<VecDeque<oneshot::Sender<()>>>,
    notice: Mutex<Option<String>>,
    link: Option<Mutex<ImpairedLink<()>>>,
    stats: ClientStats,
}

impl Inner {
    /// Sends through the impaired link. `Ok(false)` means the link dropped it.
    async fn transmit(&self, frame: ControlFrame) -> Result<bool, ClientError> {
        self.stats.transmissions.fetch_add(1, Ordering::Relaxed);
        if let Some(link) = &self.link {
            let (lost, delay_ms) = {
                let mut l = link.lock().expect("link");
                (l.roll_loss(), l.sample_delay())
            };
            if lost {
                self.stats.dropped_out.fetch_add(1, Ordering::Relaxed);
                return Ok(false);
            }
            if delay_ms > 0.0 {
                tokio::time::sleep(Duration::from_secs_f64(delay_ms / 1000.0)).await;
            }
        }
        self.sink.lock().await.send(frame).await?;
        Ok(true)
    }

    fn ack_lost(&self) -> bool {
        match &self.link {
            Some(l) => l.lock().expect("link").roll_loss(),
            None => false,
        }
    }
}

pub struct Client {
    client_id: String,
    inner: Arc<Inner>,
    inbox: mpsc::Receiver<Envelope>,
    next_seq: AtomicU64,
    retry: RetryPolicy,
    reader: JoinHandle<()>,
}

impl Client {
    pub async fn connect(
        addr: SocketAddr,
        client_id: impl Into<String>,
        options: ClientOptions,
    ) -> Result<Self, ClientError> {
        let client_id = client_id.into();
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let mut framed = Framed::new(stream, ControlCodec::default());
        framed
            .send(ControlFrame::Connect {
                client_id: client_id.clone(),
            })
            .await?;
        let (sink, stream) = framed.split();
        let link = match options.link {
            Some((profile, seed)) => Some(Mutex::new(
                ImpairedLink::new(profile, seed)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?,
            )),
            None => None,
        };
        let inner = Arc::new(Inner {
            sink: tokio::sync::Mutex::new(sink),
            acks: Mutex::new(HashMap::new()),
            pongs: Mutex::new(VecDeque::new()),
            notice: Mutex::new(None),
            link,
            stats: ClientStats::default(),
        });
        let (tx, inbox) = mpsc::channel(options.inbox_capacity);
        let reader = tokio::spawn(read_loop(stream, inner.clone(), tx));
        Ok(Self {
            client_id,
            inner,
            inbox,
            next_seq: AtomicU64::new(1),
            retry: options.retry,
            reader,
        })
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn stats(&self) -> &ClientStats {
        &self.inner.stats
    }

    /// The broker's last NOTICE, if it sent one.
    pub fn notice(&self) -> Option<String> {
        self.inner.notice.lock().expect("notice").clone()
    }

    /// Subscribes and waits until the broker has processed the request.
    pub async fn subscribe(&self, pattern: TopicPattern) -> Result<(), ClientError> {
        self.inner
            .sink
            .lock()
            .await
            .send(ControlFrame::Sub { pattern })
            .await?;
        self.ping(Duration::from_secs(5)).await
    }

    pub async fn unsubscribe(&self, pattern: TopicPattern) -> Result<(), ClientError> {
        self.inner
            .sink
            .lock()
            .await
            .send(ControlFrame::Unsub { pattern })
            .await?;
        self.ping(Duration::from_secs(5)).await
    }

    /// Round trip through the broker; frames sent earlier are processed first.
    pub async fn ping(&self, timeout: Duration) -> Result<(), ClientError> {
        let (tx, rx) = oneshot::channel();
        self.inner.pongs.lock().expect("pongs").push_back(tx);
        self.inner.sink.lock().await.send(ControlFrame::Ping).await?;
        match tokio::time::timeout(timeout, rx).await {
            Ok(Ok(())) => Ok(()),
            Ok(Err(_)) => Err(ClientError::Closed),
            Err(_) => Err(ClientError::PingTimeout),
        }
    }

    /// Returns the number of transmissions used (always 1 for best effort,
    /// even if the link dropped it).
    pub async fn publish(
        &self,
        topic: Topic,
        body: Bytes,
        qos: Qos,
        retain: bool,
    ) -> Result<u32, ClientError> {
        let seq = self.next_seq.fetch_add(1, Ordering::Relaxed);
        let env = Envelope {
            topic,
            qos,
            retain,
            seq,
            body,
        };
        if qos == Qos::BestEffort {
            self.inner.transmit(ControlFrame::Pub(env)).await?;
            return Ok(1);
        }

        let (tx, mut rx) = oneshot::channel();
        self.inner.acks.lock().expect("acks").insert(seq, tx);
        for attempt in 1..=self.retry.max_attempts {
            if attempt > 1 {
                debug!(seq, attempt, "retransmitting");
            }
            self.inner.transmit(ControlFrame::Pub(env.clone())).await?;
            match tokio::time::timeout(self.retry.timeout, &mut rx).await {
                Ok(Ok(())) => return Ok(attempt),
                Ok(Err(_)) => return Err(ClientError::Closed),
                Err(_) => {}
            }
        }
        self.inner.acks.lock().expect("acks").remove(&seq);
        Err(ClientError::DeliveryFailed {
            seq,
            attempts: self.retry.max_attempts,
        })
    }

    pub async fn recv(&mut self) -> Option<Envelope> {
        self.inbox.recv().await
    }

    pub async fn recv_timeout(&mut self, timeout: Duration) -> Option<Envelope> {
        tokio::time::timeout(timeout, self.inbox.recv())
            .await
            .ok()
            .flatten()
    }

    pub fn try_recv(&mut self) -> Option<Envelope> {
        self.inbox.try_recv().ok()
    }

    pub async fn close(self) {
        let _ = self.inner.sink.lock().await.close().await;
        self.reader.abort();
    }
}

async fn read_loop(
    mut stream: SplitStream<Framed<TcpStream, ControlCodec>>,
    inner: Arc<Inner>,
    inbox: mpsc::Sender<Envelope>,
) {
    while let Some(frame) = stream.next().await {
        match frame {
            Ok(ControlFrame::Pub(env)) => {
                if inbox.send(env).await.is_err() {
                    break;
                }
            }
            Ok(ControlFrame::Ack { seq }) => {
                if inner.ack_lost() {
                    inner.stats.dropped_acks.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
                if let Some(tx) = inner.acks.lock().expect("acks").remove(&seq) {
                    let _ = tx.send(());
                }
            }
            Ok(ControlFrame::Pong) => {
                if let Some(tx) = inner.pongs.lock().expect("pongs").pop_front() {
                    let _ = tx.send(());
                }
            }
            Ok(ControlFrame::Notice { reason }) => {
                debug!(reason, "broker notice");
                *inner.notice.lock().expect("notice") = Some(reason);
            }
            Ok(other) => debug!(frame = other.name(), "ignoring unexpected frame"),
            Err(e) => {
                debug!(error = %e, "read failed");
                break;
            }
        }
    }
    inner.acks.lock().expect("acks").clear();
    inner.pongs.lock().expect("pongs").clear();
}
