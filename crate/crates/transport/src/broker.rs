//! TCP broker with an optional UDP ingress for BSM datagrams.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use futures::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream, UdpSocket};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio_util::codec::Framed;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use cda_core::wire::{decode_frame, Message};

use crate::envelope::{Envelope, Qos};
use crate::protocol::{ControlCodec, ControlFrame};
use crate::router::{PublishOutcome, Router};
use crate::topic::Topic;

pub const DEFAULT_TCP_PORT: u16 = 7320;
pub const DEFAULT_UDP_PORT: u16 = 7321;

/// How long an evicted client gets to drain before the socket is dropped.
const NOTICE_FLUSH_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub tcp_addr: SocketAddr,
    /// BSM datagrams received here are published on the vehicle's topic.
    pub udp_addr: Option<SocketAddr>,
    /// Per-client outbound queue bound.
    pub queue_limit: usize,
    pub region: String,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            tcp_addr: SocketAddr::from(([127, 0, 0, 1], DEFAULT_TCP_PORT)),
            udp_addr: Some(SocketAddr::from(([127, 0, 0, 1], DEFAULT_UDP_PORT))),
            queue_limit: 1024,
            region: "fl".into(),
        }
    }
}

impl BrokerConfig {
    /// Ephemeral loopback ports, for tests.
    pub fn ephemeral() -> Self {
        Self {
            tcp_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            udp_addr: Some(SocketAddr::from(([127, 0, 0, 1], 0))),
            ..Self::default()
        }
    }
}

#[derive(Debug, Default)]
pub struct BrokerStats {
    pub connections: AtomicU64,
    pub published: AtomicU64,
    pub delivered: AtomicU64,
    pub malformed_disconnects: AtomicU64,
    pub overflow_disconnects: AtomicU64,
    pub udp_received: AtomicU64,
    pub udp_corrupt: AtomicU64,
}

impl BrokerStats {
    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }
}

struct ClientSlot {
    conn_id: u64,
    tx: mpsc::Sender<ControlFrame>,
    kill: Option<oneshot::Sender<String>>,
}

#[derive(Default)]
struct Shared {
    router: Router<String>,
    clients: HashMap<String, ClientSlot>,
}

impl Shared {
    /// Queues `frame` for `client`; on overflow the client is evicted.
    fn enqueue(&mut self, client: &str, frame: ControlFrame, stats: &BrokerStats) -> bool {
        let Some(slot) = self.clients.get(client) else {
            return false;
        };
        match slot.tx.try_send(frame) {
            Ok(()) => true,
            Err(mpsc::error::TrySendError::Full(_)) => {
                warn!(client, "outbound queue overflow, disconnecting");
                stats.overflow_disconnects.fetch_add(1, Ordering::Relaxed);
                self.evict(client, "outbound queue overflow");
                false
            }
            Err(mpsc::error::TrySendError::Closed(_)) => false,
        }
    }

    fn evict(&mut self, client: &str, reason: &str) {
        if let Some(mut slot) = self.clients.remove(client) {
            if let Some(kill) = slot.kill.take() {
                let _ = kill.send(reason.to_owned());
            }
        }
        self.router.disconnect(&client.to_owned());
    }

    fn route(&mut self, from: &str, env: Envelope, stats: &BrokerStats) {
        let targets = match self.router.publish(&from.to_owned(), &env) {
            PublishOutcome::Routed(t) => t,
            PublishOutcome::Duplicate => return,
        };
        stats.published.fetch_add(1, Ordering::Relaxed);
        for target in targets {
            if self.enqueue(&target, ControlFrame::Pub(env.clone()), stats) {
                stats.delivered.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
}

/// A running broker. Dropping the handle does not stop it; call
/// [`BrokerHandle::shutdown`].
pub struct BrokerHandle {
    tcp_addr: SocketAddr,
    udp_addr: Option<SocketAddr>,
    stats: Arc<BrokerStats>,
    cancel: CancellationToken,
    tasks: Vec<JoinHandle<()>>,
}

impl BrokerHandle {
    pub fn tcp_addr(&self) -> SocketAddr {
        self.tcp_addr
    }

    pub fn udp_addr(&self) -> Option<SocketAddr> {
        self.udp_addr
    }

    pub fn stats(&self) -> &BrokerStats {
        &self.stats
    }

    pub async fn shutdown(self) {
        self.cancel.cancel();
        for t in self.tasks {
            let _ = t.await;
        }
    }

    /// Resolves when the broker is cancelled.
    pub async fn wait(&self) {
        self.cancel.cancelled().await
    }
}

/// Binds the configured sockets and starts serving.
pub async fn broker_serve(config: BrokerConfig) -> std::io::Result<BrokerHandle> {
    let listener = TcpListener::bind(config.tcp_addr).await?;
    let tcp_addr = listener.local_addr()?;
    let udp = match config.udp_addr {
        Some(a) => Some(UdpSocket::bind(a).await?),
        None => None,
    };
    let udp_addr = udp.as_ref().map(|s| s.local_addr()).transpose()?;
    info!(%tcp_addr, ?udp_addr, "broker listening");

    let shared = Arc::new(Mutex::new(Shared::default()));
    let stats = Arc::new(BrokerStats::default());
    let cancel = CancellationToken::new();
    let mut tasks = Vec::new();

    tasks.push(tokio::spawn(accept_loop(
        listener,
        shared.clone(),
        stats.clone(),
        cancel.clone(),
        config.queue_limit,
    )));
    if let Some(socket) = udp {
        tasks.push(tokio::spawn(udp_loop(
            socket,
            shared,
            stats.clone(),
            cancel.clone(),
            config.region.clone(),
        )));
    }
    Ok(BrokerHandle {
        tcp_addr,
        udp_addr,
        stats,
        cancel,
        tasks,
    })
}

async fn accept_loop(
    listener: TcpListener,
    shared: Arc<Mutex<Shared>>,
    stats: Arc<BrokerStats>,
    cancel: CancellationToken,
    queue_limit: usize,
) {
    let mut next_conn = 0u64;
    loop {
        let accepted = tokio::select! {
            _ = cancel.cancelled() => break,
            a = listener.accept() => a,
        };
        match accepted {
            Ok((stream, peer)) => {
                next_conn += 1;
                stats.connections.fetch_add(1, Ordering::Relaxed);
                let _ = stream.set_nodelay(true);
                tokio::spawn(serve_connection(
                    stream,
                    peer,
                    next_conn,
                    shared.clone(),
                    stats.clone(),
                    cancel.clone(),
                    queue_limit,
                ));
            }
            Err(e) => warn!(error = %e, "accept failed"),
        }
    }
}

async fn udp_loop(
    socket: UdpSocket,
    shared: Arc<Mutex<Shared>>,
    stats: Arc<BrokerStats>,
    cancel: CancellationToken,
    region: String,
) {
    let mut buf = vec![0u8; 2048];
    loop {
        let (n, from) = tokio::select! {
            _ = cancel.cancelled() => break,
            r = socket.recv_from(&mut buf) => match r {
                Ok(v) => v,
                Err(e) => {
                    debug!(error = %e, "udp recv failed");
                    continue;
                }
            },
        };
        stats.udp_received.fetch_add(1, Ordering::Relaxed);
        let bsm = match decode_frame(&buf[..n]) {
            Ok((_, Message::Bsm(b))) => b,
            Ok(_) => continue,
            Err(_) => {
                stats.udp_corrupt.fetch_add(1, Ordering::Relaxed);
                continue;
            }
        };
        let Ok(topic) = Topic::bsm(&region, bsm.temp_id) else {
            continue;
        };
        let env = Envelope {
            topic,
            qos: Qos::BestEffort,
            retain: false,
            seq: 0,
            body: Bytes::copy_from_slice(&buf[..n]),
        };
        let from = format!("udp:{from}");
        shared.lock().expect("broker state").route(&from, env, &stats);
    }
}

async fn serve_connection(
    stream: TcpStream,
    peer: SocketAddr,
    conn_id: u64,
    shared: Arc<Mutex<Shared>>,
    stats: Arc<BrokerStats>,
    cancel: CancellationToken,
    queue_limit: usize,
) {
    let mut framed = Framed::new(stream, ControlCodec::default());

    let client_id = match framed.next().await {
        Some(Ok(ControlFrame::Connect { client_id })) if !client_id.is_empty() => client_id,
        Some(Ok(other)) => {
            stats.malformed_disconnects.fetch_add(1, Ordering::Relaxed);
            let _ = framed
                .send(ControlFrame::Notice {
                    reason: format!("expected CONNECT, got {}", other.name()),
                })
                .await;
            return;
        }
        Some(Err(e)) => {
            stats.malformed_disconnects.fetch_add(1, Ordering::Relaxed);
            let _ = framed
                .send(ControlFrame::Notice {
                    reason: format!("malformed frame: {e}"),
                })
                .await;
            return;
        }
        None => return,
    };
    debug!(%peer, client_id, "client connected");

    let (tx, mut rx) = mpsc::channel(queue_limit);
    let (kill_tx, mut kill_rx) = oneshot::channel::<String>();
    {
        let mut s = shared.lock().expect("broker state");
        s.evict(&client_id, "session taken over");
        s.clients.insert(
            client_id.clone(),
            ClientSlot {
                conn_id,
                tx,
                kill: Some(kill_tx),
            },
        );
    }

    let (mut sink, mut stream) = framed.split();
    let conn_done = CancellationToken::new();
    let writer_done = conn_done.clone();
    let writer = tokio::spawn(async move {
        let reason = loop {
            let frame = tokio::select! {
                biased;
                reason = &mut kill_rx => break reason.ok(),
                frame = rx.recv() => match frame {
                    Some(f) => f,
                    None => break None,
                },
            };
            // A stalled reader must not keep us from noticing an eviction.
            tokio::select! {
                biased;
                reason = &mut kill_rx => break reason.ok(),
                r = sink.send(frame) => if r.is_err() { break None },
            }
        };
        if let Some(reason) = reason {
            let notice = sink.send(ControlFrame::Notice { reason });
            let _ = tokio::time::timeout(NOTICE_FLUSH_TIMEOUT, notice).await;
        }
        let _ = tokio::time::timeout(NOTICE_FLUSH_TIMEOUT, sink.close()).await;
        writer_done.cancel();
    });

    let mut malformed = None;
    loop {
        let next = tokio::select! {
            _ = cancel.cancelled() => break,
            _ = conn_done.cancelled() => break,
            n = stream.next() => n,
        };
        let frame = match next {
            None => break,
            Some(Err(e)) => {
                malformed = Some(format!("malformed frame: {e}"));
                break;
            }
            Some(Ok(f)) => f,
        };
        let mut s = shared.lock().expect("broker state");
        // Evicted (overflow or takeover) while we were reading.
        if s.clients.get(&client_id).map(|c| c.conn_id) != Some(conn_id) {
            break;
        }
        match frame {
            ControlFrame::Sub { pattern } => {
                let retained = s.router.subscribe(&client_id, pattern);
                for env in retained {
                    s.enqueue(&client_id, ControlFrame::Pub(env), &stats);
                }
            }
            ControlFrame::Unsub { pattern } => {
                s.router.unsubscribe(&client_id, &pattern);
            }
            ControlFrame::Pub(env) => {
                let ack = (env.qos == Qos::AtLeastOnce).then_some(env.seq);
                s.route(&client_id, env, &stats);
                if let Some(seq) = ack {
                    s.enqueue(&client_id, ControlFrame::Ack { seq }, &stats);
                }
            }
            ControlFrame::Ping => {
                s.enqueue(&client_id, ControlFrame::Pong, &stats);
            }
            // Subscribers may acknowledge deliveries; TCP already guarantees them.
            ControlFrame::Ack { .. } | ControlFrame::Pong => {}
            other @ (ControlFrame::Connect { .. } | ControlFrame::Notice { .. }) => {
                malformed = Some(format!("unexpected {}", other.name()));
                break;
            }
        }
    }

    {
        let mut s = shared.lock().expect("broker state");
        if s.clients.get(&client_id).map(|c| c.conn_id) == Some(conn_id) {
            let reason = malformed.clone().unwrap_or_else(|| "closing".into());
            if malformed.is_some() {
                stats.malformed_disconnects.fetch_add(1, Ordering::Relaxed);
                warn!(client_id, reason, "disconnecting offender");
            }
            s.evict(&client_id, &reason);
        }
    }
    let _ = writer.await;
    debug!(client_id, "client disconnected");
}
