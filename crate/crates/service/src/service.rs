//! The running service: shared state, broker tasks and lifecycle.

use std::collections::{HashSet, VecDeque};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use bytes::Bytes;
use serde::Serialize;
use thiserror::Error;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use cda_core::wire::{decode_frame, Message};
use cda_transport::{Client, ClientOptions, Qos, Topic, TopicPattern};

use crate::book::{AdvisoryBook, AdvisoryRecord, AdvisoryRequest, AdvisoryStatus, BookError};
use crate::events::{EventHub, EventKind};
use crate::feed::{ingest_feed, FeedError, FeedSnapshot};
use crate::fleet::{FleetTracker, FleetView, RouteMap};
use crate::wal::{PendingFrame, Wal, WalEntry, WalError};

pub const FAULT_ENV: &str = "CDA_FAULT_INJECT";
/// Abort right after an advisory is logged, before it is published.
pub const CRASH_AFTER_PERSIST: &str = "crash-after-persist";
pub const DEFAULT_HTTP_PORT: u16 = 8080;

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or_default()
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub http_addr: SocketAddr,
    /// `None` runs without a broker; advisories stay pending.
    pub broker_addr: Option<SocketAddr>,
    pub region: String,
    pub log_path: PathBuf,
    pub feed_source: Option<String>,
    pub feed_refresh: Option<Duration>,
    pub routes: RouteMap,
    pub reconnect_delay: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            http_addr: SocketAddr::from(([127, 0, 0, 1], DEFAULT_HTTP_PORT)),
            broker_addr: Some(SocketAddr::from((
                [127, 0, 0, 1],
                cda_transport::broker::DEFAULT_TCP_PORT,
            ))),
            region: "fl".into(),
            log_path: PathBuf::from("advisories.log"),
            feed_source: None,
            feed_refresh: None,
            routes: RouteMap::default(),
            reconnect_delay: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Book(#[from] BookError),
    #[error(transparent)]
    Wal(#[from] WalError),
    #[error(transparent)]
    Feed(#[from] FeedError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

struct State {
    book: AdvisoryBook,
    wal: Wal,
    fleet: FleetTracker,
    feed: FeedSnapshot,
}

#[derive(Debug, Clone, Serialize)]
pub struct Snapshot {
    pub advisories: Vec<AdvisoryRecord>,
    pub fleet: FleetView,
    pub traffic: FeedSnapshot,
}

#[derive(Debug, Clone, Serialize)]
struct PublishedBody {
    advisory_id: u16,
    frame: String,
}

type Opened = (Arc<Service>, Vec<PendingFrame>, mpsc::UnboundedReceiver<PendingFrame>);

pub struct Service {
    config: ServiceConfig,
    state: Mutex<State>,
    hub: EventHub,
    publish_tx: mpsc::UnboundedSender<PendingFrame>,
    crash_after_persist: bool,
    shutdown: CancellationToken,
}

impl Service {
    /// Replays the log. Returns the service, frames still owed to the broker
    /// and the queue the publisher drains.
    fn open(
        config: ServiceConfig,
        shutdown: CancellationToken,
    ) -> Result<Opened, ServiceError> {
        let (wal, replay) = Wal::open(&config.log_path)?;
        info!(
            entries = replay.entries,
            pending = replay.pending.len(),
            "advisory log replayed"
        );
        if replay.truncated > 0 {
            warn!(bytes = replay.truncated, "discarded torn log tail");
        }
        let (publish_tx, publish_rx) = mpsc::unbounded_channel();
        let svc = Arc::new(Self {
            state: Mutex::new(State {
                book: replay.book,
                wal,
                fleet: FleetTracker::new(config.routes.clone()),
                feed: FeedSnapshot::default(),
            }),
            config,
            hub: EventHub::default(),
            publish_tx,
            crash_after_persist: std::env::var(FAULT_ENV).is_ok_and(|v| v == CRASH_AFTER_PERSIST),
            shutdown,
        });
        Ok((svc, replay.pending, publish_rx))
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().expect("service state")
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn hub(&self) -> &EventHub {
        &self.hub
    }

    pub fn shutdown_token(&self) -> &CancellationToken {
        &self.shutdown
    }

    pub fn create_advisory(&self, req: &AdvisoryRequest) -> Result<AdvisoryRecord, ServiceError> {
        let mut st = self.lock();
        let record = st.book.prepare(req, unix_now())?;
        let frame = record.frame();
        st.wal.append(&WalEntry::Create {
            record: record.clone(),
            frame: frame.clone(),
        })?;
        if self.crash_after_persist {
            warn!(advisory_id = record.advisory_id, "fault injection: aborting after persist");
            std::process::abort();
        }
        st.book.insert(record.clone());
        drop(st);
        self.hub.emit(EventKind::AdvisoryCreated, &record);
        let _ = self.publish_tx.send(PendingFrame {
            advisory_id: record.advisory_id,
            segment_id: record.segment_id,
            frame,
        });
        Ok(record)
    }

    pub fn cancel_advisory(&self, id: u16) -> Result<AdvisoryRecord, ServiceError> {
        self.withdraw(id, AdvisoryStatus::Cancelled, unix_now())
    }

    fn withdraw(&self, id: u16, status: AdvisoryStatus, now: f64) -> Result<AdvisoryRecord, ServiceError> {
        let mut st = self.lock();
        let frame = st.book.check_cancel(id)?.cancel_frame();
        let entry = match status {
            AdvisoryStatus::Expired => WalEntry::Expire {
                advisory_id: id,
                at: now,
                frame: frame.clone(),
            },
            _ => WalEntry::Cancel {
                advisory_id: id,
                at: now,
                frame: frame.clone(),
            },
        };
        st.wal.append(&entry)?;
        let record = st.book.set_status(id, status).expect("checked above").clone();
        drop(st);
        let kind = if status == AdvisoryStatus::Expired {
            EventKind::AdvisoryExpired
        } else {
            EventKind::AdvisoryCancelled
        };
        self.hub.emit(kind, &record);
        let _ = self.publish_tx.send(PendingFrame {
            advisory_id: id,
            segment_id: record.segment_id,
            frame,
        });
        Ok(record)
    }

    pub fn expire_due(&self, now: f64) -> Vec<AdvisoryRecord> {
        let due = self.lock().book.due_to_expire(now);
        due.into_iter()
            .filter_map(|id| match self.withdraw(id, AdvisoryStatus::Expired, now) {
                Ok(r) => Some(r),
                Err(e) => {
                    warn!(id, error = %e, "expiry failed");
                    None
                }
            })
            .collect()
    }

    pub fn advisories(&self) -> Vec<AdvisoryRecord> {
        self.lock().book.records().to_vec()
    }

    pub fn fleet(&self) -> FleetView {
        let st = self.lock();
        st.fleet.view(unix_now(), &st.book)
    }

    pub fn traffic(&self) -> FeedSnapshot {
        self.lock().feed.clone()
    }

    pub fn snapshot(&self) -> Snapshot {
        let st = self.lock();
        Snapshot {
            advisories: st.book.records().to_vec(),
            fleet: st.fleet.view(unix_now(), &st.book),
            traffic: st.feed.clone(),
        }
    }

    pub fn replace_feed(&self, snapshot: FeedSnapshot) {
        for d in &snapshot.diagnostics {
            warn!(index = d.index, event_id = ?d.event_id, reason = d.reason, "feed entry skipped");
        }
        self.lock().feed = snapshot.clone();
        self.hub.emit(EventKind::Traffic, &snapshot);
    }

    pub fn observe_bsm_frame(&self, frame: &[u8]) {
        match decode_frame(frame) {
            Ok((_, Message::Bsm(bsm))) => self.lock().fleet.observe(bsm, unix_now()),
            Ok(_) => {}
            Err(e) => debug!(error = %e, "undecodable bsm"),
        }
    }

    fn emit_fleet_deltas(&self) {
        let deltas = {
            let mut st = self.lock();
            let State { fleet, book, .. } = &mut *st;
            fleet.due_deltas(unix_now(), book)
        };
        for v in deltas {
            self.hub.emit(EventKind::Fleet, &v);
        }
    }

    fn mark_published(&self, f: &PendingFrame) {
        let entry = WalEntry::Published {
            advisory_id: f.advisory_id,
            frame: f.frame.clone(),
        };
        if let Err(e) = self.lock().wal.append(&entry) {
            warn!(error = %e, "could not log publish");
        }
        self.hub.emit(
            EventKind::AdvisoryPublished,
            PublishedBody {
                advisory_id: f.advisory_id,
                frame: hex::encode(&f.frame),
            },
        );
    }

    fn active_frames(&self) -> Vec<PendingFrame> {
        let st = self.lock();
        let mut active: Vec<&AdvisoryRecord> = st.book.active().collect();
        active.sort_by_key(|r| r.advisory_id);
        active
            .into_iter()
            .map(|r| PendingFrame {
                advisory_id: r.advisory_id,
                segment_id: r.segment_id,
                frame: r.frame(),
            })
            .collect()
    }
}

/// Sleeps unless cancelled first; `false` on cancel.
async fn pause(cancel: &CancellationToken, d: Duration) -> bool {
    tokio::select! {
        _ = cancel.cancelled() => false,
        _ = tokio::time::sleep(d) => true,
    }
}

async fn publisher(
    svc: Arc<Service>,
    addr: SocketAddr,
    mut rx: mpsc::UnboundedReceiver<PendingFrame>,
    mut queue: VecDeque<PendingFrame>,
) {
    let cancel = svc.shutdown.clone();
    let client_id = format!("svc-{}-pub", svc.config.region);
    loop {
        let client = tokio::select! {
            _ = cancel.cancelled() => return,
            c = Client::connect(addr, client_id.clone(), ClientOptions::default()) => c,
        };
        let client = match client {
            Ok(c) => c,
            Err(e) => {
                debug!(error = %e, "broker unreachable");
                if !pause(&cancel, svc.config.reconnect_delay).await {
                    return;
                }
                continue;
            }
        };
        info!(%addr, pending = queue.len(), "publisher connected");
        // A frame created while connecting can arrive both from the channel and
        // from the active set; send each frame once per connection.
        let mut sent_frames: HashSet<Vec<u8>> = HashSet::new();
        while let Ok(f) = rx.try_recv() {
            if !queue.contains(&f) {
                queue.push_back(f);
            }
        }
        // The broker keeps no state across restarts; restore retained advisories.
        for f in svc.active_frames() {
            if !queue.contains(&f) {
                queue.push_back(f);
            }
        }
        loop {
            while let Ok(f) = rx.try_recv() {
                if !queue.contains(&f) {
                    queue.push_back(f);
                }
            }
            if let Some(f) = queue.front().cloned() {
                if sent_frames.contains(&f.frame) {
                    queue.pop_front();
                    continue;
                }
                let topic = match Topic::advisory(&svc.config.region, f.segment_id) {
                    Ok(t) => t,
                    Err(e) => {
                        warn!(error = %e, "bad region, dropping frame");
                        queue.pop_front();
                        continue;
                    }
                };
                let sent = tokio::select! {
                    _ = cancel.cancelled() => return,
                    r = client.publish(topic, Bytes::from(f.frame.clone()), Qos::AtLeastOnce, true) => r,
                };
                match sent {
                    Ok(_) => {
                        queue.pop_front();
                        svc.mark_published(&f);
                        sent_frames.insert(f.frame.clone());
                    }
                    Err(e) => {
                        warn!(advisory_id = f.advisory_id, error = %e, "publish failed, reconnecting");
                        break;
                    }
                }
            } else {
                tokio::select! {
                    _ = cancel.cancelled() => return,
                    f = rx.recv() => match f {
                        Some(f) => queue.push_back(f),
                        None => return,
                    },
                    _ = tokio::time::sleep(Duration::from_secs(2)) => {
                        if client.ping(Duration::from_secs(1)).await.is_err() {
                            warn!("broker stopped answering, reconnecting");
                            break;
                        }
                    }
                }
            }
        }
        client.close().await;
        if !pause(&cancel, svc.config.reconnect_delay).await {
            return;
        }
    }
}

async fn fleet_listener(svc: Arc<Service>, addr: SocketAddr) {
    let cancel = svc.shutdown.clone();
    let client_id = format!("svc-{}-fleet", svc.config.region);
    let pattern = match TopicPattern::new(format!("cda/{}/veh/+/bsm", svc.config.region)) {
        Ok(p) => p,
        Err(e) => {
            warn!(error = %e, "bad region, fleet view disabled");
            return;
        }
    };
    loop {
        let connected = tokio::select! {
            _ = cancel.cancelled() => return,
            c = Client::connect(addr, client_id.clone(), ClientOptions::default()) => c,
        };
        if let Ok(mut client) = connected {
            if client.subscribe(pattern.clone()).await.is_ok() {
                loop {
                    let env = tokio::select! {
                        _ = cancel.cancelled() => return,
                        e = client.recv() => e,
                    };
                    match env {
                        Some(env) => svc.observe_bsm_frame(&env.body),
                        None => break,
                    }
                }
            }
        }
        if !pause(&cancel, svc.config.reconnect_delay).await {
            return;
        }
    }
}

async fn housekeeping(svc: Arc<Service>) {
    let cancel = svc.shutdown.clone();
    let mut tick = tokio::time::interval(Duration::from_millis(100));
    let mut n: u64 = 0;
    loop {
        tokio::select! {
            _ = cancel.cancelled() => return,
            _ = tick.tick() => {}
        }
        svc.emit_fleet_deltas();
        n += 1;
        if n.is_multiple_of(10) {
            svc.expire_due(unix_now());
        }
    }
}

async fn feed_poller(svc: Arc<Service>, source: String, refresh: Option<Duration>) {
    let cancel = svc.shutdown.clone();
    loop {
        match ingest_feed(&source).await {
            Ok(s) => svc.replace_feed(s),
            Err(e) => warn!(source, error = %e, "feed ingestion failed"),
        }
        let Some(every) = refresh else { return };
        if !pause(&cancel, every).await {
            return;
        }
    }
}

pub struct ServiceHandle {
    service: Arc<Service>,
    http_addr: SocketAddr,
    tasks: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn http_addr(&self) -> SocketAddr {
        self.http_addr
    }

    pub fn service(&self) -> &Arc<Service> {
        &self.service
    }

    pub async fn wait(&self) {
        self.service.shutdown.cancelled().await
    }

    pub async fn shutdown(self) {
        self.service.shutdown.cancel();
        for t in self.tasks {
            let _ = t.await;
        }
    }
}

/// Replays the log, binds HTTP and starts the broker tasks.
pub async fn serve(config: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    let listener = tokio::net::TcpListener::bind(config.http_addr).await?;
    let http_addr = listener.local_addr()?;
    let (svc, pending, rx) = Service::open(config, CancellationToken::new())?;
    info!(%http_addr, region = svc.config.region, "advisory service listening");

    let mut tasks = Vec::new();
    let app = crate::http::router(svc.clone());
    let stop = svc.shutdown.clone();
    tasks.push(tokio::spawn(async move {
        let r = axum::serve(listener, app)
            .with_graceful_shutdown(stop.cancelled_owned())
            .await;
        if let Err(e) = r {
            warn!(error = %e, "http server failed");
        }
    }));
    match svc.config.broker_addr {
        Some(addr) => {
            tasks.push(tokio::spawn(publisher(svc.clone(), addr, rx, pending.into())));
            tasks.push(tokio::spawn(fleet_listener(svc.clone(), addr)));
        }
        None => {
            if !pending.is_empty() {
                warn!(count = pending.len(), "no broker configured; advisories stay pending");
            }
            // Keep the queue alive so creates do not fail.
            let cancel = svc.shutdown.clone();
            tasks.push(tokio::spawn(async move {
                let _rx = rx;
                cancel.cancelled().await;
            }));
        }
    }
    tasks.push(tokio::spawn(housekeeping(svc.clone())));
    if let Some(src) = svc.config.feed_source.clone() {
        tasks.push(tokio::spawn(feed_poller(svc.clone(), src, svc.config.feed_refresh)));
    }
    Ok(ServiceHandle {
        service: svc,
        http_addr,
        tasks,
    })
}
