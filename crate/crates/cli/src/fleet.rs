//! Live fleet: each vehicle is a task with its own impaired broker
//! connection, ticking in wall-clock time at 10 Hz.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::Result;
use bytes::Bytes;
use serde::Serialize;
use tokio::time::MissedTickBehavior;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use cda_core::agent::Route;
use cda_core::link::LinkProfile;
use cda_core::wire::{decode_frame, encode_frame, Message};
use cda_core::{ControlLawF64, VehicleStateF64};
use cda_transport::{Client, ClientOptions, DatagramChannel, Qos, Topic, TopicPattern};

#[derive(Debug, Clone)]
pub struct FleetOptions {
    pub count: u32,
    pub profile: LinkProfile,
    pub seed: u64,
    pub route: Arc<Route>,
    pub broker: SocketAddr,
    /// Send BSMs as datagrams here instead of publishing over TCP.
    pub udp: Option<SocketAddr>,
    pub region: String,
    pub speed_mps: f64,
    pub spacing_m: f64,
    pub first_id: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct VehicleReport {
    pub vehicle_id: u32,
    pub segment_id: u16,
    pub speed_mps: f64,
    pub odometer_m: f64,
    pub bsm_sent: u64,
    pub advisories_received: u64,
    pub active_advisory_id: Option<u16>,
}

fn advisory_pattern(region: &str, segment_id: u16) -> TopicPattern {
    Topic::advisory(region, segment_id).expect("valid topic").into()
}

async fn vehicle(opts: Arc<FleetOptions>, index: u32, stop: CancellationToken) -> Result<VehicleReport> {
    let id = opts.first_id + index;
    let odo = (opts.spacing_m * f64::from(index)).min(opts.route.length_m());
    let mut state = VehicleStateF64::new(id, opts.route.clone(), odo, opts.speed_mps);
    let law = ControlLawF64::default();
    let link = (opts.profile.loss_rate > 0.0 || opts.profile.latency_max_ms > 0.0)
        .then(|| (opts.profile, opts.seed.wrapping_add(u64::from(index))));
    let mut client = Client::connect(
        opts.broker,
        format!("veh-{id}"),
        ClientOptions {
            link,
            ..ClientOptions::default()
        },
    )
    .await?;
    let udp = match opts.udp {
        Some(to) => Some((DatagramChannel::bind(SocketAddr::from(([0, 0, 0, 0], 0))).await?, to)),
        None => None,
    };
    let mut pattern = advisory_pattern(&opts.region, state.current_segment().segment_id);
    client.subscribe(pattern.clone()).await?;
    let bsm_topic = Topic::bsm(&opts.region, id)?;

    let mut report = VehicleReport {
        vehicle_id: id,
        segment_id: 0,
        speed_mps: 0.0,
        odometer_m: 0.0,
        bsm_sent: 0,
        advisories_received: 0,
        active_advisory_id: None,
    };
    let start = Instant::now();
    let mut ticker = tokio::time::interval(Duration::from_secs_f64(law.tick));
    ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = stop.cancelled() => break,
            _ = ticker.tick() => {}
        }
        let now = start.elapsed().as_secs_f64();
        while let Some(env) = client.try_recv() {
            if let Ok((_, Message::Advisory(p))) = decode_frame(&env.body) {
                report.advisories_received += 1;
                let decision = state.on_advisory(p, now);
                info!(vehicle = id, advisory = p.advisory_id, ?decision, "advisory");
            }
        }
        if let Some(change) = state.tick(&law, now) {
            debug!(vehicle = id, from = change.from, to = change.to, "segment change");
            client.unsubscribe(pattern.clone()).await?;
            pattern = advisory_pattern(&opts.region, change.to);
            client.subscribe(pattern.clone()).await?;
        }
        let frame = encode_frame(&Message::Bsm(state.bsm_snapshot(now)))?;
        match &udp {
            Some((ch, to)) => ch.send_frame(&frame, *to).await?,
            None => {
                client
                    .publish(bsm_topic.clone(), Bytes::from(frame), Qos::BestEffort, false)
                    .await?;
            }
        }
        report.bsm_sent += 1;
    }
    report.segment_id = state.current_segment().segment_id;
    report.speed_mps = state.speed;
    report.odometer_m = state.odometer();
    report.active_advisory_id = state.active_advisory().map(|a| a.payload.advisory_id);
    client.close().await;
    Ok(report)
}

/// Runs the fleet until `stop` fires; returns one report per vehicle.
pub async fn run_fleet(opts: FleetOptions, stop: CancellationToken) -> Result<Vec<VehicleReport>> {
    let opts = Arc::new(opts);
    let tasks: Vec<_> = (0..opts.count)
        .map(|i| tokio::spawn(vehicle(opts.clone(), i, stop.clone())))
        .collect();
    info!(vehicles = opts.count, profile = %opts.profile.name, "fleet running");
    let mut reports = Vec::with_capacity(tasks.len());
    for t in tasks {
        match t.await? {
            Ok(r) => reports.push(r),
            Err(e) => {
                warn!(error = %e, "vehicle stopped");
                stop.cancel();
                return Err(e);
            }
        }
    }
    Ok(reports)
}
