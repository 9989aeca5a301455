//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Child, Command, ExitCode, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

use cda_core::agent::{GeoPoint, NoticeSeverity, Route, Segment, VehicleState};
use cda_core::link::{ImpairedLink, LinkProfile, ProfileName};
use cda_core::meta_action::{CommandGate, MetaActionCommand, SafetyEnvelope};
use cda_core::wire::{
    decode_frame, encode_frame, mps_from_speed_units, AdvisoryCause, AdvisoryPayload, BsmPayload, Currency, Message,
    TollPayload, FRAME_OVERHEAD,
};
use cda_genai::stats::to_csv_string;
use cda_genai::{aggregate_stats, LatencyReport, Sample};
use cda_service::service::{CRASH_AFTER_PERSIST, FAULT_ENV};
use cda_sim::{run_scenario, Scenario};
use cda_transport::broker::BrokerStats;
use cda_transport::{broker_serve, BrokerConfig, Client, ClientOptions, Qos, Topic};

const BIN: &str = env!("CARGO_BIN_EXE_fleet-cli");

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("runtime")
}

/// Bitwise CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection.
fn crc16_reference(data: &[u8]) -> u16 {
    let mut crc: u16 = 0xffff;
    for &b in data {
        crc ^= u16::from(b) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
        }
    }
    crc
}

fn random_message(rng: &mut ChaCha8Rng, kind: usize) -> Message {
    match kind {
        0 => BsmPayload {
            msg_cnt: rng.random_range(0..=127),
            temp_id: rng.random(),
            sec_mark: if rng.random_bool(0.1) { 65_535 } else { rng.random_range(0..=60_999) },
            lat: rng.random_range(-900_000_000..=900_000_001),
            lon: rng.random_range(-1_799_999_999..=1_800_000_001),
            elev: rng.random_range(-4096..=61_439),
            speed: rng.random_range(0..=8191),
            heading: rng.random_range(0..=28_800),
        }
        .into(),
        1 => AdvisoryPayload {
            advisory_id: rng.random(),
            segment_id: rng.random(),
            advisory_speed: rng.random_range(0..=8191),
            start_minute_of_year: rng.random_range(0..=131_071),
            duration_minutes: rng.random(),
            cause: [
                AdvisoryCause::None,
                AdvisoryCause::Congestion,
                AdvisoryCause::Incident,
                AdvisoryCause::Weather,
                AdvisoryCause::Workzone,
            ][rng.random_range(0..5)],
        }
        .into(),
        _ => TollPayload {
            toll_point_id: rng.random(),
            amount_cents: rng.random(),
            currency: Currency::Usd,
            lane_mask: rng.random(),
        }
        .into(),
    }
}

fn codec_goldens_and_round_trip() -> Result<String> {
    let start = Instant::now();
    let golden = AdvisoryPayload {
        advisory_id: 1,
        segment_id: 2,
        advisory_speed: 1000,
        start_minute_of_year: 0,
        duration_minutes: 30,
        cause: AdvisoryCause::Congestion,
    };
    let frame = encode_frame(&golden.into())?;
    let payload = [0x00, 0x01, 0x00, 0x02, 0x1f, 0x40, 0x00, 0x00, 0x00, 0x78, 0x04];
    let mut expected = vec![0x1f, 0x00, 0x0b];
    expected.extend_from_slice(&payload);
    expected.extend_from_slice(&crc16_reference(&expected).to_be_bytes());
    ensure!(frame == expected, "golden frame {} != {}", hex::encode(&frame), hex::encode(&expected));

    let mut rng = ChaCha8Rng::seed_from_u64(0xc0dec);
    let mut mismatches = 0;
    for kind in 0..3 {
        for _ in 0..10_000 {
            let msg = random_message(&mut rng, kind);
            let bytes = encode_frame(&msg)?;
            let len = bytes.len();
            let crc_ok = u16::from_be_bytes([bytes[len - 2], bytes[len - 1]]) == crc16_reference(&bytes[..len - 2]);
            let ok = len == msg.message_type().payload_len() + FRAME_OVERHEAD
                && crc_ok
                && matches!(decode_frame(&bytes), Ok((_, back)) if back == msg);
            if !ok {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(mismatches == 0, "{mismatches} round-trip mismatches");
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("golden exact, 30000 round trips, {:.2} s", elapsed.as_secs_f64()))
}

fn link_envelopes() -> Result<String> {
    let mut parts = Vec::new();
    for (name, lo, hi) in [(ProfileName::Wifi6, 1.0, 10.0), (ProfileName::Wifi4, 5.0, 50.0), (ProfileName::Lte, 20.0, 100.0)] {
        let profile = LinkProfile::builtin(name);
        ensure!(
            profile.latency_min_ms == lo && profile.latency_max_ms == hi,
            "{name} profile [{}, {}]",
            profile.latency_min_ms,
            profile.latency_max_ms
        );
        let mut link = ImpairedLink::<()>::new(profile, 7)?;
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..10_000 {
            let d = link.sample_delay();
            ensure!((lo..=hi).contains(&d), "{name} delay {d} ms outside [{lo}, {hi}]");
            min = min.min(d);
            max = max.max(d);
        }
        parts.push(format!("{name} [{min:.2}, {max:.2}]"));
    }
    Ok(parts.join(", "))
}

fn advisory_scenario() -> Result<String> {
    let scenario = Scenario::bundled("advisory_lte_20veh").context("bundled scenario")?;
    ensure!(scenario.seed == 42 && scenario.vehicles.count == 20, "scenario shape");
    let profile = scenario.profile()?;
    ensure!(profile.name == ProfileName::Lte && profile.loss_rate == 0.02, "profile {profile:?}");

    let t0 = Instant::now();
    let a = run_scenario(&scenario)?;
    let first_wall = t0.elapsed();
    let t1 = Instant::now();
    let b = run_scenario(&scenario)?;
    let second_wall = t1.elapsed();
    ensure!(first_wall < Duration::from_secs(30), "run took {first_wall:?}");
    ensure!(second_wall < Duration::from_secs(30), "second run took {second_wall:?}");
    ensure!(a.metrics_csv() == b.metrics_csv(), "metrics CSVs differ between runs");

    let [adv] = a.advisories.as_slice() else { bail!("expected one advisory, got {}", a.advisories.len()) };
    ensure!((adv.published_at_s - 5.0).abs() < 1e-9 && adv.speed_mps == 20.0, "advisory {adv:?}");
    ensure!(adv.targets == 20 && adv.delivered == 20, "delivered {}/{}", adv.delivered, adv.targets);
    let worst = a.deliveries.iter().map(|d| d.delivery_ms).fold(0.0, f64::max);
    ensure!(a.deliveries.len() == 20, "{} deliveries", a.deliveries.len());
    ensure!(worst <= 150.0, "delivery latency {worst} ms");

    let deadline = adv.published_at_s + 20.0;
    let mut compliant = 0;
    for v in 1..=20u32 {
        let at_deadline = a
            .traces
            .iter()
            .filter(|s| s.vehicle_id == v && s.t_s <= deadline + 1e-9)
            .max_by(|x, y| x.t_s.total_cmp(&y.t_s))
            .with_context(|| format!("no trace for vehicle {v}"))?;
        if (at_deadline.speed_mps - 20.0).abs() <= 0.5 {
            compliant += 1;
        }
    }
    ensure!(compliant * 100 >= 95 * 20, "{compliant}/20 within 0.5 m/s at +20 s");
    Ok(format!(
        "20/20 delivered, max {worst:.1} ms, {compliant}/20 compliant, CSVs identical, {:.2} s",
        first_wall.as_secs_f64()
    ))
}

fn fuzz_vehicle() -> Result<VehicleState<f64>> {
    let route = Route::new(vec![Segment {
        segment_id: 12,
        start: GeoPoint::new(28.0, -82.0),
        end: GeoPoint::new(28.0, -81.9),
        length_m: 10_000.0,
    }])?;
    Ok(VehicleState::new(1, Arc::new(route), 0.0, 25.0))
}

fn random_text(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| char::from(rng.random_range(0x20u8..0x7f))).collect()
}

fn random_number(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..4) {
        0 => rng.random_range(-1e6..1e6),
        1 => rng.random_range(-5.0..60.0),
        2 => [f64::MAX, -0.0, 1e-300, 38.0000001, 0.7999999][rng.random_range(0..5)],
        _ => f64::from(rng.random_range(-100i32..70_000)),
    }
}

fn near_valid_block(rng: &mut ChaCha8Rng) -> String {
    let cmd = match rng.random_range(0..5) {
        0 => MetaActionCommand::SetCruiseSpeed { speed_mps: random_number(rng) },
        1 => MetaActionCommand::SetFollowGap { gap_s: random_number(rng) },
        2 => MetaActionCommand::ApplyAdvisorySpeed {
            segment_id: rng.random(),
            speed_mps: random_number(rng),
            duration_s: random_number(rng),
        },
        3 => MetaActionCommand::CancelAdvisory { segment_id: rng.random() },
        _ => MetaActionCommand::DriverNotice {
            text: random_text(rng, 260),
            severity: if rng.random() { NoticeSeverity::Info } else { NoticeSeverity::Warn },
        },
    };
    let mut text = format!("{}\n{}\n{}", random_text(rng, 30), cmd.to_block(), random_text(rng, 30));
    for _ in 0..rng.random_range(0..4) {
        if text.is_empty() {
            break;
        }
        let at = text.char_indices().nth(rng.random_range(0..text.chars().count())).map_or(0, |(i, _)| i);
        match rng.random_range(0..5) {
            0 => text.truncate(at),
            1 => text.insert(at, char::from(rng.random_range(0x20u8..0x7f))),
            2 => {
                text.remove(at);
            }
            3 => text = text.replacen("speed_mps", ["gap_s", "speed", "text", "speed_mps"][rng.random_range(0..4)], 1),
            _ => text = format!("{text}\n{text}"),
        }
    }
    text
}

fn metaaction_closure() -> Result<String> {
    let env = SafetyEnvelope::default();
    let mut gate = CommandGate::new(env);
    let mut v = fuzz_vehicle()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5afe);
    let (mut applied, mut rejected, mut panics, mut violations) = (0, 0, 0, 0);
    let mut now = 0.0;
    for i in 0..10_000 {
        now += 1.1;
        let text = if i % 2 == 0 {
            let n = rng.random_range(0..300);
            let bytes: Vec<u8> = (0..n).map(|_| rng.random()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        } else {
            near_valid_block(&mut rng)
        };
        match catch_unwind(AssertUnwindSafe(|| gate.submit_text(&text, &mut v, now))) {
            Ok(Ok(_)) => applied += 1,
            Ok(Err(_)) => rejected += 1,
            Err(_) => panics += 1,
        }
        let mut ok = (env.speed_min..=env.speed_max).contains(&v.driver_set_speed);
        ok &= v.follow_gap_s.is_none_or(|g| (env.gap_min..=env.gap_max).contains(&g));
        ok &= v
            .active_advisory()
            .and_then(|a| mps_from_speed_units(a.payload.advisory_speed))
            .is_none_or(|s| (env.speed_min..=env.speed_max).contains(&s));
        ok &= (env.speed_min..=env.speed_max).contains(&v.effective_target(now));
        ok &= v.notices.iter().all(|n| n.text.chars().count() <= env.notice_max_len);
        if !ok {
            violations += 1;
        }
    }
    ensure!(panics == 0, "{panics} panics");
    ensure!(violations == 0, "{violations} envelope violations");
    ensure!(applied + rejected == 10_000 && gate.log().len() == 10_000, "outcomes {applied}+{rejected}");
    ensure!(applied > 0, "no input was applied");
    Ok(format!("{applied} applied, {rejected} rejected, 0 violations"))
}

fn stats_oracle(samples: &[Sample<f64>]) -> Option<(f64, f64, u64)> {
    let mut lat = Vec::new();
    let mut tokens = 0usize;
    for s in samples {
        if let Sample::Success { latency_s, token_count } = *s {
            lat.push(latency_s);
            tokens += token_count;
        }
    }
    if lat.is_empty() {
        return None;
    }
    let n = lat.len();
    let mean = lat.iter().sum::<f64>() / n as f64;
    lat.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { lat[n / 2] } else { (lat[n / 2 - 1] + lat[n / 2]) / 2.0 };
    Some((mean, median, (tokens as f64 / n as f64).round() as u64))
}

fn stats_and_table() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x57a7);
    for set in 0..1000 {
        let n = rng.random_range(1..100);
        let samples: Vec<Sample<f64>> = (0..n)
            .map(|_| match rng.random_range(0..12) {
                0 => Sample::Failure { latency_s: rng.random_range(0.0..30.0) },
                1..=3 => Sample::Success {
                    latency_s: f64::from(rng.random_range(0u32..5)) * 0.5,
                    token_count: rng.random_range(0..4),
                },
                _ => Sample::Success {
                    latency_s: rng.random_range(0.0..200.0),
                    token_count: rng.random_range(0..600),
                },
            })
            .collect();
        match (aggregate_stats("m", "r", &samples), stats_oracle(&samples)) {
            (Err(_), None) => {}
            (Ok(r), Some((mean, median, avg))) => {
                ensure!(
                    r.mean_s == mean && r.median_s == median && r.avg_tokens == avg,
                    "set {set}: got ({}, {}, {}) want ({mean}, {median}, {avg})",
                    r.mean_s,
                    r.median_s,
                    r.avg_tokens
                );
            }
            (got, want) => bail!("set {set}: got {got:?} want {want:?}"),
        }
    }
    let fixture = LatencyReport {
        model: "GPT-4o-mini".to_owned(),
        runner: "Cloud via LTE".to_owned(),
        mean_s: 1.20,
        median_s: 1.05,
        avg_tokens: 42,
        n_samples: 3,
        n_failed: 0,
    };
    let csv = to_csv_string(&[fixture]);
    ensure!(
        csv == "model,runner,mean_s,median_s,avg_tokens\nGPT-4o-mini,Cloud via LTE,1.20,1.05,42\n",
        "csv {csv:?}"
    );
    Ok("1000 sets exact, table row reproduced".to_owned())
}

const PUBLISHERS: u32 = 4;
const PER_PUBLISHER_HZ: u32 = 250;
const LOAD_SECONDS: u32 = 10;

async fn inject_malformed(addr: std::net::SocketAddr, stop: Arc<AtomicBool>, sent: Arc<AtomicU64>) {
    let garbage: [&[u8]; 4] = [&[0, 0, 0, 1, 0x7f], &[0, 0, 0, 0], &[0, 0, 0, 4, 4, 1, 0, 0], &[0xff, 0xff, 0xff, 0xff, 1]];
    let mut i = 0;
    while !stop.load(Ordering::Relaxed) {
        if let Ok(mut s) = TcpStream::connect(addr).await {
            if s.write_all(garbage[i % garbage.len()]).await.is_ok() {
                sent.fetch_add(1, Ordering::Relaxed);
                let mut rest = Vec::new();
                let _ = tokio::time::timeout(Duration::from_secs(2), s.read_to_end(&mut rest)).await;
            }
        }
        i += 1;
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

async fn broker_load() -> Result<String> {
    let broker = broker_serve(BrokerConfig::ephemeral()).await?;
    let addr = broker.tcp_addr();
    let mut sub = Client::connect(addr, "monitor", ClientOptions::default()).await?;
    sub.subscribe("cda/#".parse()?).await?;
    sub.ping(Duration::from_secs(5)).await?;

    let stop = Arc::new(AtomicBool::new(false));
    let injected = Arc::new(AtomicU64::new(0));
    let injector = tokio::spawn(inject_malformed(addr, stop.clone(), injected.clone()));

    let total = u64::from(PUBLISHERS * PER_PUBLISHER_HZ * LOAD_SECONDS);
    let collector = tokio::spawn(async move {
        let mut next: HashMap<Topic, (u32, u64)> = HashMap::new();
        let (mut received, mut reordered) = (0u64, 0u64);
        while received < total {
            let Some(env) = sub.recv_timeout(Duration::from_secs(5)).await else { break };
            let i = u32::from_be_bytes(env.body[4..8].try_into().expect("8-byte body"));
            let expect = next.entry(env.topic.clone()).or_insert((0, 0));
            if i != expect.0 || (expect.0 > 0 && env.seq <= expect.1) {
                reordered += 1;
            }
            *expect = (i + 1, env.seq);
            received += 1;
        }
        (received, reordered, sub)
    });

    let start = Instant::now();
    let mut pubs = Vec::new();
    for p in 0..PUBLISHERS {
        let client = Client::connect(addr, format!("pub-{p}"), ClientOptions::default()).await?;
        let topic = Topic::advisory("fl", 100 + p as u16)?;
        pubs.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_secs(1) / PER_PUBLISHER_HZ);
            for i in 0..PER_PUBLISHER_HZ * LOAD_SECONDS {
                tick.tick().await;
                let mut body = p.to_be_bytes().to_vec();
                body.extend_from_slice(&i.to_be_bytes());
                client.publish(topic.clone(), Bytes::from(body), Qos::AtLeastOnce, false).await?;
            }
            client.close().await;
            anyhow::Ok(())
        }));
    }
    for p in pubs {
        p.await??;
    }
    let publish_time = start.elapsed();
    let (received, reordered, sub) = collector.await?;
    stop.store(true, Ordering::Relaxed);
    injector.await?;

    let malformed = BrokerStats::get(&broker.stats().malformed_disconnects);
    let after = Client::connect(addr, "after", ClientOptions::default()).await?;
    after.ping(Duration::from_secs(5)).await.context("broker unresponsive after load")?;
    after.close().await;
    sub.close().await;
    broker.shutdown().await;

    let rate = total as f64 / publish_time.as_secs_f64();
    ensure!(received == total, "received {received}/{total}");
    ensure!(reordered == 0, "{reordered} out-of-order deliveries");
    ensure!(rate >= 990.0, "sustained {rate:.0} msg/s");
    let injected = injected.load(Ordering::Relaxed);
    ensure!(injected > 0 && malformed >= injected, "malformed {malformed} of {injected} injected");
    Ok(format!(
        "{total} msgs at {rate:.0} msg/s, 0 reordered, {injected} malformed connections rejected"
    ))
}

struct Proc(Child);

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_service(broker: std::net::SocketAddr, log: &std::path::Path, fault: bool) -> Result<(Proc, String)> {
    let mut cmd = Command::new(BIN);
    cmd.args(["serve", "--http", "127.0.0.1:0", "--broker", &broker.to_string(), "--log"])
        .arg(log)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .env_remove(FAULT_ENV);
    if fault {
        cmd.env(FAULT_ENV, CRASH_AFTER_PERSIST);
    }
    let mut child = cmd.spawn()?;
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().context("stdout")?).read_line(&mut line)?;
    let url = line.split_whitespace().last().context("no address line")?.to_owned();
    Ok((Proc(child), url))
}

async fn durability() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let log = dir.path().join("advisories.log");
    let broker = broker_serve(BrokerConfig::ephemeral()).await?;
    let mut sub = Client::connect(broker.tcp_addr(), "watcher", ClientOptions::default()).await?;
    sub.subscribe("cda/fl/adv/+".parse()?).await?;
    sub.ping(Duration::from_secs(5)).await?;

    let (mut crashing, url) = spawn_service(broker.tcp_addr(), &log, true)?;
    let body = serde_json::json!({"segment_id": 12, "speed_mps": 20.0, "duration_s": 600.0, "cause": "incident"});
    let resp = reqwest::Client::new().post(format!("{url}/advisories")).json(&body).send().await;
    ensure!(resp.is_err(), "service answered despite the fault: {:?}", resp.map(|r| r.status()));
    let status = tokio::task::spawn_blocking(move || crashing.0.wait()).await??;
    ensure!(!status.success(), "service exited cleanly");
    ensure!(sub.recv_timeout(Duration::from_millis(300)).await.is_none(), "published before crash");

    let wal = std::fs::read_to_string(&log)?;
    let entry: serde_json::Value = serde_json::from_str(wal.lines().last().context("empty log")?)?;
    ensure!(entry["op"] == "create", "log entry {entry}");
    let logged = hex::decode(entry["frame"].as_str().context("frame field")?)?;
    let expected = encode_frame(
        &AdvisoryPayload {
            advisory_id: 0,
            segment_id: 12,
            advisory_speed: 1000,
            start_minute_of_year: AdvisoryPayload::START_IMMEDIATE,
            duration_minutes: 10,
            cause: AdvisoryCause::Incident,
        }
        .into(),
    )?;
    ensure!(logged == expected, "logged {} expected {}", hex::encode(&logged), hex::encode(&expected));

    let (_restarted, url) = spawn_service(broker.tcp_addr(), &log, false)?;
    let env = sub.recv_timeout(Duration::from_secs(10)).await.context("no republish after restart")?;
    ensure!(env.topic == Topic::advisory("fl", 12)?, "topic {}", env.topic);
    ensure!(env.body.as_ref() == expected.as_slice(), "republished {}", hex::encode(&env.body));
    let list: serde_json::Value = reqwest::get(format!("{url}/advisories")).await?.json().await?;
    ensure!(list[0]["status"] == "active", "advisories {list}");
    sub.close().await;
    broker.shutdown().await;
    Ok(format!("republished {} after crash", hex::encode_upper(&expected)))
}

type Criterion = (&'static str, Box<dyn Fn() -> Result<String>>);

fn main() -> ExitCode {
    let criteria: Vec<Criterion> = vec![
        ("codec goldens and round trip", Box::new(codec_goldens_and_round_trip)),
        ("link delay envelopes", Box::new(link_envelopes)),
        ("end-to-end advisory scenario", Box::new(advisory_scenario)),
        ("metaaction safety closure", Box::new(metaaction_closure)),
        ("latency stats oracle and table row", Box::new(stats_and_table)),
        ("broker sustained load", Box::new(|| runtime().block_on(broker_load()))),
        ("service durability", Box::new(|| runtime().block_on(durability()))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        match catch_unwind(AssertUnwindSafe(run)) {
            Ok(Ok(detail)) => println!("PASS {name}: {detail}"),
            Ok(Err(e)) => {
                failed += 1;
                println!("FAIL {name}: {e:#}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {name}: panicked");
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
