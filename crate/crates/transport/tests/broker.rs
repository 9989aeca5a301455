use std::time::Duration;

use bytes::{BufMut, Bytes, BytesMut};
use futures::{SinkExt, StreamExt};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio_util::codec::Framed;

use cda_core::link::{LinkProfile, ProfileName};
use cda_transport::broker::BrokerStats;
use cda_transport::{
    broker_serve, BrokerConfig, Client, ClientError, ClientOptions, ControlCodec, ControlFrame,
    Envelope, Qos, Topic, TopicPattern,
};

const WAIT: Duration = Duration::from_secs(5);

async fn client(addr: std::net::SocketAddr, id: &str) -> Client {
    Client::connect(addr, id, ClientOptions::default()).await.unwrap()
}

#[tokio::test]
async fn hundred_messages_arrive_in_order() {
    let broker = broker_serve(BrokerConfig::ephemeral()).await.unwrap();
    let mut sub = client(broker.tcp_addr(), "sub").await;
    sub.subscribe("cda/fl/adv/+".parse().unwrap()).await.unwrap();
    let publisher = client(broker.tcp_addr(), "pub").await;
    let topic = Topic::advisory("fl", 12).unwrap();
    for i in 0..100u32 {
        publisher
            .publish(topic.clone(), Bytes::from(i.to_be_bytes().to_vec()), Qos::AtLeastOnce, false)
            .await
            .unwrap();
    }
    for i in 0..100u32 {
        let env = sub.recv_timeout(WAIT).await.expect("message");
        assert_eq!(env.body.as_ref(), i.to_be_bytes());
        assert_eq!(env.topic, topic);
    }
    assert!(sub.recv_timeout(Duration::from_millis(100)).await.is_none());
    broker.shutdown().await;
}

#[tokio::test]
async fn late_subscriber_gets_retained() {
    let broker = broker_serve(BrokerConfig::ephemeral()).await.unwrap();
    let publisher = client(broker.tcp_addr(), "svc").await;
    let topic = Topic::advisory("fl", 12).unwrap();
    publisher
        .publish(topic.clone(), Bytes::from_static(b"old"), Qos::AtLeastOnce, true)
        .await
        .unwrap();
    publisher
        .publish(topic.clone(), Bytes::from_static(b"latest"), Qos::AtLeastOnce, true)
        .await
        .unwrap();
    let mut late = client(broker.tcp_addr(), "veh-1").await;
    late.subscribe("cda/fl/adv/12".parse().unwrap()).await.unwrap();
    let env = late.recv_timeout(WAIT).await.expect("retained");
    assert_eq!(env.body.as_ref(), b"latest");
    assert!(late.recv_timeout(Duration::from_millis(100)).await.is_none());
    broker.shutdown().await;
}

#[tokio::test]
async fn publish_without_subscribers_is_harmless() {
    let broker = broker_serve(BrokerConfig::ephemeral()).await.unwrap();
    let publisher = client(broker.tcp_addr(), "lonely").await;
    let topic = Topic::bsm("fl", 9).unwrap();
    assert_eq!(
        publisher
            .publish(topic.clone(), Bytes::from_static(b"x"), Qos::BestEffort, false)
            .await
            .unwrap(),
        1
    );
    assert_eq!(
        publisher
            .publish(topic, Bytes::from_static(b"y"), Qos::AtLeastOnce, false)
            .await
            .unwrap(),
        1
    );
    publisher.ping(WAIT).await.unwrap();
    assert_eq!(BrokerStats::get(&broker.stats().delivered), 0);
    broker.shutdown().await;
}

#[tokio::test]
async fn wildcard_subscriptions_and_unsubscribe() {
    let broker = broker_serve(BrokerConfig::ephemeral()).await.unwrap();
    let mut monitor = client(broker.tcp_addr(), "ops").await;
    monitor.subscribe(TopicPattern::all_bsm()).await.unwrap();
    let veh = client(broker.tcp_addr(), "veh-7").await;
    veh.publish(Topic::bsm("fl", 7).unwrap(), Bytes::from_static(b"a"), Qos::BestEffort, false)
        .await
        .unwrap();
    assert_eq!(monitor.recv_timeout(WAIT).await.unwrap().body.as_ref(), b"a");
    monitor.unsubscribe(TopicPattern::all_bsm()).await.unwrap();
    veh.publish(Topic::bsm("fl", 7).unwrap(), Bytes::from_static(b"b"), Qos::BestEffort, false)
        .await
        .unwrap();
    veh.ping(WAIT).await.unwrap();
    assert!(monitor.recv_timeout(Duration::from_millis(100)).await.is_none());
    broker.shutdown().await;
}

async fn read_all_frames(stream: TcpStream) -> Vec<ControlFrame> {
    let mut framed = Framed::new(stream, ControlCodec::default());
    let mut out = Vec::new();
    while let Ok(Some(Ok(f))) = tokio::time::timeout(WAIT, framed.next()).await {
        out.push(f);
    }
    out
}

#[tokio::test]
async fn malformed_frames_disconnect_only_the_offender() {
    let broker = broker_serve(BrokerConfig::ephemeral()).await.unwrap();
    let mut healthy = client(broker.tcp_addr(), "healthy").await;
    healthy.subscribe("cda/#".parse().unwrap()).await.unwrap();

    let garbage: Vec<Vec<u8>> = vec![
        // unknown op
        vec![0, 0, 0, 1, 0x7f],
        // empty frame
        vec![0, 0, 0, 0],
        // PUB truncated inside seq
        vec![0, 0, 0, 4, 4, 1, 0, 0],
        // oversized length prefix
        vec![0xff, 0xff, 0xff, 0xff, 1],
    ];
    for bytes in garbage {
        let mut s = TcpStream::connect(broker.tcp_addr()).await.unwrap();
        s.write_all(&bytes).await.unwrap();
        let frames = read_all_frames(s).await;
        assert!(
            matches!(frames.last(), Some(ControlFrame::Notice { .. })),
            "{frames:?}"
        );
    }

    // CONNECT then a wildcard topic in PUB
    let mut s = TcpStream::connect(broker.tcp_addr()).await.unwrap();
    let mut buf = BytesMut::new();
    buf.extend_from_slice(&ControlFrame::Connect { client_id: "bad".into() }.to_bytes());
    let mut body = BytesMut::new();
    body.put_u8(4);
    body.put_u8(0);
    body.put_u64(1);
    body.put_u16(3);
    body.extend_from_slice(b"a/#");
    buf.put_u32(body.len() as u32);
    buf.extend_from_slice(&body);
    s.write_all(&buf).await.unwrap();
    let frames = read_all_frames(s).await;
    assert!(matches!(frames.last(), Some(ControlFrame::Notice { .. })));

    // random noise after a valid CONNECT
    let mut s = TcpStream::connect(broker.tcp_addr()).await.unwrap();
    s.write_all(&ControlFrame::Connect { client_id: "noise".into() }.to_bytes())
        .await
        .unwrap();
    s.write_all(&[0, 0, 0, 3, 9, 9, 9]).await.unwrap();
    let mut rest = Vec::new();
    let _ = tokio::time::timeout(WAIT, s.read_to_end(&mut rest)).await;

    assert!(BrokerStats::get(&broker.stats().malformed_disconnects) >= 6);
    let publisher = client(broker.tcp_addr(), "after").await;
    publisher
        .publish(Topic::advisory("fl", 1).unwrap(), Bytes::from_static(b"ok"), Qos::AtLeastOnce, false)
        .await
        .unwrap();
    assert_eq!(healthy.recv_timeout(WAIT).await.unwrap().body.as_ref(), b"ok");
    broker.shutdown().await;
}

#[tokio::test]
async fn stalled_subscriber_is_disconnected_on_overflow() {
    let config = BrokerConfig {
        queue_limit: 8,
        ..BrokerConfig::ephemeral()
    };
    let broker = broker_serve(config).await.unwrap();
    let mut stalled = TcpStream::connect(broker.tcp_addr()).await.unwrap();
    stalled
        .write_all(&ControlFrame::Connect { client_id: "stalled".into() }.to_bytes())
        .await
        .unwrap();
    stalled
        .write_all(&ControlFrame::Sub { pattern: "#".parse().unwrap() }.to_bytes())
        .await
        .unwrap();
    stalled.write_all(&ControlFrame::Ping.to_bytes()).await.unwrap();
    // Wait for the PONG so the subscription is in place.
    let mut pong = [0u8; 5];
    stalled.read_exact(&mut pong).await.unwrap();

    let publisher = client(broker.tcp_addr(), "firehose").await;
    let body = Bytes::from(vec![0xabu8; 60_000]);
    let topic = Topic::bsm("fl", 1).unwrap();
    for _ in 0..2_000 {
        publisher
            .publish(topic.clone(), body.clone(), Qos::BestEffort, false)
            .await
            .unwrap();
        if BrokerStats::get(&broker.stats().overflow_disconnects) > 0 {
            break;
        }
    }
    publisher.ping(WAIT).await.unwrap();
    assert_eq!(BrokerStats::get(&broker.stats().overflow_disconnects), 1);

    let frames = read_all_frames(stalled).await;
    match frames.last() {
        Some(ControlFrame::Notice { reason }) => assert!(reason.contains("overflow"), "{reason}"),
        other => panic!("expected overflow notice, got {other:?}"),
    }
    publisher.ping(WAIT).await.unwrap();
    broker.shutdown().await;
}

#[tokio::test]
async fn lossy_at_least_once_eventually_delivers() {
    let broker = broker_serve(BrokerConfig::ephemeral()).await.unwrap();
    let mut sub = client(broker.tcp_addr(), "veh").await;
    sub.subscribe("cda/fl/adv/#".parse().unwrap()).await.unwrap();
    let mut profile = LinkProfile::builtin(ProfileName::Loopback).with_loss(0.2);
    profile.latency_max_ms = 2.0;
    let options = ClientOptions {
        link: Some((profile, 42)),
        retry: cda_transport::RetryPolicy {
            timeout: Duration::from_millis(50),
            max_attempts: 20,
        },
        ..ClientOptions::default()
    };
    let publisher = Client::connect(broker.tcp_addr(), "svc", options).await.unwrap();
    let topic = Topic::advisory("fl", 3).unwrap();
    let mut retransmitted = 0;
    for i in 0..50u8 {
        let attempts = publisher
            .publish(topic.clone(), Bytes::from(vec![i]), Qos::AtLeastOnce, false)
            .await
            .unwrap();
        retransmitted += attempts - 1;
    }
    assert!(retransmitted > 0, "20% loss must force some retries");

    let mut got = Vec::new();
    while let Some(env) = sub.recv_timeout(Duration::from_millis(300)).await {
        got.push(env.body[0]);
    }
    // Duplicates are filtered by the broker, so order and content are exact.
    assert_eq!(got, (0..50).collect::<Vec<u8>>());
    broker.shutdown().await;
}

#[tokio::test]
async fn total_loss_surfaces_delivery_failure() {
    let broker = broker_serve(BrokerConfig::ephemeral()).await.unwrap();
    let profile = LinkProfile::builtin(ProfileName::Loopback).with_loss(0.999);
    let options = ClientOptions {
        link: Some((profile, 3)),
        retry: cda_transport::RetryPolicy {
            timeout: Duration::from_millis(20),
            max_attempts: 3,
        },
        ..ClientOptions::default()
    };
    let c = Client::connect(broker.tcp_addr(), "void", options).await.unwrap();
    let err = c
        .publish(Topic::advisory("fl", 1).unwrap(), Bytes::new(), Qos::AtLeastOnce, false)
        .await
        .unwrap_err();
    assert!(matches!(err, ClientError::DeliveryFailed { attempts: 3, .. }), "{err}");
    broker.shutdown().await;
}

#[tokio::test]
async fn publish_after_broker_gone_is_an_error() {
    let broker = broker_serve(BrokerConfig::ephemeral()).await.unwrap();
    let c = client(broker.tcp_addr(), "orphan").await;
    broker.shutdown().await;
    let mut failed = false;
    for _ in 0..50 {
        let r = c
            .publish(Topic::advisory("fl", 1).unwrap(), Bytes::new(), Qos::AtLeastOnce, false)
            .await;
        if r.is_err() {
            failed = true;
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert!(failed);
}

#[tokio::test]
async fn session_takeover_kicks_older_connection() {
    let broker = broker_serve(BrokerConfig::ephemeral()).await.unwrap();
    let first = client(broker.tcp_addr(), "dup").await;
    first.ping(WAIT).await.unwrap();
    let second = client(broker.tcp_addr(), "dup").await;
    second.ping(WAIT).await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert_eq!(first.notice().as_deref(), Some("session taken over"));
    assert!(first.ping(Duration::from_millis(200)).await.is_err());
    broker.shutdown().await;
}

#[tokio::test]
async fn envelope_fields_survive_the_broker() {
    let broker = broker_serve(BrokerConfig::ephemeral()).await.unwrap();
    let mut raw = Framed::new(
        TcpStream::connect(broker.tcp_addr()).await.unwrap(),
        ControlCodec::default(),
    );
    raw.send(ControlFrame::Connect { client_id: "raw".into() }).await.unwrap();
    raw.send(ControlFrame::Sub { pattern: "x/#".parse().unwrap() }).await.unwrap();
    let env = Envelope {
        topic: "x/y".parse().unwrap(),
        qos: Qos::AtLeastOnce,
        retain: false,
        seq: 77,
        body: Bytes::from_static(&[1, 2, 3]),
    };
    raw.send(ControlFrame::Pub(env.clone())).await.unwrap();
    let mut saw_pub = false;
    let mut saw_ack = false;
    while !(saw_pub && saw_ack) {
        match tokio::time::timeout(WAIT, raw.next()).await.unwrap().unwrap().unwrap() {
            ControlFrame::Pub(got) => {
                assert_eq!(got, env);
                saw_pub = true;
            }
            ControlFrame::Ack { seq } => {
                assert_eq!(seq, 77);
                saw_ack = true;
            }
            other => panic!("{other:?}"),
        }
    }
    broker.shutdown().await;
}
