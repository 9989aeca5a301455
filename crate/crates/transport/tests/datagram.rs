use std::net::SocketAddr;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use cda_core::wire::{encode_frame, BsmPayload, Message};
use cda_transport::{broker_serve, BrokerConfig, Client, ClientOptions, DatagramChannel, DatagramError, TopicPattern, MAX_DATAGRAM};

fn loopback() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

fn bsm(id: u32, cnt: u8) -> Message {
    Message::Bsm(BsmPayload {
        msg_cnt: cnt % 128,
        temp_id: id,
        sec_mark: 1234,
        lat: 281234567,
        lon: -812345678,
        elev: 120,
        speed: 1000,
        heading: 4000,
    })
}

#[tokio::test]
async fn loopback_round_trip() {
    let a = DatagramChannel::bind(loopback()).await.unwrap();
    let b = DatagramChannel::bind(loopback()).await.unwrap();
    let msg = bsm(7, 3);
    a.send_message(&msg, b.local_addr().unwrap()).await.unwrap();
    let (got, from) = tokio::time::timeout(Duration::from_secs(2), b.recv_message())
        .await
        .unwrap()
        .unwrap();
    assert_eq!(got, msg);
    assert_eq!(from, a.local_addr().unwrap());
}

#[tokio::test]
async fn corrupt_frames_are_counted_and_skipped() {
    let a = DatagramChannel::bind(loopback()).await.unwrap();
    let b = DatagramChannel::bind(loopback()).await.unwrap();
    let to = b.local_addr().unwrap();
    let mut frame = encode_frame(&bsm(1, 1)).unwrap();
    frame[6] ^= 0x10;
    a.send_frame(&frame, to).await.unwrap();
    a.send_frame(&[0xde, 0xad], to).await.unwrap();
    a.send_message(&bsm(2, 2), to).await.unwrap();
    let (got, _) = tokio::time::timeout(Duration::from_secs(2), b.recv_message())
        .await
        .unwrap()
        .unwrap();
    assert_eq!(got, bsm(2, 2));
    assert_eq!(b.stats().dropped_corrupt.load(Ordering::Relaxed), 2);
    assert_eq!(b.stats().received.load(Ordering::Relaxed), 3);
}

#[tokio::test]
async fn oversized_frame_is_a_local_error() {
    let a = DatagramChannel::bind(loopback()).await.unwrap();
    let err = a
        .send_frame(&vec![0u8; MAX_DATAGRAM + 1], a.local_addr().unwrap())
        .await
        .unwrap_err();
    assert!(matches!(err, DatagramError::Oversized(n) if n == MAX_DATAGRAM + 1));
    assert_eq!(a.stats().sent.load(Ordering::Relaxed), 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn ten_vehicles_at_ten_hertz() {
    let rx = Arc::new(DatagramChannel::bind(loopback()).await.unwrap());
    let to = rx.local_addr().unwrap();
    let counter = {
        let rx = rx.clone();
        tokio::spawn(async move {
            let mut n = 0u32;
            while let Ok(Ok(_)) =
                tokio::time::timeout(Duration::from_millis(500), rx.recv_message()).await
            {
                n += 1;
            }
            n
        })
    };
    let mut senders = Vec::new();
    for v in 0..10u32 {
        senders.push(tokio::spawn(async move {
            let ch = DatagramChannel::bind(loopback()).await.unwrap();
            let mut tick = tokio::time::interval(Duration::from_millis(100));
            for i in 0..100u32 {
                tick.tick().await;
                ch.send_message(&bsm(v, i as u8), to).await.unwrap();
            }
        }));
    }
    for s in senders {
        s.await.unwrap();
    }
    let received = counter.await.unwrap();
    assert!(received >= 990, "received {received} of 1000");
}

#[tokio::test]
async fn broker_republishes_udp_bsms() {
    let broker = broker_serve(BrokerConfig::ephemeral()).await.unwrap();
    let mut ops = Client::connect(broker.tcp_addr(), "ops", ClientOptions::default())
        .await
        .unwrap();
    ops.subscribe(TopicPattern::all_bsm()).await.unwrap();
    let veh = DatagramChannel::bind(loopback()).await.unwrap();
    let udp = broker.udp_addr().unwrap();
    veh.send_frame(&[1, 2, 3, 4, 5, 6], udp).await.unwrap();
    let msg = bsm(42, 9);
    veh.send_message(&msg, udp).await.unwrap();
    let env = ops.recv_timeout(Duration::from_secs(2)).await.expect("bsm");
    assert_eq!(env.topic.as_str(), "cda/fl/veh/42/bsm");
    assert_eq!(env.body.as_ref(), encode_frame(&msg).unwrap().as_slice());
    assert_eq!(broker.stats().udp_corrupt.load(Ordering::Relaxed), 1);
    broker.shutdown().await;
}
