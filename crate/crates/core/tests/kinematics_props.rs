use std::sync::Arc;

use cda_core::agent::{ControlLaw, GeoPoint, Route, Segment, VehicleState};
use cda_core::wire::{speed_units_from_mps, AdvisoryCause, AdvisoryPayload};
use proptest::prelude::*;

fn route() -> Arc<Route> {
    let segments = (0..4u16)
        .map(|i| Segment {
            segment_id: 10 + i,
            start: GeoPoint::new(28.0, -82.0 + f64::from(i) * 0.01),
            end: GeoPoint::new(28.0, -82.0 + f64::from(i + 1) * 0.01),
            length_m: 400.0,
        })
        .collect();
    Arc::new(Route::new(segments).unwrap())
}

#[derive(Debug, Clone)]
enum Event {
    Tick,
    Advisory { id: u16, segment: u16, speed: u16, minutes: u16 },
}

fn events() -> impl Strategy<Value = Vec<Event>> {
    proptest::collection::vec(
        prop_oneof![
            6 => Just(Event::Tick),
            1 => (any::<u16>(), 9u16..15, 0u16..=8191, 0u16..3).prop_map(|(id, segment, speed, minutes)| {
                Event::Advisory { id, segment, speed, minutes }
            }),
        ],
        1..400,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn speed_and_acceleration_bounds(
        driver in 0.0f64..40.0,
        initial in 0.0f64..45.0,
        odo in 0.0f64..1600.0,
        evs in events(),
    ) {
        let law = ControlLaw::<f64>::default();
        let mut v = VehicleState::new(1, route(), odo, driver).with_speed(initial);
        let mut now = 0.0;
        let extent = v.route().length_m();
        for ev in evs {
            match ev {
                Event::Tick => {
                    let before = v.speed;
                    now += 0.1;
                    v.tick(&law, now);
                    prop_assert!(v.speed >= 0.0);
                    let accel = (v.speed - before) / 0.1;
                    prop_assert!((-3.0 - 1e-9..=2.0 + 1e-9).contains(&accel), "accel {}", accel);
                    prop_assert!(v.odometer() >= 0.0 && v.odometer() <= extent);
                }
                Event::Advisory { id, segment, speed, minutes } => {
                    v.on_advisory(AdvisoryPayload {
                        advisory_id: id,
                        segment_id: segment,
                        advisory_speed: speed,
                        start_minute_of_year: AdvisoryPayload::START_IMMEDIATE,
                        duration_minutes: minutes,
                        cause: AdvisoryCause::None,
                    }, now);
                }
            }
            prop_assert!(v.effective_target(now) <= v.driver_set_speed);
            if let Some(a) = v.active_advisory() {
                prop_assert_eq!(a.payload.segment_id, v.current_segment().segment_id);
            }
        }
    }

    #[test]
    fn monotone_approach(driver in 0.0f64..40.0, initial in 0.0f64..45.0, adv in 0.0f64..40.0) {
        let law = ControlLaw::<f64>::default();
        let mut v = VehicleState::new(1, route(), 0.0, driver).with_speed(initial);
        v.on_advisory(AdvisoryPayload {
            advisory_id: 1,
            segment_id: 10,
            advisory_speed: speed_units_from_mps(adv),
            start_minute_of_year: AdvisoryPayload::START_IMMEDIATE,
            duration_minutes: 60,
            cause: AdvisoryCause::None,
        }, 0.0);
        let target = v.effective_target(0.0);
        let mut gap = (v.speed - target).abs();
        // Stay on the first segment so the target cannot change.
        for i in 1..=30 {
            if v.odometer() > 300.0 { break; }
            v.tick(&law, f64::from(i) * 0.1);
            let g = (v.speed - target).abs();
            prop_assert!(g <= gap + 1e-12);
            gap = g;
        }
    }

    #[test]
    fn bsm_cadence_counter(n in 1usize..500) {
        let mut v = VehicleState::<f64>::new(1, route(), 0.0, 20.0);
        let mut prev = None;
        for i in 0..n {
            let b = v.bsm_snapshot(i as f64 * 0.1);
            if let Some(p) = prev {
                prop_assert_eq!(b.msg_cnt, (p + 1) % 128);
            }
            prev = Some(b.msg_cnt);
        }
    }
}
