mod common;

use std::time::Duration;

use proptest::prelude::*;
use serde_json::Value;

use common::{synthetic_stream, tiny_params, StubServer};
use teg::serve::{
    detect, read_spool, run_stream, AnomalyPacket, Delivery, Emitter, EndpointConfig, ServeConfig, PACKET_SCHEMA,
};

fn validator() -> jsonschema::Validator {
    let schema: Value = serde_json::from_str(PACKET_SCHEMA).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn fast_endpoint(url: &str, spool: std::path::PathBuf) -> EndpointConfig {
    EndpointConfig {
        token: Some("s3cret".into()),
        backoff_base: Duration::from_millis(5),
        timeout: Duration::from_secs(2),
        ..EndpointConfig::new(url, spool)
    }
}

fn sample_packet() -> AnomalyPacket {
    AnomalyPacket::new("anomaly", "cam-7", 4_000, 10_399, 0.91).unwrap()
}

proptest! {
    #[test]
    fn packets_validate_against_schema(
        cam in "[a-z0-9_-]{1,16}",
        kind in "[a-z_]{1,12}",
        start in 0u64..1u64 << 40,
        len in 0u64..1u64 << 20,
        peak in 0.0f64..=1.0,
    ) {
        let p = AnomalyPacket::new(&kind, &cam, start, start + len, peak).unwrap();
        let v: Value = serde_json::from_str(&p.to_json()).unwrap();
        prop_assert!(validator().is_valid(&v));
    }
}

#[test]
fn schema_rejects_malformed_packets() {
    let v = validator();
    let good: Value = serde_json::from_str(&sample_packet().to_json()).unwrap();
    assert!(v.is_valid(&good));
    let mutate = |f: &dyn Fn(&mut serde_json::Map<String, Value>)| {
        let mut x = good.clone();
        f(x.as_object_mut().unwrap());
        x
    };
    assert!(!v.is_valid(&mutate(&|m| {
        m.insert("extra".into(), Value::Bool(true));
    })));
    assert!(!v.is_valid(&mutate(&|m| {
        m.remove("camera_id");
    })));
    assert!(!v.is_valid(&mutate(&|m| {
        m.insert("peak_score".into(), serde_json::json!(1.5));
    })));
    assert!(!v.is_valid(&mutate(&|m| {
        m.insert("start_ms".into(), serde_json::json!(1.25));
    })));
}

#[test]
fn delivery_sends_bearer_token_and_packet_body() {
    let server = StubServer::start(vec![], 200);
    let dir = tempfile::tempdir().unwrap();
    let e = Emitter::new(fast_endpoint(&server.url, dir.path().join("spool.jsonl"))).unwrap();
    let p = sample_packet();
    assert_eq!(e.emit(&p).unwrap(), Delivery::Delivered { attempts: 1, status: 200 });
    let reqs = server.recorded();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].method, "POST");
    assert_eq!(reqs[0].path, "/events");
    assert_eq!(reqs[0].authorization.as_deref(), Some("Bearer s3cret"));
    let body: AnomalyPacket = serde_json::from_str(&reqs[0].body).unwrap();
    assert_eq!(body, p);
    assert!(read_spool(&dir.path().join("spool.jsonl")).unwrap().is_empty());
}

#[test]
fn transient_failures_are_retried() {
    let server = StubServer::start(vec![500, 503], 200);
    let dir = tempfile::tempdir().unwrap();
    let e = Emitter::new(fast_endpoint(&server.url, dir.path().join("spool.jsonl"))).unwrap();
    assert_eq!(e.emit(&sample_packet()).unwrap(), Delivery::Delivered { attempts: 3, status: 200 });
    assert_eq!(server.recorded().len(), 3);
}

#[test]
fn persistent_500_spools_after_three_attempts() {
    let server = StubServer::start(vec![], 500);
    let dir = tempfile::tempdir().unwrap();
    let spool = dir.path().join("dead").join("spool.jsonl");
    let e = Emitter::new(fast_endpoint(&server.url, spool.clone())).unwrap();
    let p = sample_packet();
    let d = e.emit(&p).unwrap();
    assert!(matches!(d, Delivery::Spooled { attempts: 3, last_status: Some(500), .. }), "{d:?}");
    assert_eq!(server.recorded().len(), 3);
    let entries = read_spool(&spool).unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].packet, p);
    assert_eq!(entries[0].last_status, Some(500));
}

#[test]
fn missing_token_sends_no_authorization() {
    let server = StubServer::start(vec![], 204);
    let dir = tempfile::tempdir().unwrap();
    let cfg = EndpointConfig {
        token: None,
        ..fast_endpoint(&server.url, dir.path().join("s.jsonl"))
    };
    let d = Emitter::new(cfg).unwrap().emit(&sample_packet()).unwrap();
    assert_eq!(d, Delivery::Delivered { attempts: 1, status: 204 });
    assert_eq!(server.recorded()[0].authorization, None);
}

/// Threshold at the mean newest-segment score, so the stream has events.
fn calibrated_config(records: &[teg::serve::StreamRecord]) -> ServeConfig {
    let (model, params) = tiny_params(11);
    let dry = run_stream(records.iter().cloned().map(Ok), &params, &model, ServeConfig::default(), None).unwrap();
    let all: Vec<f64> = dry.timelines.values().flatten().map(|p| p.score).collect();
    ServeConfig {
        threshold: all.iter().sum::<f64>() / all.len() as f64,
        min_run: 2,
        ..ServeConfig::default()
    }
}

#[test]
fn streamed_packets_match_offline_detection() {
    let records = synthetic_stream(&["cam-a", "cam-b"], 60, 8, 3);
    let config = calibrated_config(&records);
    let (model, params) = tiny_params(11);
    let server = StubServer::start(vec![], 200);
    let dir = tempfile::tempdir().unwrap();
    let emitter = Emitter::new(fast_endpoint(&server.url, dir.path().join("spool.jsonl"))).unwrap();

    let summary = run_stream(records.into_iter().map(Ok), &params, &model, config.clone(), Some(&emitter)).unwrap();
    assert_eq!(summary.segments, 120);
    assert!(!summary.packets.is_empty());

    let mut expected = Vec::new();
    for (cam, timeline) in &summary.timelines {
        assert_eq!(timeline.len(), 60);
        let scores: Vec<f64> = timeline.iter().map(|p| p.score).collect();
        for e in detect(&scores, config.threshold, config.min_run) {
            expected.push(
                AnomalyPacket::new("anomaly", cam, timeline[e.start].timestamp_ms, timeline[e.end].timestamp_ms, e.peak)
                    .unwrap(),
            );
        }
    }
    let key = |p: &AnomalyPacket| (p.camera_id.clone(), p.start_ms);
    let mut got = summary.packets.clone();
    got.sort_by_key(key);
    expected.sort_by_key(key);
    assert_eq!(got, expected);

    assert_eq!(summary.delivered(), got.len());
    let v = validator();
    let mut bodies: Vec<AnomalyPacket> = server
        .recorded()
        .iter()
        .map(|r| {
            let json: Value = serde_json::from_str(&r.body).unwrap();
            assert!(v.is_valid(&json));
            serde_json::from_value(json).unwrap()
        })
        .collect();
    bodies.sort_by_key(key);
    assert_eq!(bodies, expected);
}

#[test]
fn stream_without_emitter_still_reports_packets() {
    let records = synthetic_stream(&["cam-a"], 40, 8, 9);
    let config = calibrated_config(&records);
    let (model, params) = tiny_params(11);
    let s = run_stream(records.into_iter().map(Ok), &params, &model, config, None).unwrap();
    assert!(s.deliveries.is_empty());
    assert_eq!(s.dropped, 0);
    assert_eq!(s.timelines["cam-a"].len(), 40);
}

#[test]
fn malformed_stream_record_is_reported() {
    let (model, params) = tiny_params(1);
    let text = "{\"camera_id\":\"c\",\"timestamp_ms\":0,\"short\":[1.0]}\n";
    let r = run_stream(teg::serve::read_stream(text.as_bytes()), &params, &model, ServeConfig::default(), None);
    assert!(matches!(r, Err(teg::Error::Json(_))));
}

