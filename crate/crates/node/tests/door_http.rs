mod common;

use common::*;
use marketpalace::config::{DoorConfig, IssuerKey};
use marketpalace::door_http::{start, RunningDoor};
use marketpalace_core::crypto::{generate_keypair, verify_certification, CertifiedKey, KeyPair};
use marketpalace_core::door::{parse_qr_payload, MockIssuer};
use serde_json::{json, Value};
use tempfile::TempDir;

fn issuer() -> MockIssuer {
    MockIssuer::new("gov-mock", identity(5).keys)
}

async fn door(dir: &TempDir, ttl: u64) -> RunningDoor {
    let pk = serde_json::to_value(&issuer().keys.public).unwrap();
    let cfg = DoorConfig {
        listen_addr: "127.0.0.1:0".into(),
        server_key_path: dir.path().join("unused.json"),
        issuer_keys: vec![IssuerKey { issuer_id: "gov-mock".into(), public_key: pk.as_str().unwrap().into() }],
        session_ttl_s: ttl,
        tls: Default::default(),
        hash_store_path: dir.path().join("hashes.txt"),
        public_host: Some("door.example:443".into()),
    };
    start(&cfg, server().clone()).await.unwrap()
}

fn user() -> KeyPair {
    identity(4).keys
}

async fn session(c: &reqwest::Client, base: &str) -> String {
    let (s, v) = post_json(c, &format!("{base}/session"), &json!({})).await;
    assert_eq!(s, 201);
    let token = v["token"].as_str().unwrap().to_owned();
    let qr = parse_qr_payload(v["qr_payload"].as_str().unwrap()).unwrap();
    assert_eq!(qr, ("door.example:443".to_owned(), token.clone()));
    token
}

#[tokio::test(flavor = "multi_thread")]
async fn full_registration_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let d = door(&dir, 300).await;
    let base = format!("http://{}", d.addr);
    let c = http();

    let (s, key) = get_json(&c, &format!("{base}/server-key")).await;
    assert_eq!(s, 200);
    assert_eq!(key, json!({"public_key": serde_json::to_value(&server().public).unwrap()}));

    let token = session(&c, &base).await;
    let der = serde_json::to_value(&user().public).unwrap();
    // Completing before disclosing is a state error.
    let (s, _) = post_json(&c, &format!("{base}/session/{token}/complete"), &json!({"public_key": der})).await;
    assert_eq!(s, 409);

    let disclosure = serde_json::to_value(issuer().issue("ssn", "123-45-6789", "alice")).unwrap();
    let (s, v) = post_json(&c, &format!("{base}/session/{token}/disclose"), &disclosure).await;
    assert_eq!((s, v), (200, json!({"result": "accepted"})));

    let (s, _) = post_json(&c, &format!("{base}/session/{token}/complete"), &json!({"public_key": "AAAA"})).await;
    assert_eq!(s, 400);
    let (s, v) = post_json(&c, &format!("{base}/session/{token}/complete"), &json!({"public_key": der})).await;
    assert_eq!(s, 200);
    let cert: CertifiedKey = serde_json::from_value(v).unwrap();
    assert!(verify_certification(&server().public, &cert));
    assert_eq!(cert.public_key, user().public.as_der());

    let (s, _) = post_json(&c, &format!("{base}/session/{token}/complete"), &json!({"public_key": der})).await;
    assert_eq!(s, 409);

    // Same attribute again, new session: duplicate, token unusable.
    let again = session(&c, &base).await;
    let (s, v) = post_json(&c, &format!("{base}/session/{again}/disclose"), &disclosure).await;
    assert_eq!((s, v), (200, json!({"result": "duplicate"})));
    let (s, _) = post_json(&c, &format!("{base}/session/{again}/complete"), &json!({"public_key": der})).await;
    assert_eq!(s, 409);

    let (s, v) = post_json(&c, &format!("{base}/session/nope/disclose"), &disclosure).await;
    assert_eq!(s, 404, "{v}");
    assert_eq!(v["error"], "unknown-session");
    let (s, _) = post_json(&c, &format!("{base}/session/{again}/disclose"), &json!({"attribute_name": 1})).await;
    assert_eq!(s, 400);

    let lines = std::fs::read_to_string(dir.path().join("hashes.txt")).unwrap();
    assert_eq!(lines.lines().count(), 1);
    assert!(!lines.contains("123-45-6789"));
    d.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_disclosure_keeps_session_open() {
    let dir = tempfile::tempdir().unwrap();
    let d = door(&dir, 300).await;
    let base = format!("http://{}", d.addr);
    let c = http();
    let token = session(&c, &base).await;
    let stranger = MockIssuer::new("gov-mock", generate_keypair(2048).unwrap());
    let forged = serde_json::to_value(stranger.issue("ssn", "999", "mallory")).unwrap();
    let (_, v) = post_json(&c, &format!("{base}/session/{token}/disclose"), &forged).await;
    assert_eq!(v, json!({"result": "invalid"}));
    let good = serde_json::to_value(issuer().issue("ssn", "999", "mallory")).unwrap();
    let (_, v) = post_json(&c, &format!("{base}/session/{token}/disclose"), &good).await;
    assert_eq!(v, json!({"result": "accepted"}));
    d.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn sessions_expire() {
    let dir = tempfile::tempdir().unwrap();
    let d = door(&dir, 2).await;
    let base = format!("http://{}", d.addr);
    let c = http();
    let token = session(&c, &base).await;
    // Whole-second clock: age is 3 or 4 here, past the TTL but not yet
    // old enough to be forgotten.
    tokio::time::sleep(std::time::Duration::from_millis(3200)).await;
    let good: Value = serde_json::to_value(issuer().issue("ssn", "555", "late")).unwrap();
    let (s, v) = post_json(&c, &format!("{base}/session/{token}/disclose"), &good).await;
    assert_eq!(s, 409, "{v}");
    d.shutdown().await;
}
