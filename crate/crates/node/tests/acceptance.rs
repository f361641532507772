//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed. An argument filters criteria by name.

mod common;

use std::collections::{BTreeSet, HashSet};
use std::panic::AssertUnwindSafe;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, ensure, Result};
use common::*;
use marketpalace::config::{DoorConfig, IssuerKey};
use marketpalace_core::crypto::{
    certify_key, generate_keypair, open_envelope, seal_envelope, verify_certification, CertifiedKey, KeyPair,
};
use marketpalace_core::door::MockIssuer;
use marketpalace_core::gossip::{k_closest_by, PeerId};
use marketpalace_core::market::{
    create_signed_listing, ContentId, ListingDraft, ListingStore, SignedListing, Tombstone,
};
use marketpalace_core::sim::{propagate, run_experiment, Observer, Scenario, SimConfig};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

type Criterion = fn() -> Result<String>;

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, Criterion); 8] = [
        ("table-reproduction", table_reproduction),
        ("factor-2-decomposition", factor_two_decomposition),
        ("sybil-gate", sybil_gate),
        ("envelope-pipeline", envelope_pipeline),
        ("k-closest-oracle", k_closest_oracle),
        ("end-to-end-propagation", end_to_end_propagation),
        ("simulator-real-equivalence", simulator_real_equivalence),
        ("merge-algebra", merge_algebra),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(anyhow!("panicked: {}", panic_message(&p))));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e:#} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap()
}

// Independent statistics.

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn nearest_rank(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    s[((q * s.len() as f64).ceil() as usize).max(1) - 1]
}

/// Two-sample Kolmogorov-Smirnov statistic, by evaluating both empirical
/// CDFs at every sample point.
fn ks(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |xs: &[f64], x: f64| xs.iter().filter(|v| **v <= x).count() as f64 / xs.len() as f64;
    a.iter().chain(b).map(|&x| (cdf(a, x) - cdf(b, x)).abs()).fold(0.0, f64::max)
}

fn table_reproduction() -> Result<String> {
    let start = Instant::now();
    let cfg = SimConfig {
        num_nodes: 4,
        timer_period_s: 90.0,
        k: 20,
        trials: 100,
        observer: Observer::Neighbor,
        ..Default::default()
    };
    let (summary, delays) = run_experiment(&cfg)?;
    ensure!(delays.len() == 100);
    let (sd, p95) = (sample_sd(&delays), nearest_rank(&delays, 0.95));
    ensure!(
        (summary.stddev_s - sd).abs() < 1e-9 && (summary.p95_s - p95).abs() < 1e-9,
        "summary disagrees with oracle"
    );
    ensure!((22.0..=30.0).contains(&sd), "stddev {sd:.2} outside [22, 30]");
    ensure!(p95 <= 90.0, "p95 {p95:.2} above 90");

    let big = SimConfig { trials: 10_000, ..cfg };
    let (_, delays) = run_experiment(&big)?;
    let (m, sd_big) = (mean(&delays), sample_sd(&delays));
    ensure!((43.0..=47.0).contains(&m), "10k mean {m:.2} outside [43, 47]");
    ensure!((24.5..=27.5).contains(&sd_big), "10k stddev {sd_big:.2} outside [24.5, 27.5]");
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(10), "took {took:?}");
    Ok(format!("n=100 sd={sd:.2} p95={p95:.2}; n=10000 mean={m:.2} sd={sd_big:.2}; {:.2}s", took.as_secs_f64()))
}

fn factor_two_decomposition() -> Result<String> {
    const S: u64 = 1_000_000;
    // Chain 0 -> 1 -> 2 -> 3. The source pushes at the add instant; node 1
    // waits 20 s for its timer and node 2 waits 15 s.
    let s = Scenario {
        push_targets: vec![vec![1], vec![2], vec![3], vec![]],
        phases_us: vec![0, 20 * S, 35 * S, 0],
        period_us: 90 * S,
        link_delay_us: 0,
        source: 0,
        add_at_us: 0,
    };
    let r = propagate(&s).trial(3)?;
    ensure!(r.route_residuals_us == vec![20 * S, 15 * S], "residuals {:?}", r.route_residuals_us);
    let factor2: u64 = r.route_residuals_us.iter().sum();
    ensure!(factor2 == 35 * S, "factor-2 delay {factor2} us");
    ensure!(r.residual_timer_us + factor2 == r.delay_us, "decomposition does not add up");
    Ok(format!("residuals 20 s + 15 s = {} s, end-to-end {} s", factor2 / S, r.delay_us / S))
}

fn sybil_gate() -> Result<String> {
    const N: usize = 1000;
    let start = Instant::now();
    let dir = tempfile::tempdir()?;
    let issuer = MockIssuer::new("gov-mock", identity(5).keys);
    let pk = serde_json::to_value(&issuer.keys.public)?;
    let cfg = DoorConfig {
        listen_addr: "127.0.0.1:0".into(),
        server_key_path: dir.path().join("unused"),
        issuer_keys: vec![IssuerKey { issuer_id: "gov-mock".into(), public_key: pk.as_str().unwrap().into() }],
        session_ttl_s: 300,
        tls: Default::default(),
        hash_store_path: dir.path().join("hashes.txt"),
        public_host: None,
    };
    let values: Vec<String> = (0..N).map(|i| format!("{:03}-{:02}-{:04}", 100 + i % 800, i % 97, i)).collect();
    let disclosures: Arc<Vec<Value>> = Arc::new(
        values
            .iter()
            .enumerate()
            .map(|(i, v)| serde_json::to_value(issuer.issue("ssn", v, &format!("person-{i}"))).unwrap())
            .collect(),
    );
    // Key generation is the expensive part and the gate never looks at
    // keys before the attribute check, so registrations draw from a pool.
    let pool: Arc<Vec<Value>> =
        Arc::new((0..5).map(|i| serde_json::to_value(&identity(i).keys.public).unwrap()).collect());

    let rt = runtime();
    let (first, repeat) = rt.block_on(async {
        let door = marketpalace::door_http::start(&cfg, server().clone()).await?;
        let base = format!("http://{}", door.addr);
        let first = attempt_all(&base, &disclosures, &pool, 0).await?;
        let repeat = attempt_all(&base, &disclosures, &pool, 1).await?;
        door.shutdown().await;
        Ok::<_, anyhow::Error>((first, repeat))
    })?;

    let accepted = first.iter().filter(|o| matches!(o, Attempt::Certified(_))).count();
    ensure!(
        accepted == N,
        "{accepted} of {N} distinct registrations succeeded; first failure: {}",
        first_other(&first)
    );
    for o in &first {
        if let Attempt::Certified(cert) = o {
            ensure!(verify_certification(&server().public, cert), "certificate does not verify");
        }
    }
    let dups = repeat.iter().filter(|o| matches!(o, Attempt::Duplicate)).count();
    ensure!(dups == N, "{dups} of {N} repeats rejected as duplicate; first other outcome: {}", first_other(&repeat));

    let text = std::fs::read_to_string(dir.path().join("hashes.txt"))?;
    let lines: BTreeSet<&str> = text.lines().collect();
    ensure!(text.lines().count() == N, "hash file has {} lines", text.lines().count());
    let expected: BTreeSet<String> = values.iter().map(|v| hex_lower(&Sha256::digest(v.as_bytes()))).collect();
    ensure!(
        lines.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>() == expected,
        "hash file content differs from SHA-256 oracle"
    );
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    Ok(format!("{accepted} accepted, {dups} duplicates, {} hash lines; {:.1}s", lines.len(), took.as_secs_f64()))
}

fn hex_lower(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

enum Attempt {
    Certified(CertifiedKey),
    Duplicate,
    Other(String),
}

fn first_other(attempts: &[Attempt]) -> String {
    attempts
        .iter()
        .find_map(|a| match a {
            Attempt::Other(s) => Some(s.clone()),
            _ => None,
        })
        .unwrap_or_else(|| "none".into())
}

async fn attempt_all(
    base: &str,
    disclosures: &Arc<Vec<Value>>,
    pool: &Arc<Vec<Value>>,
    key_shift: usize,
) -> Result<Vec<Attempt>> {
    const WORKERS: usize = 8;
    let mut tasks = Vec::new();
    for w in 0..WORKERS {
        let (base, d, pool) = (base.to_owned(), disclosures.clone(), pool.clone());
        tasks.push(tokio::spawn(async move {
            let c = http();
            let mut out = Vec::new();
            for i in (w..d.len()).step_by(WORKERS) {
                out.push((i, register_once(&c, &base, &d[i], &pool[(i + key_shift) % pool.len()]).await));
            }
            out
        }));
    }
    let mut all: Vec<(usize, Attempt)> = Vec::new();
    for t in tasks {
        all.extend(t.await?);
    }
    all.sort_by_key(|(i, _)| *i);
    Ok(all.into_iter().map(|(_, a)| a).collect())
}

async fn register_once(c: &reqwest::Client, base: &str, disclosure: &Value, key: &Value) -> Attempt {
    let (s, v) = post_json(c, &format!("{base}/session"), &json!({})).await;
    if s != 201 {
        return Attempt::Other(format!("session {s}"));
    }
    let token = v["token"].as_str().unwrap_or_default().to_owned();
    let (_, v) = post_json(c, &format!("{base}/session/{token}/disclose"), disclosure).await;
    let outcome = v["result"].as_str().unwrap_or_default().to_owned();
    let (s, v) = post_json(c, &format!("{base}/session/{token}/complete"), &json!({"public_key": key})).await;
    match (outcome.as_str(), s) {
        ("accepted", 200) => {
            serde_json::from_value(v).map(Attempt::Certified).unwrap_or_else(|e| Attempt::Other(e.to_string()))
        }
        ("duplicate", 409) => Attempt::Duplicate,
        other => Attempt::Other(format!("{other:?}")),
    }
}

fn envelope_pipeline() -> Result<String> {
    const ROUNDTRIPS: usize = 1000;
    const MUTATIONS: usize = 1200;
    let mut rng = ChaCha8Rng::seed_from_u64(0xE11E);
    let ids: Vec<_> = (0..4).map(identity).collect();
    let server_pk = &server().public;

    let mut sealed = Vec::new();
    for i in 0..ROUNDTRIPS {
        let (s, r) = (i % 4, (i / 4 + 1 + i % 4) % 4);
        let mut msg = vec![0u8; rng.gen_range(0..4096)];
        rng.fill_bytes(&mut msg);
        let env = seal_envelope(&ids[s].keys.private, &ids[s].cert, &ids[r].keys.public, &msg)?;
        let wire = serde_json::to_vec(&env)?;
        let back = serde_json::from_slice(&wire)?;
        let opened = open_envelope(&ids[r].keys.private, server_pk, &back)
            .map_err(|e| anyhow!("false reject on roundtrip {i}: {e}"))?;
        ensure!(opened.plaintext == msg, "plaintext mismatch on roundtrip {i}");
        ensure!(opened.sender == ids[s].keys.public, "wrong sender on roundtrip {i}");
        sealed.push((r, env));
    }

    let fields = ["ciphertext", "wrapped_key", "cert_key", "cert_signature", "signature", "timestamp"];
    let mut per_field = [0usize; 6];
    for m in 0..MUTATIONS {
        let (r, env) = &sealed[rng.gen_range(0..sealed.len())];
        let mut bad = env.clone();
        let field = m % fields.len();
        let mask = rng.gen_range(1..=255u8);
        let flip = |bytes: &mut Vec<u8>, rng: &mut ChaCha8Rng| {
            let at = rng.gen_range(0..bytes.len());
            bytes[at] ^= mask;
        };
        match field {
            0 => flip(&mut bad.ciphertext, &mut rng),
            1 => flip(&mut bad.wrapped_key, &mut rng),
            2 => flip(&mut bad.sender_cert.public_key, &mut rng),
            3 => flip(&mut bad.sender_cert.certification, &mut rng),
            4 => flip(&mut bad.signature, &mut rng),
            _ => bad.timestamp ^= u64::from(mask) << (8 * rng.gen_range(0..8)),
        }
        ensure!(bad != *env, "mutation {m} changed nothing");
        ensure!(
            open_envelope(&ids[*r].keys.private, server_pk, &bad).is_err(),
            "false accept: {} mutation {m}",
            fields[field]
        );
        per_field[field] += 1;
    }
    Ok(format!("{ROUNDTRIPS} roundtrips, {MUTATIONS} mutations rejected {per_field:?} over {fields:?}"))
}

fn k_closest_oracle() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
    let mut checks = 0;
    for table in 0..500 {
        let size = rng.gen_range(1..=100);
        let mut target = [0u8; 32];
        rng.fill_bytes(&mut target);
        let mut seen = HashSet::new();
        let mut ids = Vec::new();
        while ids.len() < size {
            let mut id = [0u8; 32];
            rng.fill_bytes(&mut id);
            // Some ids share a long prefix with the target so the ordering
            // is decided deep in the key.
            if rng.gen_bool(0.3) {
                let keep = rng.gen_range(1..32);
                id[..keep].copy_from_slice(&target[..keep]);
            }
            if seen.insert(id) {
                ids.push(PeerId(id));
            }
        }
        let target = PeerId(target);
        for k in [1usize, 5, 20] {
            let got = k_closest_by(ids.iter().copied(), |p| *p, &target, k);
            let want = brute_force(&ids, &target, k);
            ensure!(got == want, "table {table} (size {size}) k={k}: got {got:?}, want {want:?}");
            checks += 1;
        }
    }
    Ok(format!("500 tables, {checks} queries identical to brute force"))
}

/// Distance as a pair of u128 words, compared numerically.
fn brute_force(ids: &[PeerId], target: &PeerId, k: usize) -> Vec<PeerId> {
    let word = |b: &[u8]| u128::from_be_bytes(b.try_into().unwrap());
    let key = |p: &PeerId| {
        let x: Vec<u8> = p.0.iter().zip(target.0.iter()).map(|(a, b)| a ^ b).collect();
        ((word(&x[..16]), word(&x[16..])), (word(&p.0[..16]), word(&p.0[16..])))
    };
    let mut sorted = ids.to_vec();
    sorted.sort_by_key(key);
    sorted.truncate(k);
    sorted
}

async fn listing_ids(c: &reqwest::Client, node: &NodeProc) -> Vec<String> {
    match c.get(node.url("/listings")).send().await {
        Ok(r) => r
            .json::<Vec<Value>>()
            .await
            .unwrap_or_default()
            .iter()
            .filter_map(|l| l["content_id"].as_str().map(str::to_owned))
            .collect(),
        Err(_) => Vec::new(),
    }
}

async fn peer_count(c: &reqwest::Client, node: &NodeProc) -> usize {
    get_json(c, &node.url("/peers")).await.1.as_array().map_or(0, Vec::len)
}

fn end_to_end_propagation() -> Result<String> {
    const PERIOD: f64 = 3.0;
    let start = Instant::now();
    let logs = tempfile::tempdir()?;
    let boot_dir = NodeDir::new(0, &[], PERIOD);
    let boot = NodeProc::spawn(&boot_dir.config_path, &logs.path().join("boot.log"));
    let dirs: Vec<NodeDir> = (1..4).map(|i| NodeDir::new(i, std::slice::from_ref(&boot.listen), PERIOD)).collect();
    let nodes: Vec<NodeProc> = dirs
        .iter()
        .enumerate()
        .map(|(i, d)| NodeProc::spawn(&d.config_path, &logs.path().join(format!("n{i}.log"))))
        .collect();
    let (a, rest) = nodes.split_first().unwrap();

    let rt = runtime();
    rt.block_on(async {
        let c = http();
        let joined = eventually(Duration::from_secs(15), || async {
            for n in &nodes {
                if peer_count(&c, n).await < 3 {
                    return None;
                }
            }
            Some(())
        })
        .await;
        ensure!(joined.is_some(), "peer tables did not fill after bootstrap");
        let setup = start.elapsed();

        let draft =
            json!({"title": "Vintage camera", "description": "works", "price_amount": 12000, "currency": "EUR"});
        let posted = Instant::now();
        let (s, l) = post_json(&c, &a.url("/listings"), &draft).await;
        ensure!(s == 201, "POST /listings returned {s}");
        let id = l["content_id"].as_str().unwrap().to_owned();
        let arrived = eventually(Duration::from_secs(6), || async {
            for n in rest {
                if !listing_ids(&c, n).await.contains(&id) {
                    return None;
                }
            }
            Some(posted.elapsed())
        })
        .await
        .ok_or_else(|| anyhow!("listing not on B and C within 6 s"))?;
        ensure!(arrived <= Duration::from_secs(6));

        let removed = Instant::now();
        let r = c.delete(a.url(&format!("/listings/{id}"))).send().await?;
        ensure!(r.status().as_u16() == 200, "DELETE returned {}", r.status());
        let gone = eventually(Duration::from_secs(6), || async {
            for n in nodes.iter().chain([&boot]) {
                if listing_ids(&c, n).await.contains(&id) {
                    return None;
                }
            }
            Some(removed.elapsed())
        })
        .await
        .ok_or_else(|| anyhow!("tombstone did not remove the listing everywhere within 6 s"))?;
        let total = start.elapsed();
        ensure!(total < Duration::from_secs(30), "took {total:?}");
        Ok(format!(
            "setup {:.1}s, visible on B and C after {:.2}s, removed everywhere after {:.2}s, total {:.1}s",
            setup.as_secs_f64(),
            arrived.as_secs_f64(),
            gone.as_secs_f64(),
            total.as_secs_f64()
        ))
    })
}

fn simulator_real_equivalence() -> Result<String> {
    const PERIOD: f64 = 3.0;
    const TRIALS: usize = 100;
    let logs = tempfile::tempdir()?;
    let da = NodeDir::new(0, &[], PERIOD);
    let a = NodeProc::spawn(&da.config_path, &logs.path().join("a.log"));
    let db = NodeDir::new(1, std::slice::from_ref(&a.listen), PERIOD);
    let b = NodeProc::spawn(&db.config_path, &logs.path().join("b.log"));

    let rt = runtime();
    let real = rt.block_on(async {
        let c = http();
        let paired = eventually(Duration::from_secs(10), || async {
            (peer_count(&c, &a).await == 1 && peer_count(&c, &b).await == 1).then_some(())
        })
        .await;
        ensure!(paired.is_some(), "nodes did not connect");

        // A pushes its whole store, so B's listing count tells which of
        // the sequentially posted listings have arrived.
        let watcher = {
            let (c, url) = (c.clone(), b.url("/status"));
            tokio::spawn(async move {
                let mut seen: Vec<Instant> = Vec::new();
                while seen.len() < TRIALS {
                    if let Ok(r) = c.get(&url).send().await {
                        let count = r.json::<Value>().await.ok().and_then(|v| v["listing_count"].as_u64()).unwrap_or(0);
                        let now = Instant::now();
                        while seen.len() < (count as usize).min(TRIALS) {
                            seen.push(now);
                        }
                    }
                    tokio::time::sleep(Duration::from_millis(20)).await;
                }
                seen
            })
        };

        // Posts are 1.01 periods / 10 apart, so their phase within the
        // period advances 30 ms at a time.
        let stride = Duration::from_secs_f64(PERIOD * 1.01 / 10.0);
        let t0 = tokio::time::Instant::now();
        let mut posted = Vec::new();
        for i in 0..TRIALS {
            tokio::time::sleep_until(t0 + stride * i as u32).await;
            let at = Instant::now();
            let draft =
                json!({"title": format!("item {i}"), "description": "", "price_amount": 100, "currency": "EUR"});
            let (s, _) = post_json(&c, &a.url("/listings"), &draft).await;
            ensure!(s == 201, "POST {i} returned {s}");
            posted.push(at);
        }
        let seen = tokio::time::timeout(Duration::from_secs(10), watcher)
            .await
            .map_err(|_| anyhow!("not every listing reached B"))??;
        Ok(posted.iter().zip(&seen).map(|(p, s)| s.saturating_duration_since(*p).as_secs_f64()).collect::<Vec<f64>>())
    })?;

    let cfg =
        SimConfig { num_nodes: 2, timer_period_s: PERIOD, k: 20, trials: 10_000, seed: 2026, ..Default::default() };
    let (_, sim) = run_experiment(&cfg)?;
    let d = ks(&real, &sim);
    ensure!(d <= 0.15, "KS statistic {d:.3} > 0.15 (real mean {:.3}s, sim mean {:.3}s)", mean(&real), mean(&sim));
    Ok(format!(
        "{} real trials vs {} simulated: KS {d:.3}, mean {:.3}s vs {:.3}s",
        real.len(),
        sim.len(),
        mean(&real),
        mean(&sim)
    ))
}

const NOW: u64 = 1_800_000_000;

struct Pool {
    listings: Vec<SignedListing>,
    /// Which pool listings pass verification.
    authentic: Vec<bool>,
    tombstones: Vec<Tombstone>,
    /// The pool listing each tombstone legitimately removes, if any.
    removes: Vec<Option<usize>>,
}

fn merge_pool(rogue: &KeyPair) -> Result<Pool> {
    let owner = |i: usize| identity(i);
    let draft = |t: &str, ttl: u64| ListingDraft {
        title: t.into(),
        description: String::new(),
        price_amount: 500,
        currency: "EUR".into(),
        ttl_s: ttl,
    };
    let mut listings = Vec::new();
    for i in 0..6 {
        let o = owner(i % 3);
        listings.push(create_signed_listing(&o.keys, &o.cert, &draft(&format!("item {i}"), 3600), NOW)?);
    }
    let mut authentic = vec![true; 6];
    let mut tombstones = Vec::new();
    let mut removes = Vec::new();
    for (i, l) in listings.iter().enumerate().take(3) {
        tombstones.push(Tombstone::sign(&owner(i).keys, l.content_id, NOW + i as u64));
        removes.push(Some(i));
    }
    tombstones.push(Tombstone::sign(&owner(0).keys, listings[0].content_id, NOW + 40));
    removes.push(Some(0));
    tombstones.push(Tombstone::sign(&owner(3).keys, listings[4].content_id, NOW));
    removes.push(None);
    tombstones.push(Tombstone::sign(&owner(0).keys, ContentId([7; 32]), NOW));
    removes.push(None);

    let mut tampered = listings[5].clone();
    tampered.listing.price_amount = 1;
    let mut rogue_cert = create_signed_listing(&owner(3).keys, &owner(3).cert, &draft("rogue", 3600), NOW)?;
    rogue_cert.owner_cert = certify_key(&rogue.private, &owner(3).keys.public);
    let mut impostor = listings[1].clone();
    impostor.owner_cert = owner(3).cert;
    let expired = create_signed_listing(&owner(1).keys, &owner(1).cert, &draft("stale", 60), NOW - 120)?;
    listings.extend([tampered, rogue_cert, impostor, expired]);
    authentic.extend([false; 4]);
    Ok(Pool { listings, authentic, tombstones, removes })
}

type Batch = (Vec<usize>, Vec<usize>);

fn random_batch(rng: &mut ChaCha8Rng, p: &Pool) -> Batch {
    let ls = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(0..p.listings.len())).collect();
    let ts = (0..rng.gen_range(0..5)).map(|_| rng.gen_range(0..p.tombstones.len())).collect();
    (ls, ts)
}

fn apply(store: &mut ListingStore, p: &Pool, batches: &[&Batch]) -> Result<()> {
    for (ls, ts) in batches {
        let ls: Vec<_> = ls.iter().map(|&i| p.listings[i].clone()).collect();
        let ts: Vec<_> = ts.iter().map(|&i| p.tombstones[i].clone()).collect();
        store.merge(&ls, &ts, NOW)?;
    }
    Ok(())
}

fn merge_algebra() -> Result<String> {
    const CASES: usize = 600;
    let rogue = generate_keypair(2048)?;
    let p = merge_pool(&rogue)?;
    let fresh = || ListingStore::in_memory(server().public.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0x3E76E);
    for case in 0..CASES {
        let batches: Vec<Batch> = (0..3).map(|_| random_batch(&mut rng, &p)).collect();
        let refs: Vec<&Batch> = batches.iter().collect();

        let mut reference = fresh();
        apply(&mut reference, &p, &refs)?;

        let mut shuffled = refs.clone();
        shuffled.shuffle(&mut rng);
        let mut other = fresh();
        apply(&mut other, &p, &shuffled)?;
        ensure!(other == reference, "case {case}: order {shuffled:?} differs from {refs:?}");

        let mut twice = fresh();
        apply(&mut twice, &p, &refs)?;
        apply(&mut twice, &p, &[refs[rng.gen_range(0..3)]])?;
        ensure!(twice == reference, "case {case}: re-merging changed the store");

        let union: Batch = (
            batches.iter().flat_map(|b| b.0.iter().copied()).collect(),
            batches.iter().flat_map(|b| b.1.iter().copied()).collect(),
        );
        let mut one_shot = fresh();
        apply(&mut one_shot, &p, &[&union])?;
        ensure!(one_shot == reference, "case {case}: single batch differs from three");

        let removed: HashSet<usize> = union.1.iter().filter_map(|&t| p.removes[t]).collect();
        let want: BTreeSet<ContentId> = union
            .0
            .iter()
            .filter(|&&i| p.authentic[i] && !removed.contains(&i))
            .map(|&i| p.listings[i].content_id)
            .collect();
        let got: BTreeSet<ContentId> = reference.listings().map(|l| l.content_id).collect();
        ensure!(got == want, "case {case}: visible {got:?}, expected {want:?}");
    }
    Ok(format!("{CASES} cases: permutation, re-merge and single-batch equality, visible set matches model"))
}
