use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use cmx_core::engine::config::EngineConfig;
use cmx_core::engine::control::{ControlCommand, NodeRef};
use cmx_core::engine::snapshot::Snapshot;
use cmx_core::engine::{Engine, EngineLinks, Pacing, RunOptions, RunSummary};
use cmx_server::{ServerHandle, ServerOptions};

struct Running {
    server: ServerHandle,
    links: EngineLinks,
    stop: Arc<AtomicBool>,
    engine: Option<JoinHandle<RunSummary>>,
}

impl Running {
    fn start(config: EngineConfig) -> Self {
        let mut engine = Engine::from_config(config).unwrap();
        let links = engine.links();
        let server = ServerHandle::start("127.0.0.1:0".parse().unwrap(), links.clone(), ServerOptions::default()).unwrap();
        let stop = Arc::new(AtomicBool::new(false));
        let opts = RunOptions {
            pacing: Pacing::Realtime,
            max_ticks: None,
            stop: Some(Arc::clone(&stop)),
        };
        let engine = std::thread::spawn(move || engine.run(&opts).unwrap());
        Self {
            server,
            links,
            stop,
            engine: Some(engine),
        }
    }

    fn addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr())
    }

    fn finish(mut self) -> RunSummary {
        self.stop.store(true, Ordering::Relaxed);
        self.engine.take().unwrap().join().unwrap()
    }

    fn wait_for_ticks(&self, ticks: u64) {
        let deadline = Instant::now() + Duration::from_secs(30);
        while self.links.status.processed.load(Ordering::Relaxed) < ticks {
            assert!(Instant::now() < deadline, "engine stalled");
            std::thread::sleep(Duration::from_millis(5));
        }
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.engine.take() {
            let _ = h.join();
        }
    }
}

fn small() -> EngineConfig {
    let mut c = EngineConfig::default();
    c.engine.m = 3;
    c.engine.n = 64;
    c.engine.tick_ms = 2.0;
    c.wavelet.q = 8;
    c.engine.coherence_interval = 5;
    c.engine.display_interval = 4;
    c.engine.display_tail = 16;
    c
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap()
}

/// Parses complete SSE frames out of `buf`, leaving any partial frame.
fn take_frames(buf: &mut String) -> Vec<(String, u64, String)> {
    let mut out = vec![];
    while let Some(end) = buf.find("\n\n") {
        let frame: String = buf.drain(..end + 2).collect();
        let (mut kind, mut id, mut data) = (String::new(), 0, String::new());
        for line in frame.lines() {
            if let Some(v) = line.strip_prefix("event: ") {
                kind = v.to_string();
            } else if let Some(v) = line.strip_prefix("id: ") {
                id = v.parse().unwrap();
            } else if let Some(v) = line.strip_prefix("data: ") {
                data = v.to_string();
            }
        }
        if !kind.is_empty() {
            out.push((kind, id, data));
        }
    }
    out
}

#[test]
fn healthz_reports_counters() {
    let r = Running::start(small());
    r.wait_for_ticks(5);
    let body: serde_json::Value = runtime().block_on(async {
        reqwest::get(r.url("/healthz")).await.unwrap().json().await.unwrap()
    });
    assert_eq!(body["running"], true);
    assert_eq!(body["warmed_up"], true);
    assert!(body["processed"].as_u64().unwrap() >= 5);
}

#[test]
fn event_stream_has_every_kind_and_gapless_ticks() {
    let r = Running::start(small());
    // a pinned pair guarantees coherence events regardless of gating
    let pin = ControlCommand::PinPair {
        i: NodeRef::Index(0),
        j: NodeRef::Index(1),
    };
    assert!(r.links.control.submit_wait(pin).unwrap().ok);
    let frames = runtime().block_on(async {
        let mut resp = reqwest::get(r.url("/events")).await.unwrap();
        assert_eq!(resp.status(), 200);
        assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("text/event-stream"));
        let mut buf = String::new();
        let mut frames = vec![];
        while frames.iter().filter(|f: &&(String, u64, String)| f.0 == "tick").count() < 40 {
            let chunk = resp.chunk().await.unwrap().expect("stream open");
            buf.push_str(std::str::from_utf8(&chunk).unwrap());
            frames.extend(take_frames(&mut buf));
        }
        frames
    });
    for kind in ["tick", "graph", "signals", "spectra", "coherence"] {
        assert!(frames.iter().any(|f| f.0 == kind), "no {kind} event");
    }
    let ticks: Vec<u64> = frames.iter().filter(|f| f.0 == "tick").map(|f| f.1).collect();
    assert!(ticks.windows(2).all(|w| w[1] == w[0] + 1), "{ticks:?}");
    for (_, id, data) in frames.iter().filter(|f| f.0 == "tick") {
        let v: serde_json::Value = serde_json::from_str(data).unwrap();
        assert_eq!(v["tick"].as_u64(), Some(*id));
    }
    let graph: serde_json::Value = serde_json::from_str(&frames.iter().find(|f| f.0 == "graph").unwrap().2).unwrap();
    assert_eq!(graph["layer1"].as_array().unwrap().len(), 3);
}

#[test]
fn control_round_trip_and_errors() {
    let r = Running::start(small());
    r.wait_for_ticks(1);
    runtime().block_on(async {
        let client = reqwest::Client::new();
        let post = |body: &'static str| client.post(r.url("/control")).body(body).send();

        let ok = post(r#"{"cmd":"set_threshold","theta_on":0.95,"theta_off":0.85}"#).await.unwrap();
        assert_eq!(ok.status(), 200);
        let reply: serde_json::Value = ok.json().await.unwrap();
        assert_eq!(reply["ok"], true);
        assert_eq!(reply["state"]["theta_on"], 0.95);
        assert_eq!(reply["state"]["theta_off"], 0.85);

        let pinned: serde_json::Value = post(r#"{"cmd":"pin_pair","i":"A","j":2}"#).await.unwrap().json().await.unwrap();
        assert_eq!(pinned["state"]["pinned"].as_array().unwrap().len(), 1);

        let unknown = post(r#"{"cmd":"pin_pair","i":"A","j":"Z"}"#).await.unwrap();
        assert_eq!(unknown.status(), 422);
        let v: serde_json::Value = unknown.json().await.unwrap();
        assert_eq!(v["error"]["kind"], "unknown_pair");

        let bad = post(r#"{"cmd":"set_threshold","theta_on":"high"}"#).await.unwrap();
        assert_eq!(bad.status(), 400);
        let v: serde_json::Value = bad.json().await.unwrap();
        assert_eq!(v["error"]["kind"], "invalid_command");

        let garbage = post("not json").await.unwrap();
        assert_eq!(garbage.status(), 400);
    });
}

#[test]
fn control_after_engine_is_gone() {
    let engine = Engine::from_config(small()).unwrap();
    let links = engine.links();
    let server = ServerHandle::start("127.0.0.1:0".parse().unwrap(), links, ServerOptions::default()).unwrap();
    drop(engine);
    let (code, body): (u16, serde_json::Value) = runtime().block_on(async {
        let resp = reqwest::Client::new()
            .post(format!("http://{}/control", server.local_addr()))
            .body(r#"{"cmd":"pause"}"#)
            .send()
            .await
            .unwrap();
        (resp.status().as_u16(), resp.json().await.unwrap())
    });
    assert_eq!(code, 503);
    assert_eq!(body["error"]["kind"], "engine_stopped");
    server.shutdown().unwrap();
}

#[test]
fn snapshot_binary_and_json() {
    let r = Running::start(small());
    let rt = runtime();
    let first = rt.block_on(async { reqwest::get(r.url("/snapshot")).await.unwrap().status() });
    if r.links.snapshot.read().unwrap().is_none() {
        assert_eq!(first, 404);
    }
    r.wait_for_ticks(101);
    let (bin, json) = rt.block_on(async {
        let bin = reqwest::get(r.url("/snapshot")).await.unwrap();
        assert_eq!(bin.headers()["content-type"], "application/octet-stream");
        let bin = bin.bytes().await.unwrap();
        let json: serde_json::Value = reqwest::get(r.url("/snapshot?format=json"))
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(reqwest::get(r.url("/snapshot?format=xml")).await.unwrap().status(), 400);
        (bin, json)
    });
    assert_eq!(&bin[..4], b"CMX1");
    let snap = Snapshot::decode(&bin).unwrap();
    assert_eq!(snap.labels, vec!["A", "B", "C"]);
    assert_eq!(json["labels"], serde_json::json!(["A", "B", "C"]));
    assert!(json["tick"].as_u64().unwrap() >= 63);
}

#[test]
fn stalled_client_is_dropped_without_slowing_the_engine() {
    // prototype scale so the event volume fills socket buffers quickly
    let config = EngineConfig::default();
    let period = config.tick_period();
    let r = Running::start(config);
    r.wait_for_ticks(1);

    let mut stalled = TcpStream::connect(r.addr()).unwrap();
    write!(stalled, "GET /events HTTP/1.1\r\nHost: x\r\nAccept: text/event-stream\r\n\r\n").unwrap();
    let start = Instant::now();
    let ticks_at_start = r.links.status.last_tick.load(Ordering::Relaxed);
    let deadline = start + Duration::from_secs(90);
    while r.links.publisher.stats().disconnected_slow == 0 {
        assert!(Instant::now() < deadline, "stalled subscriber never dropped");
        std::thread::sleep(Duration::from_millis(20));
    }
    // keep running a little past the disconnect
    std::thread::sleep(Duration::from_secs(1));
    let elapsed = start.elapsed();
    let ticks = r.links.status.last_tick.load(Ordering::Relaxed) - ticks_at_start;
    let expected = elapsed.as_secs_f64() / period.as_secs_f64();
    let rate = ticks as f64 / expected;
    assert!((0.95..=1.05).contains(&rate), "cadence ratio {rate:.3} ({ticks} ticks, {expected:.0} expected)");
    assert_eq!(r.links.publisher.stats().subscribers, 0);

    // the connection carried real frames before it was cut off
    stalled.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let mut head = [0u8; 256];
    let got = stalled.read(&mut head).unwrap();
    assert!(std::str::from_utf8(&head[..got]).unwrap_or("").starts_with("HTTP/1.1 200"));
    let summary = r.finish();
    assert!(summary.missed_fraction() < 0.05, "{summary:?}");
}
