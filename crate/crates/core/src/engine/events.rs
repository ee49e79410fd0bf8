use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::coherence::CoherenceField;
use crate::wavelet::ScaleGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Signals,
    Spectra,
    Graph,
    Coherence,
    Tick,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Signals => "signals",
            Self::Spectra => "spectra",
            Self::Graph => "graph",
            Self::Coherence => "coherence",
            Self::Tick => "tick",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A serialized product, shared by every subscriber.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    pub tick: u64,
    pub data: Arc<str>,
    /// Payload with wall-clock fields removed, when it differs from `data`.
    stable: Option<Arc<str>>,
}

impl Event {
    pub fn new<T: Serialize>(kind: EventKind, tick: u64, payload: &T) -> Self {
        Self {
            kind,
            tick,
            data: to_json(payload),
            stable: None,
        }
    }

    pub fn tick_report(report: &TickReport) -> Self {
        Self {
            kind: EventKind::Tick,
            tick: report.tick,
            data: to_json(report),
            stable: Some(to_json(&StableTick::from(report))),
        }
    }

    /// The payload with timing-dependent fields stripped.
    pub fn stable_data(&self) -> &str {
        self.stable.as_deref().unwrap_or(&self.data)
    }

    /// One line of the determinism log.
    pub fn log_line(&self) -> String {
        format!("{} {}", self.kind, self.stable_data())
    }

    /// Wire form of a server-sent event.
    pub fn sse_frame(&self) -> String {
        format!("event: {}\nid: {}\ndata: {}\n\n", self.kind, self.tick, self.data)
    }
}

fn to_json<T: Serialize>(v: &T) -> Arc<str> {
    serde_json::to_string(v).expect("payloads serialize").into()
}

/// Little-endian f32 array as base64.
pub fn encode_f32(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f32(text: &str) -> Result<Vec<f32>, String> {
    let bytes = B64.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{} bytes is not a whole number of f32", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalsPayload {
    pub tick: u64,
    pub labels: Vec<String>,
    pub sample_rate: f64,
    /// Most recent samples per signal, oldest first.
    pub tail: Vec<Vec<f64>>,
    pub staleness: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectraPayload {
    pub tick: u64,
    pub labels: Vec<String>,
    /// Frequency spacing of the bins in Hz.
    pub bin_hz: f64,
    pub magnitudes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer1Edge {
    pub a: usize,
    pub b: usize,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer2Edge {
    pub a: usize,
    pub b: usize,
    pub ema: f64,
    pub admitted_at: u64,
    pub last_coherence_at: Option<u64>,
    pub pinned: bool,
    /// Mean of the attached coherence field.
    pub coherence_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphPayload {
    pub tick: u64,
    pub nodes: Vec<String>,
    pub layer1: Vec<Layer1Edge>,
    pub layer2: Vec<Layer2Edge>,
    pub theta_on: f64,
    pub theta_off: f64,
    pub similarity_mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherencePayload {
    /// Tick at which the field was attached.
    pub tick: u64,
    /// Tick whose window the field was computed from.
    pub window_tick: u64,
    pub pair: [usize; 2],
    pub labels: [String; 2],
    pub q: usize,
    pub n: usize,
    pub frequencies: Vec<f64>,
    pub scales: Vec<f64>,
    /// Row-major Q×N, base64 little-endian f32.
    pub coherence: String,
    /// Row-major Q×N radians, base64 little-endian f32.
    pub phase: String,
    pub boundary: Vec<u16>,
    pub mean: f64,
    pub underflow_cells: usize,
    pub clamp_anomalies: usize,
}

impl CoherencePayload {
    pub fn new(field: &CoherenceField, grid: &ScaleGrid, labels: [String; 2], tick: u64, window_tick: u64) -> Self {
        Self {
            tick,
            window_tick,
            pair: [field.pair.0, field.pair.1],
            labels,
            q: field.scales(),
            n: field.len(),
            frequencies: field.frequencies().to_vec(),
            scales: grid.scales().to_vec(),
            coherence: encode_f32(field.coherence()),
            phase: encode_f32(field.phase()),
            boundary: field.boundary().to_vec(),
            mean: field.mean(),
            underflow_cells: field.underflow_cells,
            clamp_anomalies: field.clamp_anomalies,
        }
    }
}

/// Wall time per pipeline stage, in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub buffering_us: f64,
    pub fft_us: f64,
    pub similarity_us: f64,
    pub gating_us: f64,
    pub dispatch_us: f64,
    /// Whole tick up to publication, including attachment and persistence.
    pub total_us: f64,
}

impl StageTimings {
    /// Buffering through coherence dispatch.
    pub fn pipeline(&self) -> Duration {
        Duration::from_secs_f64(
            (self.buffering_us + self.fft_us + self.similarity_us + self.gating_us + self.dispatch_us) * 1e-6,
        )
    }

    pub fn total(&self) -> Duration {
        Duration::from_secs_f64(self.total_us * 1e-6)
    }
}

/// Conditions counted during one tick.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anomalies {
    pub rejected_samples: u32,
    pub zero_vector_pairs: u32,
    pub similarity_clamps: u32,
    pub coherence_clamps: u32,
    pub coherence_underflow_cells: u32,
    pub dropped_attachments: u32,
    pub failed_jobs: u32,
    pub failed_stages: u32,
    pub snapshot_errors: u32,
}

impl Anomalies {
    pub fn total(&self) -> u64 {
        [
            self.rejected_samples,
            self.zero_vector_pairs,
            self.similarity_clamps,
            self.coherence_clamps,
            self.dropped_attachments,
            self.failed_jobs,
            self.failed_stages,
            self.snapshot_errors,
        ]
        .iter()
        .map(|&v| v as u64)
        .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub tick: u64,
    pub timings: StageTimings,
    pub deadline_missed: bool,
    pub anomalies: Anomalies,
    pub layer2_edges: usize,
    pub admissions: usize,
    pub evictions: usize,
    pub coherence_jobs: usize,
    pub attached: usize,
}

#[derive(Serialize)]
struct StableTick {
    tick: u64,
    anomalies: Anomalies,
    layer2_edges: usize,
    admissions: usize,
    evictions: usize,
    coherence_jobs: usize,
    attached: usize,
}

impl From<&TickReport> for StableTick {
    fn from(r: &TickReport) -> Self {
        Self {
            tick: r.tick,
            anomalies: r.anomalies,
            layer2_edges: r.layer2_edges,
            admissions: r.admissions,
            evictions: r.evictions,
            coherence_jobs: r.coherence_jobs,
            attached: r.attached,
        }
    }
}
