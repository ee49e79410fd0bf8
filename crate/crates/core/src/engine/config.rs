use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::SmoothingSpec;
use crate::graph::GatingParams;
use crate::ingest::{SynthSpec, SynthSpecBuilder};
use crate::par::Execution;
use crate::spectral::{SimilarityMode, SimilarityOptions};
use crate::wavelet::{default_band, MorletParams, Normalization, ScaleGrid};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// Where tick samples come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SourceSpec {
    /// Seeded sine-mixture generator from `[synth]`.
    Synth,
    /// NDJSON records on standard input.
    Stdin,
    /// NDJSON records from a TCP peer.
    Tcp(String),
    /// A recorded NDJSON session, grouped into ticks by repeated labels.
    File(PathBuf),
}

impl TryFrom<String> for SourceSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<SourceSpec> for String {
    fn from(s: SourceSpec) -> String {
        s.to_string()
    }
}

impl std::str::FromStr for SourceSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "synth" => Ok(Self::Synth),
            "stdin" | "-" => Ok(Self::Stdin),
            _ => {
                if let Some(addr) = s.strip_prefix("tcp://") {
                    Ok(Self::Tcp(addr.to_string()))
                } else if let Some(path) = s.strip_prefix("file:") {
                    Ok(Self::File(PathBuf::from(path)))
                } else {
                    Err(format!("unknown source {s:?} (synth, stdin, tcp://host:port, file:path)"))
                }
            }
        }
    }
}

impl std::fmt::Display for SourceSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Synth => f.write_str("synth"),
            Self::Stdin => f.write_str("stdin"),
            Self::Tcp(a) => write!(f, "tcp://{a}"),
            Self::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub m: usize,
    pub n: usize,
    pub tick_ms: f64,
    pub coherence_interval: u64,
    pub coherence_budget: usize,
    pub similarity_mode: SimilarityMode,
    pub exclude_dc: bool,
    pub execution: Execution,
    pub source: SourceSpec,
    pub snapshot_dir: Option<PathBuf>,
    pub snapshot_every: u64,
    /// Ticks between `signals`/`spectra` events.
    pub display_interval: u64,
    /// Samples per signal in each `signals` event, capped at `n`.
    pub display_tail: usize,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            m: 8,
            n: 256,
            tick_ms: 10.0,
            coherence_interval: 25,
            coherence_budget: 1,
            similarity_mode: SimilarityMode::Magnitude,
            exclude_dc: false,
            execution: Execution::default(),
            source: SourceSpec::Synth,
            snapshot_dir: None,
            snapshot_every: 1000,
            display_interval: 10,
            display_tail: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub sample_rate_hz: f64,
    pub components_per_signal: usize,
    pub events_min: usize,
    pub events_max: usize,
    pub duration_min: u64,
    pub duration_max: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            seed: 0,
            sample_rate_hz: 100.0,
            components_per_signal: 3,
            events_min: 1,
            events_max: 3,
            duration_min: 100,
            duration_max: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveletSection {
    pub q: usize,
    /// Lowest analysed frequency in Hz; defaults to two cycles per window.
    pub fmin: Option<f64>,
    /// Highest analysed frequency in Hz; defaults to 0.45 of the sample rate.
    pub fmax: Option<f64>,
    pub omega0: f64,
    pub normalization: Normalization,
    /// Time-smoothing sigma as a multiple of scale.
    pub time_factor: f64,
    /// Scale-smoothing width in octaves.
    pub scale_octaves: f64,
}

impl Default for WaveletSection {
    fn default() -> Self {
        Self {
            q: 32,
            fmin: None,
            fmax: None,
            omega0: 6.0,
            normalization: Normalization::Amplitude,
            time_factor: std::f64::consts::FRAC_1_SQRT_2,
            scale_octaves: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub listen: String,
    /// Events buffered per subscriber before it is disconnected.
    pub queue_depth: usize,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            queue_depth: 64,
        }
    }
}

/// Complete engine configuration; every section is optional in the file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub engine: EngineSection,
    pub synth: SynthSection,
    pub gating: GatingParams,
    pub wavelet: WaveletSection,
    pub server: ServerSection,
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn tick_period(&self) -> Duration {
        Duration::from_secs_f64(self.engine.tick_ms / 1000.0)
    }

    pub fn sample_rate(&self) -> f64 {
        self.synth.sample_rate_hz
    }

    pub fn similarity_options(&self) -> SimilarityOptions {
        SimilarityOptions {
            mode: self.engine.similarity_mode,
            exclude_dc: self.engine.exclude_dc,
        }
    }

    pub fn morlet(&self) -> MorletParams {
        MorletParams {
            omega0: self.wavelet.omega0,
            normalization: self.wavelet.normalization,
        }
    }

    pub fn band(&self) -> (f64, f64) {
        let (lo, hi) = default_band(self.engine.n, self.sample_rate());
        (self.wavelet.fmin.unwrap_or(lo), self.wavelet.fmax.unwrap_or(hi))
    }

    pub fn scale_grid(&self) -> Result<ScaleGrid, ConfigError> {
        let (lo, hi) = self.band();
        ScaleGrid::build(lo, hi, self.wavelet.q, self.sample_rate(), &self.morlet())
            .map_err(|e| invalid("wavelet", e.to_string()))
    }

    pub fn smoothing(&self, grid: &ScaleGrid) -> SmoothingSpec {
        SmoothingSpec::with_constants(grid, self.wavelet.time_factor, self.wavelet.scale_octaves)
    }

    pub fn synth_spec(&self) -> Result<SynthSpec, ConfigError> {
        let s = &self.synth;
        SynthSpecBuilder::new(self.engine.m)
            .sample_rate(s.sample_rate_hz)
            .seed(s.seed)
            .components_per_signal(s.components_per_signal)
            .events(s.events_min, s.events_max)
            .duration(s.duration_min, s.duration_max)
            .build()
            .map_err(|e| invalid("synth", e.to_string()))
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.server
            .listen
            .parse()
            .map_err(|e| invalid("server.listen", format!("{:?}: {e}", self.server.listen)))
    }

    /// The one validator shared by the engine and `validate-config`.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = &self.engine;
        if e.m < 2 {
            return Err(invalid("engine.m", format!("need at least 2 signals, got {}", e.m)));
        }
        if e.n < 4 || !e.n.is_multiple_of(2) {
            return Err(invalid("engine.n", format!("window must be even and >= 4, got {}", e.n)));
        }
        if !(e.tick_ms > 0.0 && e.tick_ms.is_finite()) {
            return Err(invalid("engine.tick_ms", format!("must be positive, got {}", e.tick_ms)));
        }
        if e.coherence_interval == 0 {
            return Err(invalid("engine.coherence_interval", "must be at least 1"));
        }
        if e.snapshot_every == 0 {
            return Err(invalid("engine.snapshot_every", "must be at least 1"));
        }
        if e.display_interval == 0 {
            return Err(invalid("engine.display_interval", "must be at least 1"));
        }
        if e.display_tail == 0 {
            return Err(invalid("engine.display_tail", "must be at least 1"));
        }
        if let SourceSpec::Tcp(a) = &e.source {
            if a.is_empty() {
                return Err(invalid("engine.source", "tcp source needs host:port"));
            }
        }
        self.gating
            .validate()
            .map_err(|err| invalid("gating", err.to_string()))?;
        let fs = self.sample_rate();
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(invalid("synth.sample_rate_hz", format!("must be positive, got {fs}")));
        }
        if e.source == SourceSpec::Synth {
            self.synth_spec()?;
        }
        self.morlet()
            .validate()
            .map_err(|err| invalid("wavelet.omega0", err.to_string()))?;
        if self.wavelet.q == 0 {
            return Err(invalid("wavelet.q", "need at least one scale"));
        }
        if !(self.wavelet.time_factor >= 0.0 && self.wavelet.time_factor.is_finite()) {
            return Err(invalid("wavelet.time_factor", "must be finite and >= 0"));
        }
        if !(self.wavelet.scale_octaves >= 0.0 && self.wavelet.scale_octaves.is_finite()) {
            return Err(invalid("wavelet.scale_octaves", "must be finite and >= 0"));
        }
        let grid = self.scale_grid()?;
        // a dry run on a dummy field exercises the kernel-width checks
        let spec = self.smoothing(&grid);
        let mut probe = vec![rustfft::num_complex::Complex64::new(1.0, 0.0); grid.len() * e.n];
        crate::coherence::Smoother::new(Execution::Sequential)
            .smooth(&mut probe, e.n, &spec)
            .map_err(|err| invalid("wavelet", err.to_string()))?;
        if self.server.queue_depth == 0 {
            return Err(invalid("server.queue_depth", "must be at least 1"));
        }
        self.listen_addr()?;
        Ok(())
    }
}
