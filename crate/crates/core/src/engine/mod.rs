//! Per-tick pipeline driver, publication, steering and persistence.

pub mod bench;
pub mod config;
pub mod control;
pub mod events;
pub mod publisher;
pub mod snapshot;
pub mod source;
pub mod workers;

use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::Receiver;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::graph::{GatingParams, MultiplexGraph, Pair};
use crate::ingest::{snapshot as snapshot_buffers, DataMatrix, RingBuffer, SignalRegistry};
use crate::spectral::{rfft_rows, similarity_matrix, SimilarityMode, SimilarityOptions, SpectralWorkspace, Spectrum};

pub use config::{ConfigError, EngineConfig, SourceSpec};
pub use control::{ControlCommand, ControlError, ControlHandle, ControlReply, ControlState};
pub use events::{Anomalies, Event, EventKind, StageTimings, TickReport};
pub use publisher::{Publisher, Subscription};
pub use snapshot::{Snapshot, SnapshotError};
pub use source::{Poll, SampleSource, SourceError};

use control::{control_channel, Envelope, Steerable};
use events::{CoherencePayload, GraphPayload, Layer1Edge, Layer2Edge, SignalsPayload, SpectraPayload};
use workers::{AnalysisPlan, CoherencePool};

/// Ticks between refreshes of the in-memory snapshot served to clients.
pub const LIVE_SNAPSHOT_EVERY: u64 = 100;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Outcome of one call to [`Engine::step`].
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Processed(TickReport),
    /// A sample was ingested but some buffer is not yet full.
    WarmingUp { filled: usize, needed: usize },
    /// No sample this tick.
    Waiting,
    Paused,
    Ended,
}

/// Counters readable from other threads.
#[derive(Debug, Default)]
pub struct EngineStatus {
    pub ingested: AtomicU64,
    pub processed: AtomicU64,
    pub last_tick: AtomicU64,
    pub missed_deadlines: AtomicU64,
    pub warmed_up: AtomicBool,
    pub paused: AtomicBool,
    pub running: AtomicBool,
}

impl EngineStatus {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "ingested": self.ingested.load(Ordering::Relaxed),
            "processed": self.processed.load(Ordering::Relaxed),
            "last_tick": self.last_tick.load(Ordering::Relaxed),
            "missed_deadlines": self.missed_deadlines.load(Ordering::Relaxed),
            "warmed_up": self.warmed_up.load(Ordering::Relaxed),
            "paused": self.paused.load(Ordering::Relaxed),
            "running": self.running.load(Ordering::Relaxed),
        })
    }
}

/// Latest snapshot, shared with the HTTP layer.
pub type SnapshotCell = Arc<RwLock<Option<Arc<Snapshot>>>>;

/// Handles the network layer needs; all cheap to clone.
#[derive(Debug, Clone)]
pub struct EngineLinks {
    pub publisher: Arc<Publisher>,
    pub control: ControlHandle,
    pub snapshot: SnapshotCell,
    pub status: Arc<EngineStatus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    /// One tick per configured period.
    Realtime,
    /// As fast as the source allows.
    MaxRate,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub pacing: Pacing,
    /// Stop after this many processed ticks.
    pub max_ticks: Option<u64>,
    pub stop: Option<Arc<AtomicBool>>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            pacing: Pacing::Realtime,
            max_ticks: None,
            stop: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub ingested: u64,
    pub processed: u64,
    pub missed_deadlines: u64,
    pub mean_pipeline: Duration,
    pub max_pipeline: Duration,
    pub mean_total: Duration,
    pub warmed_up: bool,
    pub source_ended: bool,
    pub anomalies: u64,
}

impl RunSummary {
    pub fn missed_fraction(&self) -> f64 {
        if self.processed == 0 {
            0.0
        } else {
            self.missed_deadlines as f64 / self.processed as f64
        }
    }
}

struct Attached {
    pair: Pair,
    payload: CoherencePayload,
}

pub struct Engine {
    config: EngineConfig,
    registry: SignalRegistry,
    buffers: Vec<RingBuffer>,
    source: Box<dyn SampleSource>,
    spectral: SpectralWorkspace,
    graph: MultiplexGraph,
    gating: GatingParams,
    mode: SimilarityMode,
    paused: bool,
    plan: Arc<AnalysisPlan>,
    pool: CoherencePool,
    publisher: Arc<Publisher>,
    control: ControlHandle,
    commands: Receiver<Envelope>,
    latest: SnapshotCell,
    status: Arc<EngineStatus>,
    ingested: u64,
    spectra: Option<Vec<Spectrum>>,
    event_log: Option<Box<dyn Write + Send>>,
    recorder: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("m", &self.config.engine.m)
            .field("n", &self.config.engine.n)
            .field("ingested", &self.ingested)
            .finish()
    }
}

impl Engine {
    /// Builds an engine reading from `source`; the configured source is
    /// ignored.
    pub fn new(config: EngineConfig, source: Box<dyn SampleSource>) -> Result<Self, EngineError> {
        config.validate()?;
        let m = config.engine.m;
        let n = config.engine.n;
        let grid = config.scale_grid()?;
        let plan = Arc::new(AnalysisPlan {
            smoothing: config.smoothing(&grid),
            params: config.morlet(),
            grid,
        });
        let spectral = SpectralWorkspace::new(n).map_err(|e| ConfigError::Invalid {
            field: "engine.n",
            reason: e.to_string(),
        })?;
        let (control, commands) = control_channel();
        let exec = config.engine.execution;
        Ok(Self {
            registry: SignalRegistry::with_default_labels(m),
            buffers: (0..m).map(|_| RingBuffer::new(n)).collect(),
            source,
            spectral,
            graph: MultiplexGraph::new(m),
            gating: config.gating,
            mode: config.engine.similarity_mode,
            paused: false,
            pool: CoherencePool::new(config.engine.coherence_budget.max(1), Arc::clone(&plan), exec),
            plan,
            publisher: Publisher::new(config.server.queue_depth),
            control,
            commands,
            latest: Arc::new(RwLock::new(None)),
            status: Arc::new(EngineStatus::default()),
            ingested: 0,
            spectra: None,
            event_log: None,
            recorder: None,
            config,
        })
    }

    /// Builds an engine and opens the source named in the config.
    pub fn from_config(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let registry = SignalRegistry::with_default_labels(config.engine.m);
        let source: Box<dyn SampleSource> = match &config.engine.source {
            SourceSpec::Synth => Box::new(source::SynthSource::new(config.synth_spec()?)),
            SourceSpec::Stdin => Box::new(source::StreamSource::stdin(registry)),
            SourceSpec::Tcp(addr) => Box::new(source::StreamSource::tcp(addr, registry)?),
            SourceSpec::File(path) => Box::new(source::ReplaySource::open(path, registry)?),
        };
        Self::new(config, source)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn registry(&self) -> &SignalRegistry {
        &self.registry
    }

    pub fn graph(&self) -> &MultiplexGraph {
        &self.graph
    }

    pub fn gating(&self) -> GatingParams {
        self.gating
    }

    pub fn similarity_mode(&self) -> SimilarityMode {
        self.mode
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn plan(&self) -> &AnalysisPlan {
        &self.plan
    }

    /// Samples ingested so far; the next sample gets this tick index.
    pub fn ingested(&self) -> u64 {
        self.ingested
    }

    pub fn links(&self) -> EngineLinks {
        EngineLinks {
            publisher: Arc::clone(&self.publisher),
            control: self.control.clone(),
            snapshot: Arc::clone(&self.latest),
            status: Arc::clone(&self.status),
        }
    }

    pub fn publisher(&self) -> &Arc<Publisher> {
        &self.publisher
    }

    pub fn control(&self) -> ControlHandle {
        self.control.clone()
    }

    /// Snapshot of the current state; `None` until the window is full.
    pub fn capture_snapshot(&self) -> Option<Snapshot> {
        let data = snapshot_buffers(&self.buffers).ok()?;
        let tick = self.ingested.checked_sub(1)?;
        Some(Snapshot::capture(tick, &self.registry, &data, &self.graph, self.gating))
    }

    pub fn latest_snapshot(&self) -> Option<Arc<Snapshot>> {
        self.latest.read().unwrap().clone()
    }

    /// Writes one [`Event::log_line`] per published event.
    pub fn set_event_log(&mut self, w: Box<dyn Write + Send>) {
        self.event_log = Some(w);
    }

    /// Writes every ingested row in the feed format, for later replay.
    pub fn set_recorder(&mut self, w: Box<dyn Write + Send>) {
        self.recorder = Some(w);
    }

    /// Applies a command immediately, as the tick driver would.
    pub fn apply_control(&mut self, cmd: &ControlCommand) -> Result<(), ControlError> {
        let tick = self.ingested;
        let r = self.steer().apply(cmd, tick);
        self.status.paused.store(self.paused, Ordering::Relaxed);
        r
    }

    fn steer(&mut self) -> Steerable<'_> {
        Steerable {
            gating: &mut self.gating,
            mode: &mut self.mode,
            paused: &mut self.paused,
            graph: &mut self.graph,
            registry: &self.registry,
        }
    }

    fn drain_commands(&mut self) {
        while let Ok(env) = self.commands.try_recv() {
            let tick = self.ingested;
            let result = self.steer().apply(&env.command, tick);
            let state = self.steer().state();
            if let Some(reply) = env.reply {
                reply(ControlReply {
                    ok: result.is_ok(),
                    effective_tick: tick,
                    error: result.err(),
                    state,
                });
            }
        }
        self.status.paused.store(self.paused, Ordering::Relaxed);
    }

    fn wants_events(&self) -> bool {
        self.event_log.is_some() || self.publisher.has_subscribers()
    }

    /// Runs one tick: drain commands, ingest one row, and once warm run the
    /// full pipeline.
    pub fn step(&mut self) -> Result<Step, EngineError> {
        self.drain_commands();
        if self.paused {
            return Ok(Step::Paused);
        }
        let start = Instant::now();
        let row = match self.source.poll()? {
            Poll::Row(r) => r,
            Poll::Pending => return Ok(Step::Waiting),
            Poll::Ended => {
                self.settle();
                return Ok(Step::Ended);
            }
        };
        let tick = self.ingested;
        self.ingested += 1;
        self.status.ingested.store(self.ingested, Ordering::Relaxed);

        let mut anomalies = Anomalies::default();
        let mut timings = StageTimings::default();

        if let Some(rec) = self.recorder.as_mut() {
            source::write_tick(rec, &self.registry, &row)?;
        }
        for (buf, &x) in self.buffers.iter_mut().zip(&row) {
            if buf.push(x).is_err() {
                anomalies.rejected_samples += 1;
                let held = buf.newest().unwrap_or(0.0);
                buf.push(held).expect("held value is finite");
            }
        }
        if row.len() != self.buffers.len() {
            anomalies.failed_stages += 1;
        }
        let filled = self.buffers.iter().map(RingBuffer::filled).min().unwrap_or(0);
        if filled < self.config.engine.n {
            return Ok(Step::WarmingUp {
                filled,
                needed: self.config.engine.n,
            });
        }
        self.status.warmed_up.store(true, Ordering::Relaxed);

        // coherence computed from the previous window lands first
        let attached = self.attach_results(tick, &mut anomalies);

        let data = Arc::new(snapshot_buffers(&self.buffers).expect("buffers are full"));
        timings.buffering_us = us(start.elapsed());

        let t = Instant::now();
        let exec = self.config.engine.execution;
        match rfft_rows(&data, &self.spectral, exec) {
            Ok(s) => self.spectra = Some(s),
            Err(e) => {
                log::warn!("tick {tick}: fft stage failed: {e}");
                anomalies.failed_stages += 1;
            }
        }
        timings.fft_us = us(t.elapsed());

        let t = Instant::now();
        let opts = SimilarityOptions {
            mode: self.mode,
            exclude_dc: self.config.engine.exclude_dc,
        };
        if let Some(spectra) = &self.spectra {
            match similarity_matrix(spectra, opts, exec) {
                Ok(out) => {
                    anomalies.zero_vector_pairs = out.zero_pairs.len() as u32;
                    anomalies.similarity_clamps = out.clamp_anomalies as u32;
                    if self.graph.update_layer1(&out.matrix).is_err() {
                        anomalies.failed_stages += 1;
                    }
                }
                Err(e) => {
                    log::warn!("tick {tick}: similarity stage failed: {e}");
                    anomalies.failed_stages += 1;
                }
            }
        }
        timings.similarity_us = us(t.elapsed());

        let t = Instant::now();
        let gate = match self.graph.gate_layer2(self.gating, tick) {
            Ok(g) => g,
            Err(e) => {
                log::warn!("tick {tick}: gating failed: {e}");
                anomalies.failed_stages += 1;
                Default::default()
            }
        };
        timings.gating_us = us(t.elapsed());

        let t = Instant::now();
        let e = &self.config.engine;
        // one coherence cycle every `coherence_interval` ticks of the sample clock
        let selected = if tick.is_multiple_of(e.coherence_interval) {
            self.graph.select_coherence_pairs(e.coherence_budget, e.coherence_interval, tick)
        } else {
            Vec::new()
        };
        for &p in &selected {
            self.pool.dispatch(p, tick, Arc::clone(&data));
        }
        timings.dispatch_us = us(t.elapsed());

        let mut report = TickReport {
            tick,
            timings,
            deadline_missed: false,
            anomalies,
            layer2_edges: self.graph.layer2().len(),
            admissions: gate.admissions.len(),
            evictions: gate.evictions.len(),
            coherence_jobs: selected.len(),
            attached: attached.len(),
        };

        let mut events = Vec::new();
        if self.wants_events() {
            events = self.build_events(tick, &data, attached);
        }
        self.persist(tick, &data, &mut report.anomalies);

        report.timings.total_us = us(start.elapsed());
        report.deadline_missed = report.timings.total() > self.config.tick_period();
        if !events.is_empty() {
            events.push(Event::tick_report(&report));
            self.publisher.publish(&events);
            if let Some(log) = self.event_log.as_mut() {
                for ev in &events {
                    writeln!(log, "{}", ev.log_line())?;
                }
            }
        }

        self.status.processed.fetch_add(1, Ordering::Relaxed);
        self.status.last_tick.store(tick, Ordering::Relaxed);
        if report.deadline_missed {
            self.status.missed_deadlines.fetch_add(1, Ordering::Relaxed);
        }
        Ok(Step::Processed(report))
    }

    /// Attaches coherence still in flight so the graph is final.
    pub fn settle(&mut self) {
        self.attach_results(self.ingested.saturating_sub(1), &mut Anomalies::default());
    }

    fn attach_results(&mut self, tick: u64, anomalies: &mut Anomalies) -> Vec<Attached> {
        let mut out = Vec::new();
        for r in self.pool.collect() {
            match r.outcome {
                Ok(field) => {
                    anomalies.coherence_clamps += field.clamp_anomalies as u32;
                    anomalies.coherence_underflow_cells += field.underflow_cells as u32;
                    let labels = [self.label(r.pair.a), self.label(r.pair.b)];
                    let payload = CoherencePayload::new(&field, &self.plan.grid, labels, tick, r.window_tick);
                    match self.graph.attach_coherence(r.pair, Arc::new(field), r.window_tick) {
                        Ok(()) => out.push(Attached { pair: r.pair, payload }),
                        Err(_) => anomalies.dropped_attachments += 1,
                    }
                }
                Err(e) => {
                    log::warn!("coherence job for {} failed: {e}", r.pair);
                    anomalies.failed_jobs += 1;
                    self.graph.mark_coherence_attempt(r.pair, r.window_tick);
                }
            }
        }
        out
    }

    fn label(&self, i: usize) -> String {
        self.registry.get(i).map(|s| s.label.clone()).unwrap_or_default()
    }

    fn build_events(&self, tick: u64, data: &DataMatrix, attached: Vec<Attached>) -> Vec<Event> {
        let mut events: Vec<Event> = attached
            .into_iter()
            .map(|a| {
                debug_assert!(self.graph.edge(a.pair).is_some());
                Event::new(EventKind::Coherence, tick, &a.payload)
            })
            .collect();
        let labels: Vec<String> = self.registry.labels().map(str::to_string).collect();
        let graph = GraphPayload {
            tick,
            nodes: labels.clone(),
            layer1: self
                .graph
                .layer1_edges()
                .map(|(p, w)| Layer1Edge { a: p.a, b: p.b, w })
                .collect(),
            layer2: self
                .graph
                .layer2()
                .values()
                .map(|e| Layer2Edge {
                    a: e.pair.a,
                    b: e.pair.b,
                    ema: e.ema,
                    admitted_at: e.admitted_at,
                    last_coherence_at: e.last_coherence_at,
                    pinned: self.graph.pinned().contains(&e.pair),
                    coherence_mean: e.coherence.as_ref().map(|f| f.mean()),
                })
                .collect(),
            theta_on: self.gating.theta_on,
            theta_off: self.gating.theta_off,
            similarity_mode: self.mode.to_string(),
        };
        events.push(Event::new(EventKind::Graph, tick, &graph));

        if tick.is_multiple_of(self.config.engine.display_interval) {
            let k = self.config.engine.display_tail.min(self.config.engine.n);
            let n = data.cols();
            let mut staleness = self.source.staleness();
            staleness.resize(data.rows(), 0);
            let signals = SignalsPayload {
                tick,
                labels: labels.clone(),
                sample_rate: self.config.sample_rate(),
                tail: (0..data.rows()).map(|i| data.row(i)[n - k..].to_vec()).collect(),
                staleness,
            };
            events.push(Event::new(EventKind::Signals, tick, &signals));
            if let Some(spectra) = &self.spectra {
                let spectra = SpectraPayload {
                    tick,
                    labels,
                    bin_hz: self.config.sample_rate() / n as f64,
                    magnitudes: spectra.iter().map(|s| s.magnitudes().to_vec()).collect(),
                };
                events.push(Event::new(EventKind::Spectra, tick, &spectra));
            }
        }
        events
    }

    fn persist(&mut self, tick: u64, data: &DataMatrix, anomalies: &mut Anomalies) {
        let every = self.config.engine.snapshot_every;
        let to_disk = self.config.engine.snapshot_dir.is_some() && tick.is_multiple_of(every);
        let live = self.latest.read().unwrap().is_none() || tick.is_multiple_of(LIVE_SNAPSHOT_EVERY);
        if !to_disk && !live {
            return;
        }
        let snap = Arc::new(Snapshot::capture(tick, &self.registry, data, &self.graph, self.gating));
        if to_disk {
            let dir = self.config.engine.snapshot_dir.as_ref().unwrap();
            if let Err(e) = snap.write_to_dir(dir) {
                log::error!("snapshot at tick {tick} not written: {e}");
                anomalies.snapshot_errors += 1;
            }
        }
        *self.latest.write().unwrap() = Some(snap);
    }

    /// Drives [`Engine::step`] until the source ends, `max_ticks` ticks have
    /// been processed, or `stop` is raised.
    pub fn run(&mut self, opts: &RunOptions) -> Result<RunSummary, EngineError> {
        self.status.running.store(true, Ordering::Relaxed);
        let result = self.run_inner(opts);
        self.status.running.store(false, Ordering::Relaxed);
        result
    }

    fn run_inner(&mut self, opts: &RunOptions) -> Result<RunSummary, EngineError> {
        let period = self.config.tick_period();
        let mut summary = RunSummary::default();
        let (mut pipeline_sum, mut total_sum) = (Duration::ZERO, Duration::ZERO);
        let mut next = Instant::now();
        loop {
            if opts.stop.as_ref().is_some_and(|s| s.load(Ordering::Relaxed)) {
                break;
            }
            if opts.max_ticks.is_some_and(|m| summary.processed >= m) {
                break;
            }
            let step = self.step()?;
            match &step {
                Step::Processed(r) => {
                    summary.processed += 1;
                    summary.missed_deadlines += r.deadline_missed as u64;
                    summary.anomalies += r.anomalies.total();
                    let p = r.timings.pipeline();
                    pipeline_sum += p;
                    summary.max_pipeline = summary.max_pipeline.max(p);
                    total_sum += r.timings.total();
                }
                Step::Ended => {
                    summary.source_ended = true;
                    break;
                }
                _ => {}
            }
            match opts.pacing {
                Pacing::Realtime => {
                    next += period;
                    let now = Instant::now();
                    if next > now {
                        std::thread::sleep(next - now);
                    } else if now - next > period {
                        // fell far behind; resynchronise instead of bursting
                        next = now;
                    }
                }
                Pacing::MaxRate => {
                    if matches!(step, Step::Waiting | Step::Paused) {
                        std::thread::sleep(Duration::from_millis(1));
                    }
                }
            }
        }
        self.settle();
        if let Some(log) = self.event_log.as_mut() {
            log.flush()?;
        }
        if let Some(rec) = self.recorder.as_mut() {
            rec.flush()?;
        }
        summary.ingested = self.ingested;
        summary.warmed_up = self.status.warmed_up.load(Ordering::Relaxed);
        if summary.processed > 0 {
            summary.mean_pipeline = pipeline_sum / summary.processed as u32;
            summary.mean_total = total_sum / summary.processed as u32;
        }
        Ok(summary)
    }
}

fn us(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}
