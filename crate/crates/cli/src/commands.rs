use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use cmx_core::engine::bench::{self, BenchError, BenchOptions};
use cmx_core::engine::config::{ConfigError, EngineConfig, SourceSpec};
use cmx_core::engine::{Engine, EngineError, Pacing, RunOptions, RunSummary};
use cmx_core::par::Execution;
use cmx_server::{ServerError, ServerHandle, ServerOptions};
use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::args::{BenchArgs, Overrides, RunArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Config(_) => "config",
            Self::Runtime(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Config(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(c) => Self::Config(c),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<ServerError> for CliError {
    fn from(e: ServerError) -> Self {
        Self::Runtime(e.to_string())
    }
}

fn runtime<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{what}: {e}"))
}

/// Parses a lowercase enum name the way the config file spells it.
fn parse_name<T: DeserializeOwned>(field: &'static str, value: &str) -> Result<T, ConfigError> {
    serde_json::from_value(serde_json::Value::String(value.to_string())).map_err(|_| ConfigError::Invalid {
        field,
        reason: format!("unknown value {value:?}"),
    })
}

/// File (or defaults), then flags and `CMX_*` variables on top.
pub fn load_config(o: &Overrides) -> Result<EngineConfig, CliError> {
    let mut c = match &o.config {
        Some(path) => EngineConfig::load(path)?,
        None => EngineConfig::default(),
    };
    let e = &mut c.engine;
    if let Some(v) = o.m {
        e.m = v;
    }
    if let Some(v) = o.n {
        e.n = v;
    }
    if let Some(v) = o.tick_ms {
        e.tick_ms = v;
    }
    if let Some(v) = o.budget {
        e.coherence_budget = v;
    }
    if let Some(v) = o.interval {
        e.coherence_interval = v;
    }
    if let Some(v) = &o.mode {
        e.similarity_mode = parse_name("engine.similarity_mode", v)?;
    }
    if let Some(v) = &o.execution {
        e.execution = parse_name("engine.execution", v)?;
    }
    if let Some(v) = &o.source {
        e.source = v.parse().map_err(|reason| ConfigError::Invalid {
            field: "engine.source",
            reason,
        })?;
    }
    if let Some(v) = &o.snapshot_dir {
        e.snapshot_dir = Some(v.clone());
    }
    if let Some(v) = o.snapshot_every {
        e.snapshot_every = v;
    }
    if let Some(v) = o.seed {
        c.synth.seed = v;
    }
    if let Some(v) = o.sample_rate {
        c.synth.sample_rate_hz = v;
    }
    if let Some(v) = o.q {
        c.wavelet.q = v;
    }
    if let Some(v) = o.theta_on {
        c.gating.theta_on = v;
    }
    if let Some(v) = o.theta_off {
        c.gating.theta_off = v;
    }
    if let Some(v) = o.alpha {
        c.gating.alpha = v;
    }
    if let Some(v) = &o.listen {
        c.server.listen = v.clone();
    }
    c.validate()?;
    Ok(c)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Builds, serves and runs an engine until the source ends, the tick limit
/// is reached, or the process is interrupted.
pub fn run_engine(config: EngineConfig, args: &RunArgs, announce: bool) -> Result<RunSummary, CliError> {
    let n = config.engine.n;
    let listen = config.listen_addr()?;
    let mut engine = Engine::from_config(config)?;
    if let Some(p) = &args.event_log {
        engine.set_event_log(Box::new(create(p)?));
    }
    if let Some(p) = &args.record {
        engine.set_recorder(Box::new(create(p)?));
    }
    let server = if args.no_server {
        None
    } else {
        let opts = ServerOptions {
            static_dir: args.static_dir.clone(),
        };
        let s = ServerHandle::start(listen, engine.links(), opts)?;
        if announce {
            println!("serving events at {}", s.events_url());
            let _ = std::io::stdout().flush();
        }
        Some(s)
    };

    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed)) {
        log::warn!("interrupt handler not installed: {e}");
    }
    let opts = RunOptions {
        pacing: if args.max_rate { Pacing::MaxRate } else { Pacing::Realtime },
        max_ticks: args.max_ticks,
        stop: Some(stop),
    };
    let summary = engine.run(&opts)?;

    if summary.source_ended && !summary.warmed_up {
        log::warn!(
            "source ended during warm-up after {} of {n} samples; nothing was processed",
            summary.ingested
        );
    }
    if let Some(path) = &args.final_snapshot {
        match engine.capture_snapshot() {
            Some(snap) => {
                let mut out = create(path)?;
                out.write_all(&snap.encode())
                    .and_then(|_| out.flush())
                    .map_err(runtime("final snapshot"))?;
            }
            None => log::warn!("no final snapshot: the window never filled"),
        }
    }
    if let Some(s) = server {
        s.shutdown()?;
    }
    log::info!(
        "processed {} ticks, {} missed ({:.2}%), stages 1-5 mean {} us",
        summary.processed,
        summary.missed_deadlines,
        100.0 * summary.missed_fraction(),
        summary.mean_pipeline.as_micros()
    );
    Ok(summary)
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let config = load_config(&args.overrides)?;
    run_engine(config, args, true).map(drop)
}

pub fn demo(args: &RunArgs) -> Result<(), CliError> {
    if args.overrides.source.is_some() {
        return Err(CliError::Usage("demo always uses the synthetic source".into()));
    }
    let mut config = load_config(&args.overrides)?;
    config.engine.source = SourceSpec::Synth;
    run_engine(config, args, true).map(drop)
}

pub fn replay(file: &Path, args: &RunArgs) -> Result<(), CliError> {
    if args.overrides.source.is_some() {
        return Err(CliError::Usage("replay reads its file; --source does not apply".into()));
    }
    let mut config = load_config(&args.overrides)?;
    config.engine.source = SourceSpec::File(file.to_path_buf());
    run_engine(config, args, true).map(drop)
}

pub fn validate_config(file: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let mut o = overrides.clone();
    o.config = Some(file.to_path_buf());
    load_config(&o)?;
    println!("ok: {}", file.display());
    Ok(())
}

pub fn bench(args: &BenchArgs) -> Result<(), CliError> {
    let opts = BenchOptions {
        n_list: args.n.clone().unwrap_or_else(|| bench::DEFAULT_N.to_vec()),
        q_list: args.q.clone().unwrap_or_else(|| bench::DEFAULT_Q.to_vec()),
        reps: args.reps,
        seed: args.seed,
        exec: if args.parallel { Execution::Parallel } else { Execution::Sequential },
    };
    let rows = bench::benchmark_coherence(&opts).map_err(|e| match e {
        BenchError::Usage(m) => CliError::Usage(m),
        other => CliError::Runtime(other.to_string()),
    })?;
    let written = match &args.out {
        Some(path) => bench::write_csv(create(path)?, &rows),
        None => bench::write_csv(std::io::stdout().lock(), &rows),
    };
    written.map_err(runtime("bench output"))
}
