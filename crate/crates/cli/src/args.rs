use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cmx", version, about = "Streaming multiplex similarity graph with gated wavelet coherence")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the engine on the source named in the config.
    Run(RunArgs),
    /// Run the eight-signal synthetic prototype and serve it.
    Demo(RunArgs),
    /// Feed a recorded NDJSON session through the engine.
    Replay {
        /// Recorded session, one `{"id": .., "v": ..}` record per line.
        file: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Time wavelet coherence over a grid of window and scale counts.
    Bench(BenchArgs),
    /// Check a config file with the engine's own validator.
    ValidateConfig {
        file: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// Settings that override the config file. Each also reads `CMX_<NAME>`.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Config file (TOML with [engine], [synth], [gating], [wavelet], [server]).
    #[arg(long, env = "CMX_CONFIG")]
    pub config: Option<PathBuf>,
    /// Number of signals.
    #[arg(long, env = "CMX_M")]
    pub m: Option<usize>,
    /// Window length in samples; must be even.
    #[arg(long, env = "CMX_N")]
    pub n: Option<usize>,
    /// Tick period in milliseconds.
    #[arg(long, env = "CMX_TICK_MS")]
    pub tick_ms: Option<f64>,
    /// Synthetic generator seed.
    #[arg(long, env = "CMX_SEED")]
    pub seed: Option<u64>,
    /// Sample rate in Hz.
    #[arg(long, env = "CMX_SAMPLE_RATE")]
    pub sample_rate: Option<f64>,
    /// Wavelet scales.
    #[arg(long, env = "CMX_Q")]
    pub q: Option<usize>,
    #[arg(long, env = "CMX_THETA_ON")]
    pub theta_on: Option<f64>,
    #[arg(long, env = "CMX_THETA_OFF")]
    pub theta_off: Option<f64>,
    /// EMA smoothing factor in (0, 1].
    #[arg(long, env = "CMX_ALPHA")]
    pub alpha: Option<f64>,
    /// Coherence pairs per cycle.
    #[arg(long, env = "CMX_BUDGET")]
    pub budget: Option<usize>,
    /// Ticks between coherence cycles.
    #[arg(long, env = "CMX_INTERVAL")]
    pub interval: Option<u64>,
    /// Similarity mode: magnitude or complex.
    #[arg(long, env = "CMX_MODE")]
    pub mode: Option<String>,
    /// Execution: parallel or sequential.
    #[arg(long, env = "CMX_EXECUTION")]
    pub execution: Option<String>,
    /// Sample source: synth, stdin, tcp://host:port or file:path.
    #[arg(long, env = "CMX_SOURCE")]
    pub source: Option<String>,
    /// HTTP listen address.
    #[arg(long, env = "CMX_LISTEN")]
    pub listen: Option<String>,
    #[arg(long, env = "CMX_SNAPSHOT_DIR")]
    pub snapshot_dir: Option<PathBuf>,
    /// Ticks between snapshot files.
    #[arg(long, env = "CMX_SNAPSHOT_EVERY")]
    pub snapshot_every: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Stop after this many processed ticks.
    #[arg(long, env = "CMX_MAX_TICKS")]
    pub max_ticks: Option<u64>,
    /// Tick as fast as the source allows instead of once per period.
    #[arg(long)]
    pub max_rate: bool,
    /// Serve no HTTP endpoints.
    #[arg(long)]
    pub no_server: bool,
    /// Static files to serve next to the API, e.g. a dashboard build.
    #[arg(long, env = "CMX_STATIC_DIR")]
    pub static_dir: Option<PathBuf>,
    /// Write the timing-free event log here.
    #[arg(long)]
    pub event_log: Option<PathBuf>,
    /// Record ingested samples as NDJSON for later replay.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Write a CMX1 snapshot of the final state here.
    #[arg(long)]
    pub final_snapshot: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Window lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Scale counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub q: Option<Vec<usize>>,
    /// Timed repetitions per cell, after one warm-up run.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the data-parallel kernels.
    #[arg(long)]
    pub parallel: bool,
    /// CSV destination; standard output when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}
