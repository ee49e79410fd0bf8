use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::{CoherenceError, CoherenceWorkspace, SmoothingSpec};
use crate::par::Execution;
use crate::wavelet::{MorletParams, ScaleGrid};

/// Sample rate of the benchmark noise signals.
pub const BENCH_SAMPLE_RATE: f64 = 8000.0;

/// Window lengths on and either side of powers of two.
pub const DEFAULT_N: &[usize] = &[1000, 1024, 1025, 1500, 2048, 2049, 3000, 4096, 4097, 8192];
pub const DEFAULT_Q: &[usize] = &[16, 32, 64];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{0}")]
    Usage(String),
    #[error("n={n}, q={q}: {source}")]
    Coherence {
        n: usize,
        q: usize,
        source: CoherenceError,
    },
    #[error("n={n}, q={q}: {count} anomalous cells")]
    Anomaly { n: usize, q: usize, count: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub q: usize,
    pub mean_s: f64,
    pub stddev_s: f64,
    pub reps: usize,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub n_list: Vec<usize>,
    pub q_list: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            n_list: DEFAULT_N.to_vec(),
            q_list: DEFAULT_Q.to_vec(),
            reps: 5,
            seed: 0,
            exec: Execution::Sequential,
        }
    }
}

/// Two seeded uniform white-noise signals in [-1, 1).
pub fn noise_pair(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    (a, b)
}

fn mean_stddev(xs: &[f64]) -> (f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    } else {
        0.0
    };
    (mean, var.sqrt())
}

struct Cell {
    n: usize,
    q: usize,
    grid: ScaleGrid,
    spec: SmoothingSpec,
    signals: (Vec<f64>, Vec<f64>),
    samples: Vec<f64>,
}

impl Cell {
    fn new(n: usize, q: usize, opts: &BenchOptions, params: &MorletParams) -> Result<Self, BenchError> {
        let grid = ScaleGrid::for_window(n, q, BENCH_SAMPLE_RATE, params)
            .map_err(|e| BenchError::Coherence { n, q, source: e.into() })?;
        Ok(Self {
            n,
            q,
            spec: SmoothingSpec::for_grid(&grid),
            grid,
            signals: noise_pair(n, opts.seed ^ ((n as u64) << 20) ^ q as u64),
            samples: Vec::with_capacity(opts.reps),
        })
    }

    /// Transforms both signals and computes coherence once.
    fn run(&self, ws: &mut CoherenceWorkspace, params: &MorletParams) -> Result<f64, BenchError> {
        let (n, q) = (self.n, self.q);
        let (a, b) = &self.signals;
        let start = Instant::now();
        let field = ws
            .analyze((0, 1), a, b, &self.grid, params, &self.spec)
            .map_err(|source| BenchError::Coherence { n, q, source })?;
        let elapsed = start.elapsed().as_secs_f64();
        let bad = field.clamp_anomalies + field.coherence().iter().filter(|c| !c.is_finite()).count();
        if bad > 0 {
            return Err(BenchError::Anomaly { n, q, count: bad });
        }
        Ok(elapsed)
    }
}

/// Grid of timings, in `n_list` then `q_list` order.
///
/// Every cell runs once untimed to warm plan caches. Timed repetitions are
/// then interleaved across cells, so drift in machine speed hits all cells
/// alike instead of skewing the ratios between them.
pub fn benchmark_coherence(opts: &BenchOptions) -> Result<Vec<BenchRow>, BenchError> {
    if opts.n_list.is_empty() || opts.q_list.is_empty() {
        return Err(BenchError::Usage("n and q lists must be nonempty".into()));
    }
    if opts.reps == 0 {
        return Err(BenchError::Usage("reps must be at least 1".into()));
    }
    if let Some(n) = opts.n_list.iter().find(|&&n| n < 8) {
        return Err(BenchError::Usage(format!("n={n} is too short to analyse")));
    }
    if let Some(q) = opts.q_list.iter().find(|&&q| q < 2) {
        return Err(BenchError::Usage(format!("q={q}: need at least two scales")));
    }
    let params = MorletParams::default();
    let mut cells = Vec::new();
    for &n in &opts.n_list {
        for &q in &opts.q_list {
            cells.push(Cell::new(n, q, opts, &params)?);
        }
    }
    let mut ws = CoherenceWorkspace::new(opts.exec);
    for cell in &cells {
        cell.run(&mut ws, &params)?;
    }
    for _ in 0..opts.reps {
        for cell in &mut cells {
            let t = cell.run(&mut ws, &params)?;
            cell.samples.push(t);
        }
    }
    Ok(cells
        .iter()
        .map(|c| {
            let (mean_s, stddev_s) = mean_stddev(&c.samples);
            BenchRow {
                n: c.n,
                q: c.q,
                mean_s,
                stddev_s,
                reps: opts.reps,
            }
        })
        .collect())
}

/// CSV with header `n,q,mean_s,stddev_s,reps`.
pub fn write_csv<W: Write>(out: W, rows: &[BenchRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<BenchRow>, BenchError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(BenchError::from)
}
