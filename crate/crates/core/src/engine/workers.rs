use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::coherence::{CoherenceError, CoherenceField, CoherenceWorkspace, SmoothingSpec};
use crate::graph::Pair;
use crate::ingest::DataMatrix;
use crate::par::Execution;
use crate::wavelet::{MorletParams, ScaleGrid};

/// Grid, wavelet and smoothing shared by every job.
#[derive(Debug, Clone)]
pub struct AnalysisPlan {
    pub grid: ScaleGrid,
    pub params: MorletParams,
    pub smoothing: SmoothingSpec,
}

/// One pair to analyse against an immutable window snapshot.
#[derive(Debug, Clone)]
pub struct Job {
    pub seq: u64,
    pub pair: Pair,
    pub window_tick: u64,
    pub data: Arc<DataMatrix>,
}

#[derive(Debug)]
pub struct JobResult {
    pub seq: u64,
    pub pair: Pair,
    pub window_tick: u64,
    pub outcome: Result<CoherenceField, CoherenceError>,
}

/// Fixed-size pool of coherence workers. Each worker owns its FFT plans.
pub struct CoherencePool {
    jobs: Option<Sender<Job>>,
    results: Receiver<JobResult>,
    handles: Vec<JoinHandle<()>>,
    outstanding: usize,
    next_seq: u64,
}

impl std::fmt::Debug for CoherencePool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoherencePool")
            .field("workers", &self.handles.len())
            .field("outstanding", &self.outstanding)
            .finish()
    }
}

impl CoherencePool {
    pub fn new(workers: usize, plan: Arc<AnalysisPlan>, exec: Execution) -> Self {
        let (job_tx, job_rx) = mpsc::channel::<Job>();
        let (res_tx, res_rx) = mpsc::channel();
        let job_rx = Arc::new(Mutex::new(job_rx));
        let handles = (0..workers.max(1))
            .map(|w| {
                let rx = Arc::clone(&job_rx);
                let tx = res_tx.clone();
                let plan = Arc::clone(&plan);
                std::thread::Builder::new()
                    .name(format!("cmx-coherence-{w}"))
                    .spawn(move || worker(rx, tx, plan, exec))
                    .expect("spawn coherence worker")
            })
            .collect();
        Self {
            jobs: Some(job_tx),
            results: res_rx,
            handles,
            outstanding: 0,
            next_seq: 0,
        }
    }

    pub fn workers(&self) -> usize {
        self.handles.len()
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding
    }

    pub fn dispatch(&mut self, pair: Pair, window_tick: u64, data: Arc<DataMatrix>) {
        let job = Job {
            seq: self.next_seq,
            pair,
            window_tick,
            data,
        };
        self.next_seq += 1;
        self.jobs
            .as_ref()
            .expect("pool running")
            .send(job)
            .expect("coherence workers alive");
        self.outstanding += 1;
    }

    /// Waits for every dispatched job; results come back in dispatch order.
    pub fn collect(&mut self) -> Vec<JobResult> {
        let mut out = Vec::with_capacity(self.outstanding);
        while self.outstanding > 0 {
            match self.results.recv() {
                Ok(r) => {
                    out.push(r);
                    self.outstanding -= 1;
                }
                Err(_) => break,
            }
        }
        out.sort_by_key(|r| r.seq);
        out
    }
}

impl Drop for CoherencePool {
    fn drop(&mut self) {
        self.jobs.take();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

fn worker(jobs: Arc<Mutex<Receiver<Job>>>, results: Sender<JobResult>, plan: Arc<AnalysisPlan>, exec: Execution) {
    let mut ws = CoherenceWorkspace::new(exec);
    loop {
        let job = match jobs.lock().unwrap().recv() {
            Ok(j) => j,
            Err(_) => return,
        };
        let Pair { a, b } = job.pair;
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            ws.analyze(
                (a, b),
                job.data.row(a),
                job.data.row(b),
                &plan.grid,
                &plan.params,
                &plan.smoothing,
            )
        }))
        .unwrap_or_else(|_| {
            // a panicking job must not take the worker down
            ws = CoherenceWorkspace::new(exec);
            Err(CoherenceError::JobFailed("panicked".into()))
        });
        let r = JobResult {
            seq: job.seq,
            pair: job.pair,
            window_tick: job.window_tick,
            outcome,
        };
        if results.send(r).is_err() {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::ScaleGrid;

    fn plan(n: usize) -> Arc<AnalysisPlan> {
        let params = MorletParams::default();
        let grid = ScaleGrid::for_window(n, 8, 100.0, &params).unwrap();
        let smoothing = SmoothingSpec::for_grid(&grid);
        Arc::new(AnalysisPlan { grid, params, smoothing })
    }

    fn data(n: usize) -> Arc<DataMatrix> {
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..n).map(|t| ((t * (i + 2)) as f64 * 0.1).sin()).collect())
            .collect();
        Arc::new(DataMatrix::from_rows(&rows).unwrap())
    }

    #[test]
    fn results_match_direct_computation_in_order() {
        let n = 64;
        let p = plan(n);
        let d = data(n);
        let mut pool = CoherencePool::new(3, Arc::clone(&p), Execution::Sequential);
        let pairs = [Pair::new(0, 1), Pair::new(1, 2), Pair::new(0, 2), Pair::new(0, 1)];
        for (k, &pair) in pairs.iter().enumerate() {
            pool.dispatch(pair, k as u64, Arc::clone(&d));
        }
        assert_eq!(pool.outstanding(), 4);
        let results = pool.collect();
        assert_eq!(pool.outstanding(), 0);
        let mut ws = CoherenceWorkspace::new(Execution::Sequential);
        for (k, r) in results.iter().enumerate() {
            assert_eq!((r.seq, r.pair, r.window_tick), (k as u64, pairs[k], k as u64));
            let direct = ws
                .analyze((r.pair.a, r.pair.b), d.row(r.pair.a), d.row(r.pair.b), &p.grid, &p.params, &p.smoothing)
                .unwrap();
            assert_eq!(r.outcome.as_ref().unwrap(), &direct);
        }
    }

    #[test]
    fn collect_with_nothing_outstanding() {
        let mut pool = CoherencePool::new(1, plan(32), Execution::Sequential);
        assert!(pool.collect().is_empty());
        assert_eq!(pool.workers(), 1);
    }

    #[test]
    fn bad_window_is_an_error_not_a_crash() {
        let p = plan(64);
        let mut pool = CoherencePool::new(1, p, Execution::Sequential);
        pool.dispatch(Pair::new(0, 1), 0, data(32));
        let r = pool.collect();
        assert!(r[0].outcome.is_err());
        pool.dispatch(Pair::new(0, 1), 1, data(64));
        assert!(pool.collect()[0].outcome.is_ok());
    }
}
