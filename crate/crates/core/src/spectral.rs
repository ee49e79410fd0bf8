//! Real FFT of each window and pairwise spectral cosine similarity.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use realfft::{RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::DataMatrix;
use crate::par::{self, Execution};

/// Excess beyond [0, 1] that counts as an anomaly rather than rounding.
pub const CLAMP_ANOMALY: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("window length {0} must be even and at least 4")]
    InvalidLength(usize),
    #[error("non-finite sample in window")]
    NonFiniteInput,
    #[error("spectrum lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("zero-norm spectrum")]
    ZeroVector,
    #[error("need at least two spectra, got {0}")]
    TooFewSignals(usize),
}

/// Which vectors the cosine is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    /// `|<F_i, F_j>| / (|F_i| |F_j|)` on the complex bins.
    Complex,
    /// Cosine of the magnitude vectors; insensitive to phase.
    #[default]
    Magnitude,
}

impl fmt::Display for SimilarityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityMode::Complex => "complex",
            SimilarityMode::Magnitude => "magnitude",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimilarityOptions {
    pub mode: SimilarityMode,
    /// Leave bin 0 out of inner products and norms.
    pub exclude_dc: bool,
}

/// Non-redundant half spectrum of a real window: bins `0..=N/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    bins: Vec<Complex64>,
    magnitudes: Vec<f64>,
    /// Index of the signal the window came from.
    pub source: usize,
}

impl Spectrum {
    fn zeroed(len: usize, source: usize) -> Self {
        Self {
            bins: vec![Complex64::new(0.0, 0.0); len],
            magnitudes: vec![0.0; len],
            source,
        }
    }

    /// Builds a spectrum from explicit bins.
    pub fn from_bins(bins: Vec<Complex64>, source: usize) -> Self {
        let magnitudes = bins.iter().map(|c| c.norm()).collect();
        Self {
            bins,
            magnitudes,
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    /// Window length this half spectrum came from.
    pub fn window_len(&self) -> usize {
        2 * (self.bins.len() - 1)
    }

    /// Time-domain energy recovered from the half spectrum.
    pub fn parseval_energy(&self) -> f64 {
        let l = self.bins.len();
        let n = self.window_len() as f64;
        let edge = self.bins[0].norm_sqr() + self.bins[l - 1].norm_sqr();
        let inner: f64 = self.bins[1..l - 1].iter().map(|c| c.norm_sqr()).sum();
        (edge + 2.0 * inner) / n
    }

    fn norm(&self, exclude_dc: bool) -> f64 {
        let start = usize::from(exclude_dc);
        self.magnitudes[start..].iter().map(|m| m * m).sum::<f64>().sqrt()
    }
}

/// Reusable real-FFT plan and buffers for one window length.
pub struct SpectralWorkspace {
    n: usize,
    plan: Arc<dyn RealToComplex<f64>>,
    input: Vec<f64>,
    output: Vec<Complex64>,
    scratch: Vec<Complex64>,
    window: Option<Vec<f64>>,
}

impl fmt::Debug for SpectralWorkspace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralWorkspace")
            .field("n", &self.n)
            .field("hann", &self.window.is_some())
            .finish()
    }
}

impl Clone for SpectralWorkspace {
    fn clone(&self) -> Self {
        let mut w = Self::new(self.n).expect("length already validated");
        w.window = self.window.clone();
        w
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (TAU * i as f64 / n as f64).cos())
        .collect()
}

impl SpectralWorkspace {
    pub fn new(n: usize) -> Result<Self, SpectralError> {
        if n < 4 || !n.is_multiple_of(2) {
            return Err(SpectralError::InvalidLength(n));
        }
        let plan = RealFftPlanner::<f64>::new().plan_fft_forward(n);
        Ok(Self {
            n,
            input: plan.make_input_vec(),
            output: plan.make_output_vec(),
            scratch: plan.make_scratch_vec(),
            plan,
            window: None,
        })
    }

    /// Applies a periodic Hann taper before every transform.
    pub fn with_hann(mut self, enabled: bool) -> Self {
        self.window = enabled.then(|| hann(self.n));
        self
    }

    pub fn window_len(&self) -> usize {
        self.n
    }

    pub fn bins(&self) -> usize {
        self.n / 2 + 1
    }

    /// Transforms `row` into `out`, reusing all buffers.
    pub fn transform_into(&mut self, row: &[f64], out: &mut Spectrum) -> Result<(), SpectralError> {
        if row.len() != self.n {
            return Err(SpectralError::InvalidLength(row.len()));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(SpectralError::NonFiniteInput);
        }
        match &self.window {
            Some(w) => self
                .input
                .iter_mut()
                .zip(row.iter().zip(w))
                .for_each(|(d, (x, w))| *d = x * w),
            None => self.input.copy_from_slice(row),
        }
        self.plan
            .process_with_scratch(&mut self.input, &mut self.output, &mut self.scratch)
            .expect("buffer sizes come from the plan");
        out.bins.resize(self.output.len(), Complex64::new(0.0, 0.0));
        out.magnitudes.resize(self.output.len(), 0.0);
        out.bins.copy_from_slice(&self.output);
        for (m, c) in out.magnitudes.iter_mut().zip(&self.output) {
            *m = c.norm();
        }
        Ok(())
    }

    pub fn transform(&mut self, row: &[f64], source: usize) -> Result<Spectrum, SpectralError> {
        let mut s = Spectrum::zeroed(self.bins(), source);
        self.transform_into(row, &mut s)?;
        Ok(s)
    }
}

/// One-shot real FFT; plans a fresh workspace.
pub fn rfft(row: &[f64]) -> Result<Spectrum, SpectralError> {
    SpectralWorkspace::new(row.len())?.transform(row, 0)
}

/// Transforms every matrix row. Each lane owns a private workspace.
pub fn rfft_rows(
    data: &DataMatrix,
    template: &SpectralWorkspace,
    exec: Execution,
) -> Result<Vec<Spectrum>, SpectralError> {
    let bins = template.bins();
    let mut out: Vec<Spectrum> = (0..data.rows()).map(|i| Spectrum::zeroed(bins, i)).collect();
    let failed = std::sync::atomic::AtomicBool::new(false);
    par::for_each_chunk_mut_with(
        exec,
        &mut out,
        1,
        || template.clone(),
        |ws, i, s| {
            if ws.transform_into(data.row(i), &mut s[0]).is_err() {
                failed.store(true, std::sync::atomic::Ordering::Relaxed);
            }
        },
    );
    if failed.into_inner() {
        return Err(SpectralError::NonFiniteInput);
    }
    Ok(out)
}

/// Result of one cosine evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub value: f64,
    /// How far the raw value fell outside [0, 1] before clamping.
    pub clamp_excess: f64,
}

fn clamp_unit(raw: f64) -> Similarity {
    let value = raw.clamp(0.0, 1.0);
    Similarity {
        value,
        clamp_excess: (raw - value).abs(),
    }
}

fn bounded_cosine(
    a: &Spectrum,
    b: &Spectrum,
    na: f64,
    nb: f64,
    opts: SimilarityOptions,
) -> Result<Similarity, SpectralError> {
    if na == 0.0 || nb == 0.0 {
        return Err(SpectralError::ZeroVector);
    }
    let start = usize::from(opts.exclude_dc);
    let dot = match opts.mode {
        SimilarityMode::Complex => a.bins[start..]
            .iter()
            .zip(&b.bins[start..])
            .fold(Complex64::new(0.0, 0.0), |acc, (x, y)| acc + x * y.conj())
            .norm(),
        SimilarityMode::Magnitude => a.magnitudes[start..]
            .iter()
            .zip(&b.magnitudes[start..])
            .map(|(x, y)| x * y)
            .sum(),
    };
    Ok(clamp_unit(dot / (na * nb)))
}

/// Cosine similarity of two spectra, clamped to [0, 1].
pub fn cosine_similarity(
    a: &Spectrum,
    b: &Spectrum,
    opts: SimilarityOptions,
) -> Result<Similarity, SpectralError> {
    if a.len() != b.len() {
        return Err(SpectralError::LengthMismatch(a.len(), b.len()));
    }
    bounded_cosine(a, b, a.norm(opts.exclude_dc), b.norm(opts.exclude_dc), opts)
}

/// Symmetric M×M matrix of pairwise similarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    m: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_fn(m: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                values[i * m + j] = f(i, j);
            }
        }
        Self { m, values }
    }

    pub fn identity(m: usize) -> Self {
        Self::from_fn(m, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.m).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// Matrix plus the per-pair conditions met while building it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityOutcome {
    pub matrix: SimilarityMatrix,
    /// Pairs (including `(i, i)`) involving an all-zero spectrum; scored 0.
    pub zero_pairs: Vec<(usize, usize)>,
    /// Entries whose raw value exceeded [0, 1] by more than [`CLAMP_ANOMALY`].
    pub clamp_anomalies: usize,
}

/// All `M choose 2` similarities in O(M² L).
pub fn similarity_matrix(
    spectra: &[Spectrum],
    opts: SimilarityOptions,
    exec: Execution,
) -> Result<SimilarityOutcome, SpectralError> {
    let m = spectra.len();
    if m < 2 {
        return Err(SpectralError::TooFewSignals(m));
    }
    let len = spectra[0].len();
    if let Some(s) = spectra.iter().find(|s| s.len() != len) {
        return Err(SpectralError::LengthMismatch(len, s.len()));
    }
    let norms: Vec<f64> = spectra.iter().map(|s| s.norm(opts.exclude_dc)).collect();

    // row i holds pairs (i, j) for j > i
    let upper: Vec<Vec<Result<Similarity, SpectralError>>> = par::map_indexed(exec, m, |i| {
        ((i + 1)..m)
            .map(|j| bounded_cosine(&spectra[i], &spectra[j], norms[i], norms[j], opts))
            .collect()
    });

    let mut values = vec![0.0; m * m];
    let mut zero_pairs = Vec::new();
    let mut clamp_anomalies = 0;
    for i in 0..m {
        if norms[i] == 0.0 {
            zero_pairs.push((i, i));
        } else {
            values[i * m + i] = 1.0;
        }
        for (off, r) in upper[i].iter().enumerate() {
            let j = i + 1 + off;
            let v = match r {
                Ok(s) => {
                    if s.clamp_excess > CLAMP_ANOMALY {
                        clamp_anomalies += 1;
                    }
                    s.value
                }
                Err(_) => {
                    zero_pairs.push((i, j));
                    0.0
                }
            };
            values[i * m + j] = v;
            values[j * m + i] = v;
        }
    }
    zero_pairs.sort_unstable();
    Ok(SimilarityOutcome {
        matrix: SimilarityMatrix { m, values },
        zero_pairs,
        clamp_anomalies,
    })
}
