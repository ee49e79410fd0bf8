//! Continuous wavelet transform with an analytic Morlet wavelet, computed by
//! FFT correlation over a log-spaced scale grid.
//!
//! For a window `x` of length `N` and scale `s` (in samples):
//!
//! ```text
//! W(t, s) = c(s) * sum_n x[n] * conj(psi((n - t) / s))
//! psi(eta) = pi^(-1/4) * exp(i * omega0 * eta) * exp(-eta^2 / 2)
//! ```
//!
//! The window is zero-padded to `P = next_pow2(2N - 1)`, so the circular
//! correlation computed in the frequency domain equals the linear one on
//! every retained column. The sampled wavelet's spectrum is cached per
//! `(P, scale)`.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Execution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveletError {
    #[error("invalid scale range: {0}")]
    InvalidRange(String),
    #[error("window length {0} too short for a transform")]
    InvalidLength(usize),
    #[error("non-finite sample in window")]
    NonFiniteInput,
    #[error("omega0 = {0} is below the admissible regime (>= 5)")]
    InvalidOmega0(f64),
}

/// Per-scale gain applied to the raw correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// A sinusoid of amplitude `A` at a scale's centre frequency yields
    /// `|W| ≈ A` at that scale.
    #[default]
    Amplitude,
    /// Unit-energy wavelet at every scale (`1/sqrt(s)`).
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorletParams {
    pub omega0: f64,
    pub normalization: Normalization,
}

impl Default for MorletParams {
    fn default() -> Self {
        Self {
            omega0: 6.0,
            normalization: Normalization::Amplitude,
        }
    }
}

const PI_QUARTER_INV: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)

impl MorletParams {
    pub fn validate(&self) -> Result<(), WaveletError> {
        if !(self.omega0.is_finite() && self.omega0 >= 5.0) {
            return Err(WaveletError::InvalidOmega0(self.omega0));
        }
        Ok(())
    }

    /// Mother wavelet `psi(eta)`.
    pub fn psi(&self, eta: f64) -> Complex64 {
        let env = PI_QUARTER_INV * (-0.5 * eta * eta).exp();
        Complex64::from_polar(env, self.omega0 * eta)
    }

    /// Gain `c(s)` for scale `s`.
    pub fn gain(&self, scale: f64) -> f64 {
        match self.normalization {
            Normalization::Amplitude => 2.0 / (scale * PI_QUARTER_INV * TAU.sqrt()),
            Normalization::L2 => 1.0 / scale.sqrt(),
        }
    }

    /// Scale (samples) whose centre frequency is `freq` Hz.
    pub fn scale_for(&self, freq: f64, sample_rate: f64) -> f64 {
        self.omega0 * sample_rate / (TAU * freq)
    }

    pub fn frequency_for(&self, scale: f64, sample_rate: f64) -> f64 {
        self.omega0 * sample_rate / (TAU * scale)
    }
}

/// Log-uniform scales, ascending, with their centre frequencies (descending).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleGrid {
    scales: Vec<f64>,
    frequencies: Vec<f64>,
    sample_rate: f64,
}

impl ScaleGrid {
    /// `q` log-spaced centre frequencies from `fmin` to `fmax` inclusive.
    pub fn build(
        fmin: f64,
        fmax: f64,
        q: usize,
        sample_rate: f64,
        params: &MorletParams,
    ) -> Result<Self, WaveletError> {
        params.validate()?;
        if !(fmin > 0.0 && fmin < fmax && fmax <= sample_rate / 2.0) || !fmax.is_finite() {
            return Err(WaveletError::InvalidRange(format!(
                "need 0 < fmin ({fmin}) < fmax ({fmax}) <= fs/2 ({})",
                sample_rate / 2.0
            )));
        }
        if q < 2 {
            return Err(WaveletError::InvalidRange(format!("need at least 2 scales, got {q}")));
        }
        let log_span = (fmin / fmax).ln();
        let frequencies: Vec<f64> = (0..q)
            .map(|k| match k {
                0 => fmax,
                k if k == q - 1 => fmin,
                k => fmax * (log_span * k as f64 / (q - 1) as f64).exp(),
            })
            .collect();
        let scales = frequencies
            .iter()
            .map(|&f| params.scale_for(f, sample_rate))
            .collect();
        Ok(Self {
            scales,
            frequencies,
            sample_rate,
        })
    }

    /// Default grid for an `n`-sample window: two cycles per window up to
    /// 0.45 of the sample rate.
    pub fn for_window(
        n: usize,
        q: usize,
        sample_rate: f64,
        params: &MorletParams,
    ) -> Result<Self, WaveletError> {
        let (fmin, fmax) = default_band(n, sample_rate);
        Self::build(fmin, fmax, q, sample_rate, params)
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// Ratio between consecutive scales.
    pub fn ratio(&self) -> f64 {
        self.scales[1] / self.scales[0]
    }

    /// Grid rows per octave of scale.
    pub fn bins_per_octave(&self) -> f64 {
        std::f64::consts::LN_2 / self.ratio().ln()
    }

    /// Index of the scale whose centre frequency is closest (in log) to `f`.
    pub fn nearest(&self, f: f64) -> usize {
        let lf = f.ln();
        (0..self.len())
            .min_by(|&a, &b| {
                (self.frequencies[a].ln() - lf)
                    .abs()
                    .total_cmp(&(self.frequencies[b].ln() - lf).abs())
            })
            .expect("grid is never empty")
    }
}

/// `(fmin, fmax)` used when a window-derived grid is requested.
pub fn default_band(n: usize, sample_rate: f64) -> (f64, f64) {
    (2.0 * sample_rate / n as f64, 0.45 * sample_rate)
}

/// Q×N complex transform, row `k` for `grid.scales()[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CwtArray {
    q: usize,
    n: usize,
    values: Vec<Complex64>,
    pub source: usize,
}

impl CwtArray {
    pub fn from_values(q: usize, n: usize, values: Vec<Complex64>, source: usize) -> Self {
        assert_eq!(values.len(), q * n, "CwtArray dimensions");
        Self { q, n, values, source }
    }

    pub fn scales(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, k: usize) -> &[Complex64] {
        &self.values[k * self.n..(k + 1) * self.n]
    }

    pub fn get(&self, k: usize, t: usize) -> Complex64 {
        self.values[k * self.n + t]
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }
}

/// Padded transform length for an `n`-sample window.
pub fn padded_len(n: usize) -> usize {
    (2 * n - 1).next_power_of_two()
}

/// For each column, how many of the largest scales have an e-folding time
/// (`sqrt(2) * s`) reaching past the nearest window edge.
pub fn boundary_depth(grid: &ScaleGrid, n: usize) -> Vec<u16> {
    (0..n)
        .map(|t| {
            let edge = (t.min(n - 1 - t) + 1) as f64;
            grid.scales()
                .iter()
                .filter(|&&s| std::f64::consts::SQRT_2 * s > edge)
                .count() as u16
        })
        .collect()
}

type ResponseKey = (usize, u64, u64, Normalization);

/// Forward and inverse plans of one length.
pub(crate) type FftPair = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

/// FFT plans and cached wavelet spectra. One instance per worker lane.
pub struct CwtPlanner {
    planner: FftPlanner<f64>,
    plans: HashMap<usize, FftPair>,
    responses: HashMap<ResponseKey, Arc<Vec<Complex64>>>,
    spectrum: Vec<Complex64>,
    exec: Execution,
}

impl fmt::Debug for CwtPlanner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CwtPlanner")
            .field("plans", &self.plans.len())
            .field("responses", &self.responses.len())
            .field("exec", &self.exec)
            .finish()
    }
}

impl Default for CwtPlanner {
    fn default() -> Self {
        Self::new(Execution::default())
    }
}

impl CwtPlanner {
    pub fn new(exec: Execution) -> Self {
        Self {
            planner: FftPlanner::new(),
            plans: HashMap::new(),
            responses: HashMap::new(),
            spectrum: Vec::new(),
            exec,
        }
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn cached_responses(&self) -> usize {
        self.responses.len()
    }

    /// Forward and inverse complex plans for length `p`.
    pub fn plans(&mut self, p: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
        let planner = &mut self.planner;
        self.plans
            .entry(p)
            .or_insert_with(|| (planner.plan_fft_forward(p), planner.plan_fft_inverse(p)))
            .clone()
    }

    /// `c(s) * conj(DFT(psi(m / s))) / P`, with lags `m` in `(-P/2, P/2]`.
    fn response(&mut self, p: usize, scale: f64, params: &MorletParams) -> Arc<Vec<Complex64>> {
        let key = (p, scale.to_bits(), params.omega0.to_bits(), params.normalization);
        if let Some(r) = self.responses.get(&key) {
            return r.clone();
        }
        let (fwd, _) = self.plans(p);
        let half = (p / 2) as i64;
        let mut kernel: Vec<Complex64> = (0..p as i64)
            .map(|i| {
                let lag = if i > half { i - p as i64 } else { i };
                params.psi(lag as f64 / scale)
            })
            .collect();
        fwd.process(&mut kernel);
        let g = params.gain(scale) / p as f64;
        kernel.iter_mut().for_each(|c| *c = c.conj() * g);
        let r = Arc::new(kernel);
        self.responses.insert(key, r.clone());
        r
    }

    /// Transforms one window over every scale of `grid`.
    pub fn transform(
        &mut self,
        row: &[f64],
        grid: &ScaleGrid,
        params: &MorletParams,
    ) -> Result<CwtArray, WaveletError> {
        let mut out = CwtArray::from_values(0, 0, Vec::new(), 0);
        self.transform_into(row, grid, params, &mut out)?;
        Ok(out)
    }

    /// As [`CwtPlanner::transform`], reusing the storage of `out`.
    pub fn transform_into(
        &mut self,
        row: &[f64],
        grid: &ScaleGrid,
        params: &MorletParams,
        out: &mut CwtArray,
    ) -> Result<(), WaveletError> {
        params.validate()?;
        let n = row.len();
        if n < 4 {
            return Err(WaveletError::InvalidLength(n));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(WaveletError::NonFiniteInput);
        }
        let p = padded_len(n);
        let (fwd, inv) = self.plans(p);
        let responses: Vec<Arc<Vec<Complex64>>> = grid
            .scales()
            .iter()
            .map(|&s| self.response(p, s, params))
            .collect();

        let spectrum = &mut self.spectrum;
        spectrum.clear();
        spectrum.resize(p, Complex64::new(0.0, 0.0));
        for (d, &x) in spectrum.iter_mut().zip(row) {
            d.re = x;
        }
        fwd.process(spectrum);
        let spectrum = &*spectrum;

        let q = grid.len();
        out.q = q;
        out.n = n;
        out.values.resize(q * n, Complex64::new(0.0, 0.0));
        let scratch_len = inv.get_inplace_scratch_len();
        par::for_each_chunk_mut_with(
            self.exec,
            &mut out.values,
            n,
            || {
                (
                    vec![Complex64::new(0.0, 0.0); p],
                    vec![Complex64::new(0.0, 0.0); scratch_len],
                )
            },
            |(buf, scratch), k, dst| {
                for ((b, x), r) in buf.iter_mut().zip(spectrum).zip(responses[k].iter()) {
                    *b = x * r;
                }
                inv.process_with_scratch(buf, scratch);
                dst.copy_from_slice(&buf[..n]);
            },
        );
        Ok(())
    }
}

/// One-shot transform with a throwaway planner.
pub fn cwt(row: &[f64], grid: &ScaleGrid, params: &MorletParams) -> Result<CwtArray, WaveletError> {
    CwtPlanner::new(Execution::Sequential).transform(row, grid, params)
}

/// Centre angular frequency (rad/sample) of scale `s`.
pub fn centre_omega(scale: f64, params: &MorletParams) -> f64 {
    params.omega0 / scale
}
