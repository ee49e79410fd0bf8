//! Smoothed wavelet coherence and relative phase of two transforms.
//!
//! ```text
//! C(t, s) = |S(Wi conj(Wj))|^2 / (S(|Wi|^2) * S(|Wj|^2))
//! phase(t, s) = arg S(Wi conj(Wj))
//! ```
//!
//! `S` smooths each scale row in time with a Gaussian whose width grows with
//! the scale, then each column across scales with a boxcar. Both kernels sum
//! to one and both use half-sample symmetric reflection at the edges.
//! Without smoothing the quotient is identically one.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::par::{self, Execution};
use crate::spectral::CLAMP_ANOMALY;
use crate::wavelet::{boundary_depth, CwtArray, CwtPlanner, FftPair, MorletParams, ScaleGrid, WaveletError};

/// Auto-spectra below this fraction of the field maximum count as silence.
pub const UNDERFLOW_FRACTION: f64 = 1e-12;

/// Gaussian truncation radius in standard deviations.
const TRUNCATE_SIGMAS: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoherenceError {
    #[error("kernel too wide: {0}")]
    KernelTooWide(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no grid row falls in {lo}..={hi} Hz")]
    EmptyBand { lo: f64, hi: f64 },
    #[error(transparent)]
    Wavelet(#[from] WaveletError),
    #[error("coherence job failed: {0}")]
    JobFailed(String),
}

/// Separable time/scale smoothing for one scale grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingSpec {
    /// Gaussian standard deviation in samples for each grid row; 0 means no
    /// time smoothing on that row.
    time_sigmas: Vec<f64>,
    /// Odd boxcar width in grid rows.
    scale_width: usize,
}

impl SmoothingSpec {
    /// Default constants: `sigma = s / sqrt(2)` and a scale boxcar spanning
    /// 0.6 octave.
    pub fn for_grid(grid: &ScaleGrid) -> Self {
        Self::with_constants(grid, FRAC_1_SQRT_2, 0.6)
    }

    /// `sigma = time_factor * s`; boxcar covers `scale_octaves` octaves,
    /// rounded to an odd row count.
    pub fn with_constants(grid: &ScaleGrid, time_factor: f64, scale_octaves: f64) -> Self {
        let half = (0.5 * scale_octaves * grid.bins_per_octave()).round().max(0.0) as usize;
        Self {
            time_sigmas: grid.scales().iter().map(|s| time_factor * s).collect(),
            scale_width: 2 * half + 1,
        }
    }

    /// Leaves the field unchanged.
    pub fn identity(q: usize) -> Self {
        Self {
            time_sigmas: vec![0.0; q],
            scale_width: 1,
        }
    }

    pub fn from_parts(time_sigmas: Vec<f64>, scale_width: usize) -> Self {
        Self {
            time_sigmas,
            scale_width,
        }
    }

    pub fn rows(&self) -> usize {
        self.time_sigmas.len()
    }

    pub fn time_sigmas(&self) -> &[f64] {
        &self.time_sigmas
    }

    pub fn scale_width(&self) -> usize {
        self.scale_width
    }

    fn radius(sigma: f64) -> usize {
        if sigma > 0.0 {
            (TRUNCATE_SIGMAS * sigma).ceil() as usize
        } else {
            0
        }
    }

    /// Unit-sum truncated Gaussian taps for offsets `-r..=r`.
    pub fn time_kernel(sigma: f64) -> Vec<f64> {
        let r = Self::radius(sigma) as i64;
        if r == 0 {
            return vec![1.0];
        }
        let taps: Vec<f64> = (-r..=r)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.into_iter().map(|v| v / sum).collect()
    }

    fn max_radius(&self) -> usize {
        self.time_sigmas.iter().map(|&s| Self::radius(s)).max().unwrap_or(0)
    }
}

/// Half-sample symmetric reflection of index `m` into `0..n`.
pub fn reflect(m: i64, n: usize) -> usize {
    let period = 2 * n as i64;
    let u = m.rem_euclid(period) as usize;
    if u < n {
        u
    } else {
        2 * n - 1 - u
    }
}

/// Length of the reflected buffer used for time smoothing of `n` columns.
pub fn smoothing_len(n: usize) -> usize {
    4 * n.next_power_of_two()
}

type KernelKey = (usize, u64);

/// FFT plans and Gaussian spectra for time smoothing.
pub struct Smoother {
    planner: FftPlanner<f64>,
    plans: HashMap<usize, FftPair>,
    kernels: HashMap<KernelKey, Arc<Vec<Complex64>>>,
    scratch: Vec<Complex64>,
    exec: Execution,
}

impl std::fmt::Debug for Smoother {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Smoother")
            .field("kernels", &self.kernels.len())
            .field("exec", &self.exec)
            .finish()
    }
}

impl Smoother {
    pub fn new(exec: Execution) -> Self {
        Self {
            planner: FftPlanner::new(),
            plans: HashMap::new(),
            kernels: HashMap::new(),
            scratch: Vec::new(),
            exec,
        }
    }

    fn plans(&mut self, p: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
        let planner = &mut self.planner;
        self.plans
            .entry(p)
            .or_insert_with(|| (planner.plan_fft_forward(p), planner.plan_fft_inverse(p)))
            .clone()
    }

    /// Spectrum of the circularly placed kernel, pre-divided by `p`.
    fn kernel_spectrum(&mut self, p: usize, sigma: f64) -> Arc<Vec<Complex64>> {
        let key = (p, sigma.to_bits());
        if let Some(k) = self.kernels.get(&key) {
            return k.clone();
        }
        let (fwd, _) = self.plans(p);
        let taps = SmoothingSpec::time_kernel(sigma);
        let r = (taps.len() / 2) as i64;
        let mut buf = vec![Complex64::new(0.0, 0.0); p];
        for (i, &v) in taps.iter().enumerate() {
            let d = i as i64 - r;
            buf[d.rem_euclid(p as i64) as usize].re = v / p as f64;
        }
        fwd.process(&mut buf);
        let k = Arc::new(buf);
        self.kernels.insert(key, k.clone());
        k
    }

    /// Applies `spec` to a row-major Q×N field in place.
    pub fn smooth(
        &mut self,
        field: &mut [Complex64],
        n: usize,
        spec: &SmoothingSpec,
    ) -> Result<(), CoherenceError> {
        let q = spec.rows();
        if field.len() != q * n || n == 0 {
            return Err(CoherenceError::DimensionMismatch(format!(
                "field of {} cells is not {q}x{n}",
                field.len()
            )));
        }
        if spec.scale_width == 0 || spec.scale_width.is_multiple_of(2) || spec.scale_width > q {
            return Err(CoherenceError::KernelTooWide(format!(
                "scale boxcar of {} rows over {q} rows (must be odd and <= rows)",
                spec.scale_width
            )));
        }
        let p = smoothing_len(n);
        let margin = (p - n) / 2;
        let r_max = spec.max_radius();
        if r_max > margin {
            return Err(CoherenceError::KernelTooWide(format!(
                "time kernel radius {r_max} exceeds reflection margin {margin} for {n} columns"
            )));
        }
        if r_max > 0 {
            self.smooth_time(field, n, spec, p, margin);
        }
        if spec.scale_width > 1 {
            self.scratch.clear();
            self.scratch.extend_from_slice(field);
            smooth_scale(&self.scratch, field, q, n, spec.scale_width);
        }
        Ok(())
    }

    fn smooth_time(&mut self, field: &mut [Complex64], n: usize, spec: &SmoothingSpec, p: usize, margin: usize) {
        let (fwd, inv) = self.plans(p);
        let kernels: Vec<Option<Arc<Vec<Complex64>>>> = spec
            .time_sigmas
            .iter()
            .map(|&s| (SmoothingSpec::radius(s) > 0).then(|| self.kernel_spectrum(p, s)))
            .collect();
        let scratch_len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        par::for_each_chunk_mut_with(
            self.exec,
            field,
            n,
            || {
                (
                    vec![Complex64::new(0.0, 0.0); p],
                    vec![Complex64::new(0.0, 0.0); scratch_len],
                )
            },
            |(buf, scratch), k, row| {
                let Some(kernel) = &kernels[k] else { return };
                // positions [0, n + margin) forward, the rest wrap to negative
                // offsets; both directions read row, reversed row, row, ...
                let (ahead, behind) = buf.split_at_mut(n + margin);
                for (b, x) in ahead.iter_mut().zip(mirrored(row)) {
                    *b = *x;
                }
                for (b, x) in behind.iter_mut().rev().zip(mirrored(row)) {
                    *b = *x;
                }
                fwd.process_with_scratch(buf, scratch);
                buf.iter_mut().zip(kernel.iter()).for_each(|(b, g)| *b *= g);
                inv.process_with_scratch(buf, scratch);
                row.copy_from_slice(&buf[..n]);
            },
        );
    }
}

/// `row[reflect(m)]` for `m = 0, 1, 2, ...`.
fn mirrored(row: &[Complex64]) -> impl Iterator<Item = &Complex64> {
    row.iter().chain(row.iter().rev()).cycle()
}

fn smooth_scale(src: &[Complex64], field: &mut [Complex64], q: usize, n: usize, width: usize) {
    let half = (width / 2) as i64;
    let w = 1.0 / width as f64;
    for k in 0..q {
        let out = &mut field[k * n..(k + 1) * n];
        out.fill(Complex64::new(0.0, 0.0));
        for j in -half..=half {
            let r = reflect(k as i64 + j, q);
            for (o, s) in out.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                *o += s;
            }
        }
        out.iter_mut().for_each(|o| *o *= w);
    }
}

/// Coherence and phase over a Q×N grid for an ordered pair `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceField {
    q: usize,
    n: usize,
    pub pair: (usize, usize),
    coherence: Vec<f64>,
    phase: Vec<f64>,
    frequencies: Vec<f64>,
    boundary: Vec<u16>,
    /// Cells zeroed because an auto-spectrum was effectively silent.
    pub underflow_cells: usize,
    /// Cells whose raw quotient overshot [0, 1] by more than the anomaly bound.
    pub clamp_anomalies: usize,
}

impl CoherenceField {
    /// Uniform field with zero phase; mostly for tests and fixtures.
    pub fn constant(q: usize, n: usize, value: f64) -> Self {
        Self {
            q,
            n,
            pair: (0, 1),
            coherence: vec![value; q * n],
            phase: vec![0.0; q * n],
            frequencies: (0..q).map(|k| (q - k) as f64).collect(),
            boundary: vec![0; n],
            underflow_cells: 0,
            clamp_anomalies: 0,
        }
    }

    /// Assembles a field from parts, checking the shapes.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        pair: (usize, usize),
        q: usize,
        n: usize,
        coherence: Vec<f64>,
        phase: Vec<f64>,
        frequencies: Vec<f64>,
        boundary: Vec<u16>,
    ) -> Result<Self, CoherenceError> {
        if coherence.len() != q * n || phase.len() != q * n || frequencies.len() != q || boundary.len() != n {
            return Err(CoherenceError::DimensionMismatch("field parts".into()));
        }
        Ok(Self {
            q,
            n,
            pair,
            coherence,
            phase,
            frequencies,
            boundary,
            underflow_cells: 0,
            clamp_anomalies: 0,
        })
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

    pub fn coherence(&self) -> &[f64] {
        &self.coherence
    }

    pub fn phase(&self) -> &[f64] {
        &self.phase
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// Per column, the number of largest scales touched by the window edges.
    pub fn boundary(&self) -> &[u16] {
        &self.boundary
    }

    pub fn coherence_at(&self, k: usize, t: usize) -> f64 {
        self.coherence[k * self.n + t]
    }

    pub fn phase_at(&self, k: usize, t: usize) -> f64 {
        self.phase[k * self.n + t]
    }

    pub fn mean(&self) -> f64 {
        self.coherence.iter().sum::<f64>() / self.coherence.len() as f64
    }

    /// Mean coherence of each scale row.
    pub fn row_means(&self) -> Vec<f64> {
        self.coherence
            .chunks(self.n)
            .map(|r| r.iter().sum::<f64>() / self.n as f64)
            .collect()
    }
}

/// Phase wrapped into `(-pi, pi]`.
fn wrap_phase(z: Complex64) -> f64 {
    let a = z.im.atan2(z.re);
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// Coherence of two transforms on the same grid.
pub fn wavelet_coherence(
    wi: &CwtArray,
    wj: &CwtArray,
    grid: &ScaleGrid,
    spec: &SmoothingSpec,
    smoother: &mut Smoother,
) -> Result<CoherenceField, CoherenceError> {
    coherence_with(wi, wj, grid, spec, smoother, &mut Vec::new(), &mut Vec::new())
}

fn coherence_with(
    wi: &CwtArray,
    wj: &CwtArray,
    grid: &ScaleGrid,
    spec: &SmoothingSpec,
    smoother: &mut Smoother,
    cross: &mut Vec<Complex64>,
    autos: &mut Vec<Complex64>,
) -> Result<CoherenceField, CoherenceError> {
    let (q, n) = (wi.scales(), wi.len());
    if wj.scales() != q || wj.len() != n {
        return Err(CoherenceError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            q,
            n,
            wj.scales(),
            wj.len()
        )));
    }
    if spec.rows() != q || grid.len() != q {
        return Err(CoherenceError::DimensionMismatch(format!(
            "smoothing has {} rows, grid {}, transforms {q}",
            spec.rows(),
            grid.len()
        )));
    }

    cross.clear();
    autos.clear();
    // both auto-spectra in one complex field: re = |Wi|^2, im = |Wj|^2
    for (a, b) in wi.values().iter().zip(wj.values()) {
        cross.push(a * b.conj());
        autos.push(Complex64::new(a.norm_sqr(), b.norm_sqr()));
    }
    smoother.smooth(cross, n, spec)?;
    smoother.smooth(autos, n, spec)?;

    // Packing leaks rounding noise of one auto-spectrum into the other, so
    // the floor is taken against the larger of the two.
    let peak = autos.iter().fold(0.0f64, |m, z| m.max(z.re).max(z.im));
    let eps = UNDERFLOW_FRACTION * peak;

    let mut coherence = Vec::with_capacity(q * n);
    let mut phase = Vec::with_capacity(q * n);
    let (mut underflow_cells, mut clamp_anomalies) = (0, 0);
    for (c, a) in cross.iter().zip(autos.iter()) {
        if !(a.re > eps && a.im > eps) {
            underflow_cells += 1;
            coherence.push(0.0);
            phase.push(0.0);
            continue;
        }
        let raw = c.norm_sqr() / (a.re * a.im);
        let v = raw.clamp(0.0, 1.0);
        if (raw - v).abs() > CLAMP_ANOMALY {
            clamp_anomalies += 1;
        }
        coherence.push(v);
        phase.push(wrap_phase(*c));
    }

    Ok(CoherenceField {
        q,
        n,
        pair: (wi.source, wj.source),
        coherence,
        phase,
        frequencies: grid.frequencies().to_vec(),
        boundary: boundary_depth(grid, n),
        underflow_cells,
        clamp_anomalies,
    })
}

/// Per-column mean coherence over rows whose frequency lies in `lo..=hi`.
pub fn reduce_band(field: &CoherenceField, lo: f64, hi: f64) -> Result<Vec<f64>, CoherenceError> {
    let rows: Vec<usize> = field
        .frequencies
        .iter()
        .enumerate()
        .filter(|(_, &f)| f >= lo && f <= hi)
        .map(|(k, _)| k)
        .collect();
    if rows.is_empty() {
        return Err(CoherenceError::EmptyBand { lo, hi });
    }
    let n = field.n;
    Ok((0..n)
        .map(|t| rows.iter().map(|&k| field.coherence[k * n + t]).sum::<f64>() / rows.len() as f64)
        .collect())
}

/// Everything needed to turn two windows into a coherence field; one per
/// worker.
#[derive(Debug)]
pub struct CoherenceWorkspace {
    pub cwt: CwtPlanner,
    pub smoother: Smoother,
    wi: CwtArray,
    wj: CwtArray,
    cross: Vec<Complex64>,
    autos: Vec<Complex64>,
}

impl CoherenceWorkspace {
    pub fn new(exec: Execution) -> Self {
        Self {
            cwt: CwtPlanner::new(exec),
            smoother: Smoother::new(exec),
            wi: CwtArray::from_values(0, 0, Vec::new(), 0),
            wj: CwtArray::from_values(0, 0, Vec::new(), 0),
            cross: Vec::new(),
            autos: Vec::new(),
        }
    }

    /// Transforms both windows and computes their coherence.
    pub fn analyze(
        &mut self,
        pair: (usize, usize),
        xi: &[f64],
        xj: &[f64],
        grid: &ScaleGrid,
        params: &MorletParams,
        spec: &SmoothingSpec,
    ) -> Result<CoherenceField, CoherenceError> {
        self.cwt.transform_into(xi, grid, params, &mut self.wi)?;
        self.cwt.transform_into(xj, grid, params, &mut self.wj)?;
        self.wi.source = pair.0;
        self.wj.source = pair.1;
        coherence_with(
            &self.wi,
            &self.wj,
            grid,
            spec,
            &mut self.smoother,
            &mut self.cross,
            &mut self.autos,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(rng: &mut ChaCha8Rng, len: usize) -> Vec<Complex64> {
        (0..len)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    /// Nested-loop separable convolution with explicit reflection.
    fn naive_smooth(field: &[Complex64], n: usize, spec: &SmoothingSpec) -> Vec<Complex64> {
        let q = spec.rows();
        let mut timed = vec![Complex64::new(0.0, 0.0); q * n];
        for k in 0..q {
            let taps = SmoothingSpec::time_kernel(spec.time_sigmas()[k]);
            let r = (taps.len() / 2) as i64;
            for t in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for (i, w) in taps.iter().enumerate() {
                    let m = t as i64 + i as i64 - r;
                    acc += field[k * n + reflect(m, n)] * w;
                }
                timed[k * n + t] = acc;
            }
        }
        let half = (spec.scale_width() / 2) as i64;
        let mut out = vec![Complex64::new(0.0, 0.0); q * n];
        for k in 0..q {
            for t in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in -half..=half {
                    acc += timed[reflect(k as i64 + j, q) * n + t];
                }
                out[k * n + t] = acc / spec.scale_width() as f64;
            }
        }
        out
    }

    fn grid(n: usize, q: usize) -> ScaleGrid {
        ScaleGrid::for_window(n, q, 100.0, &MorletParams::default()).unwrap()
    }

    #[test]
    fn reflection() {
        let n = 4;
        let got: Vec<usize> = (-5..10).map(|m| reflect(m, n)).collect();
        assert_eq!(got, vec![3, 3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0, 0, 1]);
    }

    #[test]
    fn kernel_is_normalised() {
        for sigma in [0.0, 0.4, 1.0, 7.3, 80.0] {
            let k = SmoothingSpec::time_kernel(sigma);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len() % 2, 1);
        }
    }

    #[test]
    fn default_scale_width() {
        let g = grid(256, 64);
        let spec = SmoothingSpec::for_grid(&g);
        // ~10.8 rows per octave -> 0.6 octave ~ 6.5 rows -> 7
        assert_eq!(spec.scale_width(), 7);
        assert!((spec.time_sigmas()[0] - g.scales()[0] * FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn constant_field_is_fixed() {
        let (n, g) = (128, grid(128, 16));
        let spec = SmoothingSpec::for_grid(&g);
        let c = Complex64::new(0.3, -1.7);
        let mut f = vec![c; 16 * n];
        Smoother::new(Execution::Sequential).smooth(&mut f, n, &spec).unwrap();
        assert!(f.iter().all(|v| (v - c).norm() < 1e-12));
    }

    #[test]
    fn impulse_spreads_to_unit_mass() {
        let n = 256;
        let g = ScaleGrid::build(10.0, 45.0, 12, 100.0, &MorletParams::default()).unwrap();
        let spec = SmoothingSpec::for_grid(&g);
        let mut f = vec![Complex64::new(0.0, 0.0); 12 * n];
        f[6 * n + 128] = Complex64::new(1.0, 0.0);
        Smoother::new(Execution::Parallel).smooth(&mut f, n, &spec).unwrap();
        let sum: f64 = f.iter().map(|v| v.re).sum();
        assert!((sum - 1.0).abs() < 1e-9, "mass {sum}");
        assert!(f.iter().all(|v| v.re > -1e-15 && v.im.abs() < 1e-15));
    }

    #[test]
    fn matches_naive_convolution() {
        let (n, q) = (200, 12);
        let g = grid(n, q);
        let spec = SmoothingSpec::for_grid(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_field(&mut rng, q * n);
        let expect = naive_smooth(&f, n, &spec);
        let mut got = f.clone();
        Smoother::new(Execution::Parallel).smooth(&mut got, n, &spec).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn kernel_too_wide() {
        let n = 64;
        let mut f = vec![Complex64::new(1.0, 0.0); 4 * n];
        let mut sm = Smoother::new(Execution::Sequential);
        let wide_time = SmoothingSpec::from_parts(vec![1.0, 1.0, 1.0, 200.0], 1);
        assert!(matches!(sm.smooth(&mut f, n, &wide_time), Err(CoherenceError::KernelTooWide(_))));
        let wide_scale = SmoothingSpec::from_parts(vec![1.0; 4], 5);
        assert!(matches!(sm.smooth(&mut f, n, &wide_scale), Err(CoherenceError::KernelTooWide(_))));
        let even = SmoothingSpec::from_parts(vec![1.0; 4], 2);
        assert!(matches!(sm.smooth(&mut f, n, &even), Err(CoherenceError::KernelTooWide(_))));
    }

    #[test]
    fn identity_smoothing_gives_unit_coherence() {
        let (q, n) = (8, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let wi = CwtArray::from_values(q, n, random_field(&mut rng, q * n), 0);
        let wj = CwtArray::from_values(q, n, random_field(&mut rng, q * n), 1);
        let g = grid(n, q);
        let c = wavelet_coherence(&wi, &wj, &g, &SmoothingSpec::identity(q), &mut Smoother::new(Execution::Sequential))
            .unwrap();
        assert!(c.coherence().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(c.underflow_cells, 0);
    }

    #[test]
    fn identical_transforms() {
        let (q, n) = (10, 128);
        let g = grid(n, q);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = CwtArray::from_values(q, n, random_field(&mut rng, q * n), 0);
        let c = wavelet_coherence(&w, &w, &g, &SmoothingSpec::for_grid(&g), &mut Smoother::new(Execution::Sequential))
            .unwrap();
        assert!(c.coherence().iter().all(|&v| v > 1.0 - 1e-9));
        assert!(c.phase().iter().all(|&p| p.abs() < 1e-9));
    }

    #[test]
    fn silence_is_zero_and_flagged() {
        let (q, n) = (6, 64);
        let g = grid(n, q);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = CwtArray::from_values(q, n, random_field(&mut rng, q * n), 0);
        let z = CwtArray::from_values(q, n, vec![Complex64::new(0.0, 0.0); q * n], 1);
        let c = wavelet_coherence(&w, &z, &g, &SmoothingSpec::for_grid(&g), &mut Smoother::new(Execution::Sequential))
            .unwrap();
        assert!(c.coherence().iter().all(|&v| v == 0.0));
        assert_eq!(c.underflow_cells, q * n);
    }

    #[test]
    fn mismatched_shapes() {
        let g = grid(64, 6);
        let a = CwtArray::from_values(6, 64, vec![Complex64::new(1.0, 0.0); 6 * 64], 0);
        let b = CwtArray::from_values(6, 32, vec![Complex64::new(1.0, 0.0); 6 * 32], 1);
        assert!(matches!(
            wavelet_coherence(&a, &b, &g, &SmoothingSpec::for_grid(&g), &mut Smoother::new(Execution::Sequential)),
            Err(CoherenceError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn band_reduction() {
        let f = CoherenceField::constant(4, 5, 1.0);
        assert_eq!(reduce_band(&f, 0.0, 10.0).unwrap(), vec![1.0; 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let coh: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
        let f = CoherenceField::from_parts((0, 1), 4, 5, coh.clone(), vec![0.0; 20], vec![8.0, 4.0, 2.0, 1.0], vec![0; 5])
            .unwrap();
        // a single row
        assert_eq!(reduce_band(&f, 3.5, 4.5).unwrap(), coh[5..10].to_vec());
        // rows 1..=2
        let got = reduce_band(&f, 1.5, 5.0).unwrap();
        for t in 0..5 {
            assert!((got[t] - (coh[5 + t] + coh[10 + t]) / 2.0).abs() < 1e-15);
        }
        assert!(matches!(reduce_band(&f, 9.0, 20.0), Err(CoherenceError::EmptyBand { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn field_pair(seed: u64, q: usize, n: usize) -> (CwtArray, CwtArray) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (
                CwtArray::from_values(q, n, random_field(&mut rng, q * n), 0),
                CwtArray::from_values(q, n, random_field(&mut rng, q * n), 1),
            )
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn symmetric_bounded_antisymmetric_phase(seed in 0u64..10_000) {
                let (q, n) = (8, 96);
                let g = grid(n, q);
                let spec = SmoothingSpec::for_grid(&g);
                let (a, b) = field_pair(seed, q, n);
                let mut sm = Smoother::new(Execution::Sequential);
                let ab = wavelet_coherence(&a, &b, &g, &spec, &mut sm).unwrap();
                let ba = wavelet_coherence(&b, &a, &g, &spec, &mut sm).unwrap();
                for i in 0..q * n {
                    prop_assert!((0.0..=1.0).contains(&ab.coherence()[i]));
                    prop_assert!((ab.coherence()[i] - ba.coherence()[i]).abs() < 1e-9);
                    let d = (ab.phase()[i] + ba.phase()[i]).rem_euclid(2.0 * PI);
                    prop_assert!(d.min(2.0 * PI - d) < 1e-9);
                }
            }

            #[test]
            fn gain_invariance(seed in 0u64..10_000, g1 in 0.01f64..100.0, g2 in -100.0f64..-0.01, ph in -3.0f64..3.0) {
                let (q, n) = (6, 64);
                let g = grid(n, q);
                let spec = SmoothingSpec::for_grid(&g);
                let (a, b) = field_pair(seed, q, n);
                let mut sm = Smoother::new(Execution::Sequential);
                let base = wavelet_coherence(&a, &b, &g, &spec, &mut sm).unwrap();
                let sa = a.scaled(Complex64::from_polar(g1, ph));
                let sb = b.scaled(Complex64::new(g2, 0.0));
                let scaled = wavelet_coherence(&sa, &sb, &g, &spec, &mut sm).unwrap();
                for (x, y) in base.coherence().iter().zip(scaled.coherence()) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }
}
