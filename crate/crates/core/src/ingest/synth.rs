use std::f64::consts::TAU;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::IngestError;

/// One sinusoid `amplitude * sin(2π f t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl Component {
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude * (TAU * self.frequency * t + self.phase).sin()
    }
}

/// A component added to both members of `pair` for ticks in
/// `start..start + duration`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedEvent {
    pub pair: (usize, usize),
    pub component: Component,
    pub start: u64,
    pub duration: u64,
}

impl SharedEvent {
    pub fn active_at(&self, tick: u64) -> bool {
        tick >= self.start && tick - self.start < self.duration
    }
}

#[derive(Debug, Clone, PartialEq)]
struct RandomSchedule {
    slots: usize,
    window: u64,
    duration: Range<u64>,
    amplitude: Range<f64>,
    frequency: Range<f64>,
}

/// Sum-of-sines generator with pairwise shared components.
///
/// Each tick is a pure function of the spec and the tick index, so any
/// range of ticks can be regenerated bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    sample_rate: f64,
    seed: u64,
    components: Vec<Vec<Component>>,
    events: Vec<SharedEvent>,
    schedule: Option<RandomSchedule>,
}

fn nyquist_check(c: &Component, sample_rate: f64) -> Result<(), IngestError> {
    if !(c.amplitude.is_finite() && c.amplitude > 0.0) {
        return Err(IngestError::InvalidSynth(format!(
            "amplitude {} must be positive",
            c.amplitude
        )));
    }
    if !(c.frequency >= 0.0 && c.frequency < sample_rate / 2.0) {
        return Err(IngestError::InvalidSynth(format!(
            "frequency {} Hz not below Nyquist {} Hz",
            c.frequency,
            sample_rate / 2.0
        )));
    }
    if !c.phase.is_finite() {
        return Err(IngestError::InvalidSynth("phase must be finite".into()));
    }
    Ok(())
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SynthSpec {
    /// Builds a spec from explicit components and events.
    pub fn new(
        sample_rate: f64,
        components: Vec<Vec<Component>>,
        events: Vec<SharedEvent>,
    ) -> Result<Self, IngestError> {
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(IngestError::InvalidSynth("sample rate must be positive".into()));
        }
        let m = components.len();
        for c in components.iter().flatten() {
            nyquist_check(c, sample_rate)?;
        }
        for e in &events {
            nyquist_check(&e.component, sample_rate)?;
            if e.pair.0 >= m || e.pair.1 >= m || e.pair.0 == e.pair.1 {
                return Err(IngestError::InvalidSynth(format!(
                    "event pair {:?} invalid for {m} signals",
                    e.pair
                )));
            }
        }
        Ok(Self {
            sample_rate,
            seed: 0,
            components,
            events,
            schedule: None,
        })
    }

    pub fn builder(m: usize) -> SynthSpecBuilder {
        SynthSpecBuilder::new(m)
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn signal_count(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self, signal: usize) -> &[Component] {
        &self.components[signal]
    }

    pub fn explicit_events(&self) -> &[SharedEvent] {
        &self.events
    }

    /// All shared events covering `tick`, explicit ones first.
    pub fn active_events(&self, tick: u64) -> Vec<SharedEvent> {
        let mut out: Vec<SharedEvent> =
            self.events.iter().filter(|e| e.active_at(tick)).copied().collect();
        if let Some(s) = &self.schedule {
            let k = tick / s.window;
            for slot in 0..s.slots {
                let e = self.scheduled_event(s, slot, k);
                if e.active_at(tick) {
                    out.push(e);
                }
            }
        }
        out
    }

    fn scheduled_event(&self, s: &RandomSchedule, slot: usize, k: u64) -> SharedEvent {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, slot as u64 + 1, k));
        let m = self.components.len();
        let a = rng.random_range(0..m);
        let mut b = rng.random_range(0..m - 1);
        if b >= a {
            b += 1;
        }
        let duration = rng.random_range(s.duration.clone());
        let start = k * s.window + rng.random_range(0..=s.window - duration);
        let component = Component {
            amplitude: rng.random_range(s.amplitude.clone()),
            frequency: rng.random_range(s.frequency.clone()),
            phase: rng.random_range(0.0..TAU),
        };
        SharedEvent {
            pair: (a.min(b), a.max(b)),
            component,
            start,
            duration,
        }
    }

    /// Writes the samples for `tick` into `out` (length M).
    pub fn generate_into(&self, tick: u64, out: &mut [f64]) {
        let t = tick as f64 / self.sample_rate;
        for (o, comps) in out.iter_mut().zip(&self.components) {
            *o = comps.iter().map(|c| c.eval(t)).sum();
        }
        for e in self.active_events(tick) {
            let v = e.component.eval(t);
            out[e.pair.0] += v;
            out[e.pair.1] += v;
        }
    }

    pub fn generate_tick(&self, tick: u64) -> Vec<f64> {
        let mut out = vec![0.0; self.components.len()];
        self.generate_into(tick, &mut out);
        out
    }
}

/// Randomised spec construction from a seed.
#[derive(Debug, Clone)]
pub struct SynthSpecBuilder {
    m: usize,
    sample_rate: f64,
    seed: u64,
    components_per_signal: usize,
    amplitude: Range<f64>,
    frequency: Option<Range<f64>>,
    events: Range<usize>,
    duration: Range<u64>,
    window: u64,
}

impl SynthSpecBuilder {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            sample_rate: 100.0,
            seed: 0,
            components_per_signal: 3,
            amplitude: 0.5..1.5,
            frequency: None,
            events: 1..4,
            duration: 100..501,
            window: 1000,
        }
    }

    pub fn sample_rate(mut self, hz: f64) -> Self {
        self.sample_rate = hz;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn components_per_signal(mut self, k: usize) -> Self {
        self.components_per_signal = k;
        self
    }

    pub fn amplitude(mut self, range: Range<f64>) -> Self {
        self.amplitude = range;
        self
    }

    pub fn frequency(mut self, range: Range<f64>) -> Self {
        self.frequency = Some(range);
        self
    }

    /// Concurrent event count, drawn uniformly from `min..=max`.
    pub fn events(mut self, min: usize, max: usize) -> Self {
        self.events = min..max + 1;
        self
    }

    /// Event duration bounds in ticks, inclusive.
    pub fn duration(mut self, min: u64, max: u64) -> Self {
        self.duration = min..max + 1;
        self
    }

    /// Ticks per scheduling window; each slot hosts one event per window.
    pub fn window(mut self, ticks: u64) -> Self {
        self.window = ticks;
        self
    }

    pub fn build(self) -> Result<SynthSpec, IngestError> {
        let fs = self.sample_rate;
        let frequency = self.frequency.clone().unwrap_or(0.5..0.2 * fs);
        if self.m == 0 {
            return Err(IngestError::InvalidSynth("need at least one signal".into()));
        }
        if frequency.is_empty() || frequency.end > fs / 2.0 || frequency.start < 0.0 {
            return Err(IngestError::InvalidSynth(format!(
                "frequency range {frequency:?} must lie below Nyquist {} Hz",
                fs / 2.0
            )));
        }
        if self.amplitude.is_empty() || self.amplitude.start <= 0.0 {
            return Err(IngestError::InvalidSynth("amplitude range must be positive".into()));
        }
        if self.events.is_empty() || self.duration.is_empty() || self.duration.start == 0 {
            return Err(IngestError::InvalidSynth("empty event bounds".into()));
        }
        if self.duration.end - 1 > self.window {
            return Err(IngestError::InvalidSynth(
                "event window shorter than maximum duration".into(),
            ));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 0, 0));
        let components = (0..self.m)
            .map(|_| {
                (0..self.components_per_signal)
                    .map(|_| Component {
                        amplitude: rng.random_range(self.amplitude.clone()),
                        frequency: rng.random_range(frequency.clone()),
                        phase: rng.random_range(0.0..TAU),
                    })
                    .collect()
            })
            .collect();
        let slots = if self.m >= 2 {
            rng.random_range(self.events.clone())
        } else {
            0
        };

        let mut spec = SynthSpec::new(fs, components, Vec::new())?;
        spec.seed = self.seed;
        spec.schedule = (slots > 0).then(|| RandomSchedule {
            slots,
            window: self.window,
            duration: self.duration.clone(),
            amplitude: self.amplitude.clone(),
            frequency,
        });
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn single(c: Component, fs: f64) -> SynthSpec {
        SynthSpec::new(fs, vec![vec![c]], vec![]).unwrap()
    }

    #[test]
    fn dc_via_phase() {
        let s = single(
            Component { amplitude: 1.0, frequency: 0.0, phase: FRAC_PI_2 },
            100.0,
        );
        for t in 0..50 {
            assert_eq!(s.generate_tick(t), vec![1.0]);
        }
    }

    #[test]
    fn quarter_rate_cycle() {
        let s = single(
            Component { amplitude: 2.0, frequency: 25.0, phase: 0.0 },
            100.0,
        );
        let expect = [0.0, 2.0, 0.0, -2.0];
        for t in 0..16u64 {
            let v = s.generate_tick(t)[0];
            assert!((v - expect[(t % 4) as usize]).abs() < 1e-12, "tick {t}: {v}");
        }
    }

    #[test]
    fn nyquist_rejected() {
        let c = Component { amplitude: 1.0, frequency: 50.0, phase: 0.0 };
        assert!(SynthSpec::new(100.0, vec![vec![c]], vec![]).is_err());
        assert!(SynthSpec::builder(4).sample_rate(100.0).frequency(1.0..50.5).build().is_err());
    }

    #[test]
    fn explicit_event_adds_to_both_members() {
        let base = Component { amplitude: 1.0, frequency: 0.0, phase: FRAC_PI_2 };
        let shared = Component { amplitude: 3.0, frequency: 0.0, phase: FRAC_PI_2 };
        let ev = SharedEvent { pair: (0, 2), component: shared, start: 10, duration: 5 };
        let s = SynthSpec::new(100.0, vec![vec![base]; 3], vec![ev]).unwrap();
        assert_eq!(s.generate_tick(9), vec![1.0, 1.0, 1.0]);
        assert_eq!(s.generate_tick(10), vec![4.0, 1.0, 4.0]);
        assert_eq!(s.generate_tick(14), vec![4.0, 1.0, 4.0]);
        assert_eq!(s.generate_tick(15), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn random_schedule_respects_bounds() {
        let s = SynthSpec::builder(8).seed(3).build().unwrap();
        let slots = s.schedule.as_ref().unwrap().slots;
        assert!((1..=3).contains(&slots));
        for t in (0..20_000).step_by(7) {
            let evs = s.active_events(t);
            assert!(evs.len() <= 3);
            for e in evs {
                assert!((100..=500).contains(&e.duration));
                assert!(e.pair.0 < e.pair.1 && e.pair.1 < 8);
                assert!(e.component.frequency < 50.0);
            }
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = SynthSpec::builder(8).seed(11).build().unwrap();
        let b = SynthSpec::builder(8).seed(11).build().unwrap();
        let c = SynthSpec::builder(8).seed(12).build().unwrap();
        for t in 0..2000 {
            let (x, y) = (a.generate_tick(t), b.generate_tick(t));
            assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_ne!(a.generate_tick(5), c.generate_tick(5));
    }
}
