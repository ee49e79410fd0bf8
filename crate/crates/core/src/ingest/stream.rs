use serde::Deserialize;

use super::{IngestError, SignalId, SignalRegistry};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRecord {
    id: String,
    v: serde_json::Number,
}

/// One parsed line of the external feed.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRecord {
    pub signal: SignalId,
    pub value: f64,
}

/// Parses one NDJSON feed line `{"id": <label>, "v": <number>}`.
///
/// Blank lines yield `Ok(None)`.
pub fn parse_record(
    line: &str,
    registry: &SignalRegistry,
) -> Result<Option<StreamRecord>, IngestError> {
    let line = line.trim();
    if line.is_empty() {
        return Ok(None);
    }
    let rec: WireRecord =
        serde_json::from_str(line).map_err(|e| IngestError::MalformedRecord(e.to_string()))?;
    let value = rec
        .v
        .as_f64()
        .ok_or_else(|| IngestError::MalformedRecord(format!("value {} not a real", rec.v)))?;
    if !value.is_finite() {
        return Err(IngestError::NonFiniteSample(value));
    }
    let signal = registry
        .lookup(&rec.id)
        .cloned()
        .ok_or(IngestError::UnknownSignal(rec.id))?;
    Ok(Some(StreamRecord { signal, value }))
}

/// Collects per-signal records into aligned tick rows.
///
/// Signals with no fresh sample in a tick repeat their previous value and
/// accumulate staleness.
#[derive(Debug, Clone)]
pub struct TickAssembler {
    current: Vec<Option<f64>>,
    held: Vec<Option<f64>>,
    staleness: Vec<u64>,
}

impl TickAssembler {
    pub fn new(m: usize) -> Self {
        Self {
            current: vec![None; m],
            held: vec![None; m],
            staleness: vec![0; m],
        }
    }

    /// Stores `value` as the latest sample for this tick, overwriting any
    /// earlier sample of the same signal.
    pub fn push_latest(&mut self, signal: usize, value: f64) {
        self.current[signal] = Some(value);
    }

    /// Recorded-session grouping: a second sample for a signal already in the
    /// open group closes that group, which is returned.
    pub fn push_grouped(&mut self, signal: usize, value: f64) -> Option<Vec<f64>> {
        let closed = if self.current[signal].is_some() {
            self.finish_tick()
        } else {
            None
        };
        self.current[signal] = Some(value);
        closed
    }

    /// Whether any sample is waiting in the open group.
    pub fn has_pending(&self) -> bool {
        self.current.iter().any(Option::is_some)
    }

    /// Closes the open group. Returns `None` while some signal has never
    /// produced a sample.
    pub fn finish_tick(&mut self) -> Option<Vec<f64>> {
        for i in 0..self.current.len() {
            match self.current[i].take() {
                Some(v) => {
                    self.held[i] = Some(v);
                    self.staleness[i] = 0;
                }
                None => self.staleness[i] += 1,
            }
        }
        self.held.iter().copied().collect()
    }

    /// Consecutive ticks each signal has been held without a fresh sample.
    pub fn staleness(&self) -> &[u64] {
        &self.staleness
    }
}
