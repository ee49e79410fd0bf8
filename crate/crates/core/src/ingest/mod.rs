//! Signal buffering: per-signal sliding windows, the data matrix built from
//! them, and the sample sources that feed them.

mod ring;
mod stream;
mod synth;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ring::RingBuffer;
pub use stream::{parse_record, StreamRecord, TickAssembler};
pub use synth::{Component, SharedEvent, SynthSpec, SynthSpecBuilder};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("non-finite sample {0}")]
    NonFiniteSample(f64),
    #[error("warm-up incomplete: signal {signal} holds {filled} of {capacity} samples")]
    WarmupIncomplete {
        signal: usize,
        filled: usize,
        capacity: usize,
    },
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("unknown signal label {0:?}")]
    UnknownSignal(String),
    #[error("invalid synth spec: {0}")]
    InvalidSynth(String),
    #[error("buffers disagree on capacity")]
    RaggedBuffers,
    #[error("duplicate signal label {0:?}")]
    DuplicateLabel(String),
}

/// Identity of one input stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SignalId {
    pub index: usize,
    pub label: String,
}

impl fmt::Display for SignalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

/// Spreadsheet-style label for index `i`: A..Z, AA..AZ, BA..
pub fn default_label(i: usize) -> String {
    let mut n = i + 1;
    let mut out = Vec::new();
    while n > 0 {
        let r = (n - 1) % 26;
        out.push(b'A' + r as u8);
        n = (n - 1) / 26;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

/// The set of signals known to a session.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRegistry {
    ids: Vec<SignalId>,
    by_label: HashMap<String, usize>,
}

impl SignalRegistry {
    pub fn with_default_labels(m: usize) -> Self {
        Self::from_labels((0..m).map(default_label)).expect("default labels are unique")
    }

    pub fn from_labels<I, S>(labels: I) -> Result<Self, IngestError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ids = Vec::new();
        let mut by_label = HashMap::new();
        for (index, label) in labels.into_iter().enumerate() {
            let label = label.into();
            if by_label.insert(label.clone(), index).is_some() {
                return Err(IngestError::DuplicateLabel(label));
            }
            ids.push(SignalId { index, label });
        }
        Ok(Self { ids, by_label })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&SignalId> {
        self.ids.get(index)
    }

    pub fn lookup(&self, label: &str) -> Option<&SignalId> {
        self.by_label.get(label).map(|&i| &self.ids[i])
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(|id| id.label.as_str())
    }

    pub fn ids(&self) -> &[SignalId] {
        &self.ids
    }
}

/// Immutable M×N copy of all windows, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DataMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, IngestError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(IngestError::RaggedBuffers);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Little-endian byte image, used for digests.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Copies every buffer into a fresh matrix. All buffers must be full.
pub fn snapshot(buffers: &[RingBuffer]) -> Result<DataMatrix, IngestError> {
    let cols = buffers.first().map_or(0, RingBuffer::capacity);
    let mut values = vec![0.0; buffers.len() * cols];
    for (i, b) in buffers.iter().enumerate() {
        if b.capacity() != cols {
            return Err(IngestError::RaggedBuffers);
        }
        if !b.is_full() {
            return Err(IngestError::WarmupIncomplete {
                signal: i,
                filled: b.filled(),
                capacity: b.capacity(),
            });
        }
        b.copy_into(&mut values[i * cols..(i + 1) * cols]);
    }
    Ok(DataMatrix {
        rows: buffers.len(),
        cols,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(cap: usize, xs: &[f64]) -> RingBuffer {
        let mut b = RingBuffer::new(cap);
        for &x in xs {
            b.push(x).unwrap();
        }
        b
    }

    #[test]
    fn labels() {
        assert_eq!(default_label(0), "A");
        assert_eq!(default_label(7), "H");
        assert_eq!(default_label(25), "Z");
        assert_eq!(default_label(26), "AA");
        assert_eq!(default_label(27), "AB");
        assert_eq!(default_label(52), "BA");
        let reg = SignalRegistry::with_default_labels(128);
        assert_eq!(reg.labels().collect::<std::collections::HashSet<_>>().len(), 128);
    }

    #[test]
    fn duplicate_labels_rejected() {
        assert!(matches!(
            SignalRegistry::from_labels(["A", "B", "A"]),
            Err(IngestError::DuplicateLabel(_))
        ));
    }

    #[test]
    fn snapshot_rows() {
        let b = [filled(4, &[1., 2., 3., 4.]), filled(4, &[5., 6., 7., 8.])];
        let d = snapshot(&b).unwrap();
        assert_eq!((d.rows(), d.cols()), (2, 4));
        assert_eq!(d.row(0), &[1., 2., 3., 4.]);
        assert_eq!(d.row(1), &[5., 6., 7., 8.]);
    }

    #[test]
    fn snapshot_is_isolated_from_later_pushes() {
        let mut b = vec![filled(4, &[1., 2., 3., 4.]), filled(4, &[5., 6., 7., 8.])];
        let d = snapshot(&b).unwrap();
        let before = d.clone();
        b[0].push(99.0).unwrap();
        assert_eq!(d, before);
        assert_eq!(snapshot(&b).unwrap().row(0), &[2., 3., 4., 99.]);
    }

    #[test]
    fn warmup_incomplete() {
        let b = [filled(4, &[1., 2., 3., 4.]), filled(4, &[5., 6.])];
        assert_eq!(
            snapshot(&b),
            Err(IngestError::WarmupIncomplete {
                signal: 1,
                filled: 2,
                capacity: 4
            })
        );
    }
}
