//! `CMX1` snapshot container.
//!
//! All integers and reals are little-endian; reals are stored as raw f64
//! bits so a round trip is exact.
//!
//! ```text
//! magic "CMX1" | version u16 | reserved u16 | tick u64
//! m u32 | n u32 | labels: m x (len u16, utf-8)
//! theta_on f64 | theta_off f64 | alpha f64
//! data digest [32] (sha-256 of the data matrix, row-major f64)
//! similarity m*m f64
//! layer1 count u32, then (a u32, b u32, w f64)
//! layer2 count u32, then per edge:
//!   a u32 | b u32 | ema f64 | admitted_at u64 | pinned u8
//!   has_last u8 [last u64] | has_summary u8
//!   [computed_at u64 | mean f64 | q u32 | frequencies q f64 | row means q f64]
//! checksum [32] (sha-256 of every preceding byte)
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{GatingParams, MultiplexGraph, Pair};
use crate::ingest::{DataMatrix, SignalRegistry};
use crate::spectral::SimilarityMatrix;

pub const MAGIC: &[u8; 4] = b"CMX1";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("not a snapshot (bad magic)")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u16),
    #[error("snapshot truncated at byte {0}")]
    Truncated(usize),
    #[error("snapshot checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed snapshot: {0}")]
    Malformed(String),
    #[error("snapshot i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceSummary {
    pub computed_at: u64,
    pub mean: f64,
    pub frequencies: Vec<f64>,
    pub row_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEdge {
    pub pair: Pair,
    pub ema: f64,
    pub admitted_at: u64,
    pub pinned: bool,
    pub last_coherence_at: Option<u64>,
    pub coherence: Option<CoherenceSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tick: u64,
    pub labels: Vec<String>,
    pub n: usize,
    pub gating: GatingParams,
    #[serde(with = "hex_digest")]
    pub data_digest: [u8; 32],
    pub similarity: SimilarityMatrix,
    pub layer1: Vec<(Pair, f64)>,
    pub layer2: Vec<SnapshotEdge>,
}

mod hex_digest {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&d.iter().map(|b| format!("{b:02x}")).collect::<String>())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let bad = || serde::de::Error::custom("digest must be 64 hex digits");
        if s.len() != 64 {
            return Err(bad());
        }
        let mut out = [0u8; 32];
        for (i, b) in out.iter_mut().enumerate() {
            *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        Ok(out)
    }
}

pub fn digest(data: &DataMatrix) -> [u8; 32] {
    Sha256::digest(data.to_le_bytes()).into()
}

impl Snapshot {
    pub fn capture(
        tick: u64,
        registry: &SignalRegistry,
        data: &DataMatrix,
        graph: &MultiplexGraph,
        gating: GatingParams,
    ) -> Self {
        let layer2 = graph
            .layer2()
            .values()
            .map(|e| SnapshotEdge {
                pair: e.pair,
                ema: e.ema,
                admitted_at: e.admitted_at,
                pinned: graph.pinned().contains(&e.pair),
                last_coherence_at: e.last_coherence_at,
                coherence: e.coherence.as_ref().map(|f| CoherenceSummary {
                    computed_at: e.last_coherence_at.unwrap_or(0),
                    mean: f.mean(),
                    frequencies: f.frequencies().to_vec(),
                    row_means: f.row_means(),
                }),
            })
            .collect();
        Self {
            tick,
            labels: registry.labels().map(str::to_string).collect(),
            n: data.cols(),
            gating,
            data_digest: digest(data),
            similarity: graph.layer1().clone(),
            layer1: graph.layer1_edges().collect(),
            layer2,
        }
    }

    pub fn file_name(tick: u64) -> String {
        format!("snapshot-{tick:010}.cmx")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u16(0);
        w.u64(self.tick);
        w.u32(self.labels.len() as u32);
        w.u32(self.n as u32);
        for l in &self.labels {
            w.u16(l.len() as u16);
            w.bytes(l.as_bytes());
        }
        w.f64(self.gating.theta_on);
        w.f64(self.gating.theta_off);
        w.f64(self.gating.alpha);
        w.bytes(&self.data_digest);
        for &v in self.similarity.values() {
            w.f64(v);
        }
        w.u32(self.layer1.len() as u32);
        for (p, wt) in &self.layer1 {
            w.pair(*p);
            w.f64(*wt);
        }
        w.u32(self.layer2.len() as u32);
        for e in &self.layer2 {
            w.pair(e.pair);
            w.f64(e.ema);
            w.u64(e.admitted_at);
            w.u8(e.pinned as u8);
            w.opt_u64(e.last_coherence_at);
            match &e.coherence {
                None => w.u8(0),
                Some(s) => {
                    w.u8(1);
                    w.u64(s.computed_at);
                    w.f64(s.mean);
                    w.u32(s.frequencies.len() as u32);
                    s.frequencies.iter().for_each(|&f| w.f64(f));
                    s.row_means.iter().for_each(|&f| w.f64(f));
                }
            }
        }
        let sum: [u8; 32] = Sha256::digest(&w.buf).into();
        w.bytes(&sum);
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SnapshotError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(SnapshotError::UnsupportedVersion(version));
        }
        if bytes.len() < 4 + 32 {
            return Err(SnapshotError::Truncated(bytes.len()));
        }
        let body = &bytes[..bytes.len() - 32];
        let sum: [u8; 32] = Sha256::digest(body).into();
        if sum[..] != bytes[bytes.len() - 32..] {
            return Err(SnapshotError::ChecksumMismatch);
        }
        r.buf = body;
        r.u16()?;
        let tick = r.u64()?;
        let m = r.u32()? as usize;
        let n = r.u32()? as usize;
        let mut labels = Vec::with_capacity(m.min(1 << 16));
        for _ in 0..m {
            let len = r.u16()? as usize;
            let raw = r.take(len)?;
            labels.push(
                String::from_utf8(raw.to_vec()).map_err(|_| SnapshotError::Malformed("label is not utf-8".into()))?,
            );
        }
        let gating = GatingParams {
            theta_on: r.f64()?,
            theta_off: r.f64()?,
            alpha: r.f64()?,
        };
        let data_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let mut values = Vec::with_capacity(m * m);
        for _ in 0..m * m {
            values.push(r.f64()?);
        }
        let similarity = SimilarityMatrix::from_fn(m, |i, j| values[i * m + j]);
        let count = r.u32()? as usize;
        let mut layer1 = Vec::new();
        for _ in 0..count {
            let p = r.pair(m)?;
            layer1.push((p, r.f64()?));
        }
        let count = r.u32()? as usize;
        let mut layer2 = Vec::new();
        for _ in 0..count {
            let pair = r.pair(m)?;
            let ema = r.f64()?;
            let admitted_at = r.u64()?;
            let pinned = r.flag()?;
            let last_coherence_at = r.opt_u64()?;
            let coherence = if r.flag()? {
                let computed_at = r.u64()?;
                let mean = r.f64()?;
                let q = r.u32()? as usize;
                let frequencies = (0..q).map(|_| r.f64()).collect::<Result<_, _>>()?;
                let row_means = (0..q).map(|_| r.f64()).collect::<Result<_, _>>()?;
                Some(CoherenceSummary {
                    computed_at,
                    mean,
                    frequencies,
                    row_means,
                })
            } else {
                None
            };
            layer2.push(SnapshotEdge {
                pair,
                ema,
                admitted_at,
                pinned,
                last_coherence_at,
                coherence,
            });
        }
        if r.pos != body.len() {
            return Err(SnapshotError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            tick,
            labels,
            n,
            gating,
            data_digest,
            similarity,
            layer1,
            layer2,
        })
    }

    /// Writes atomically into `dir` and returns the file path.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf, SnapshotError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(Self::file_name(self.tick));
        let tmp = path.with_extension("cmx.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, SnapshotError> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Snapshot files in `dir`, oldest tick first.
pub fn list_snapshots(dir: &Path) -> Result<Vec<PathBuf>, SnapshotError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("snapshot-") && n.ends_with(".cmx"))
        })
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_bits().to_le_bytes());
    }
    fn pair(&mut self, p: Pair) {
        self.u32(p.a as u32);
        self.u32(p.b as u32);
    }
    fn opt_u64(&mut self, v: Option<u64>) {
        match v {
            Some(v) => {
                self.u8(1);
                self.u64(v);
            }
            None => self.u8(0),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8], SnapshotError> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(SnapshotError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn arr<const K: usize>(&mut self) -> Result<[u8; K], SnapshotError> {
        Ok(self.take(K)?.try_into().unwrap())
    }
    fn u16(&mut self) -> Result<u16, SnapshotError> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64, SnapshotError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn flag(&mut self) -> Result<bool, SnapshotError> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(SnapshotError::Malformed(format!("flag byte {v}"))),
        }
    }
    fn opt_u64(&mut self) -> Result<Option<u64>, SnapshotError> {
        Ok(if self.flag()? { Some(self.u64()?) } else { None })
    }
    fn pair(&mut self, m: usize) -> Result<Pair, SnapshotError> {
        let (a, b) = (self.u32()? as usize, self.u32()? as usize);
        if a >= b || b >= m {
            return Err(SnapshotError::Malformed(format!("pair ({a}, {b}) for {m} nodes")));
        }
        Ok(Pair { a, b })
    }
}
