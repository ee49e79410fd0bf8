use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, TryRecvError};

use thiserror::Error;

use crate::ingest::{parse_record, IngestError, SignalRegistry, SynthSpec, TickAssembler};

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("line {line}: {source}")]
    Malformed { line: usize, source: IngestError },
    #[error("{path}: {source}")]
    Open { path: PathBuf, source: std::io::Error },
    #[error("source i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// What a source produced for one tick.
#[derive(Debug, Clone, PartialEq)]
pub enum Poll {
    /// One sample per signal.
    Row(Vec<f64>),
    /// Nothing usable yet; try again next tick.
    Pending,
    /// The source is exhausted.
    Ended,
}

pub trait SampleSource: Send {
    fn poll(&mut self) -> Result<Poll, SourceError>;

    /// Ticks each signal has been held without a fresh sample.
    fn staleness(&self) -> Vec<u64> {
        Vec::new()
    }

    /// Records skipped because they could not be parsed.
    fn skipped_records(&self) -> u64 {
        0
    }
}

/// Seeded generator; tick `k` is always the same row.
#[derive(Debug, Clone)]
pub struct SynthSource {
    spec: SynthSpec,
    tick: u64,
}

impl SynthSource {
    pub fn new(spec: SynthSpec) -> Self {
        Self { spec, tick: 0 }
    }
}

impl SampleSource for SynthSource {
    fn poll(&mut self) -> Result<Poll, SourceError> {
        let row = self.spec.generate_tick(self.tick);
        self.tick += 1;
        Ok(Poll::Row(row))
    }
}

/// Fixed rows, then end of stream. Handy for tests and fixtures.
#[derive(Debug, Clone)]
pub struct VecSource {
    rows: std::vec::IntoIter<Vec<f64>>,
}

impl VecSource {
    pub fn new(rows: Vec<Vec<f64>>) -> Self {
        Self { rows: rows.into_iter() }
    }
}

impl SampleSource for VecSource {
    fn poll(&mut self) -> Result<Poll, SourceError> {
        Ok(self.rows.next().map_or(Poll::Ended, Poll::Row))
    }
}

type Parsed = Result<(usize, f64), (usize, IngestError)>;

/// Live NDJSON feed read on a background thread. Each tick takes the latest
/// sample per signal and holds the previous value for signals that sent
/// nothing. Bad lines are logged and skipped.
pub struct StreamSource {
    rx: Receiver<Parsed>,
    assembler: TickAssembler,
    ended: bool,
    skipped: u64,
}

impl StreamSource {
    pub fn from_reader<R: std::io::Read + Send + 'static>(reader: R, registry: SignalRegistry) -> Self {
        let (tx, rx) = mpsc::channel();
        let m = registry.len();
        std::thread::Builder::new()
            .name("cmx-ingest".into())
            .spawn(move || {
                for (k, line) in BufReader::new(reader).lines().enumerate() {
                    let Ok(line) = line else { break };
                    let item = match parse_record(&line, &registry) {
                        Ok(None) => continue,
                        Ok(Some(r)) => Ok((r.signal.index, r.value)),
                        Err(e) => Err((k + 1, e)),
                    };
                    if tx.send(item).is_err() {
                        break;
                    }
                }
            })
            .expect("spawn ingest reader");
        Self {
            rx,
            assembler: TickAssembler::new(m),
            ended: false,
            skipped: 0,
        }
    }

    pub fn stdin(registry: SignalRegistry) -> Self {
        Self::from_reader(std::io::stdin(), registry)
    }

    pub fn tcp(addr: &str, registry: SignalRegistry) -> Result<Self, SourceError> {
        let stream = std::net::TcpStream::connect(addr)?;
        Ok(Self::from_reader(stream, registry))
    }
}

impl SampleSource for StreamSource {
    fn poll(&mut self) -> Result<Poll, SourceError> {
        loop {
            match self.rx.try_recv() {
                Ok(Ok((i, v))) => self.assembler.push_latest(i, v),
                Ok(Err((line, e))) => {
                    log::warn!("skipping feed line {line}: {e}");
                    self.skipped += 1;
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    self.ended = true;
                    break;
                }
            }
        }
        if self.ended && !self.assembler.has_pending() {
            return Ok(Poll::Ended);
        }
        Ok(self.assembler.finish_tick().map_or(Poll::Pending, Poll::Row))
    }

    fn staleness(&self) -> Vec<u64> {
        self.assembler.staleness().to_vec()
    }

    fn skipped_records(&self) -> u64 {
        self.skipped
    }
}

/// Recorded session. A label repeating within the open group starts the
/// next tick. Any bad line is fatal and reported by line number.
pub struct ReplaySource {
    lines: std::io::Lines<BufReader<Box<dyn std::io::Read + Send>>>,
    line: usize,
    registry: SignalRegistry,
    assembler: TickAssembler,
    done: bool,
}

impl ReplaySource {
    pub fn open(path: &Path, registry: SignalRegistry) -> Result<Self, SourceError> {
        let f = std::fs::File::open(path).map_err(|source| SourceError::Open {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_reader(Box::new(f), registry))
    }

    pub fn from_reader(reader: Box<dyn std::io::Read + Send>, registry: SignalRegistry) -> Self {
        let m = registry.len();
        Self {
            lines: BufReader::new(reader).lines(),
            line: 0,
            registry,
            assembler: TickAssembler::new(m),
            done: false,
        }
    }
}

impl SampleSource for ReplaySource {
    fn poll(&mut self) -> Result<Poll, SourceError> {
        while !self.done {
            let Some(text) = self.lines.next() else {
                self.done = true;
                break;
            };
            self.line += 1;
            let text = text?;
            let rec = parse_record(&text, &self.registry).map_err(|source| SourceError::Malformed {
                line: self.line,
                source,
            })?;
            if let Some(r) = rec {
                if let Some(row) = self.assembler.push_grouped(r.signal.index, r.value) {
                    return Ok(Poll::Row(row));
                }
            }
        }
        if self.assembler.has_pending() {
            if let Some(row) = self.assembler.finish_tick() {
                return Ok(Poll::Row(row));
            }
        }
        Ok(Poll::Ended)
    }

    fn staleness(&self) -> Vec<u64> {
        self.assembler.staleness().to_vec()
    }
}

/// Writes one tick in the feed format: one record per signal, in index order.
pub fn write_tick<W: Write>(out: &mut W, registry: &SignalRegistry, row: &[f64]) -> std::io::Result<()> {
    for (id, v) in registry.ids().iter().zip(row) {
        let rec = serde_json::json!({ "id": id.label, "v": v });
        writeln!(out, "{rec}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn reg(m: usize) -> SignalRegistry {
        SignalRegistry::with_default_labels(m)
    }

    fn drain(src: &mut dyn SampleSource) -> Result<Vec<Vec<f64>>, SourceError> {
        let mut rows = vec![];
        loop {
            match src.poll()? {
                Poll::Row(r) => rows.push(r),
                Poll::Pending => std::thread::sleep(std::time::Duration::from_millis(1)),
                Poll::Ended => return Ok(rows),
            }
        }
    }

    #[test]
    fn recording_replays_exactly() {
        let spec = SynthSpec::builder(3).seed(4).build().unwrap();
        let mut rec = Vec::new();
        let rows: Vec<Vec<f64>> = (0..50).map(|t| spec.generate_tick(t)).collect();
        for r in &rows {
            write_tick(&mut rec, &reg(3), r).unwrap();
        }
        let mut src = ReplaySource::from_reader(Box::new(Cursor::new(rec)), reg(3));
        assert_eq!(drain(&mut src).unwrap(), rows);
    }

    #[test]
    fn replay_reports_the_bad_line() {
        let mut text = String::new();
        for k in 0..60 {
            if k == 49 {
                text.push_str("{\"id\":\"A\",\"v\":\n");
            } else {
                text.push_str(&format!("{{\"id\":\"{}\",\"v\":{k}}}\n", ["A", "B"][k % 2]));
            }
        }
        let mut src = ReplaySource::from_reader(Box::new(Cursor::new(text)), reg(2));
        match drain(&mut src) {
            Err(SourceError::Malformed { line, .. }) => assert_eq!(line, 50),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_replay_ends() {
        let mut src = ReplaySource::from_reader(Box::new(Cursor::new(Vec::new())), reg(2));
        assert_eq!(src.poll().unwrap(), Poll::Ended);
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            ReplaySource::open(Path::new("/nonexistent/x.ndjson"), reg(2)),
            Err(SourceError::Open { .. })
        ));
    }

    #[test]
    fn stream_skips_bad_lines_and_ends() {
        let text = "{\"id\":\"A\",\"v\":1}\ngarbage\n{\"id\":\"B\",\"v\":2}\n";
        let mut src = StreamSource::from_reader(Cursor::new(text.to_string()), reg(2));
        let rows = drain(&mut src).unwrap();
        assert_eq!(rows.last().unwrap(), &vec![1.0, 2.0]);
        assert_eq!(src.skipped_records(), 1);
    }

    #[test]
    fn synth_source_is_the_generator() {
        let spec = SynthSpec::builder(2).seed(1).build().unwrap();
        let mut s = SynthSource::new(spec.clone());
        for t in 0..5 {
            assert_eq!(s.poll().unwrap(), Poll::Row(spec.generate_tick(t)));
        }
    }
}
