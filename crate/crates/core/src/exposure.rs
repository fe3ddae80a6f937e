//! Exposure and event logging.
//!
//! Records are newline-delimited JSON, one per line, tagged by `kind`:
//!
//! | field | exposure | event | meaning |
//! |---|---|---|---|
//! | `kind` | `"exposure"` | `"event"` | record type |
//! | `timestamp` | yes | yes | milliseconds since the Unix epoch |
//! | `namespace` | yes | yes | namespace name |
//! | `experiment` | yes | yes | experiment name |
//! | `inputs` | yes | yes | every input supplied to the script |
//! | `params` | yes | | every variable the script set, in order |
//! | `overrides` | yes | | frozen names in effect (empty for real traffic) |
//! | `script_digest` | yes | | hex SHA1 of the serialized script |
//! | `event` | | yes | event name |
//! | `payload` | | yes | free-form map |
//!
//! Callers enqueue records; one background thread writes them. Exposures
//! are deduplicated per process by (namespace, experiment, inputs) in a
//! bounded LRU. When the sink fails, records are buffered up to a bound
//! and then dropped and counted.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use indexmap::IndexMap;
use lru::LruCache;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interpreter::{Evaluation, ExposureHook, Inputs, Overrides};
use crate::store::now_ms;
use crate::value::Value;

pub const DEFAULT_DEDUP_CAPACITY: usize = 100_000;
pub const DEFAULT_BUFFER_LIMIT: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureEvent {
    pub timestamp: u64,
    pub namespace: String,
    pub experiment: String,
    pub inputs: Inputs,
    pub params: IndexMap<String, Value>,
    pub overrides: Overrides,
    pub script_digest: String,
}

impl ExposureEvent {
    pub fn from_evaluation(ev: &Evaluation, timestamp: u64) -> Self {
        ExposureEvent {
            timestamp,
            namespace: ev.namespace.clone(),
            experiment: ev.experiment.clone(),
            inputs: ev.inputs.clone(),
            params: ev.params.clone(),
            overrides: ev.overrides.clone(),
            script_digest: ev.script_digest.clone(),
        }
    }

    fn dedup_key(&self) -> String {
        format!(
            "{}\u{0}{}\u{0}{}",
            self.namespace,
            self.experiment,
            serde_json::to_string(&self.inputs).expect("values always serialize")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomEvent {
    pub timestamp: u64,
    pub namespace: String,
    pub experiment: String,
    pub inputs: Inputs,
    pub event: String,
    #[serde(default)]
    pub payload: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Exposure(ExposureEvent),
    Event(CustomEvent),
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

pub fn parse_record(line: &str) -> Result<LogRecord, serde_json::Error> {
    serde_json::from_str(line)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LogError {
    #[error("event name must not be empty")]
    EmptyEventName,
    #[error("logger has shut down")]
    Closed,
}

/// Destination for log lines. `line` has no trailing newline.
pub trait Sink: Send {
    fn write_line(&mut self, line: &str) -> io::Result<()>;
    fn flush(&mut self) -> io::Result<()>;
}

pub struct StdoutSink;

impl Sink for StdoutSink {
    fn write_line(&mut self, line: &str) -> io::Result<()> {
        let mut out = io::stdout().lock();
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stdout().flush()
    }
}

/// Collects lines in memory; clones share the buffer.
#[derive(Clone, Default)]
pub struct MemorySink {
    lines: Arc<Mutex<Vec<String>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lines(&self) -> Vec<String> {
        self.lines.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Sink for MemorySink {
    fn write_line(&mut self, line: &str) -> io::Result<()> {
        self.lines
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(line.to_string());
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Appends to a file, rotating to `path.1`, `path.2`, ... by size.
pub struct FileSink {
    path: PathBuf,
    file: io::BufWriter<File>,
    size: u64,
    max_bytes: u64,
    keep: usize,
}

impl FileSink {
    /// `max_bytes == 0` disables rotation. `keep` is the number of rotated
    /// files retained.
    pub fn open(path: impl Into<PathBuf>, max_bytes: u64, keep: usize) -> io::Result<Self> {
        let path = path.into();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let size = file.metadata()?.len();
        Ok(FileSink {
            path,
            file: io::BufWriter::new(file),
            size,
            max_bytes,
            keep: keep.max(1),
        })
    }

    fn rotated(&self, i: usize) -> PathBuf {
        let mut name = self.path.as_os_str().to_owned();
        name.push(format!(".{i}"));
        PathBuf::from(name)
    }

    fn rotate(&mut self) -> io::Result<()> {
        self.file.flush()?;
        for i in (1..self.keep).rev() {
            let from = self.rotated(i);
            if from.exists() {
                std::fs::rename(&from, self.rotated(i + 1))?;
            }
        }
        std::fs::rename(&self.path, self.rotated(1))?;
        let file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        self.file = io::BufWriter::new(file);
        self.size = 0;
        Ok(())
    }
}

impl Sink for FileSink {
    fn write_line(&mut self, line: &str) -> io::Result<()> {
        let len = line.len() as u64 + 1;
        if self.max_bytes > 0 && self.size > 0 && self.size + len > self.max_bytes {
            self.rotate()?;
        }
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        self.size += len;
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.file.flush()
    }
}

#[derive(Debug, Default)]
struct Counters {
    written: AtomicU64,
    deduplicated: AtomicU64,
    dropped: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LogStats {
    pub written: u64,
    pub deduplicated: u64,
    pub dropped: u64,
}

enum Msg {
    Record(LogRecord),
    Flush(Sender<()>),
}

struct Inner {
    tx: Mutex<Option<Sender<Msg>>>,
    worker: Mutex<Option<JoinHandle<()>>>,
    seen: Mutex<LruCache<String, ()>>,
    counters: Arc<Counters>,
}

impl Drop for Inner {
    fn drop(&mut self) {
        self.tx.lock().unwrap_or_else(|e| e.into_inner()).take();
        if let Some(h) = self.worker.lock().unwrap_or_else(|e| e.into_inner()).take() {
            let _ = h.join();
        }
    }
}

/// Handle to the logging queue. Clones share the queue, the dedup cache
/// and the counters.
#[derive(Clone)]
pub struct ExposureLogger {
    inner: Arc<Inner>,
}

impl ExposureLogger {
    pub fn new(sink: Box<dyn Sink>) -> Self {
        Self::with_limits(sink, DEFAULT_DEDUP_CAPACITY, DEFAULT_BUFFER_LIMIT)
    }

    pub fn with_limits(sink: Box<dyn Sink>, dedup_capacity: usize, buffer_limit: usize) -> Self {
        let (tx, rx) = mpsc::channel();
        let counters = Arc::new(Counters::default());
        let worker = {
            let counters = counters.clone();
            std::thread::Builder::new()
                .name("exposure-log".into())
                .spawn(move || consume(rx, sink, buffer_limit, &counters))
                .expect("spawn logging thread")
        };
        ExposureLogger {
            inner: Arc::new(Inner {
                tx: Mutex::new(Some(tx)),
                worker: Mutex::new(Some(worker)),
                seen: Mutex::new(LruCache::new(
                    NonZeroUsize::new(dedup_capacity.max(1)).expect("capacity is at least 1"),
                )),
                counters,
            }),
        }
    }

    fn send(&self, msg: Msg) -> Result<(), LogError> {
        let tx = self.inner.tx.lock().unwrap_or_else(|e| e.into_inner());
        tx.as_ref()
            .ok_or(LogError::Closed)?
            .send(msg)
            .map_err(|_| LogError::Closed)
    }

    /// Queues an exposure unless this process already logged one for the
    /// same (namespace, experiment, inputs). Returns whether it was queued.
    pub fn log_exposure(&self, event: ExposureEvent) -> Result<bool, LogError> {
        let key = event.dedup_key();
        {
            let mut seen = self.inner.seen.lock().unwrap_or_else(|e| e.into_inner());
            if seen.put(key, ()).is_some() {
                self.inner.counters.deduplicated.fetch_add(1, Ordering::Relaxed);
                return Ok(false);
            }
        }
        self.send(Msg::Record(LogRecord::Exposure(event)))?;
        Ok(true)
    }

    pub fn log_event(&self, event: CustomEvent) -> Result<(), LogError> {
        if event.event.is_empty() {
            return Err(LogError::EmptyEventName);
        }
        self.send(Msg::Record(LogRecord::Event(event)))
    }

    /// Blocks until every record queued before this call reached the sink
    /// (or was buffered after a sink failure).
    pub fn flush(&self) -> Result<(), LogError> {
        let (ack_tx, ack_rx) = mpsc::channel();
        self.send(Msg::Flush(ack_tx))?;
        ack_rx.recv().map_err(|_| LogError::Closed)
    }

    pub fn stats(&self) -> LogStats {
        let c = &self.inner.counters;
        LogStats {
            written: c.written.load(Ordering::Relaxed),
            deduplicated: c.deduplicated.load(Ordering::Relaxed),
            dropped: c.dropped.load(Ordering::Relaxed),
        }
    }

    /// Hook for [`Assignment`](crate::interpreter::Assignment) that logs
    /// the first exposure of each evaluation.
    pub fn hook(&self) -> ExposureHook {
        let logger = self.clone();
        Arc::new(move |ev: &Evaluation| {
            let _ = logger.log_exposure(ExposureEvent::from_evaluation(ev, now_ms()));
        })
    }
}

fn consume(rx: Receiver<Msg>, mut sink: Box<dyn Sink>, limit: usize, counters: &Counters) {
    let mut pending: VecDeque<String> = VecDeque::new();
    let drain = |sink: &mut Box<dyn Sink>, pending: &mut VecDeque<String>| {
        while let Some(line) = pending.front() {
            if sink.write_line(line).is_err() {
                return;
            }
            pending.pop_front();
            counters.written.fetch_add(1, Ordering::Relaxed);
        }
    };
    for msg in rx {
        match msg {
            Msg::Record(rec) => {
                if pending.len() >= limit {
                    counters.dropped.fetch_add(1, Ordering::Relaxed);
                } else {
                    pending.push_back(rec.to_line());
                }
                drain(&mut sink, &mut pending);
            }
            Msg::Flush(ack) => {
                drain(&mut sink, &mut pending);
                let _ = sink.flush();
                let _ = ack.send(());
            }
        }
    }
    drain(&mut sink, &mut pending);
    let _ = sink.flush();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exposure(ns: &str, exp: &str, unit: i64) -> ExposureEvent {
        ExposureEvent {
            timestamp: 1,
            namespace: ns.into(),
            experiment: exp.into(),
            inputs: [("userid".to_string(), Value::Int(unit))].into(),
            params: [("x".to_string(), Value::Int(1))].into_iter().collect(),
            overrides: Overrides::new(),
            script_digest: "abc".into(),
        }
    }

    fn event(name: &str) -> CustomEvent {
        CustomEvent {
            timestamp: 2,
            namespace: "ns".into(),
            experiment: "e".into(),
            inputs: Inputs::new(),
            event: name.into(),
            payload: BTreeMap::new(),
        }
    }

    #[test]
    fn dedup_per_experiment() {
        let sink = MemorySink::new();
        let log = ExposureLogger::new(Box::new(sink.clone()));
        assert!(log.log_exposure(exposure("ns", "e1", 1)).unwrap());
        assert!(!log.log_exposure(exposure("ns", "e1", 1)).unwrap());
        assert!(log.log_exposure(exposure("ns", "e2", 1)).unwrap());
        log.flush().unwrap();
        assert_eq!(sink.lines().len(), 2);
        assert_eq!(log.stats().deduplicated, 1);
    }

    #[test]
    fn events_are_ordered_and_never_deduplicated() {
        let sink = MemorySink::new();
        let log = ExposureLogger::new(Box::new(sink.clone()));
        log.log_exposure(exposure("ns", "e", 1)).unwrap();
        for _ in 0..1000 {
            log.log_event(event("conversion")).unwrap();
        }
        assert_eq!(log.log_event(event("")), Err(LogError::EmptyEventName));
        log.flush().unwrap();
        let lines = sink.lines();
        assert_eq!(lines.len(), 1001);
        assert!(matches!(parse_record(&lines[0]).unwrap(), LogRecord::Exposure(_)));
        assert!(lines[1..]
            .iter()
            .all(|l| matches!(parse_record(l).unwrap(), LogRecord::Event(_))));
    }

    #[test]
    fn record_schema() {
        let line = LogRecord::Exposure(exposure("ns", "e", 7)).to_line();
        assert_eq!(
            line,
            r#"{"kind":"exposure","timestamp":1,"namespace":"ns","experiment":"e","inputs":{"userid":7},"params":{"x":1},"overrides":{},"script_digest":"abc"}"#
        );
        assert_eq!(
            parse_record(&line).unwrap(),
            LogRecord::Exposure(exposure("ns", "e", 7))
        );
    }

    struct Failing {
        fail: Arc<std::sync::atomic::AtomicBool>,
        inner: MemorySink,
    }

    impl Sink for Failing {
        fn write_line(&mut self, line: &str) -> io::Result<()> {
            if self.fail.load(Ordering::SeqCst) {
                Err(io::Error::other("down"))
            } else {
                self.inner.write_line(line)
            }
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn buffers_then_drops_when_sink_fails() {
        let fail = Arc::new(std::sync::atomic::AtomicBool::new(true));
        let mem = MemorySink::new();
        let log = ExposureLogger::with_limits(
            Box::new(Failing {
                fail: fail.clone(),
                inner: mem.clone(),
            }),
            100,
            5,
        );
        for _ in 0..8 {
            log.log_event(event("e")).unwrap();
        }
        log.flush().unwrap();
        assert_eq!(log.stats().dropped, 3);
        assert!(mem.lines().is_empty());
        fail.store(false, Ordering::SeqCst);
        log.flush().unwrap();
        assert_eq!(mem.lines().len(), 5);
        assert_eq!(log.stats().written, 5);
    }

    #[test]
    fn file_sink_rotates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exposures.log");
        let log = ExposureLogger::new(Box::new(FileSink::open(&path, 2_000, 3).unwrap()));
        for i in 0..100 {
            log.log_exposure(exposure("ns", "e", i)).unwrap();
        }
        log.flush().unwrap();
        let mut total = 0;
        for p in std::fs::read_dir(dir.path()).unwrap() {
            let text = std::fs::read_to_string(p.unwrap().path()).unwrap();
            assert!(text.len() <= 2_000);
            for line in text.lines() {
                parse_record(line).unwrap();
                total += 1;
            }
        }
        // Four files kept (current + 3 rotated); older ones are gone.
        assert!(total < 100 && total > 0);
        assert!(dir.path().join("exposures.log.3").exists());
        assert!(!dir.path().join("exposures.log.4").exists());
    }
}
