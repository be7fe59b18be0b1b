//! Caption relabelling through an external vision-language service.
//!
//! Wire format: one JSON request line per TCP connection, answered by one
//! JSON reply line.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataops::{DatasetManifest, ManifestRecord, QuarantinedRecord};

use super::{LedgerEntry, PipelineError, Result, RunLedger};

pub const DEFAULT_PROMPT: &str = "Describe this image and its style in a very detailed manner";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoLabelRequest {
    pub sample_id: String,
    pub image_ref: String,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoLabelResponse {
    pub caption: String,
    pub model_tag: String,
    pub latency_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Reply {
    Ok(AutoLabelResponse),
    Error { message: String },
}

/// Sends one request and waits for its reply. An `Err` is a failed attempt.
pub trait Transport: Sync {
    fn call(&self, request: &AutoLabelRequest) -> std::result::Result<AutoLabelResponse, String>;
}

/// JSON lines over a fresh TCP connection per request.
#[derive(Clone, Debug)]
pub struct TcpTransport {
    pub addr: SocketAddr,
    pub timeout: Duration,
}

impl TcpTransport {
    pub fn new(addr: SocketAddr) -> Self {
        Self {
            addr,
            timeout: Duration::from_secs(60),
        }
    }
}

impl Transport for TcpTransport {
    fn call(&self, request: &AutoLabelRequest) -> std::result::Result<AutoLabelResponse, String> {
        let stream = TcpStream::connect_timeout(&self.addr, self.timeout)
            .map_err(|e| format!("connect: {e}"))?;
        stream
            .set_read_timeout(Some(self.timeout))
            .map_err(|e| e.to_string())?;
        let mut line = serde_json::to_string(request).map_err(|e| e.to_string())?;
        line.push('\n');
        (&stream)
            .write_all(line.as_bytes())
            .map_err(|e| format!("send: {e}"))?;
        let mut reply = String::new();
        BufReader::new(&stream)
            .read_line(&mut reply)
            .map_err(|e| format!("receive: {e}"))?;
        if reply.trim().is_empty() {
            return Err("connection closed without a reply".into());
        }
        match serde_json::from_str(&reply).map_err(|e| format!("malformed reply: {e}"))? {
            Reply::Ok(r) => Ok(r),
            Reply::Error { message } => Err(message),
        }
    }
}

/// Scripted behaviour of the mock service for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockBehavior {
    Caption {
        caption: String,
    },
    /// Fail the first `failures` attempts, then answer with `caption`.
    FailThen {
        failures: u32,
        caption: String,
    },
    AlwaysFail,
}

/// Replayable script: a per-sample override map plus a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub default: MockBehavior,
    #[serde(default)]
    pub per_sample: BTreeMap<String, MockBehavior>,
    #[serde(default = "default_tag")]
    pub model_tag: String,
}

fn default_tag() -> String {
    "mock-vlm".into()
}

impl MockScript {
    pub fn fixed(caption: &str) -> Self {
        Self {
            default: MockBehavior::Caption {
                caption: caption.into(),
            },
            per_sample: BTreeMap::new(),
            model_tag: default_tag(),
        }
    }

    pub fn with(mut self, sample_id: &str, behavior: MockBehavior) -> Self {
        self.per_sample.insert(sample_id.into(), behavior);
        self
    }
}

/// In-process mock service. Also usable as a `Transport` directly.
#[derive(Debug)]
pub struct MockService {
    script: MockScript,
    attempts: Mutex<BTreeMap<String, u32>>,
    requests: Mutex<Vec<AutoLabelRequest>>,
}

impl MockService {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            attempts: Mutex::new(BTreeMap::new()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn reply(&self, request: &AutoLabelRequest) -> Reply {
        self.requests
            .lock()
            .expect("mock lock")
            .push(request.clone());
        let attempt = {
            let mut attempts = self.attempts.lock().expect("mock lock");
            let n = attempts.entry(request.sample_id.clone()).or_insert(0);
            *n += 1;
            *n
        };
        let behavior = self
            .script
            .per_sample
            .get(&request.sample_id)
            .unwrap_or(&self.script.default);
        let ok = |caption: &str| {
            Reply::Ok(AutoLabelResponse {
                caption: caption.into(),
                model_tag: self.script.model_tag.clone(),
                latency_ms: 0,
            })
        };
        match behavior {
            MockBehavior::Caption { caption } => ok(caption),
            MockBehavior::FailThen { failures, caption } if attempt > *failures => ok(caption),
            MockBehavior::FailThen { .. } | MockBehavior::AlwaysFail => Reply::Error {
                message: format!("scripted failure (attempt {attempt})"),
            },
        }
    }

    pub fn attempts(&self, sample_id: &str) -> u32 {
        self.attempts
            .lock()
            .expect("mock lock")
            .get(sample_id)
            .copied()
            .unwrap_or(0)
    }

    pub fn requests(&self) -> Vec<AutoLabelRequest> {
        self.requests.lock().expect("mock lock").clone()
    }
}

impl Transport for MockService {
    fn call(&self, request: &AutoLabelRequest) -> std::result::Result<AutoLabelResponse, String> {
        match self.reply(request) {
            Reply::Ok(r) => Ok(r),
            Reply::Error { message } => Err(message),
        }
    }
}

/// The mock service behind a loopback TCP listener.
pub struct MockServer {
    pub addr: SocketAddr,
    pub service: Arc<MockService>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(script: MockScript) -> Result<Self> {
        Self::bind("127.0.0.1:0", script)
    }

    pub fn bind(addr: &str, script: MockScript) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let service = Arc::new(MockService::new(script));
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let service = Arc::clone(&service);
            let stop = Arc::clone(&stop);
            std::thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let service = Arc::clone(&service);
                    std::thread::spawn(move || serve_one(&service, stream));
                }
            })
        };
        Ok(Self {
            addr,
            service,
            stop,
            handle: Some(handle),
        })
    }

    /// Block serving requests until the process exits.
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve_one(service: &MockService, stream: TcpStream) {
    let mut line = String::new();
    if BufReader::new(&stream).read_line(&mut line).is_err() {
        return;
    }
    let reply = match serde_json::from_str::<AutoLabelRequest>(&line) {
        Ok(req) => service.reply(&req),
        Err(e) => Reply::Error {
            message: format!("bad request: {e}"),
        },
    };
    let mut out = serde_json::to_string(&reply).expect("reply serializes");
    out.push('\n');
    let _ = (&stream).write_all(out.as_bytes());
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop so it observes the flag.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

pub trait Sleeper: Sync {
    fn sleep(&self, d: Duration);
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested delays without waiting.
#[derive(Debug, Default)]
pub struct RecordingSleeper {
    pub delays: Mutex<Vec<Duration>>,
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, d: Duration) {
        self.delays.lock().expect("sleeper lock").push(d);
    }
}

/// Exponential backoff: retry `k` (1-based) waits `base · factor^(k−1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(1),
            factor: 2.0,
            max_retries: 5,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base.mul_f64(self.factor.powi(retry as i32 - 1))
    }
}

#[derive(Clone, Debug)]
pub struct AutolabelOptions {
    pub prompt: String,
    pub concurrency: usize,
    pub policy: RetryPolicy,
}

impl Default for AutolabelOptions {
    fn default() -> Self {
        Self {
            prompt: DEFAULT_PROMPT.into(),
            concurrency: 4,
            policy: RetryPolicy::default(),
        }
    }
}

#[derive(Debug)]
pub struct AutolabelOutcome {
    pub manifest: DatasetManifest,
    /// Retries used per record, in input order.
    pub retries: Vec<(String, u32)>,
}

impl AutolabelOutcome {
    pub fn quarantine_count(&self) -> usize {
        self.manifest.quarantined.len()
    }
}

enum Labelled {
    Caption(AutoLabelResponse),
    Failed(String),
}

fn label_one(
    record: &ManifestRecord,
    transport: &dyn Transport,
    options: &AutolabelOptions,
    sleeper: &dyn Sleeper,
) -> (Labelled, u32) {
    let request = AutoLabelRequest {
        sample_id: record.sample_id.clone(),
        image_ref: record
            .image_path
            .clone()
            .or_else(|| record.latent_path.clone())
            .unwrap_or_default(),
        prompt: options.prompt.clone(),
    };
    let mut retries = 0;
    loop {
        let started = Instant::now();
        let err = match transport.call(&request) {
            Ok(mut r) if !r.caption.trim().is_empty() => {
                if r.latency_ms == 0 {
                    r.latency_ms = started.elapsed().as_millis() as u64;
                }
                return (Labelled::Caption(r), retries);
            }
            Ok(_) => "empty caption".to_string(),
            Err(e) => e,
        };
        if retries == options.policy.max_retries {
            return (
                Labelled::Failed(format!("{err} after {retries} retries")),
                retries,
            );
        }
        retries += 1;
        sleeper.sleep(options.policy.delay(retries));
    }
}

/// Relabel every record. At most `concurrency` requests are in flight; the
/// output order and ledger order follow the input order regardless. Records
/// that exhaust their retries are quarantined.
pub fn autolabel(
    records: &[ManifestRecord],
    transport: &dyn Transport,
    options: &AutolabelOptions,
    sleeper: &dyn Sleeper,
    ledger: &mut RunLedger,
) -> Result<AutolabelOutcome> {
    if options.concurrency == 0 {
        return Err(PipelineError::Config(
            "autolabel concurrency must be positive".into(),
        ));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<(Labelled, u32)>>> =
        Mutex::new((0..records.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..options.concurrency.min(records.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(record) = records.get(i) else { break };
                let r = label_one(record, transport, options, sleeper);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });

    let mut manifest = DatasetManifest::default();
    let mut retries = Vec::with_capacity(records.len());
    for (record, result) in records
        .iter()
        .zip(results.into_inner().expect("results lock"))
    {
        let (labelled, n) = result.expect("every record processed");
        let outcome = match labelled {
            Labelled::Caption(r) => {
                manifest.records.push(ManifestRecord {
                    caption: r.caption,
                    ..record.clone()
                });
                format!("labelled by {}", r.model_tag)
            }
            Labelled::Failed(reason) => {
                manifest.quarantined.push(QuarantinedRecord {
                    record: record.clone(),
                    reason: reason.clone(),
                });
                format!("quarantined: {reason}")
            }
        };
        ledger.push(LedgerEntry::Autolabel {
            sample_id: record.sample_id.clone(),
            retries: n,
            outcome,
        })?;
        retries.push((record.sample_id.clone(), n));
    }
    Ok(AutolabelOutcome { manifest, retries })
}
