//! Axis scorers behind a narrow request/response boundary.
//!
//! Wire format of [`SubprocessBackend`], one JSON object per line:
//!
//! - request: `{"id": u64, "scorer": "vlm_id" | "vlm_prompt" | "clip" |
//!   "clip_iqa" | "vlm_diversity", "reference": str, "generated": str,
//!   "prompt": str, "metadata": {str: str}}`
//! - response: `{"id": u64, "score": number}` or `{"id": u64, "error": str}`
//!
//! VLM scorers answer integers `0..=4`; the others answer reals in `[0, 1]`.
//! Responses may arrive in any order.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    VlmId,
    VlmPrompt,
    Clip,
    ClipIqa,
    VlmDiversity,
}

impl Scorer {
    pub const ALL: [Scorer; 5] = [
        Scorer::VlmId,
        Scorer::VlmPrompt,
        Scorer::Clip,
        Scorer::ClipIqa,
        Scorer::VlmDiversity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::VlmId => "vlm_id",
            Scorer::VlmPrompt => "vlm_prompt",
            Scorer::Clip => "clip",
            Scorer::ClipIqa => "clip_iqa",
            Scorer::VlmDiversity => "vlm_diversity",
        }
    }

    /// Integer 0–4 scale (true) or unit interval (false).
    pub fn is_vlm_scale(self) -> bool {
        matches!(self, Scorer::VlmId | Scorer::VlmPrompt)
    }

    /// Maps a raw backend answer into `[0, 1]`, rejecting off-scale values.
    pub fn normalize(self, raw: f64) -> Result<f64> {
        let bad = |what: &str| Error::Protocol {
            axis: self.name().into(),
            message: format!("{what}, got {raw}"),
        };
        if self.is_vlm_scale() {
            if raw.fract() != 0.0 || !(0.0..=4.0).contains(&raw) {
                return Err(bad("expected an integer in 0..=4"));
            }
            Ok(raw / 4.0)
        } else {
            if !(0.0..=1.0).contains(&raw) {
                return Err(bad("expected a real in [0, 1]"));
            }
            Ok(raw)
        }
    }
}

impl std::str::FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scorer::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scorer `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub scorer: Scorer,
    pub reference: String,
    pub generated: String,
    pub prompt: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// A scorer returning raw (un-normalised) values.
pub trait ScoreBackend: Send + Sync {
    fn score(&self, request: &ScoreRequest) -> Result<f64>;
}

/// Always answers the same raw value.
#[derive(Clone, Copy, Debug)]
pub struct FixedBackend(pub f64);

impl ScoreBackend for FixedBackend {
    fn score(&self, _: &ScoreRequest) -> Result<f64> {
        Ok(self.0)
    }
}

/// Deterministic rules over request metadata:
///
/// - `vlm_id`: 4 when `ref_subject == gen_subject`, else 1
/// - `vlm_prompt`: 3
/// - `clip`: 0.8
/// - `clip_iqa`: 0.9
/// - `vlm_diversity`: 0.75 when `ref_pose != gen_pose` or
///   `ref_context != gen_context`, else 0.25
#[derive(Clone, Copy, Debug, Default)]
pub struct MetadataStub;

impl ScoreBackend for MetadataStub {
    fn score(&self, r: &ScoreRequest) -> Result<f64> {
        let m = |k: &str| r.metadata.get(k).map(String::as_str);
        Ok(match r.scorer {
            Scorer::VlmId => {
                if m("ref_subject").is_some() && m("ref_subject") == m("gen_subject") {
                    4.0
                } else {
                    1.0
                }
            }
            Scorer::VlmPrompt => 3.0,
            Scorer::Clip => 0.8,
            Scorer::ClipIqa => 0.9,
            Scorer::VlmDiversity => {
                if m("ref_pose") != m("gen_pose") || m("ref_context") != m("gen_context") {
                    0.75
                } else {
                    0.25
                }
            }
        })
    }
}

/// Registered scorers by name.
#[derive(Clone, Default)]
pub struct Backends {
    map: BTreeMap<Scorer, Arc<dyn ScoreBackend>>,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.map.keys()).finish()
    }
}

impl Backends {
    pub fn new() -> Self {
        Self::default()
    }

    /// [`MetadataStub`] for every scorer.
    pub fn stub() -> Self {
        let stub: Arc<dyn ScoreBackend> = Arc::new(MetadataStub);
        let mut b = Backends::new();
        for s in Scorer::ALL {
            b.register(s, stub.clone());
        }
        b
    }

    pub fn register(&mut self, scorer: Scorer, backend: Arc<dyn ScoreBackend>) -> &mut Self {
        self.map.insert(scorer, backend);
        self
    }

    pub fn get(&self, scorer: Scorer) -> Result<&Arc<dyn ScoreBackend>> {
        self.map.get(&scorer).ok_or_else(|| Error::Backend {
            axis: scorer.name().into(),
            message: "no backend registered".into(),
        })
    }

    /// Queries and normalises one scorer.
    pub fn query(&self, request: &ScoreRequest) -> Result<f64> {
        let raw = self.get(request.scorer)?.score(request)?;
        request.scorer.normalize(raw)
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    id: u64,
    scorer: &'a str,
    reference: &'a str,
    generated: &'a str,
    prompt: &'a str,
    metadata: &'a BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct WireResponse {
    id: u64,
    score: Option<f64>,
    error: Option<String>,
}

type Reply = std::result::Result<f64, String>;

struct Shared {
    stdin: Mutex<ChildStdin>,
    pending: Mutex<HashMap<u64, Sender<Reply>>>,
    in_flight: Mutex<usize>,
    slot_freed: Condvar,
    max_in_flight: usize,
    peak: AtomicUsize,
    next_id: AtomicU64,
}

/// Client for an external scorer process speaking the line protocol above
/// on stdin/stdout, with at most `max_in_flight` outstanding requests.
pub struct SubprocessBackend {
    shared: Arc<Shared>,
    child: Mutex<Child>,
    reader: Option<JoinHandle<()>>,
    timeout: Duration,
    label: String,
}

impl SubprocessBackend {
    pub fn spawn(
        program: &str,
        args: &[&str],
        max_in_flight: usize,
        timeout: Duration,
    ) -> Result<Self> {
        if max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Backend {
                axis: program.into(),
                message: format!("cannot start: {e}"),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let shared = Arc::new(Shared {
            stdin: Mutex::new(stdin),
            pending: Mutex::new(HashMap::new()),
            in_flight: Mutex::new(0),
            slot_freed: Condvar::new(),
            max_in_flight,
            peak: AtomicUsize::new(0),
            next_id: AtomicU64::new(0),
        });
        let reader_shared = shared.clone();
        let reader = std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                let Ok(resp) = serde_json::from_str::<WireResponse>(&line) else {
                    continue;
                };
                let reply = match (resp.score, resp.error) {
                    (_, Some(e)) => Err(e),
                    (Some(s), None) => Ok(s),
                    (None, None) => Err("response has neither score nor error".into()),
                };
                if let Some(tx) = reader_shared
                    .pending
                    .lock()
                    .expect("pending lock")
                    .remove(&resp.id)
                {
                    let _ = tx.send(reply);
                }
            }
            // EOF: fail everything still waiting.
            for (_, tx) in reader_shared.pending.lock().expect("pending lock").drain() {
                let _ = tx.send(Err("backend process closed its output".into()));
            }
        });
        Ok(SubprocessBackend {
            shared,
            child: Mutex::new(child),
            reader: Some(reader),
            timeout,
            label: program.to_string(),
        })
    }

    /// Highest number of simultaneously outstanding requests seen so far.
    pub fn peak_in_flight(&self) -> usize {
        self.shared.peak.load(Ordering::SeqCst)
    }

    fn acquire(&self) {
        let mut n = self.shared.in_flight.lock().expect("slot lock");
        while *n >= self.shared.max_in_flight {
            n = self.shared.slot_freed.wait(n).expect("slot lock");
        }
        *n += 1;
        self.shared.peak.fetch_max(*n, Ordering::SeqCst);
    }

    fn release(&self) {
        *self.shared.in_flight.lock().expect("slot lock") -= 1;
        self.shared.slot_freed.notify_one();
    }

    fn roundtrip(&self, request: &ScoreRequest) -> Result<f64> {
        let err = |message: String| Error::Backend {
            axis: request.scorer.name().into(),
            message: format!("{}: {message}", self.label),
        };
        let id = self.shared.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel();
        self.shared
            .pending
            .lock()
            .expect("pending lock")
            .insert(id, tx);
        let line = serde_json::to_string(&WireRequest {
            id,
            scorer: request.scorer.name(),
            reference: &request.reference,
            generated: &request.generated,
            prompt: &request.prompt,
            metadata: &request.metadata,
        })
        .expect("request serialises");
        {
            let mut stdin = self.shared.stdin.lock().expect("stdin lock");
            if let Err(e) = writeln!(stdin, "{line}").and_then(|_| stdin.flush()) {
                self.shared
                    .pending
                    .lock()
                    .expect("pending lock")
                    .remove(&id);
                return Err(err(format!("write failed: {e}")));
            }
        }
        match rx.recv_timeout(self.timeout) {
            Ok(Ok(v)) => Ok(v),
            Ok(Err(m)) => Err(err(m)),
            Err(RecvTimeoutError::Timeout) => {
                self.shared
                    .pending
                    .lock()
                    .expect("pending lock")
                    .remove(&id);
                Err(err(format!("timed out after {:?}", self.timeout)))
            }
            Err(RecvTimeoutError::Disconnected) => Err(err("reader stopped".into())),
        }
    }
}

impl ScoreBackend for SubprocessBackend {
    fn score(&self, request: &ScoreRequest) -> Result<f64> {
        self.acquire();
        let out = self.roundtrip(request);
        self.release();
        out
    }
}

impl Drop for SubprocessBackend {
    fn drop(&mut self) {
        if let Ok(mut c) = self.child.lock() {
            let _ = c.kill();
            let _ = c.wait();
        }
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}
