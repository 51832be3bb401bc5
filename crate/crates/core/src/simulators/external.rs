//! External simulators speaking line-delimited JSON over stdin/stdout.
//!
//! Request, one per line:  `{"v": 1, "id": 7, "theta": [..], "seed": 123}`
//! Response, one per line: `{"id": 7, "x": [..]}` or `{"id": 7, "error": "..."}`
//!
//! Responses may arrive in any order and are matched by id. A response may carry
//! `"v"`; if it does it must equal [`PROTOCOL_VERSION`]. The child may ignore
//! `seed`, but deterministic runs require honoring it.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::warn;
use serde::{Deserialize, Serialize};

use super::{SimResult, SimulationError, Simulator};
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;
pub const TRANSCRIPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    #[serde(default)]
    pub working_dir: Option<PathBuf>,
    pub theta_dim: usize,
    pub x_dim: usize,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
    /// Upper bound on requests written before waiting for answers.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Keep every request and response line for later replay.
    #[serde(default)]
    pub record_transcript: bool,
}

fn default_timeout_s() -> f64 {
    60.0
}

fn default_in_flight() -> usize {
    64
}

impl ExternalConfig {
    pub fn new(command: Vec<String>, theta_dim: usize, x_dim: usize) -> Self {
        ExternalConfig {
            command,
            working_dir: None,
            theta_dim,
            x_dim,
            timeout_s: default_timeout_s(),
            max_in_flight: default_in_flight(),
            record_transcript: false,
        }
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }
}

#[derive(Serialize)]
struct Request<'a> {
    v: u32,
    id: u64,
    theta: &'a [f64],
    seed: u64,
}

#[derive(Debug, Deserialize)]
struct Response {
    id: u64,
    #[serde(default)]
    v: Option<u32>,
    #[serde(default)]
    x: Option<Vec<f64>>,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Request,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub line: String,
}

/// Raw protocol traffic, stored as JSON lines after a version header.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

#[derive(Serialize, Deserialize)]
struct TranscriptHeader {
    transcript_version: u32,
    protocol_version: u32,
}

impl Transcript {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = serde_json::to_string(&TranscriptHeader {
            transcript_version: TRANSCRIPT_VERSION,
            protocol_version: PROTOCOL_VERSION,
        })?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header: TranscriptHeader = serde_json::from_str(
            lines.next().ok_or_else(|| Error::InvalidInput("empty transcript".into()))?,
        )?;
        if header.transcript_version != TRANSCRIPT_VERSION {
            return Err(Error::SchemaVersion {
                what: "simulator transcript",
                found: header.transcript_version,
                expected: TRANSCRIPT_VERSION,
            });
        }
        let entries = lines
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Transcript { entries })
    }
}

fn parse_response(line: &str, x_dim: usize) -> std::result::Result<(u64, SimResult), SimulationError> {
    let resp: Response =
        serde_json::from_str(line).map_err(|e| SimulationError::Malformed(format!("{e}: {line}")))?;
    if let Some(v) = resp.v {
        if v != PROTOCOL_VERSION {
            return Ok((
                resp.id,
                Err(SimulationError::Malformed(format!(
                    "protocol version {v}, expected {PROTOCOL_VERSION}"
                ))),
            ));
        }
    }
    let result = match (resp.x, resp.error) {
        (_, Some(e)) => Err(SimulationError::Failed(e)),
        (Some(x), None) if x.len() != x_dim => Err(SimulationError::Malformed(format!(
            "x has dimension {}, expected {x_dim}",
            x.len()
        ))),
        (Some(x), None) if x.iter().any(|v| !v.is_finite()) => {
            Err(SimulationError::Malformed("x has non-finite entries".into()))
        }
        (Some(x), None) => Ok(x),
        (None, None) => Err(SimulationError::Malformed("response has neither x nor error".into())),
    };
    Ok((resp.id, result))
}

type Pending = Arc<Mutex<HashMap<u64, Sender<SimResult>>>>;

struct Process {
    child: Child,
    stdin: ChildStdin,
    pending: Pending,
    alive: Arc<AtomicBool>,
    reader: Option<JoinHandle<()>>,
}

impl Process {
    fn spawn(config: &ExternalConfig, transcript: Option<Arc<Mutex<Transcript>>>) -> std::result::Result<Self, SimulationError> {
        let (program, args) = config
            .command
            .split_first()
            .ok_or_else(|| SimulationError::Io("empty simulator command".into()))?;
        let mut cmd = Command::new(program);
        cmd.args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        if let Some(dir) = &config.working_dir {
            cmd.current_dir(dir);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| SimulationError::Io(format!("cannot spawn {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let pending: Pending = Arc::default();
        let alive = Arc::new(AtomicBool::new(true));
        let reader = {
            let pending = Arc::clone(&pending);
            let alive = Arc::clone(&alive);
            let x_dim = config.x_dim;
            std::thread::spawn(move || {
                let reader = BufReader::new(stdout);
                for line in reader.lines() {
                    let Ok(line) = line else { break };
                    if line.trim().is_empty() {
                        continue;
                    }
                    if let Some(t) = &transcript {
                        t.lock().expect("transcript lock").entries.push(TranscriptEntry {
                            direction: Direction::Response,
                            line: line.clone(),
                        });
                    }
                    match parse_response(&line, x_dim) {
                        Ok((id, result)) => {
                            let tx = pending.lock().expect("pending lock").remove(&id);
                            match tx {
                                Some(tx) => {
                                    let _ = tx.send(result);
                                }
                                None => warn!("simulator answered unknown or expired id {id}"),
                            }
                        }
                        Err(e) => warn!("{e}"),
                    }
                }
                let orphans: Vec<_> = {
                    let mut p = pending.lock().expect("pending lock");
                    alive.store(false, Ordering::SeqCst);
                    p.drain().collect()
                };
                for (_, tx) in orphans {
                    let _ = tx.send(Err(SimulationError::ChildExited(
                        "simulator closed its output before answering".into(),
                    )));
                }
            })
        };
        Ok(Process {
            child,
            stdin,
            pending,
            alive,
            reader: Some(reader),
        })
    }

    fn shutdown(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}

/// Handle to a child process simulator. Requests are pipelined and matched by id;
/// a crashed child is restarted on the next request.
pub struct ExternalSimulator {
    config: ExternalConfig,
    process: Mutex<Option<Process>>,
    next_id: AtomicU64,
    transcript: Option<Arc<Mutex<Transcript>>>,
    restarts: AtomicU64,
}

impl std::fmt::Debug for ExternalSimulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalSimulator").field("config", &self.config).finish()
    }
}

struct Ticket {
    rx: Receiver<SimResult>,
    id: u64,
    deadline: Instant,
}

impl ExternalSimulator {
    pub fn new(config: ExternalConfig) -> Result<Self> {
        if config.command.is_empty() {
            return Err(Error::InvalidConfig("external simulator command is empty".into()));
        }
        if !(config.timeout_s > 0.0) || config.max_in_flight == 0 {
            return Err(Error::InvalidConfig("timeout and max_in_flight must be positive".into()));
        }
        let transcript = config.record_transcript.then(Arc::default);
        let sim = ExternalSimulator {
            config,
            process: Mutex::new(None),
            next_id: AtomicU64::new(1),
            transcript,
            restarts: AtomicU64::new(0),
        };
        let mut guard = sim.process.lock().expect("process lock");
        *guard = Some(Process::spawn(&sim.config, sim.transcript.clone())?);
        drop(guard);
        Ok(sim)
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.config
    }

    /// Number of times the child had to be restarted after exiting.
    pub fn restarts(&self) -> u64 {
        self.restarts.load(Ordering::SeqCst)
    }

    pub fn transcript(&self) -> Option<Transcript> {
        self.transcript
            .as_ref()
            .map(|t| t.lock().expect("transcript lock").clone())
    }

    fn submit(&self, theta: &[f64], seed: u64) -> std::result::Result<Ticket, SimulationError> {
        super::check_theta(theta, self.config.theta_dim)?;
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let line = serde_json::to_string(&Request {
            v: PROTOCOL_VERSION,
            id,
            theta,
            seed,
        })
        .map_err(|e| SimulationError::Io(e.to_string()))?;
        let mut guard = self.process.lock().expect("process lock");
        let dead = guard.as_ref().is_none_or(|p| !p.alive.load(Ordering::SeqCst));
        if dead {
            if let Some(mut old) = guard.take() {
                old.shutdown();
                self.restarts.fetch_add(1, Ordering::SeqCst);
            }
            *guard = Some(Process::spawn(&self.config, self.transcript.clone())?);
        }
        let proc = guard.as_mut().expect("process present");
        let (tx, rx) = mpsc::channel();
        {
            let mut pending = proc.pending.lock().expect("pending lock");
            if !proc.alive.load(Ordering::SeqCst) {
                return Err(SimulationError::ChildExited("simulator exited".into()));
            }
            pending.insert(id, tx);
        }
        if let Some(t) = &self.transcript {
            t.lock().expect("transcript lock").entries.push(TranscriptEntry {
                direction: Direction::Request,
                line: line.clone(),
            });
        }
        let written = writeln!(proc.stdin, "{line}").and_then(|_| proc.stdin.flush());
        if let Err(e) = written {
            proc.pending.lock().expect("pending lock").remove(&id);
            return Err(SimulationError::ChildExited(format!("writing request failed: {e}")));
        }
        Ok(Ticket {
            rx,
            id,
            deadline: Instant::now() + self.config.timeout(),
        })
    }

    fn wait(&self, ticket: Ticket) -> SimResult {
        let remaining = ticket.deadline.saturating_duration_since(Instant::now());
        match ticket.rx.recv_timeout(remaining) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => {
                if let Some(p) = self.process.lock().expect("process lock").as_ref() {
                    p.pending.lock().expect("pending lock").remove(&ticket.id);
                }
                Err(SimulationError::Timeout(self.config.timeout()))
            }
            Err(RecvTimeoutError::Disconnected) => {
                Err(SimulationError::ChildExited("simulator connection dropped".into()))
            }
        }
    }

    fn pipelined(&self, thetas: &[Vec<f64>], seeds: &[u64]) -> Vec<SimResult> {
        let mut results: Vec<Option<SimResult>> = vec![None; thetas.len()];
        let mut in_flight: std::collections::VecDeque<(usize, Ticket)> = Default::default();
        for (i, (theta, &seed)) in thetas.iter().zip(seeds).enumerate() {
            if in_flight.len() >= self.config.max_in_flight {
                let (j, t) = in_flight.pop_front().expect("non-empty");
                results[j] = Some(self.wait(t));
            }
            match self.submit(theta, seed) {
                Ok(t) => in_flight.push_back((i, t)),
                Err(e) => results[i] = Some(Err(e)),
            }
        }
        for (j, t) in in_flight {
            results[j] = Some(self.wait(t));
        }
        results.into_iter().map(|r| r.expect("every request resolved")).collect()
    }
}

impl Simulator for ExternalSimulator {
    fn theta_dim(&self) -> usize {
        self.config.theta_dim
    }

    fn x_dim(&self) -> usize {
        self.config.x_dim
    }

    fn simulate(&self, theta: &[f64], seed: u64) -> SimResult {
        let ticket = self.submit(theta, seed)?;
        self.wait(ticket)
    }

    /// Pipeline every request to the child. When the child dies, the requests it
    /// left unanswered are retried one at a time on a fresh child, so only the
    /// θ that actually crashes it is reported as failed.
    fn simulate_batch(&self, thetas: &[Vec<f64>], seeds: &[u64], _workers: usize) -> Vec<SimResult> {
        assert_eq!(thetas.len(), seeds.len(), "one seed per θ");
        let mut results = self.pipelined(thetas, seeds);
        for i in 0..results.len() {
            if matches!(results[i], Err(SimulationError::ChildExited(_))) {
                results[i] = self.simulate(&thetas[i], seeds[i]);
            }
        }
        results
    }
}

impl Drop for ExternalSimulator {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.process.lock() {
            if let Some(mut p) = guard.take() {
                p.shutdown();
            }
        }
    }
}

/// Replays a recorded transcript: each request is answered with the response
/// recorded for the identical `(θ, seed)`.
#[derive(Debug, Clone)]
pub struct TranscriptSimulator {
    theta_dim: usize,
    x_dim: usize,
    answers: HashMap<(Vec<u64>, u64), SimResult>,
}

#[derive(Deserialize)]
struct RecordedRequest {
    v: u32,
    id: u64,
    theta: Vec<f64>,
    seed: u64,
}

impl TranscriptSimulator {
    pub fn new(transcript: &Transcript, theta_dim: usize, x_dim: usize) -> Result<Self> {
        let mut requests = HashMap::new();
        let mut responses = HashMap::new();
        for e in &transcript.entries {
            match e.direction {
                Direction::Request => {
                    let r: RecordedRequest = serde_json::from_str(&e.line)?;
                    if r.v != PROTOCOL_VERSION {
                        return Err(Error::SchemaVersion {
                            what: "simulator protocol",
                            found: r.v,
                            expected: PROTOCOL_VERSION,
                        });
                    }
                    requests.insert(r.id, (r.theta, r.seed));
                }
                // Lines without a usable id were unmatched when recorded as well.
                Direction::Response => {
                    if let Ok((id, result)) = parse_response(&e.line, x_dim) {
                        responses.insert(id, result);
                    }
                }
            }
        }
        let answers = requests
            .into_iter()
            .filter_map(|(id, (theta, seed))| {
                let key = (theta.iter().map(|v| v.to_bits()).collect(), seed);
                responses.remove(&id).map(|r| (key, r))
            })
            .collect();
        Ok(TranscriptSimulator {
            theta_dim,
            x_dim,
            answers,
        })
    }
}

impl Simulator for TranscriptSimulator {
    fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    fn x_dim(&self) -> usize {
        self.x_dim
    }

    fn simulate(&self, theta: &[f64], seed: u64) -> SimResult {
        let key = (theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), seed);
        self.answers
            .get(&key)
            .cloned()
            .unwrap_or_else(|| Err(SimulationError::Failed("request not in transcript".into())))
    }
}
