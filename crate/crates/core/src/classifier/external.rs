//! Line-delimited JSON scorer protocol, client and server side.
//!
//! ```text
//! -> {"op":"hello","manifest":[...]}
//! <- {"op":"hello","manifest":[...]}          (must match exactly)
//! -> {"op":"score","id":n,"texts":[...]}
//! <- {"op":"scores","id":n,"probs":[[...],...]}
//! <- {"op":"error","id":n,"msg":"..."}        (aborts the batch)
//! ```

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{validate_probs, Scorer, ScorerError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Message {
    Hello { manifest: Vec<String> },
    Score { id: u64, texts: Vec<String> },
    Scores { id: u64, probs: Vec<Vec<f64>> },
    Error {
        #[serde(default)]
        id: Option<u64>,
        msg: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Program and arguments; the peer talks over its stdin/stdout.
    Command(Vec<String>),
    /// `host:port` of a peer listening on TCP.
    Tcp(String),
}

#[derive(Debug, Clone, Copy)]
pub struct ExternalOptions {
    /// Texts per `score` request.
    pub chunk_size: usize,
    pub timeout: Duration,
}

impl Default for ExternalOptions {
    fn default() -> Self {
        ExternalOptions { chunk_size: 256, timeout: Duration::from_secs(60) }
    }
}

struct Connection {
    writer: Box<dyn Write + Send>,
    responses: Receiver<io::Result<String>>,
    next_id: u64,
    // Set after any failure: in-flight responses would desynchronize later batches.
    broken: bool,
}

/// Proxy for a peer process or socket implementing the scorer protocol.
pub struct ExternalScorer {
    labels: Vec<String>,
    options: ExternalOptions,
    conn: Mutex<Connection>,
    child: Option<Child>,
}

impl std::fmt::Debug for ExternalScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalScorer").field("labels", &self.labels).finish_non_exhaustive()
    }
}

fn spawn_reader<R: io::Read + Send + 'static>(reader: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

/// Opens a connection and performs the manifest handshake.
pub fn connect(endpoint: &Endpoint, manifest: &[String], options: ExternalOptions) -> Result<ExternalScorer, ScorerError> {
    if options.chunk_size == 0 {
        return Err(ScorerError::Io(io::Error::new(io::ErrorKind::InvalidInput, "chunk_size must be positive")));
    }
    let (writer, responses, child): (Box<dyn Write + Send>, _, _) = match endpoint {
        Endpoint::Command(argv) => {
            let (program, args) = argv
                .split_first()
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty scorer command"))?;
            let mut child = Command::new(program)
                .args(args)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            (Box::new(io::BufWriter::new(stdin)), spawn_reader(stdout), Some(child))
        }
        Endpoint::Tcp(addr) => {
            let stream = TcpStream::connect(addr)?;
            stream.set_nodelay(true)?;
            let reader = stream.try_clone()?;
            (Box::new(io::BufWriter::new(stream)), spawn_reader(reader), None)
        }
    };
    let mut conn = Connection { writer, responses, next_id: 1, broken: false };
    send(&mut conn, &Message::Hello { manifest: manifest.to_vec() })?;
    match receive(&mut conn, options.timeout, None)? {
        Message::Hello { manifest: got } if got == manifest => {}
        Message::Hello { manifest: got } => {
            return Err(ScorerError::Handshake { expected: manifest.to_vec(), got });
        }
        Message::Error { id, msg } => return Err(ScorerError::Peer { request_id: id, msg }),
        other => {
            return Err(ScorerError::Protocol {
                request_id: None,
                index: 0,
                msg: format!("expected hello, got {other:?}"),
            })
        }
    }
    Ok(ExternalScorer { labels: manifest.to_vec(), options, conn: Mutex::new(conn), child })
}

fn send(conn: &mut Connection, msg: &Message) -> Result<(), ScorerError> {
    let mut line = serde_json::to_string(msg).expect("message serializes");
    line.push('\n');
    conn.writer.write_all(line.as_bytes())?;
    conn.writer.flush()?;
    Ok(())
}

fn receive(conn: &mut Connection, timeout: Duration, waiting_for: Option<u64>) -> Result<Message, ScorerError> {
    let line = match conn.responses.recv_timeout(timeout) {
        Ok(line) => line?,
        Err(RecvTimeoutError::Timeout) => return Err(ScorerError::Timeout { request_id: waiting_for }),
        Err(RecvTimeoutError::Disconnected) => {
            return Err(ScorerError::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "peer closed the connection")))
        }
    };
    serde_json::from_str(&line).map_err(|e| ScorerError::Protocol {
        request_id: waiting_for,
        index: 0,
        msg: format!("malformed response {line:?}: {e}"),
    })
}

impl ExternalScorer {
    fn score_locked(&self, conn: &mut Connection, texts: &[&str]) -> Result<Vec<Vec<f64>>, ScorerError> {
        // Pipeline every chunk, then reassemble by request id.
        let mut pending: HashMap<u64, (usize, usize)> = HashMap::new();
        let mut order = Vec::new();
        for (c, chunk) in texts.chunks(self.options.chunk_size).enumerate() {
            let id = conn.next_id;
            conn.next_id += 1;
            pending.insert(id, (c * self.options.chunk_size, chunk.len()));
            order.push(id);
            send(conn, &Message::Score { id, texts: chunk.iter().map(|t| t.to_string()).collect() })?;
        }
        let mut results: HashMap<u64, Vec<Vec<f64>>> = HashMap::new();
        while !pending.is_empty() {
            let oldest = order.iter().copied().find(|id| pending.contains_key(id));
            match receive(conn, self.options.timeout, oldest)? {
                Message::Scores { id, probs } => {
                    let (offset, len) = pending.remove(&id).ok_or_else(|| ScorerError::Protocol {
                        request_id: Some(id),
                        index: 0,
                        msg: "response for unknown request id".into(),
                    })?;
                    validate_probs(&probs, len, self.labels.len(), Some(id), offset)?;
                    results.insert(id, probs);
                }
                Message::Error { id, msg } => return Err(ScorerError::Peer { request_id: id, msg }),
                other => {
                    return Err(ScorerError::Protocol {
                        request_id: oldest,
                        index: 0,
                        msg: format!("unexpected message {other:?}"),
                    })
                }
            }
        }
        Ok(order.into_iter().flat_map(|id| results.remove(&id).expect("all ids answered")).collect())
    }
}

impl Scorer for ExternalScorer {
    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn score_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ScorerError> {
        let mut conn = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        if conn.broken {
            return Err(ScorerError::Io(io::Error::other("scorer connection unusable after an earlier failure")));
        }
        let out = self.score_locked(&mut conn, texts);
        if out.is_err() {
            conn.broken = true;
        }
        out
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Serves `scorer` over the protocol until `input` ends.
///
/// The hello reply advertises the scorer's own manifest; the client decides whether it matches.
pub fn serve<R: BufRead, W: Write>(scorer: &dyn Scorer, input: R, mut output: W) -> io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Message>(&line) {
            Ok(Message::Hello { .. }) => Message::Hello { manifest: scorer.labels().to_vec() },
            Ok(Message::Score { id, texts }) => {
                let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
                if refs.is_empty() {
                    Message::Scores { id, probs: Vec::new() }
                } else {
                    match super::score_batch(scorer, &refs) {
                        Ok(probs) => Message::Scores { id, probs },
                        Err(e) => Message::Error { id: Some(id), msg: e.to_string() },
                    }
                }
            }
            Ok(other) => Message::Error { id: None, msg: format!("unexpected message {other:?}") },
            Err(e) => Message::Error { id: None, msg: format!("malformed request: {e}") },
        };
        serde_json::to_writer(&mut output, &reply)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}
