//! External language-model scorer: a line-delimited JSON protocol over TCP,
//! a client with timeout and retries, and a bundled stub scorer.
//!
//! One request line `{"texts": [...]}` is answered by one response line
//! `{"perplexities": [...]}` aligned by index.

use std::collections::HashSet;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{tokenize, TokenizationMode};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("scorer at {endpoint} unreachable after {attempts} attempt(s): {detail}")]
    Unreachable { endpoint: String, attempts: u32, detail: String },
    #[error("scorer protocol violation: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub perplexities: Vec<f64>,
}

/// A frozen fluency oracle. Implementations must not change state in
/// response to requests.
pub trait Scorer: Send + Sync {
    fn perplexities(&self, texts: &[String]) -> Result<Vec<f64>, ScorerError>;
}

fn check_response(texts: &[String], resp: ScoreResponse) -> Result<Vec<f64>, ScorerError> {
    if resp.perplexities.len() != texts.len() {
        return Err(ScorerError::Protocol(format!(
            "{} perplexities for {} texts",
            resp.perplexities.len(),
            texts.len()
        )));
    }
    if let Some(bad) = resp.perplexities.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(ScorerError::Protocol(format!("perplexity {bad} is not a positive number")));
    }
    Ok(resp.perplexities)
}

#[derive(Debug, Clone)]
pub struct TcpScorer {
    pub endpoint: String,
    pub timeout: Duration,
    pub retries: u32,
}

impl TcpScorer {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self { endpoint: endpoint.into(), timeout: Duration::from_secs(10), retries: 2 }
    }

    fn attempt(&self, line: &[u8], texts: &[String]) -> io::Result<ScoreResponse> {
        let addr = self
            .endpoint
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "endpoint resolves to no address"))?;
        let mut stream = TcpStream::connect_timeout(&addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        stream.write_all(line)?;
        stream.flush()?;
        let mut reply = String::new();
        BufReader::new(stream).read_line(&mut reply)?;
        if reply.is_empty() {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed without a reply"));
        }
        debug!("scorer answered {} texts", texts.len());
        serde_json::from_str(&reply).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

impl Scorer for TcpScorer {
    fn perplexities(&self, texts: &[String]) -> Result<Vec<f64>, ScorerError> {
        let mut line = serde_json::to_vec(&ScoreRequest { texts: texts.to_vec() }).expect("request serializes");
        line.push(b'\n');
        let attempts = self.retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(&line, texts) {
                Ok(resp) => return check_response(texts, resp),
                Err(e) => {
                    warn!("scorer request {attempt}/{attempts} to {} failed: {e}", self.endpoint);
                    last = e.to_string();
                }
            }
        }
        Err(ScorerError::Unreachable { endpoint: self.endpoint.clone(), attempts, detail: last })
    }
}

/// Uniform unigram model over a closed vocabulary. Every known token and the
/// end-of-sentence event share the in-vocabulary mass equally; unknown tokens
/// get a fixed probability. Perplexity is taken over tokens plus end of
/// sentence, so the empty text is scoreable.
#[derive(Debug, Clone)]
pub struct StubScorer {
    vocab: HashSet<String>,
    mode: TokenizationMode,
    oov_prob: f64,
}

impl StubScorer {
    pub const DEFAULT_OOV_PROB: f64 = 1e-4;

    pub fn new(vocab: impl IntoIterator<Item = String>, mode: TokenizationMode) -> Self {
        Self { vocab: vocab.into_iter().collect(), mode, oov_prob: Self::DEFAULT_OOV_PROB }
    }

    pub fn with_oov_prob(mut self, p: f64) -> Self {
        assert!(p > 0.0 && p < 1.0, "OOV probability must lie in (0, 1)");
        self.oov_prob = p;
        self
    }

    fn known_prob(&self) -> f64 {
        (1.0 - self.oov_prob) / (self.vocab.len() + 1) as f64
    }

    pub fn perplexity(&self, text: &str) -> f64 {
        let tokens = tokenize(text, self.mode);
        let known = self.known_prob().ln();
        let oov = self.oov_prob.ln();
        let log_prob: f64 = tokens.iter().map(|t| if self.vocab.contains(t) { known } else { oov }).sum::<f64>() + known;
        (-log_prob / (tokens.len() + 1) as f64).exp()
    }
}

impl Scorer for StubScorer {
    fn perplexities(&self, texts: &[String]) -> Result<Vec<f64>, ScorerError> {
        Ok(texts.iter().map(|t| self.perplexity(t)).collect())
    }
}

fn handle(stream: TcpStream, scorer: &dyn Scorer) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<ScoreRequest>(&line) {
            Ok(req) => match scorer.perplexities(&req.texts) {
                Ok(perplexities) => serde_json::to_string(&ScoreResponse { perplexities }),
                Err(e) => serde_json::to_string(&serde_json::json!({ "error": e.to_string() })),
            },
            Err(e) => serde_json::to_string(&serde_json::json!({ "error": format!("bad request: {e}") })),
        }
        .expect("reply serializes");
        writer.write_all(reply.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Answers requests on `listener` until the process exits, one thread per
/// connection.
pub fn serve(listener: TcpListener, scorer: Arc<dyn Scorer>) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let scorer = Arc::clone(&scorer);
        thread::spawn(move || {
            if let Err(e) = handle(stream, scorer.as_ref()) {
                debug!("scorer connection ended: {e}");
            }
        });
    }
    Ok(())
}

/// Binds an ephemeral local port and serves `scorer` on a background thread.
pub fn spawn_local(scorer: Arc<dyn Scorer>) -> io::Result<SocketAddr> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    thread::spawn(move || serve(listener, scorer));
    Ok(addr)
}
