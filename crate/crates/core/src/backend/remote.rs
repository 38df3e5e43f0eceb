//! HTTP client for a masked-LM scoring service.
//!
//! Wire format, JSON over `POST {base}/v1/score`:
//!
//! ```text
//! request:  {"tokens": [str], "mask_positions": [int], "top_k": int}
//! response: {"distributions": [[{"token": str, "p": float}, ...], ...]}
//! ```
//!
//! One distribution per mask position, in request order. HTTP 503 means the
//! service is temporarily unavailable and is retried.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{rank, BackendError, FillMaskScorer, MaskDistribution, ScoreRequest, TokenProb};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub timeout_secs: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            timeout_secs: 30,
            retries: 3,
            backoff_ms: 200,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub tokens: Vec<String>,
    pub mask_positions: Vec<usize>,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTokenProb {
    pub token: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub distributions: Vec<Vec<WireTokenProb>>,
}

pub fn encode_request(request: &ScoreRequest, vocab: &Vocab) -> WireRequest {
    WireRequest {
        tokens: vocab.to_strings(&request.tokens),
        mask_positions: request.mask_positions.clone(),
        top_k: request.top_k,
    }
}

/// Map a response back to token ids, re-rank it, and validate it against
/// the request.
pub fn decode_response(
    response: WireResponse,
    request: &ScoreRequest,
    vocab: &Vocab,
) -> Result<MaskDistribution, BackendError> {
    let mut positions = Vec::with_capacity(response.distributions.len());
    for dist in response.distributions {
        let mut out = Vec::with_capacity(dist.len());
        for t in dist {
            let token = vocab
                .id(&t.token)
                .ok_or_else(|| BackendError::VocabMismatch(format!("unknown token {:?} in response", t.token)))?;
            out.push(TokenProb { token, p: t.p });
        }
        rank(&mut out, request.top_k, vocab);
        positions.push(out);
    }
    let d = MaskDistribution { positions };
    d.validate(request.mask_positions.len(), request.top_k)?;
    Ok(d)
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn acquire(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteBackend {
    url: String,
    client: reqwest::blocking::Client,
    vocab: Arc<Vocab>,
    config: RemoteConfig,
    gate: Gate,
}

impl RemoteBackend {
    pub fn new(base_url: &str, vocab: Arc<Vocab>, config: RemoteConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::BackendUnavailable(e.to_string()))?;
        Ok(Self {
            url: format!("{}/v1/score", base_url.trim_end_matches('/')),
            client,
            vocab,
            gate: Gate {
                free: Mutex::new(config.max_in_flight.max(1)),
                cv: Condvar::new(),
            },
            config,
        })
    }

    fn attempt(&self, body: &WireRequest) -> Result<WireResponse, Attempt> {
        let _slot = self.gate.acquire();
        let resp = self
            .client
            .post(&self.url)
            .json(body)
            .send()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status == reqwest::StatusCode::SERVICE_UNAVAILABLE {
            return Err(Attempt::Retry("service returned 503".into()));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Attempt::Fatal(BackendError::Protocol(format!("HTTP {status}: {text}"))));
        }
        resp.json::<WireResponse>()
            .map_err(|e| Attempt::Fatal(BackendError::Protocol(format!("bad response body: {e}"))))
    }
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

impl FillMaskScorer for RemoteBackend {
    fn score(&self, request: &ScoreRequest) -> Result<MaskDistribution, BackendError> {
        request.validate(&self.vocab)?;
        let body = encode_request(request, &self.vocab);
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1)));
            }
            match self.attempt(&body) {
                Ok(resp) => return decode_response(resp, request, &self.vocab),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(why)) => {
                    tracing::debug!(attempt, reason = %why, "retrying scoring request");
                    last = why;
                }
            }
        }
        Err(BackendError::BackendUnavailable(last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{TokenId, VocabConfig};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn vocab() -> Arc<Vocab> {
        Arc::new(Vocab::from_tokens(["[PAD]", "[UNK]", "[MASK]", "java", ".", "util"], &VocabConfig::default()).unwrap())
    }

    /// Serve `responses` in order, one connection each; returns the bodies received.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn fast() -> RemoteConfig {
        RemoteConfig {
            timeout_secs: 5,
            retries: 3,
            backoff_ms: 1,
            max_in_flight: 4,
        }
    }

    #[test]
    fn wire_request_shape() {
        let v = vocab();
        let req = ScoreRequest::new(vec![TokenId(3), TokenId(2), TokenId(5)], 2, &v);
        let json = serde_json::to_string(&encode_request(&req, &v)).unwrap();
        assert_eq!(json, r#"{"tokens":["java","[MASK]","util"],"mask_positions":[1],"top_k":2}"#);
    }

    #[test]
    fn scores_over_http() {
        let v = vocab();
        let (url, h) = serve(vec![(
            200,
            r#"{"distributions":[[{"token":"util","p":0.1},{"token":".","p":0.7}]]}"#.into(),
        )]);
        let b = RemoteBackend::new(&url, v.clone(), fast()).unwrap();
        let req = ScoreRequest::new(vec![TokenId(3), TokenId(2)], 2, &v);
        let d = b.score(&req).unwrap();
        assert_eq!(d.argmax(0).unwrap().token, TokenId(4));
        let bodies = h.join().unwrap();
        assert_eq!(bodies, vec![r#"{"tokens":["java","[MASK]"],"mask_positions":[1],"top_k":2}"#]);
    }

    #[test]
    fn retries_503_then_succeeds() {
        let v = vocab();
        let ok = r#"{"distributions":[[{"token":"java","p":0.9}]]}"#.to_string();
        let (url, h) = serve(vec![(503, "{}".into()), (503, "{}".into()), (200, ok)]);
        let b = RemoteBackend::new(&url, v.clone(), fast()).unwrap();
        let req = ScoreRequest::new(vec![TokenId(2)], 1, &v);
        assert!(b.score(&req).is_ok());
        assert_eq!(h.join().unwrap().len(), 3);
    }

    #[test]
    fn persistent_503_is_unavailable() {
        let v = vocab();
        let (url, h) = serve(vec![(503, "{}".into()); 4]);
        let b = RemoteBackend::new(&url, v.clone(), fast()).unwrap();
        let req = ScoreRequest::new(vec![TokenId(2)], 1, &v);
        assert!(matches!(b.score(&req), Err(BackendError::BackendUnavailable(_))));
        assert_eq!(h.join().unwrap().len(), 4);
    }

    #[test]
    fn unknown_response_token_is_vocab_mismatch() {
        let v = vocab();
        let (url, h) = serve(vec![(200, r#"{"distributions":[[{"token":"zzz","p":0.9}]]}"#.into())]);
        let b = RemoteBackend::new(&url, v.clone(), fast()).unwrap();
        let req = ScoreRequest::new(vec![TokenId(2)], 1, &v);
        assert!(matches!(b.score(&req), Err(BackendError::VocabMismatch(_))));
        h.join().unwrap();
    }

    #[test]
    fn wrong_distribution_count_is_protocol_error() {
        let v = vocab();
        let (url, h) = serve(vec![(200, r#"{"distributions":[]}"#.into())]);
        let b = RemoteBackend::new(&url, v.clone(), fast()).unwrap();
        let req = ScoreRequest::new(vec![TokenId(2)], 1, &v);
        assert!(matches!(b.score(&req), Err(BackendError::Protocol(_))));
        h.join().unwrap();
    }

    #[test]
    fn unreachable_server_is_unavailable() {
        let v = vocab();
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let b = RemoteBackend::new(&format!("http://127.0.0.1:{port}"), v.clone(), fast()).unwrap();
        let req = ScoreRequest::new(vec![TokenId(2)], 1, &v);
        assert!(matches!(b.score(&req), Err(BackendError::BackendUnavailable(_))));
    }
}
