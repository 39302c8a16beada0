use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{BackendError, GenerationRequest, GenerationResult, LanguageModel, ScoreRequest};

/// HTTP client for a server speaking the `/v1/generate` and `/v1/score` protocol.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    base: String,
    agent: ureq::Agent,
    attempts: u32,
    backoff: Duration,
}

#[derive(Deserialize)]
struct ScoreResponse {
    logprob: f64,
}

impl RemoteBackend {
    pub fn new(base_url: &str) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(300))).build();
        RemoteBackend {
            base: base_url.trim_end_matches('/').to_string(),
            agent: ureq::Agent::new_with_config(config),
            attempts: 3,
            backoff: Duration::from_millis(500),
        }
    }

    /// Overrides the retry policy (attempt count, first backoff, doubled after each failure).
    pub fn with_retry(mut self, attempts: u32, backoff: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    /// POSTs `body` as JSON, retrying transport failures and 5xx responses.
    pub fn post_json<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, BackendError> {
        let url = format!("{}{}", self.base, path);
        let mut wait = self.backoff;
        let mut last = String::new();
        for attempt in 1..=self.attempts {
            match self.agent.post(&url).send_json(body) {
                Ok(mut resp) => {
                    return resp
                        .body_mut()
                        .read_json::<R>()
                        .map_err(|e| BackendError::Rejected(format!("{url}: bad response body: {e}")));
                }
                Err(ureq::Error::StatusCode(code)) if code == 404 || code == 501 => {
                    return Err(BackendError::Unsupported(format!("{path} (HTTP {code})")));
                }
                Err(ureq::Error::StatusCode(code)) if (400..500).contains(&code) => {
                    return Err(BackendError::Rejected(format!("{url}: HTTP {code}")));
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < self.attempts {
                log::warn!("{url}: attempt {attempt} failed ({last}); retrying in {wait:?}");
                thread::sleep(wait);
                wait *= 2;
            }
        }
        Err(BackendError::Unavailable(format!("{url}: {last}")))
    }
}

impl LanguageModel for RemoteBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.check()?;
        self.post_json("/v1/generate", req)
    }

    fn score_logprob(&self, req: &ScoreRequest) -> Result<f64, BackendError> {
        if req.continuation.is_empty() {
            return Err(BackendError::Rejected("continuation must be non-empty".into()));
        }
        let r: ScoreResponse = self.post_json("/v1/score", req)?;
        if !(r.logprob <= 0.0) {
            return Err(BackendError::Rejected(format!("server returned logprob {}", r.logprob)));
        }
        Ok(r.logprob)
    }
}

#[cfg(test)]
pub(crate) mod mock {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// One-thread HTTP/1.1 server answering each request through `handler(path, body)`.
    pub struct MockServer {
        pub url: String,
        pub hits: Arc<Mutex<Vec<String>>>,
    }

    impl MockServer {
        pub fn start<F>(handler: F) -> Self
        where
            F: Fn(&str, &str) -> (u16, String) + Send + 'static,
        {
            let listener = TcpListener::bind("127.0.0.1:0").unwrap();
            let url = format!("http://{}", listener.local_addr().unwrap());
            let hits = Arc::new(Mutex::new(Vec::new()));
            let log = hits.clone();
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(mut stream) = stream else { continue };
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        continue;
                    }
                    let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
                    let mut len = 0;
                    loop {
                        let mut h = String::new();
                        reader.read_line(&mut h).unwrap();
                        if h.trim().is_empty() {
                            break;
                        }
                        if let Some((k, v)) = h.split_once(':') {
                            if k.eq_ignore_ascii_case("content-length") {
                                len = v.trim().parse().unwrap();
                            }
                        }
                    }
                    let mut body = vec![0; len];
                    reader.read_exact(&mut body).unwrap();
                    let body = String::from_utf8(body).unwrap();
                    log.lock().unwrap().push(path.clone());
                    let (code, out) = handler(&path, &body);
                    let resp = format!(
                        "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}",
                        out.len()
                    );
                    let _ = stream.write_all(resp.as_bytes());
                }
            });
            MockServer { url, hits }
        }
    }
}
