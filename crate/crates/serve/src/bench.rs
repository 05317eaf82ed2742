//! Blocking HTTP client for the service and the response-time benchmark.

use std::path::Path;
use std::time::{Duration, Instant};

use dermachat_core::eval::{compare, LatencyComparison};
use dermachat_core::prompts::CANONICAL_PROMPTS;
use dermachat_core::GenerationSettings;
use reqwest::blocking::{multipart, Client as Http, RequestBuilder};
use reqwest::Url;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::api::{Created, MessageReply, UploadReply};
use crate::error::{ServeError, ServeResult};
use crate::guard;
use crate::session::SessionView;

pub struct Client {
    base: Url,
    http: Http,
}

impl Client {
    /// `base_url` must name an IP literal or `localhost`; no lookups are made
    /// and proxy settings from the environment are ignored.
    pub fn new(base_url: &str, timeout: Duration) -> ServeResult<Self> {
        let mut base = Url::parse(base_url).map_err(|e| ServeError::Config(format!("service URL {base_url:?}: {e}")))?;
        let host = base.host_str().ok_or_else(|| ServeError::Config(format!("service URL {base_url:?} has no host")))?;
        let addr = guard::resolve(host, base.port_or_known_default().unwrap_or(80))?;
        base.set_ip_host(addr.ip()).map_err(|_| ServeError::Config(format!("service URL {base_url:?} cannot take an IP host")))?;
        let http = Http::builder()
            .no_proxy()
            .timeout(timeout)
            .build()
            .map_err(|e| ServeError::Config(format!("HTTP client: {e}")))?;
        Ok(Self { base, http })
    }

    pub fn base_url(&self) -> &str {
        self.base.as_str().trim_end_matches('/')
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base_url())
    }

    fn send<T: DeserializeOwned>(&self, path: &str, req: RequestBuilder) -> ServeResult<T> {
        let url = self.url(path);
        let resp = req.send().map_err(|e| ServeError::Transport { url: url.clone(), reason: e.to_string() })?;
        let status = resp.status();
        let body = resp.bytes().map_err(|e| ServeError::Transport { url: url.clone(), reason: e.to_string() })?;
        if !status.is_success() {
            let message = serde_json::from_slice::<Value>(&body)
                .ok()
                .and_then(|v| v.get("error").and_then(Value::as_str).map(String::from))
                .unwrap_or_else(|| String::from_utf8_lossy(&body).into_owned());
            return Err(ServeError::Http { url, status: status.as_u16(), message });
        }
        serde_json::from_slice(&body).map_err(|e| ServeError::Transport { url, reason: format!("unexpected body: {e}") })
    }

    pub fn health(&self) -> ServeResult<Value> {
        self.send("/healthz", self.http.get(self.url("/healthz")))
    }

    /// Fails with `Unreachable` unless the service answers and has a model.
    pub fn ensure_ready(&self) -> ServeResult<()> {
        self.health().map(|_| ()).map_err(|e| ServeError::Unreachable { url: self.base_url().to_string(), reason: e.to_string() })
    }

    pub fn prompts(&self) -> ServeResult<Vec<String>> {
        let v: Value = self.send("/prompts", self.http.get(self.url("/prompts")))?;
        serde_json::from_value(v["prompts"].clone()).map_err(|e| ServeError::Transport {
            url: self.url("/prompts"),
            reason: format!("unexpected body: {e}"),
        })
    }

    pub fn create_session(&self, settings: Option<&GenerationSettings>) -> ServeResult<String> {
        let body = match settings {
            Some(s) => json!({ "settings": s }),
            None => json!({}),
        };
        let c: Created = self.send("/sessions", self.http.post(self.url("/sessions")).json(&body))?;
        Ok(c.session_id)
    }

    pub fn upload_image(&self, session: &str, bytes: Vec<u8>, file_name: &str) -> ServeResult<UploadReply> {
        let path = format!("/sessions/{session}/image");
        let part = multipart::Part::bytes(bytes).file_name(file_name.to_string());
        let form = multipart::Form::new().part("image", part);
        self.send(&path, self.http.post(self.url(&path)).multipart(form))
    }

    pub fn message(&self, session: &str, text: &str, settings: Option<&GenerationSettings>) -> ServeResult<MessageReply> {
        let path = format!("/sessions/{session}/message");
        let mut body = json!({ "text": text });
        if let Some(s) = settings {
            body["settings"] = serde_json::to_value(s).map_err(dermachat_core::Error::from)?;
        }
        self.send(&path, self.http.post(self.url(&path)).json(&body))
    }

    pub fn session(&self, session: &str) -> ServeResult<SessionView> {
        let path = format!("/sessions/{session}");
        self.send(&path, self.http.get(self.url(&path)))
    }
}

/// One image run through the four canonical prompts.
#[derive(Clone, Debug)]
pub struct BenchCase {
    pub case_id: String,
    pub image_png: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplySample {
    pub case_id: String,
    /// 1-based canonical prompt number.
    pub prompt: usize,
    /// Wall time around the request, monotonic clock.
    pub latency_s: f64,
    pub server_latency_ms: f64,
    pub reply_chars: usize,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cases: usize,
    pub samples: Vec<ReplySample>,
    pub comparison: LatencyComparison,
    pub timeout_s: f64,
    pub max_latency_s: f64,
    pub all_within_timeout: bool,
}

/// Runs every case through a fresh session, prompts in order, one request
/// at a time, then compares reply latencies with `baseline` (seconds).
pub fn latency_bench(client: &Client, cases: &[BenchCase], baseline: &[f64], timeout: Duration) -> ServeResult<BenchReport> {
    if cases.is_empty() {
        return Err(ServeError::Validation("the benchmark case set is empty".into()));
    }
    if baseline.is_empty() {
        return Err(ServeError::Validation("the baseline trace is empty".into()));
    }
    client.ensure_ready()?;
    let mut samples = Vec::with_capacity(cases.len() * CANONICAL_PROMPTS.len());
    for case in cases {
        let id = client.create_session(None)?;
        client.upload_image(&id, case.image_png.clone(), &format!("{}.png", case.case_id))?;
        for (i, prompt) in CANONICAL_PROMPTS.iter().enumerate() {
            let t = Instant::now();
            let r = client.message(&id, prompt, None)?;
            let latency_s = t.elapsed().as_secs_f64();
            samples.push(ReplySample {
                case_id: case.case_id.clone(),
                prompt: i + 1,
                latency_s,
                server_latency_ms: r.latency_ms,
                reply_chars: r.reply.chars().count(),
                truncated: r.truncated,
            });
        }
    }
    let service: Vec<f64> = samples.iter().map(|s| s.latency_s).collect();
    let comparison = compare(&service, baseline)?;
    let max_latency_s = service.iter().copied().fold(0.0, f64::max);
    Ok(BenchReport {
        cases: cases.len(),
        samples,
        comparison,
        timeout_s: timeout.as_secs_f64(),
        max_latency_s,
        all_within_timeout: max_latency_s <= timeout.as_secs_f64(),
    })
}

/// `case_id,prompt,latency_s,server_latency_ms,reply_chars,truncated`.
pub fn write_samples_csv(path: &Path, samples: &[ReplySample]) -> ServeResult<()> {
    let io = |e: std::io::Error| ServeError::Io { path: path.to_path_buf(), source: e };
    let mut w = csv::Writer::from_path(path).map_err(dermachat_core::Error::from)?;
    for s in samples {
        w.serialize(s).map_err(dermachat_core::Error::from)?;
    }
    w.flush().map_err(io)
}

/// A full canonical-prompt session on `image_png` while the sockets of
/// `target` are recorded.
pub fn offline_session_check(
    client: &Client,
    image_png: Vec<u8>,
    target: guard::Target,
    interval: Duration,
) -> ServeResult<(guard::GuardReport, Vec<MessageReply>)> {
    let recorder = guard::ConnectionRecorder::start(target, interval)?;
    let run = (|| {
        let id = client.create_session(None)?;
        client.upload_image(&id, image_png, "case.png")?;
        CANONICAL_PROMPTS.iter().map(|p| client.message(&id, p, None)).collect::<ServeResult<Vec<_>>>()
    })();
    let report = recorder.finish();
    Ok((report, run?))
}
