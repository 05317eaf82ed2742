use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::time::Duration;

use dermachat_core::GenerationSettings;
use serde::{Deserialize, Serialize};

use crate::error::{ServeError, ServeResult};

/// Service settings. Every field has a JSON spelling; the environment may
/// override paths and the port only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub checkpoint: Option<PathBuf>,
    /// An IP literal or `localhost`. Host names are refused because
    /// resolving them would need DNS.
    pub bind: String,
    pub port: u16,
    pub max_upload_bytes: usize,
    pub request_timeout_s: f64,
    /// Idle time after which a session and its persisted files are dropped.
    pub session_ttl_s: u64,
    /// Concurrent inference jobs; 0 means one per available core.
    pub workers: usize,
    /// Sessions are kept in memory only unless this is set.
    pub persist_dir: Option<PathBuf>,
    /// Mounted at `/` when set.
    pub static_dir: Option<PathBuf>,
    /// Captured evaluation records are appended here as JSONL when set.
    pub eval_records: Option<PathBuf>,
    pub generation: GenerationSettings,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            bind: "127.0.0.1".into(),
            port: 8080,
            max_upload_bytes: 5 * 1024 * 1024,
            request_timeout_s: 60.0,
            session_ttl_s: 3600,
            workers: 0,
            persist_dir: None,
            static_dir: None,
            eval_records: None,
            generation: GenerationSettings::default(),
        }
    }
}

pub const ENV_CHECKPOINT: &str = "DERMACHAT_CHECKPOINT";
pub const ENV_PORT: &str = "DERMACHAT_PORT";
pub const ENV_PERSIST_DIR: &str = "DERMACHAT_PERSIST_DIR";
pub const ENV_STATIC_DIR: &str = "DERMACHAT_STATIC_DIR";
pub const ENV_EVAL_RECORDS: &str = "DERMACHAT_EVAL_RECORDS";

impl ServeConfig {
    /// Applies environment overrides read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> ServeResult<()> {
        if let Some(v) = var(ENV_CHECKPOINT) {
            self.checkpoint = Some(v.into());
        }
        if let Some(v) = var(ENV_PORT) {
            self.port = v.trim().parse().map_err(|_| ServeError::Config(format!("{ENV_PORT}={v:?} is not a port")))?;
        }
        if let Some(v) = var(ENV_PERSIST_DIR) {
            self.persist_dir = Some(v.into());
        }
        if let Some(v) = var(ENV_STATIC_DIR) {
            self.static_dir = Some(v.into());
        }
        if let Some(v) = var(ENV_EVAL_RECORDS) {
            self.eval_records = Some(v.into());
        }
        Ok(())
    }

    pub fn validate(&self) -> ServeResult<()> {
        self.bind_ip()?;
        if self.max_upload_bytes == 0 {
            return Err(ServeError::Config("max_upload_bytes must be positive".into()));
        }
        if !(self.request_timeout_s > 0.0 && self.request_timeout_s.is_finite()) {
            return Err(ServeError::Config(format!("request_timeout_s {} must be positive", self.request_timeout_s)));
        }
        if self.session_ttl_s == 0 {
            return Err(ServeError::Config("session_ttl_s must be positive".into()));
        }
        check_generation(&self.generation).map_err(ServeError::Config)
    }

    pub fn bind_ip(&self) -> ServeResult<IpAddr> {
        let b = self.bind.trim();
        if b.eq_ignore_ascii_case("localhost") {
            return Ok(IpAddr::V4(Ipv4Addr::LOCALHOST));
        }
        b.parse().map_err(|_| {
            ServeError::Config(format!("bind address {b:?} must be an IP literal or \"localhost\"; host names are not resolved"))
        })
    }

    pub fn bind_addr(&self) -> ServeResult<SocketAddr> {
        Ok(SocketAddr::new(self.bind_ip()?, self.port))
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout_s)
    }

    pub fn session_ttl(&self) -> Duration {
        Duration::from_secs(self.session_ttl_s)
    }

    pub fn worker_count(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    /// Warnings logged at startup.
    pub fn startup_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self.bind_ip() {
            Ok(ip) if !ip.is_loopback() => out.push(format!(
                "binding to non-loopback address {ip}: sessions and images become reachable from the network"
            )),
            _ => {}
        }
        if let Some(d) = &self.persist_dir {
            out.push(format!("session persistence enabled: transcripts and images are written to {}", d.display()));
        }
        out
    }
}

pub(crate) fn check_generation(g: &GenerationSettings) -> Result<(), String> {
    if g.max_new_tokens == 0 {
        return Err("max_new_tokens must be at least 1".into());
    }
    if !(g.temperature > 0.0 && g.temperature.is_finite()) {
        return Err(format!("temperature {} must be positive", g.temperature));
    }
    Ok(())
}
