//! Offline guard: records every socket a process holds while a session
//! runs and fails on any non-loopback peer or any name lookup.
//!
//! Sockets are read from `/proc/<pid>/fd` and matched by inode against
//! `/proc/<pid>/net/{tcp,tcp6,udp,udp6}`, sampled on a short interval.

use std::collections::{BTreeSet, HashSet};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{ServeError, ServeResult};

pub const DNS_PORT: u16 = 53;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SocketEntry {
    pub protocol: String,
    pub local: SocketAddr,
    pub remote: SocketAddr,
    /// Kernel state code, e.g. 0x0A for a listening TCP socket.
    pub state: u8,
    pub inode: u64,
}

impl SocketEntry {
    /// A peer that is neither unset nor on the loopback interface.
    pub fn is_outbound(&self) -> bool {
        let ip = self.remote.ip();
        !(ip.is_unspecified() || is_loopback(ip))
    }

    pub fn is_dns(&self) -> bool {
        self.remote.port() == DNS_PORT && !self.remote.ip().is_unspecified()
    }
}

fn is_loopback(ip: IpAddr) -> bool {
    match ip {
        IpAddr::V4(v4) => v4.is_loopback(),
        IpAddr::V6(v6) => v6.is_loopback() || v6.to_ipv4_mapped().is_some_and(|v4| v4.is_loopback()),
    }
}

fn hex_u32(s: &str) -> Option<u32> {
    u32::from_str_radix(s, 16).ok()
}

/// `0100007F:1F90` → 127.0.0.1:8080. Address words are printed in host byte order.
fn parse_endpoint(s: &str) -> Option<SocketAddr> {
    let (addr, port) = s.split_once(':')?;
    let port = u16::from_str_radix(port, 16).ok()?;
    let ip = match addr.len() {
        8 => IpAddr::V4(Ipv4Addr::from(hex_u32(addr)?.to_ne_bytes())),
        32 => {
            let mut bytes = [0u8; 16];
            for i in 0..4 {
                let word = hex_u32(&addr[8 * i..8 * i + 8])?;
                bytes[4 * i..4 * i + 4].copy_from_slice(&word.to_ne_bytes());
            }
            IpAddr::V6(Ipv6Addr::from(bytes))
        }
        _ => return None,
    };
    Some(SocketAddr::new(ip, port))
}

/// Rows of one `/proc/net/<protocol>` table; malformed rows are skipped.
pub fn parse_proc_net(text: &str, protocol: &str) -> Vec<SocketEntry> {
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() < 10 {
                return None;
            }
            Some(SocketEntry {
                protocol: protocol.to_string(),
                local: parse_endpoint(f[1])?,
                remote: parse_endpoint(f[2])?,
                state: u8::from_str_radix(f[3], 16).ok()?,
                inode: f[9].parse().ok()?,
            })
        })
        .collect()
}

const TABLES: [&str; 4] = ["tcp", "tcp6", "udp", "udp6"];

/// Process whose sockets are inspected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    SelfProcess,
    Pid(u32),
}

impl Target {
    fn root(self) -> PathBuf {
        match self {
            Target::SelfProcess => PathBuf::from("/proc/self"),
            Target::Pid(p) => PathBuf::from(format!("/proc/{p}")),
        }
    }
}

fn io(path: PathBuf, source: std::io::Error) -> ServeError {
    ServeError::Io { path, source }
}

fn socket_inodes(target: Target) -> ServeResult<HashSet<u64>> {
    let dir = target.root().join("fd");
    let mut out = HashSet::new();
    for e in std::fs::read_dir(&dir).map_err(|e| io(dir.clone(), e))? {
        let Ok(e) = e else { continue };
        let Ok(link) = std::fs::read_link(e.path()) else { continue };
        let link = link.to_string_lossy();
        if let Some(n) = link.strip_prefix("socket:[").and_then(|r| r.strip_suffix(']')) {
            if let Ok(n) = n.parse() {
                out.insert(n);
            }
        }
    }
    Ok(out)
}

/// Internet sockets currently held by `target`.
pub fn process_sockets(target: Target) -> ServeResult<Vec<SocketEntry>> {
    let inodes = socket_inodes(target)?;
    let mut out = Vec::new();
    for t in TABLES {
        let p = target.root().join("net").join(t);
        match std::fs::read_to_string(&p) {
            Ok(text) => out.extend(parse_proc_net(&text, t).into_iter().filter(|e| inodes.contains(&e.inode))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(io(p, e)),
        }
    }
    Ok(out)
}

static DNS_ATTEMPTS: Mutex<Vec<String>> = Mutex::new(Vec::new());

/// The only resolver in the service: IP literals and `localhost` pass,
/// anything else is recorded as a lookup attempt and refused.
pub fn resolve(host: &str, port: u16) -> ServeResult<SocketAddr> {
    let h = host.trim().trim_start_matches('[').trim_end_matches(']');
    if h.eq_ignore_ascii_case("localhost") {
        return Ok(SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), port));
    }
    if let Ok(ip) = h.parse::<IpAddr>() {
        return Ok(SocketAddr::new(ip, port));
    }
    DNS_ATTEMPTS.lock().expect("dns log").push(h.to_string());
    Err(ServeError::Config(format!("refusing to resolve {h:?}: the service runs without name lookups")))
}

/// Every host name passed to `resolve` so far.
pub fn dns_attempts() -> Vec<String> {
    DNS_ATTEMPTS.lock().expect("dns log").clone()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GuardReport {
    pub samples: usize,
    /// Distinct sockets observed, loopback included.
    pub sockets_seen: usize,
    pub outbound: Vec<SocketEntry>,
    /// Host names looked up through `resolve`, plus sockets aimed at port 53.
    pub dns: Vec<String>,
    pub sample_errors: Vec<String>,
}

impl GuardReport {
    pub fn passed(&self) -> bool {
        self.outbound.is_empty() && self.dns.is_empty() && self.sample_errors.is_empty() && self.samples > 0
    }

    /// One line per violation, naming the destination.
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> =
            self.outbound.iter().map(|e| format!("outbound {} connection to {}", e.protocol, e.remote)).collect();
        v.extend(self.dns.iter().map(|h| format!("name lookup for {h}")));
        v.extend(self.sample_errors.iter().cloned());
        if self.samples == 0 {
            v.push("no socket samples were taken".into());
        }
        v
    }
}

/// Samples a process's sockets on a background thread until `finish`.
pub struct ConnectionRecorder {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<(usize, BTreeSet<SocketEntry>, Vec<String>)>>,
    target: Target,
    dns_mark: usize,
}

impl ConnectionRecorder {
    /// Fails when the socket tables cannot be read at all.
    pub fn start(target: Target, interval: Duration) -> ServeResult<Self> {
        let first = process_sockets(target)?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            let mut seen: BTreeSet<SocketEntry> = first.into_iter().collect();
            let mut samples = 1;
            let mut errors = Vec::new();
            while !flag.load(Ordering::Acquire) {
                match process_sockets(target) {
                    Ok(s) => seen.extend(s),
                    Err(e) => errors.push(e.to_string()),
                }
                samples += 1;
                std::thread::sleep(interval);
            }
            (samples, seen, errors)
        });
        Ok(Self { stop, handle: Some(handle), target, dns_mark: dns_attempts().len() })
    }

    pub fn finish(mut self) -> GuardReport {
        self.stop.store(true, Ordering::Release);
        let (mut samples, mut seen, mut errors) =
            self.handle.take().expect("joined once").join().unwrap_or_else(|_| (0, BTreeSet::new(), vec!["sampler panicked".into()]));
        match process_sockets(self.target) {
            Ok(s) => {
                seen.extend(s);
                samples += 1;
            }
            Err(e) => errors.push(e.to_string()),
        }
        let mut dns: Vec<String> = dns_attempts().split_off(self.dns_mark);
        dns.extend(seen.iter().filter(|e| e.is_dns()).map(|e| format!("{} ({})", e.remote, e.protocol)));
        GuardReport {
            samples,
            sockets_seen: seen.len(),
            outbound: seen.iter().filter(|e| e.is_outbound()).cloned().collect(),
            dns,
            sample_errors: errors,
        }
    }
}

impl Drop for ConnectionRecorder {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
    }
}
