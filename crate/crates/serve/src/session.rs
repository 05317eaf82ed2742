//! Dialogue sessions: an uploaded image, its cached prefix and the turns.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use dermachat_core::prompts::{Role, Turn};
use dermachat_core::{GenerationSettings, Image, PrefixEmbedding};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex as AsyncMutex;

use crate::error::{ServeError, ServeResult};

/// Random bytes behind a session id.
pub const SESSION_ID_BYTES: usize = 16;
/// Length of a session id in hex characters.
pub const SESSION_ID_LEN: usize = 2 * SESSION_ID_BYTES;

pub fn new_session_id() -> String {
    let mut bytes = [0u8; SESSION_ID_BYTES];
    rand::rngs::OsRng.fill_bytes(&mut bytes);
    hex::encode(bytes)
}

pub fn is_session_id(s: &str) -> bool {
    s.len() == SESSION_ID_LEN && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

pub fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub role: Role,
    pub text: String,
    pub timestamp_ms: u64,
    /// Assistant turns only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
    /// Assistant turns only: the history was cut to fit the context.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncated: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub bytes: usize,
    pub original_width: usize,
    pub original_height: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub created_at_ms: u64,
    pub settings: GenerationSettings,
    pub image: Option<(Image, ImageMeta)>,
    pub prefix: Option<Arc<PrefixEmbedding>>,
    pub turns: Vec<TurnRecord>,
}

/// What `GET /sessions/{id}` returns and what persistence stores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub created_at_ms: u64,
    pub has_image: bool,
    pub embedding_cached: bool,
    pub image: Option<ImageMeta>,
    pub settings: GenerationSettings,
    pub turns: Vec<TurnRecord>,
}

impl Session {
    pub fn new(id: String, settings: GenerationSettings) -> Self {
        Self { id, created_at_ms: unix_ms(), settings, image: None, prefix: None, turns: Vec::new() }
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            created_at_ms: self.created_at_ms,
            has_image: self.image.is_some(),
            embedding_cached: self.prefix.is_some(),
            image: self.image.as_ref().map(|(_, m)| m.clone()),
            settings: self.settings.clone(),
            turns: self.turns.clone(),
        }
    }

    /// Replacing the image starts the dialogue over.
    pub fn set_image(&mut self, image: Image, meta: ImageMeta, prefix: PrefixEmbedding) {
        self.image = Some((image, meta));
        self.prefix = Some(Arc::new(prefix));
        self.turns.clear();
    }

    pub fn history(&self) -> Vec<Turn> {
        self.turns.iter().map(|t| Turn { role: t.role, text: t.text.clone() }).collect()
    }
}

struct Entry {
    session: Arc<AsyncMutex<Session>>,
    last_used: Instant,
}

/// In-memory sessions with idle expiry and optional file-backed copies.
pub struct SessionStore {
    entries: Mutex<HashMap<String, Entry>>,
    ttl: Duration,
    persist_dir: Option<PathBuf>,
}

impl SessionStore {
    pub fn new(ttl: Duration, persist_dir: Option<PathBuf>) -> Self {
        Self { entries: Mutex::new(HashMap::new()), ttl, persist_dir }
    }

    pub fn insert(&self, session: Session) -> Arc<AsyncMutex<Session>> {
        let id = session.id.clone();
        let arc = Arc::new(AsyncMutex::new(session));
        let entry = Entry { session: arc.clone(), last_used: Instant::now() };
        self.entries.lock().expect("session map").insert(id, entry);
        arc
    }

    /// Marks the session used; expired sessions are not returned.
    pub fn get(&self, id: &str) -> Option<Arc<AsyncMutex<Session>>> {
        let mut map = self.entries.lock().expect("session map");
        let now = Instant::now();
        let expired = map.get(id).is_some_and(|e| now.duration_since(e.last_used) > self.ttl);
        if expired {
            map.remove(id);
            self.forget_files(id);
            return None;
        }
        let e = map.get_mut(id)?;
        e.last_used = now;
        Some(e.session.clone())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("session map").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops sessions idle for longer than the TTL as of `now`.
    pub fn expire(&self, now: Instant) -> usize {
        let mut map = self.entries.lock().expect("session map");
        let stale: Vec<String> =
            map.iter().filter(|(_, e)| now.saturating_duration_since(e.last_used) > self.ttl).map(|(k, _)| k.clone()).collect();
        for id in &stale {
            map.remove(id);
            self.forget_files(id);
        }
        stale.len()
    }

    pub fn persist(&self, session: &Session) -> ServeResult<()> {
        let Some(dir) = &self.persist_dir else { return Ok(()) };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        if let Some((img, _)) = &session.image {
            let p = dir.join(format!("{}.png", session.id));
            img.save_png(&p)?;
        }
        let p = dir.join(format!("{}.json", session.id));
        let json = serde_json::to_vec_pretty(&session.view()).map_err(dermachat_core::Error::from)?;
        std::fs::write(&p, json).map_err(|e| io(&p, e))
    }

    fn forget_files(&self, id: &str) {
        if let Some(dir) = &self.persist_dir {
            for ext in ["json", "png"] {
                let _ = std::fs::remove_file(dir.join(format!("{id}.{ext}")));
            }
        }
    }

    /// Reloads persisted sessions; prefixes are recomputed on first use.
    pub fn restore(&self) -> ServeResult<usize> {
        let Some(dir) = &self.persist_dir else { return Ok(0) };
        if !dir.is_dir() {
            return Ok(0);
        }
        let mut n = 0;
        let mut paths: Vec<PathBuf> =
            std::fs::read_dir(dir).map_err(|e| io(dir, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        for p in paths.into_iter().filter(|p| p.extension().is_some_and(|e| e == "json")) {
            let bytes = std::fs::read(&p).map_err(|e| io(&p, e))?;
            let view: SessionView = match serde_json::from_slice(&bytes) {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("{}: not a session record ({e}), skipped", p.display());
                    continue;
                }
            };
            if !is_session_id(&view.session_id) {
                log::warn!("{}: malformed session id, skipped", p.display());
                continue;
            }
            let image = match view.image {
                Some(meta) => Some((Image::load(&dir.join(format!("{}.png", view.session_id)))?, meta)),
                None => None,
            };
            let session = Session {
                id: view.session_id,
                created_at_ms: view.created_at_ms,
                settings: view.settings,
                image,
                prefix: None,
                turns: view.turns,
            };
            self.insert(session);
            n += 1;
        }
        Ok(n)
    }
}

fn io(path: &Path, source: std::io::Error) -> ServeError {
    ServeError::Io { path: path.to_path_buf(), source }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_distinct_hex_of_documented_length() {
        let ids: std::collections::HashSet<String> = (0..100).map(|_| new_session_id()).collect();
        assert_eq!(ids.len(), 100);
        assert!(ids.iter().all(|i| is_session_id(i)));
    }

    #[test]
    fn idle_sessions_expire() {
        let store = SessionStore::new(Duration::from_secs(60), None);
        store.insert(Session::new(new_session_id(), GenerationSettings::default()));
        assert_eq!(store.expire(Instant::now()), 0);
        assert_eq!(store.expire(Instant::now() + Duration::from_secs(61)), 1);
        assert!(store.is_empty());
    }

    #[test]
    fn persisted_sessions_come_back_without_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(Duration::from_secs(60), Some(dir.path().to_path_buf()));
        let mut s = Session::new(new_session_id(), GenerationSettings::default());
        let meta = ImageMeta { bytes: 10, original_width: 4, original_height: 4, width: 4, height: 4 };
        s.image = Some((Image::new(4, 4, [1, 2, 3]), meta));
        s.turns.push(TurnRecord { role: Role::User, text: "hi".into(), timestamp_ms: 1, latency_ms: None, truncated: None });
        store.persist(&s).unwrap();

        let again = SessionStore::new(Duration::from_secs(60), Some(dir.path().to_path_buf()));
        assert_eq!(again.restore().unwrap(), 1);
        let back = again.get(&s.id).unwrap();
        let back = back.try_lock().unwrap();
        assert_eq!(back.turns, s.turns);
        assert_eq!(back.image.as_ref().unwrap().0, Image::new(4, 4, [1, 2, 3]));
        assert!(back.prefix.is_none());
    }
}
