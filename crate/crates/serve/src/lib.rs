//! Local-only HTTP service for multi-turn diagnosis sessions over a
//! checkpoint, the offline guard and the response-time benchmark client.

mod api;
pub mod bench;
pub mod config;
pub mod error;
pub mod guard;
pub mod session;

use std::net::SocketAddr;
use std::thread::JoinHandle;
use std::time::Duration;

pub use api::{router, spawn_sweeper, ApiError, AppState, Created, MessageReply, MessageRequest, ModelSlot, UploadReply, RETRY_AFTER_S};
pub use config::ServeConfig;
pub use error::{ServeError, ServeResult};

fn sweep_period(cfg: &ServeConfig) -> Duration {
    (cfg.session_ttl() / 4).clamp(Duration::from_secs(1), Duration::from_secs(60))
}

/// Serves `state` on `listener` until `shutdown` resolves.
pub async fn serve_until(
    state: AppState,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    for w in state.config().startup_warnings() {
        log::warn!("{w}");
    }
    let sweeper = spawn_sweeper(state.clone(), sweep_period(state.config()));
    let app = router(state);
    let r = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    r
}

/// Binds the configured address, loads the configured checkpoint in the
/// background and serves until interrupted.
pub fn run(config: ServeConfig) -> ServeResult<()> {
    let addr = config.bind_addr()?;
    let checkpoint = config.checkpoint.clone();
    let state = AppState::new(config)?;
    match &checkpoint {
        Some(p) => {
            state.load_checkpoint(p);
        }
        None => return Err(ServeError::Config("no checkpoint configured".into())),
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| ServeError::Io { path: "tokio runtime".into(), source: e })?;
    rt.block_on(async move {
        let listener =
            tokio::net::TcpListener::bind(addr).await.map_err(|e| ServeError::Io { path: addr.to_string().into(), source: e })?;
        log::info!("listening on http://{}", listener.local_addr().map_err(|e| ServeError::Io { path: addr.to_string().into(), source: e })?);
        let ctrl_c = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        serve_until(state, listener, ctrl_c).await.map_err(|e| ServeError::Io { path: addr.to_string().into(), source: e })
    })
}

/// A server on its own runtime thread, stopped on drop.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl BackgroundServer {
    /// Binds the configured address; port 0 picks a free port.
    pub fn start(state: AppState) -> ServeResult<Self> {
        let addr = state.config().bind_addr()?;
        let std_listener = std::net::TcpListener::bind(addr).map_err(|e| ServeError::Io { path: addr.to_string().into(), source: e })?;
        std_listener.set_nonblocking(true).map_err(|e| ServeError::Io { path: addr.to_string().into(), source: e })?;
        let addr = std_listener.local_addr().map_err(|e| ServeError::Io { path: addr.to_string().into(), source: e })?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener)?;
                serve_until(state, listener, async {
                    let _ = rx.await;
                })
                .await
            })
        });
        Ok(Self { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown_now()
    }

    fn shutdown_now(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        let _ = self.shutdown_now();
    }
}
