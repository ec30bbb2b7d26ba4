//! HTTP service plumbing shared by the heartbeat, worker, and gateway
//! servers.
//!
//! Each service runs on its own thread with its own runtime, so the units
//! are independently stoppable: dropping or stopping one handle never
//! affects another service in the same process.

use std::net::SocketAddr;
use std::thread::JoinHandle;
use thiserror::Error;
use tokio::sync::oneshot;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("failed to bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("runtime startup failed: {0}")]
    Runtime(std::io::Error),
}

/// A running HTTP service. Stopping (or dropping) the handle shuts the
/// listener down and joins the serving thread.
pub struct ServiceHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    /// The address the service actually bound (useful with port 0).
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop the service and wait for the serving thread to exit.
    pub fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

impl std::fmt::Debug for ServiceHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceHandle").field("addr", &self.addr).finish()
    }
}

/// Bind `addr` and serve `router` on a dedicated thread until the returned
/// handle is stopped. Binding happens synchronously so callers get
/// [`ServeError::Bind`] immediately.
pub fn spawn_service(addr: SocketAddr, router: axum::Router) -> Result<ServiceHandle, ServeError> {
    let listener = std::net::TcpListener::bind(addr)
        .map_err(|source| ServeError::Bind { addr, source })?;
    listener
        .set_nonblocking(true)
        .map_err(ServeError::Runtime)?;
    let bound = listener.local_addr().map_err(ServeError::Runtime)?;

    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name(format!("svc-{}", bound.port()))
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("runtime builds");
            rt.block_on(async move {
                let listener =
                    tokio::net::TcpListener::from_std(listener).expect("listener converts");
                let server = axum::serve(listener, router);
                tokio::select! {
                    _ = server => {}
                    _ = rx => {}
                }
            });
        })
        .map_err(ServeError::Runtime)?;

    Ok(ServiceHandle {
        addr: bound,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
