use std::path::Path;

use cwm_core::api::{ApiServer, ServerConfig};
use cwm_core::mocks::{MockService, MockServiceConfig};
use tracing::{info, warn};

use crate::client::{CliResult, Failure};

/// Runs the API server until SIGINT or SIGTERM. SIGHUP re-reads the
/// allowlist from the config file.
pub async fn serve(config_path: &Path, init: bool) -> CliResult {
    let config = ServerConfig::load(config_path).map_err(|e| Failure::Rejected(e.to_string()))?;
    let server = ApiServer::start(config)
        .await
        .map_err(|e| Failure::Transport(format!("cannot start server: {e}")))?;
    // Scripts wait for this line.
    println!("listening on {}", server.url());
    if init {
        let controllers = server.state().init().await;
        info!(?controllers, "initialized");
    }
    wait_for_shutdown(config_path, &server).await;
    info!("shutting down");
    server.shutdown().await;
    Ok(())
}

#[cfg(unix)]
async fn wait_for_shutdown(config_path: &Path, server: &ApiServer) {
    use tokio::signal::unix::{signal, SignalKind};
    let mut hup = signal(SignalKind::hangup()).expect("SIGHUP handler");
    let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
    loop {
        tokio::select! {
            _ = tokio::signal::ctrl_c() => return,
            _ = term.recv() => return,
            _ = hup.recv() => match ServerConfig::load(config_path) {
                Ok(c) => {
                    server.state().authenticator().reload(&c.allowlist);
                    info!(users = c.allowlist.len(), "allowlist reloaded");
                }
                Err(e) => warn!(error = %e, "config reload failed; keeping the old allowlist"),
            },
        }
    }
}

#[cfg(not(unix))]
async fn wait_for_shutdown(_: &Path, _: &ApiServer) {
    let _ = tokio::signal::ctrl_c().await;
}

/// Runs a mock annotation service until SIGINT.
pub async fn mock(config: MockServiceConfig) -> CliResult {
    let service = MockService::start(config)
        .await
        .map_err(|e| Failure::Transport(format!("cannot start mock: {e}")))?;
    println!("listening on {}", service.url());
    let _ = tokio::signal::ctrl_c().await;
    service.shutdown().await;
    Ok(())
}
