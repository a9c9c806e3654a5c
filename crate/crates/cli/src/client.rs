//! HTTP client for the management API and the mapping of its answers to
//! exit codes.

use std::path::PathBuf;
use std::process::ExitCode;

use reqwest::{Method, StatusCode};
use serde::Deserialize;
use serde_json::Value;

/// Process outcome. `Rejected` covers validation failures and requests the
/// server refused on their merits; `Transport` covers connection, auth and
/// local I/O problems.
#[derive(Debug)]
pub enum Failure {
    Rejected(String),
    Transport(String),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Rejected(_) => ExitCode::from(1),
            Failure::Transport(_) => ExitCode::from(2),
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Rejected(m) | Failure::Transport(m) => m,
        }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Turtle,
    Plain,
}

/// Client settings file. Every field is optional; flags and `CWM_URL` /
/// `CWM_TOKEN` take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CliConfig {
    pub server_url: Option<String>,
    pub token: Option<String>,
    pub output_format: Option<OutputFormat>,
}

impl CliConfig {
    pub fn load(path: &PathBuf) -> CliResult<CliConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Transport(format!("{}: {e}", path.display())))?;
        serde_yaml::from_str(&text)
            .map_err(|e| Failure::Transport(format!("{}: {e}", path.display())))
    }
}

pub struct Response {
    pub status: StatusCode,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

impl Response {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&self.body).into_owned()))
    }
}

pub struct Client {
    base: url::Url,
    token: Option<String>,
    http: reqwest::Client,
}

impl Client {
    pub fn new(server_url: &str, token: Option<String>) -> CliResult<Client> {
        let mut base = url::Url::parse(server_url)
            .map_err(|e| Failure::Transport(format!("server URL {server_url:?}: {e}")))?;
        if !matches!(base.scheme(), "http" | "https") {
            return Err(Failure::Transport(format!(
                "server URL {server_url:?} is not http(s)"
            )));
        }
        if !base.path().ends_with('/') {
            base.set_path(&format!("{}/", base.path()));
        }
        Ok(Client {
            base,
            token,
            http: cwm_core::controller::http_client(),
        })
    }

    pub async fn send(
        &self,
        method: Method,
        path: &str,
        body: Option<(&str, Vec<u8>)>,
    ) -> CliResult<Response> {
        let url = self
            .base
            .join(path.trim_start_matches('/'))
            .map_err(|e| Failure::Transport(e.to_string()))?;
        let mut req = self.http.request(method, url);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        if let Some((ct, bytes)) = body {
            req = req.header(reqwest::header::CONTENT_TYPE, ct).body(bytes);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| Failure::Transport(format!("request failed: {e}")))?;
        let status = resp.status();
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let body = resp
            .bytes()
            .await
            .map_err(|e| Failure::Transport(format!("reading response: {e}")))?
            .to_vec();
        Ok(Response {
            status,
            content_type,
            body,
        })
    }

    /// Like [`send`](Self::send), but non-2xx answers become failures.
    pub async fn call(
        &self,
        method: Method,
        path: &str,
        body: Option<(&str, Vec<u8>)>,
    ) -> CliResult<Response> {
        let resp = self.send(method, path, body).await?;
        if resp.status.is_success() {
            Ok(resp)
        } else {
            Err(failure_for(&resp))
        }
    }
}

fn failure_for(resp: &Response) -> Failure {
    let body = resp.json();
    let detail = match &body {
        Value::Object(m) if m.contains_key("findings") => {
            serde_json::to_string_pretty(&body).unwrap_or_default()
        }
        Value::Object(m) => match m.get("error") {
            Some(Value::String(s)) => s.clone(),
            _ => body.to_string(),
        },
        other => other.to_string(),
    };
    let message = format!("{}: {detail}", resp.status);
    match resp.status.as_u16() {
        401 | 403 => Failure::Transport(message),
        s if s >= 500 => Failure::Transport(message),
        _ => Failure::Rejected(message),
    }
}
