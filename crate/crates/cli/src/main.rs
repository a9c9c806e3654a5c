mod client;
mod offline;
mod serve;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use client::{CliConfig, CliResult, Client, Failure, OutputFormat};
use cwm_core::mocks::{GazetteerEntry, MockMode, MockServiceConfig};
use reqwest::Method;
use serde_json::{json, Value};

const DEFAULT_URL: &str = "http://127.0.0.1:8080";

#[derive(Parser)]
#[command(name = "cwm", version, about = "Curation workflow manager")]
struct Cli {
    /// API base URL.
    #[arg(long, env = "CWM_URL", global = true)]
    url: Option<String>,
    /// Bearer token.
    #[arg(long, env = "CWM_TOKEN", global = true, hide_env_values = true)]
    token: Option<String>,
    /// Client settings file (YAML or JSON with serverUrl, token, outputFormat).
    #[arg(long, env = "CWM_CLIENT_CONFIG", global = true)]
    client_config: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    format: Option<OutputFormat>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the API server.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Start controllers right away instead of waiting for /admin/init.
        #[arg(long)]
        init: bool,
    },
    /// Validate a CWDL file without a server.
    Validate {
        file: PathBuf,
        /// Directory of CWDL files the element may reference.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Declare queues and start controllers on the server.
    Init,
    /// Stop controllers after their in-flight work.
    Stop,
    /// Create an element.
    Register { kind: String, file: PathBuf },
    /// Replace an element.
    Update { kind: String, file: PathBuf },
    /// Delete an element.
    Delete { kind: String, id: String },
    /// List elements of a kind (controllers, tasks, templates, executions).
    List { kind: String },
    /// Show one element.
    Show { kind: String, id: String },
    /// Start an execution and print its id.
    Execute {
        #[arg(long)]
        template: String,
        /// Input file: NIF turtle if it ends in .ttl, plain text otherwise.
        #[arg(long)]
        input: PathBuf,
        /// Use the priority queues.
        #[arg(long)]
        priority: bool,
        /// Parameter override, repeatable.
        #[arg(long = "param", value_name = "NAME=VALUE", value_parser = parse_param)]
        params: Vec<(String, String)>,
        /// Wait until the execution finishes.
        #[arg(long)]
        wait: bool,
    },
    /// Show the status of an execution.
    Status { execution_id: String },
    /// Fetch the result document.
    Result {
        execution_id: String,
        #[arg(short = 'o', long)]
        output: Option<PathBuf>,
    },
    /// Cancel a running execution.
    Cancel { execution_id: String },
    /// Run a mock annotation service.
    Mock {
        #[arg(long, default_value_t = 0)]
        port: u16,
        /// JSON list of {surface, entityClass, identRef}.
        #[arg(long)]
        gazetteer: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = MockModeArg::Sync)]
        mode: MockModeArg,
        #[arg(long, default_value_t = 0)]
        latency_ms: u64,
        #[arg(long, default_value_t = 0)]
        fail_next: u32,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MockModeArg {
    Sync,
    Async,
}

fn parse_param(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("{s:?} is not NAME=VALUE"))
}

struct Settings {
    url: String,
    token: Option<String>,
    format: OutputFormat,
}

impl Settings {
    fn resolve(cli: &Cli) -> CliResult<Settings> {
        let file = match &cli.client_config {
            Some(p) => CliConfig::load(p)?,
            None => CliConfig::default(),
        };
        Ok(Settings {
            url: cli
                .url
                .clone()
                .or(file.server_url)
                .unwrap_or_else(|| DEFAULT_URL.to_string()),
            token: cli.token.clone().or(file.token),
            format: cli.format.or(file.output_format).unwrap_or_default(),
        })
    }

    fn client(&self) -> CliResult<Client> {
        Client::new(&self.url, self.token.clone())
    }
}

fn read(path: &PathBuf) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| Failure::Transport(format!("{}: {e}", path.display())))
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

/// Prints an API answer in the chosen format.
fn emit(format: OutputFormat, v: &Value, plain: impl FnOnce(&Value) -> String) {
    match format {
        OutputFormat::Plain => println!("{}", plain(v)),
        _ => print_json(v),
    }
}

async fn wait_for(client: &Client, id: &str) -> CliResult<Value> {
    loop {
        let status = client
            .call(Method::GET, &format!("executions/{id}/status"), None)
            .await?
            .json();
        if matches!(
            status["state"].as_str(),
            Some("COMPLETED" | "FAILED" | "CANCELLED")
        ) {
            return Ok(status);
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
}

async fn run(cli: Cli) -> CliResult {
    let settings = Settings::resolve(&cli)?;
    let format = settings.format;
    match cli.command {
        Command::Serve { config, init } => serve::serve(&config, init).await,
        Command::Validate { file, registry } => {
            let registry = match registry {
                Some(dir) => offline::load_registry(&dir)?,
                None => Default::default(),
            };
            let text = String::from_utf8(read(&file)?)
                .map_err(|e| Failure::Rejected(format!("{}: {e}", file.display())))?;
            let report = offline::validate_text(&text, &registry);
            match format {
                OutputFormat::Plain => {
                    for f in &report.findings {
                        println!("{f}");
                    }
                }
                _ => print_json(&json!(report)),
            }
            if report.has_errors() {
                Err(Failure::Rejected(format!("{} is invalid", file.display())))
            } else {
                Ok(())
            }
        }
        Command::Init => {
            let r = settings
                .client()?
                .call(Method::POST, "admin/init", None)
                .await?;
            emit(format, &r.json(), |v| v["controllers"].to_string());
            Ok(())
        }
        Command::Stop => {
            let r = settings
                .client()?
                .call(Method::POST, "admin/stop", None)
                .await?;
            emit(format, &r.json(), |v| v["stopped"].to_string());
            Ok(())
        }
        Command::Register { kind, file } => {
            let body = read(&file)?;
            let r = settings
                .client()?
                .call(
                    Method::POST,
                    &format!("elements/{kind}"),
                    Some(("application/json", body)),
                )
                .await?;
            emit(format, &r.json(), |v| {
                v["id"].as_str().unwrap_or_default().to_string()
            });
            Ok(())
        }
        Command::Update { kind, file } => {
            let body = read(&file)?;
            let text = String::from_utf8_lossy(&body);
            let id = cwm_core::cwdl::parse_element(&text)
                .map_err(|e| Failure::Rejected(format!("{}: {e}", file.display())))?
                .id()
                .to_string();
            let r = settings
                .client()?
                .call(
                    Method::PUT,
                    &format!("elements/{kind}/{id}"),
                    Some(("application/json", body)),
                )
                .await?;
            emit(format, &r.json(), |v| {
                v["id"].as_str().unwrap_or_default().to_string()
            });
            Ok(())
        }
        Command::Delete { kind, id } => {
            settings
                .client()?
                .call(Method::DELETE, &format!("elements/{kind}/{id}"), None)
                .await?;
            Ok(())
        }
        Command::List { kind } => {
            let r = settings
                .client()?
                .call(Method::GET, &format!("elements/{kind}"), None)
                .await?;
            emit(format, &r.json(), |v| {
                let ids: Vec<String> = v
                    .as_array()
                    .into_iter()
                    .flatten()
                    .filter_map(|e| {
                        [
                            "executionId",
                            "controllerId",
                            "taskId",
                            "workflowTemplateId",
                        ]
                        .iter()
                        .find_map(|k| e[k].as_str())
                        .map(str::to_string)
                    })
                    .collect();
                ids.join("\n")
            });
            Ok(())
        }
        Command::Show { kind, id } => {
            let r = settings
                .client()?
                .call(Method::GET, &format!("elements/{kind}/{id}"), None)
                .await?;
            print_json(&r.json());
            Ok(())
        }
        Command::Execute {
            template,
            input,
            priority,
            params,
            wait,
        } => {
            let text = String::from_utf8(read(&input)?)
                .map_err(|e| Failure::Rejected(format!("{}: {e}", input.display())))?;
            let turtle = input.extension().is_some_and(|e| e == "ttl");
            let body = json!({
                "templateId": template,
                "input": text,
                "inputFormat": if turtle { "turtle" } else { "text" },
                "priority": if priority { "priority" } else { "normal" },
                "paramOverrides": params.into_iter().collect::<std::collections::BTreeMap<_, _>>(),
            });
            let client = settings.client()?;
            let r = client
                .call(
                    Method::POST,
                    "executions",
                    Some(("application/json", body.to_string().into_bytes())),
                )
                .await?;
            let created = r.json();
            let id = created["executionId"]
                .as_str()
                .unwrap_or_default()
                .to_string();
            let out = if wait {
                wait_for(&client, &id).await?
            } else {
                created
            };
            emit(format, &out, |_| id.clone());
            match out["state"].as_str() {
                Some("FAILED") => Err(Failure::Rejected(format!("execution {id} failed"))),
                Some("CANCELLED") => {
                    Err(Failure::Rejected(format!("execution {id} was cancelled")))
                }
                _ => Ok(()),
            }
        }
        Command::Status { execution_id } => {
            let r = settings
                .client()?
                .call(
                    Method::GET,
                    &format!("executions/{execution_id}/status"),
                    None,
                )
                .await?;
            emit(format, &r.json(), |v| {
                v["state"].as_str().unwrap_or_default().to_string()
            });
            Ok(())
        }
        Command::Result {
            execution_id,
            output,
        } => {
            let r = settings
                .client()?
                .call(
                    Method::GET,
                    &format!("executions/{execution_id}/result"),
                    None,
                )
                .await?;
            match output {
                Some(path) => std::fs::write(&path, &r.body)
                    .map_err(|e| Failure::Transport(format!("{}: {e}", path.display())))?,
                None if format == OutputFormat::Json => print_json(&json!({
                    "executionId": execution_id,
                    "contentType": r.content_type,
                    "result": String::from_utf8_lossy(&r.body),
                })),
                None => {
                    let mut out = std::io::stdout();
                    out.write_all(&r.body)
                        .and_then(|()| out.flush())
                        .map_err(|e| Failure::Transport(e.to_string()))?;
                }
            }
            Ok(())
        }
        Command::Cancel { execution_id } => {
            let r = settings
                .client()?
                .call(
                    Method::POST,
                    &format!("executions/{execution_id}/cancel"),
                    None,
                )
                .await?;
            emit(format, &r.json(), |v| {
                v["state"].as_str().unwrap_or_default().to_string()
            });
            Ok(())
        }
        Command::Mock {
            port,
            gazetteer,
            mode,
            latency_ms,
            fail_next,
        } => {
            let gazetteer: Vec<GazetteerEntry> = match gazetteer {
                Some(path) => serde_json::from_slice(&read(&path)?)
                    .map_err(|e| Failure::Rejected(format!("{}: {e}", path.display())))?,
                None => Vec::new(),
            };
            serve::mock(MockServiceConfig {
                gazetteer,
                mode: match mode {
                    MockModeArg::Sync => MockMode::Sync,
                    MockModeArg::Async => MockMode::Async,
                },
                latency: Duration::from_millis(latency_ms),
                fail_next_n: fail_next,
                port,
            })
            .await
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}
