//! Offline CWDL validation, using the same checks the server runs on ingest.

use std::path::Path;

use cwm_core::cwdl::{parse_element, validate_element, Registry};
use cwm_core::report::ValidationReport;

use crate::client::{CliResult, Failure};

/// Loads every `*.json` file below `dir` as a CWDL element. Accepts both a
/// server data directory (`<kind>/<id>.json`) and a flat folder.
pub fn load_registry(dir: &Path) -> CliResult<Registry> {
    let mut registry = Registry::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Failure::Transport(e.to_string()))?;
        let path = entry.path();
        if !entry.file_type().is_file() || path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Transport(format!("{}: {e}", path.display())))?;
        let element = parse_element(&text)
            .map_err(|e| Failure::Transport(format!("{}: {e}", path.display())))?;
        registry.insert(element);
    }
    Ok(registry)
}

/// Validates `text` against `registry` with the element itself added, as
/// the server does for a create or modify.
pub fn validate_text(text: &str, registry: &Registry) -> ValidationReport {
    match parse_element(text) {
        Err(e) => e.to_report(),
        Ok(element) => {
            let mut candidate = registry.clone();
            candidate.insert(element.clone());
            validate_element(&element, &candidate)
        }
    }
}
