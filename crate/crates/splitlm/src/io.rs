//! Scenario documents on disk.
//!
//! A scenario file is one JSON object with the keys `params`, `vehicles`,
//! `rsus`, `gains`, `association`, `llm` and `seed`. Floats are written in
//! shortest round-trip form and parsed exactly, so a write/read cycle
//! reproduces every bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use splitlm_core::Scenario;

use crate::{Error, Result};

pub fn scenario_to_json(scenario: &Scenario) -> String {
    let mut s = serde_json::to_string_pretty(scenario).expect("scenario serialises");
    s.push('\n');
    s
}

/// Hex SHA-256 of the canonical JSON text.
pub fn scenario_digest(scenario: &Scenario) -> String {
    hex_digest(scenario_to_json(scenario).as_bytes())
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        })
}

pub fn write_scenario(path: &Path, scenario: &Scenario) -> Result<String> {
    let text = scenario_to_json(scenario);
    write_text(path, &text)?;
    Ok(hex_digest(text.as_bytes()))
}

pub fn read_scenario(path: &Path) -> Result<Scenario> {
    let scenario: Scenario = read_json(path)?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::File {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serialises");
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::File {
            path: dir.to_owned(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| Error::File {
        path: path.to_owned(),
        source,
    })
}

/// Seventeen significant digits, enough to recover any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
