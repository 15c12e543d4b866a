use std::path::Path;

use anyhow::Result;
use funcgraph::dataset::{ProjectionConfig, SliceConfig};
use funcgraph::gateway::GatewayConfig;
use funcgraph::pipeline::PipelineConfig;
use funcgraph::synth::SceneSpec;
use serde::{Deserialize, Serialize};

use crate::input_error;

/// Everything a run can be configured with. Missing keys keep their defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub projection: ProjectionConfig,
    pub slice: SliceConfig,
    pub gateway: GatewayConfig,
    pub synthetic: SceneSpec,
}

/// Reads the optional config file and applies `key.path=value` overrides.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| input_error(format!("--config {}: {e}", path.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| input_error(format!("--config {}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| input_error(format!("--set {item}: expected key=value")))?;
        set_path(&mut table, key.trim(), parse_value(value.trim()))
            .map_err(|msg| input_error(format!("--set {item}: {msg}")))?;
    }
    let given = serde_json::to_value(&table).expect("toml table as json");
    let cfg: Config = toml::Value::Table(table)
        .try_into()
        .map_err(|e| input_error(format!("configuration: {e}")))?;
    let effective = serde_json::to_value(&cfg).expect("serializable config");
    if let Some(key) = unknown_key(&given, &effective, "") {
        return Err(input_error(format!("configuration: unknown key `{key}`")));
    }
    Ok(cfg)
}

fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or("empty key")?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| format!("`{p}` is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// First key of `given` that has no counterpart in `effective`.
fn unknown_key(
    given: &serde_json::Value,
    effective: &serde_json::Value,
    prefix: &str,
) -> Option<String> {
    let (serde_json::Value::Object(g), serde_json::Value::Object(e)) = (given, effective) else {
        return None;
    };
    for (k, v) in g {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match e.get(k) {
            // Optional fields are serialized as null when unset.
            None if !e.is_empty() => return Some(first_leaf(v, path)),
            Some(inner) => {
                if let Some(bad) = unknown_key(v, inner, &path) {
                    return Some(bad);
                }
            }
            None => {}
        }
    }
    None
}

/// Full path of the first leaf below `value`.
fn first_leaf(value: &serde_json::Value, path: String) -> String {
    match value {
        serde_json::Value::Object(m) => match m.iter().next() {
            Some((k, v)) => first_leaf(v, format!("{path}.{k}")),
            None => path,
        },
        _ => path,
    }
}
