//! Run manifests and JSON configs.
//!
//! A config is a JSON object `{"command": "<name>", "<flag>": value, ...}`
//! whose keys are the long flag names of that command. It is replayed by
//! turning it back into a command line, so omitted keys take the usual
//! defaults. A manifest wraps the fully resolved config together with the
//! code version and hashes of every input and output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pfi::srn::dataset::sha256_hex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Collects input and output hashes while a command runs.
pub struct Run {
    pub out: PathBuf,
    config: Value,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Run {
    pub fn new<T: Serialize>(command: &str, args: &T, out: &Path) -> Result<Self> {
        let mut config = serde_json::to_value(args)?;
        let obj = config.as_object_mut().context("command arguments serialize to an object")?;
        obj.insert("command".into(), Value::String(command.into()));
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Run { out: out.to_path_buf(), config, inputs: BTreeMap::new(), outputs: BTreeMap::new() })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Writes `name` inside the output directory and records its hash.
    pub fn write(&mut self, name: &str, body: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(name.into(), sha256_hex(body));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let body = serde_json::to_string_pretty(value)?;
        self.write(name, body.as_bytes())
    }

    /// Records a file that some other routine already wrote.
    pub fn record(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        let name = path.strip_prefix(&self.out).unwrap_or(path).display().to_string();
        self.outputs.insert(name, sha256_hex(&bytes));
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf> {
        let m = Manifest {
            tool: "pfi".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let path = self.out.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&m)?)?;
        Ok(path)
    }
}

/// Command line equivalent of a config or manifest file, optionally
/// redirecting its output directory.
pub fn config_to_argv(path: &Path, out: Option<&Path>) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut config = match v.get("config") {
        Some(c) if v.get("tool").is_some() => c.clone(),
        _ => v,
    };
    if let (Some(o), Some(obj)) = (out, config.as_object_mut()) {
        obj.insert("out".into(), Value::String(o.display().to_string()));
    }
    value_to_argv(&config)
}

pub fn value_to_argv(config: &Value) -> Result<Vec<String>> {
    let obj = config.as_object().context("config must be a JSON object")?;
    let Some(Value::String(cmd)) = obj.get("command") else { bail!("config lacks a \"command\" string") };
    let mut argv = vec!["pfi".to_string(), cmd.clone()];
    for (k, v) in obj {
        if k == "command" {
            continue;
        }
        let flag = format!("--{k}");
        match v {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => argv.push(flag),
            Value::Array(items) => {
                if items.is_empty() {
                    continue;
                }
                let parts: Vec<String> = items.iter().map(scalar).collect::<Result<_>>()?;
                argv.push(flag);
                argv.push(parts.join(","));
            }
            other => {
                argv.push(flag);
                argv.push(scalar(other)?);
            }
        }
    }
    Ok(argv)
}

fn scalar(v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        other => bail!("unsupported config value {other}"),
    })
}
