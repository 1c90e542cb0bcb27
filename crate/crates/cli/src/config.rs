//! JSON config files and the config echo.
//!
//! A config file is a flat JSON object whose keys are long flag names
//! (`n_adapt` and `n-adapt` both name `--n-adapt`). Its entries are spliced
//! into argv right after the subcommand, skipping any flag the command line
//! already sets, so the command line always wins.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use drm_core::DrmError;
use serde::Serialize;
use serde_json::{Map, Value};

/// Global flags that take a value and may precede the subcommand.
const GLOBAL_VALUE_FLAGS: [&str; 3] = ["--seed", "--threads", "--config"];

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(tok) = it.next() {
        let s = tok.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Index of the subcommand token, skipping global flags and their values.
fn subcommand_index(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if GLOBAL_VALUE_FLAGS.contains(&s.as_ref()) {
            i += 2;
        } else if s.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

fn flag_present(argv: &[OsString], flag: &str) -> bool {
    let with_eq = format!("{flag}=");
    argv.iter().any(|t| {
        let s = t.to_string_lossy();
        s == flag || s.starts_with(&with_eq)
    })
}

fn scalar(key: &str, v: &Value) -> Result<String, DrmError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(DrmError::Validation(format!(
            "config key `{key}` must hold a string, number, boolean or list of those"
        ))),
    }
}

fn config_tokens(key: &str, v: &Value) -> Result<Vec<String>, DrmError> {
    let flag = format!("--{}", key.replace('_', "-"));
    Ok(match v {
        Value::Null | Value::Bool(false) => vec![],
        Value::Bool(true) => vec![flag],
        Value::Array(items) => {
            let parts: Vec<String> = items
                .iter()
                .map(|x| scalar(key, x))
                .collect::<Result<_, _>>()?;
            vec![flag, parts.join(",")]
        }
        other => vec![flag, scalar(key, other)?],
    })
}

fn read_config(path: &Path) -> Result<Map<String, Value>, DrmError> {
    let text = std::fs::read_to_string(path).map_err(|source| DrmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match serde_json::from_str(&text)? {
        Value::Object(map) => Ok(map),
        _ => Err(DrmError::Validation(format!(
            "config file {} must hold a JSON object",
            path.display()
        ))),
    }
}

/// argv with the config file's flags spliced in after the subcommand.
pub fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>, DrmError> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let Some(at) = subcommand_index(&argv) else {
        return Ok(argv);
    };
    let mut extra = Vec::new();
    for (key, v) in read_config(&path)? {
        if key == "config" {
            continue;
        }
        let tokens = config_tokens(&key, &v)?;
        if let Some(flag) = tokens.first() {
            if !flag_present(&argv, flag) {
                extra.extend(tokens.into_iter().map(OsString::from));
            }
        }
    }
    let mut out = argv;
    out.splice(at + 1..at + 1, extra);
    Ok(out)
}

/// Every resolved parameter of a run.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub tool_version: &'static str,
    pub command: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub args: Value,
}

impl ConfigEcho {
    pub fn new(command: &str, seed: u64, threads: Option<usize>, args: &impl Serialize) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            threads,
            args: serde_json::to_value(args).expect("argument structs serialize"),
        }
    }
}
