//! JSON config files. Every key becomes a flag of the same name, inserted
//! ahead of the command-line flags so the latter take precedence.

use std::path::Path;

use crate::CliError;

fn find_config(argv: &[String]) -> Option<(usize, usize, String)> {
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            return argv.get(i + 1).map(|v| (i, 2, v.clone()));
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some((i, 1, v.to_string()));
        }
    }
    None
}

fn value_to_args(key: &str, value: &serde_json::Value) -> Result<Vec<String>, CliError> {
    use serde_json::Value;
    let flag = format!("--{}", key.replace('_', "-"));
    Ok(match value {
        Value::Null | Value::Bool(false) => Vec::new(),
        Value::Bool(true) => vec![flag],
        Value::Number(n) => vec![flag, n.to_string()],
        Value::String(s) => vec![flag, s.clone()],
        Value::Array(items) => {
            let parts: Result<Vec<String>, CliError> = items
                .iter()
                .map(|v| match v {
                    Value::Number(n) => Ok(n.to_string()),
                    Value::String(s) => Ok(s.clone()),
                    _ => Err(CliError::Usage(format!("config key '{key}': arrays may hold numbers or strings"))),
                })
                .collect();
            vec![flag, parts?.join(",")]
        }
        Value::Object(_) => return Err(CliError::Usage(format!("config key '{key}' may not be an object"))),
    })
}

fn read_config(path: &Path) -> Result<serde_json::Map<String, serde_json::Value>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Lib(privcnp::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
        CliError::Lib(privcnp::Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    })?;
    match value {
        serde_json::Value::Object(map) => Ok(map),
        _ => Err(CliError::Usage(format!("{}: config must be a JSON object", path.display()))),
    }
}

/// Replaces `--config FILE` with the flags the file describes, placed
/// straight after the subcommand.
pub fn expand_config(argv: Vec<String>) -> Result<Vec<String>, CliError> {
    let Some((pos, width, path)) = find_config(&argv) else {
        return Ok(argv);
    };
    let map = read_config(Path::new(&path))?;
    let mut from_file = Vec::new();
    for (k, v) in &map {
        if k == "config" {
            continue;
        }
        from_file.extend(value_to_args(k, v)?);
    }
    let mut rest: Vec<String> = argv;
    rest.drain(pos..pos + width);
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.starts_with('-'))
        .map(|p| p + 2)
        .unwrap_or(rest.len());
    let mut out = rest[..sub].to_vec();
    out.extend(from_file);
    out.extend_from_slice(&rest[sub..]);
    Ok(out)
}
