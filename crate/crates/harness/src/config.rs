//! Flat `key=value` config files, spliced into the command line so that
//! explicit flags still win.

use std::fs;

use crate::error::{HarnessError, Result};

/// Converts config text into long flags. `true` becomes a bare switch and
/// `false` drops it; blank lines and `#` comments are ignored.
pub fn config_args(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            HarnessError::Usage(format!("config line {}: expected key=value", i + 1))
        })?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(HarnessError::Usage(format!(
                "config line {}: invalid key",
                i + 1
            )));
        }
        match value.trim() {
            "true" => out.push(format!("--{key}")),
            "false" => {}
            v => {
                out.push(format!("--{key}"));
                out.push(v.to_string());
            }
        }
    }
    Ok(out)
}

/// Inserts the arguments of any `--config <file>` right after the
/// subcommand name, ahead of the flags given on the command line.
pub fn expand(argv: Vec<String>, subcommands: &[&str]) -> Result<Vec<String>> {
    let path = argv
        .iter()
        .position(|a| a == "--config")
        .and_then(|i| argv.get(i + 1).cloned())
        .or_else(|| {
            argv.iter()
                .find_map(|a| a.strip_prefix("--config=").map(str::to_string))
        });
    let Some(path) = path else { return Ok(argv) };
    let Some(pos) = argv
        .iter()
        .skip(1)
        .position(|a| subcommands.contains(&a.as_str()))
    else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| HarnessError::Usage(format!("cannot read config {path}: {e}")))?;
    let mut out = argv[..pos + 2].to_vec();
    out.extend(config_args(&text)?);
    out.extend_from_slice(&argv[pos + 2..]);
    Ok(out)
}
