//! Flat `key = value` run files whose entries are spliced in front of the
//! command-line flags, so anything given on the command line wins.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses a run file into flag tokens. `key = true` becomes a bare `--key`,
/// `key = false` is dropped, and `#` starts a comment line.
pub fn file_args(path: &Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected key = value", path.display(), n + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        if key.is_empty() {
            bail!("{}:{}: empty key", path.display(), n + 1);
        }
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            v => {
                out.push(format!("--{key}").into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

/// Inserts the run-file flags right after the subcommand name.
pub fn expand(args: Vec<OsString>, subcommands: &[&str]) -> Result<Vec<OsString>> {
    let mut config = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            config = args.get(i + 1).cloned();
            break;
        }
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(v.into());
            break;
        }
        i += 1;
    }
    let Some(config) = config else {
        return Ok(args);
    };
    let extra = file_args(Path::new(&config))?;
    let Some(pos) = args
        .iter()
        .position(|a| subcommands.iter().any(|s| a.to_str() == Some(s)))
    else {
        return Ok(args);
    };
    let mut out = args[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}
