//! `key=value` config files merged into the argument list.
//!
//! Keys are long flag names. Config values are placed before the command
//! line arguments, and every subcommand lets a later occurrence override an
//! earlier one, so flags win.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::Command;
use labelfield::{Error, Result};

pub fn parse_config(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Finds `--config PATH` or `--config=PATH` after the subcommand name.
fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter().skip(2);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// Argument list with config entries spliced in after the subcommand.
pub fn expand(args: Vec<OsString>, cmd: &Command) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries = parse_config(&text, path)?;
    let sub_name = args[1].to_string_lossy().into_owned();
    let sub = cmd
        .find_subcommand(&sub_name)
        .ok_or_else(|| Error::contract(format!("--config needs a subcommand, got {sub_name:?}")))?;
    let mut extra = Vec::new();
    for (k, v) in entries {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(k.as_str()) && k != "config")
            .ok_or_else(|| Error::contract(format!("{}: unknown key {k:?} for {sub_name}", path.display())))?;
        if arg.get_action().takes_values() {
            extra.push(OsString::from(format!("--{k}={v}")));
        } else {
            match v.as_str() {
                "true" | "1" => extra.push(OsString::from(format!("--{k}"))),
                "false" | "0" => {}
                _ => return Err(Error::contract(format!("{}: {k} expects true or false", path.display()))),
            }
        }
    }
    let mut out = args[..2].to_vec();
    out.extend(extra);
    out.extend(args[2..].iter().cloned());
    Ok(out)
}
