//! Merging a `--config` file into the command line.
//!
//! File entries become `--key value` arguments placed before the user's own
//! arguments, so flags given on the command line win.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::Path;

use clap::CommandFactory;

use crate::args::Cli;

const GLOBAL_VALUED: [&str; 3] = ["--seed", "--out", "--config"];
/// Keys that exclude one another; a user flag from a group drops the
/// file's entries for the whole group.
const GROUPS: [&[&str]; 1] = [&["target-layers", "tau"]];

fn config_path(raw: &[OsString]) -> Option<OsString> {
    let mut it = raw.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

/// Position of the subcommand name in `raw`.
fn subcommand_position(raw: &[OsString], names: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < raw.len() {
        let s = raw[i].to_string_lossy();
        if GLOBAL_VALUED.contains(&s.as_ref()) {
            i += 2;
            continue;
        }
        if names.iter().any(|n| n == s.as_ref()) {
            return Some(i);
        }
        i += 1;
    }
    None
}

fn parse_entries(text: &str) -> Result<Vec<(String, String)>, String> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let v: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| format!("config file: {e}"))?;
        let obj = v.as_object().ok_or("config file: expected a JSON object")?;
        return Ok(obj
            .iter()
            .filter_map(|(k, v)| {
                let s = match v {
                    serde_json::Value::Null => return None,
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                Some((k.clone(), s))
            })
            .collect());
    }
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected `key = value`", n + 1))?;
        let v = v.trim().trim_matches('"');
        out.push((k.trim().to_string(), v.to_string()));
    }
    Ok(out)
}

fn user_keys(args: &[OsString]) -> BTreeSet<String> {
    let mut keys = BTreeSet::new();
    for a in args {
        let s = a.to_string_lossy();
        if let Some(rest) = s.strip_prefix("--") {
            let k = rest.split('=').next().unwrap_or(rest).to_string();
            for g in GROUPS {
                if g.contains(&k.as_str()) {
                    keys.extend(g.iter().map(|x| x.to_string()));
                }
            }
            keys.insert(k);
        }
    }
    keys
}

/// Returns `raw` with the entries of its `--config` file spliced in.
pub fn expand_args(raw: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&raw) else {
        return Ok(raw);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .map_err(|e| format!("cannot read config file {}: {e}", Path::new(&path).display()))?;
    let entries = parse_entries(&text)?;

    let cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    let (sub, rest): (OsString, Vec<OsString>) = match subcommand_position(&raw, &names) {
        Some(p) => {
            let mut rest = raw.clone();
            let sub = rest.remove(p);
            (sub, rest.into_iter().skip(1).collect())
        }
        None => {
            let from_file = entries
                .iter()
                .find(|(k, _)| k == "command")
                .map(|(_, v)| v.clone())
                .ok_or("no subcommand given on the command line or in the config file")?;
            (from_file.into(), raw.iter().skip(1).cloned().collect())
        }
    };
    let sub_name = sub.to_string_lossy().to_string();
    let sub_cmd = cmd
        .find_subcommand(&sub_name)
        .ok_or_else(|| format!("unknown subcommand {sub_name:?}"))?;
    let is_flag = |key: &str| {
        sub_cmd
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key))
            .is_some_and(|a| !a.get_action().takes_values())
    };

    let given = user_keys(&rest);
    let mut out = vec![raw[0].clone(), sub];
    for (k, v) in entries {
        if k == "command" || k == "config" || given.contains(&k) {
            continue;
        }
        if is_flag(&k) {
            match v.as_str() {
                "true" | "1" | "yes" => out.push(format!("--{k}").into()),
                "false" | "0" | "no" => {}
                other => return Err(format!("config key {k}: expected true or false, got {other:?}")),
            }
        } else {
            out.push(format!("--{k}").into());
            out.push(v.into());
        }
    }
    out.extend(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn key_value_lines() {
        let e = parse_entries("# comment\nsteps = 10\n\nlr=0.5 # trailing\ntask = \"modular-addition\"\n").unwrap();
        assert_eq!(
            e,
            vec![
                ("steps".into(), "10".into()),
                ("lr".into(), "0.5".into()),
                ("task".into(), "modular-addition".into())
            ]
        );
        assert!(parse_entries("novalue\n").is_err());
    }

    #[test]
    fn user_flags_win_and_groups_exclude() {
        let keys = user_keys(&os(&["--tau", "0.9", "--seed=3"]));
        assert!(keys.contains("target-layers") && keys.contains("seed"));
    }

    #[test]
    fn subcommand_is_found_after_globals() {
        let names = vec!["compress".to_string()];
        let raw = os(&["lf", "--out", "compress", "compress", "--model", "m"]);
        assert_eq!(subcommand_position(&raw, &names), Some(3));
    }
}
