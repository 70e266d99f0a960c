//! `--config` files.
//!
//! Top-level keys are global flags; each table is named after a subcommand
//! and holds that subcommand's flags under their long names:
//!
//! ```toml
//! jobs = 4
//!
//! [solve-qp]
//! rounding = "carry"
//!
//! [train]
//! epochs = 30
//! class-weights = [1.0, 2.0, 4.0]
//! ```
//!
//! Values are appended to argv for every flag not given on the command line,
//! so clap validates them exactly like typed flags.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, Command};

fn scalar(key: &str, v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        _ => bail!("config key {key:?} must be a scalar or an array of scalars"),
    })
}

fn push_flag(argv: &mut Vec<OsString>, cmd: &Command, matches: &ArgMatches, key: &str, v: &toml::Value) -> Result<()> {
    let id = key.replace('-', "_");
    let Some(arg) = cmd.get_arguments().find(|a| a.get_id().as_str() == id && a.get_long().is_some()) else {
        bail!("unknown config key {key:?} for `{}`", cmd.get_name());
    };
    if matches.value_source(&id) == Some(ValueSource::CommandLine) {
        return Ok(());
    }
    let long = format!("--{}", arg.get_long().expect("checked above"));
    let takes_value = arg.get_num_args().is_none_or(|n| n.takes_values());
    match v {
        toml::Value::Boolean(b) if !takes_value => {
            if *b {
                argv.push(long.into());
            }
        }
        toml::Value::Array(items) => {
            let joined = items.iter().map(|i| scalar(key, i)).collect::<Result<Vec<_>>>()?.join(",");
            argv.push(long.into());
            argv.push(joined.into());
        }
        other => {
            argv.push(long.into());
            argv.push(scalar(key, other)?.into());
        }
    }
    Ok(())
}

/// argv extended with the config file's values for flags missing from `argv`.
pub fn merged_argv(cmd: &Command, argv: Vec<OsString>, matches: &ArgMatches, path: &Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
    let (sub_name, sub_matches) = matches.subcommand().context("no subcommand")?;
    let sub_cmd = cmd.find_subcommand(sub_name).context("unknown subcommand")?;

    let mut argv = argv;
    for (key, value) in &table {
        match value {
            toml::Value::Table(section) => {
                if section.is_empty() || key != sub_name {
                    if cmd.find_subcommand(key).is_none() {
                        bail!("unknown config section [{key}]");
                    }
                    continue;
                }
                for (k, v) in section {
                    push_flag(&mut argv, sub_cmd, sub_matches, k, v)?;
                }
            }
            v => {
                if key == "config" {
                    bail!("a config file cannot name another config file");
                }
                push_flag(&mut argv, cmd, matches, key, v)?;
            }
        }
    }
    Ok(argv)
}
