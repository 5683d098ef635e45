//! Flat key/value configuration: defaults, then a `key: value` file, then
//! command-line flags, the rightmost source winning.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use indexmap::IndexMap;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// one value
    Value,
    /// comma-separated values; the flag may also be repeated
    List,
    /// boolean flag without a value
    Switch,
    /// flag that stores a fixed value under another key
    Preset { key: &'static str, value: &'static str },
}

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    /// `None`: unset unless given
    pub default: Option<&'static str>,
    pub help: &'static str,
}

pub const fn value(name: &'static str, default: Option<&'static str>, help: &'static str) -> Key {
    Key {
        name,
        kind: Kind::Value,
        default,
        help,
    }
}

pub const fn list(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        kind: Kind::List,
        default: None,
        help,
    }
}

pub const fn switch(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        kind: Kind::Switch,
        default: Some("false"),
        help,
    }
}

pub const fn preset(name: &'static str, key: &'static str, value: &'static str, help: &'static str) -> Key {
    Key {
        name,
        kind: Kind::Preset { key, value },
        default: None,
        help,
    }
}

/// Add one flag per key plus `--config`.
pub fn add_args(mut cmd: Command, keys: &[Key]) -> Command {
    cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .short('c')
            .value_name("FILE")
            .help("Read `key: value` settings from FILE (flags override them)"),
    );
    for k in keys {
        let mut arg = Arg::new(k.name).long(k.name).help(k.help);
        arg = match k.kind {
            Kind::Value => arg.value_name("VALUE").action(ArgAction::Set),
            Kind::List => arg.value_name("A,B,..").action(ArgAction::Append),
            Kind::Switch | Kind::Preset { .. } => arg.action(ArgAction::SetTrue),
        };
        if let Some(d) = k.default.filter(|_| matches!(k.kind, Kind::Value)) {
            arg = arg.help(format!("{} [default: {d}]", k.help));
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

/// Resolved settings of one command.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: IndexMap<String, String>,
}

/// Parse a `key: value` file. `#` starts a comment.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key: value`, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().trim_matches('"').to_string()));
    }
    Ok(out)
}

impl Config {
    /// Merge defaults, the optional config file and explicitly given flags.
    pub fn resolve(keys: &[Key], matches: &ArgMatches) -> Result<Self, CliError> {
        let mut values = IndexMap::new();
        for k in keys {
            let default = match k.name {
                "seed" => std::env::var("MTK_SEED").ok().or(k.default.map(String::from)),
                _ => k.default.map(String::from),
            };
            if let (Some(d), false) = (default, matches!(k.kind, Kind::Preset { .. })) {
                values.insert(k.name.to_string(), d);
            }
        }
        if let Some(path) = matches.get_one::<String>("config") {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Core(mtk::Error::io(path, e)))?;
            for (k, v) in parse_file(&text)? {
                let key = keys
                    .iter()
                    .find(|key| key.name == k)
                    .ok_or_else(|| CliError::Usage(format!("unknown key {k:?} in {path}")))?;
                match key.kind {
                    Kind::Preset { key, value } if v == "true" => {
                        values.insert(key.to_string(), value.to_string());
                    }
                    Kind::Preset { .. } => {}
                    _ => {
                        values.insert(k, v);
                    }
                }
            }
        }
        for k in keys {
            if matches.value_source(k.name) != Some(ValueSource::CommandLine) {
                continue;
            }
            match k.kind {
                Kind::Value => {
                    values.insert(k.name.into(), matches.get_one::<String>(k.name).cloned().unwrap_or_default());
                }
                Kind::List => {
                    let all: Vec<String> = matches.get_many::<String>(k.name).into_iter().flatten().cloned().collect();
                    values.insert(k.name.into(), all.join(","));
                }
                Kind::Switch => {
                    values.insert(k.name.into(), "true".into());
                }
                Kind::Preset { key, value } => {
                    values.insert(key.into(), value.into());
                }
            }
        }
        Ok(Config { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("bad value {v:?} for {key}: {e}")))
            })
            .transpose()
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        self.opt(key)?.ok_or_else(|| CliError::Usage(format!("missing required setting --{key}")))
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        Ok(self.opt(key)?.unwrap_or(false))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.get::<String>(key).map(PathBuf::from)
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default()
    }

    pub fn paths(&self, key: &str) -> Vec<PathBuf> {
        self.list(key).into_iter().map(PathBuf::from).collect()
    }

    pub fn parsed_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        self.list(key)
            .iter()
            .map(|v| v.parse::<T>().map_err(|e| CliError::Usage(format!("bad value {v:?} in {key}: {e}"))))
            .collect()
    }

    /// Resolved settings as `key: value` lines, readable by [`parse_file`].
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }

    pub fn log(&self, command: &str) {
        log::info!("resolved {command} config:\n{}", self.to_text().trim_end());
    }
}

pub fn require_exists(paths: &[PathBuf]) -> Result<(), CliError> {
    for p in paths {
        if !Path::new(p).exists() {
            return Err(CliError::Core(mtk::Error::Data(format!("{} does not exist", p.display()))));
        }
    }
    Ok(())
}
