//! Locating volume pairs on disk.
//!
//! Volumes are paired by naming convention, `<id>.<role>.vsrv` with role
//! `thin`, `thick` or `sr`, or through a manifest:
//!
//! ```toml
//! [[pair]]
//! id = "case01"
//! thin = "scans/case01_1mm.vsrv"
//! thick = "scans/case01_4mm.vsrv"
//! ```
//!
//! Manifest paths are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{CliError, Result};

pub const EXTENSION: &str = "vsrv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Thin,
    Thick,
    Sr,
}

impl Role {
    pub fn suffix(self) -> &'static str {
        match self {
            Role::Thin => "thin",
            Role::Thick => "thick",
            Role::Sr => "sr",
        }
    }

    const ALL: [Role; 3] = [Role::Thin, Role::Thick, Role::Sr];
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub id: String,
    pub thin: Option<PathBuf>,
    pub thick: Option<PathBuf>,
    pub sr: Option<PathBuf>,
}

impl PairEntry {
    pub fn get(&self, role: Role) -> Option<&Path> {
        match role {
            Role::Thin => self.thin.as_deref(),
            Role::Thick => self.thick.as_deref(),
            Role::Sr => self.sr.as_deref(),
        }
    }

    fn slot(&mut self, role: Role) -> &mut Option<PathBuf> {
        match role {
            Role::Thin => &mut self.thin,
            Role::Thick => &mut self.thick,
            Role::Sr => &mut self.sr,
        }
    }

    /// `Ok` when every role in `roles` is present, else the missing ones.
    fn missing(&self, roles: &[Role]) -> Vec<&'static str> {
        roles
            .iter()
            .filter(|r| self.get(**r).is_none())
            .map(|r| r.suffix())
            .collect()
    }
}

/// Path of `<id>.<role>.vsrv` inside `dir`.
pub fn role_path(dir: &Path, id: &str, role: Role) -> PathBuf {
    dir.join(format!("{id}.{}.{EXTENSION}", role.suffix()))
}

/// Splits `<id>.<role>.vsrv` into id and role.
pub fn parse_name(name: &str) -> Option<(&str, Role)> {
    let stem = name.strip_suffix(EXTENSION)?.strip_suffix('.')?;
    Role::ALL.into_iter().find_map(|role| {
        let id = stem.strip_suffix(role.suffix())?.strip_suffix('.')?;
        (!id.is_empty()).then_some((id, role))
    })
}

/// Conventionally named volumes in each of `dirs`, grouped by id. Later
/// directories do not override roles already found.
pub fn scan(dirs: &[&Path]) -> Result<Vec<PairEntry>> {
    let mut by_id: BTreeMap<String, PairEntry> = BTreeMap::new();
    for dir in dirs {
        let entries = std::fs::read_dir(dir)
            .map_err(|e| CliError::invalid(format!("cannot list {}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry?.path();
            let Some((id, role)) = path.file_name().and_then(|n| n.to_str()).and_then(parse_name)
            else {
                continue;
            };
            let pair = by_id.entry(id.to_string()).or_insert_with(|| PairEntry {
                id: id.to_string(),
                ..PairEntry::default()
            });
            pair.slot(role).get_or_insert(path);
        }
    }
    Ok(by_id.into_values().collect())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    #[serde(default)]
    pair: Vec<PairEntry>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<PairEntry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::invalid(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = toml::from_str(&text)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(manifest
        .pair
        .into_iter()
        .map(|mut p| {
            for role in Role::ALL {
                if let Some(rel) = p.slot(role).take() {
                    *p.slot(role) = Some(base.join(rel));
                }
            }
            p
        })
        .collect())
}

/// Entries carrying every role in `roles`; the others are logged and
/// dropped.
pub fn complete(entries: Vec<PairEntry>, roles: &[Role]) -> Vec<PairEntry> {
    entries
        .into_iter()
        .filter(|p| {
            let missing = p.missing(roles);
            if !missing.is_empty() {
                log::warn!("skipping {}: no {} volume", p.id, missing.join("/"));
            }
            missing.is_empty()
        })
        .collect()
}

/// File name of `path` with any `.<role>.vsrv` or `.vsrv` suffix removed.
pub fn volume_id(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    match parse_name(name) {
        Some((id, _)) => id.to_string(),
        None => name
            .strip_suffix(EXTENSION)
            .and_then(|s| s.strip_suffix('.'))
            .unwrap_or(name)
            .to_string(),
    }
}
