use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{format, Dataset};
use crate::artifact;
use crate::error::{Error, Result};

/// `{"name": .., "dim": .., "bags": [{"id", "label", "path"}]}`; bag paths
/// are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub dim: usize,
    pub bags: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub label: u8,
    pub path: String,
}

impl Manifest {
    /// Parses and structurally validates a manifest document.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bags.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.dim == 0 {
            return Err(Error::config("manifest dim must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for entry in &self.bags {
            if entry.label > 1 {
                return Err(Error::config(format!("bag {}: label must be 0 or 1", entry.id)));
            }
            if !seen.insert(entry.id.as_str()) {
                return Err(Error::config(format!("duplicate bag id {}", entry.id)));
            }
        }
        Ok(())
    }
}

/// Loads every bag listed in the manifest at `manifest_path`.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = Manifest::from_json_str(&text)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut bags = Vec::with_capacity(manifest.bags.len());
    for entry in &manifest.bags {
        let path: PathBuf = base.join(&entry.path);
        let bag = format::read_bag_file(&path, &entry.id, entry.label)?;
        if bag.dim() != manifest.dim {
            return Err(Error::DimensionMismatch {
                context: format!("bag {} ({})", entry.id, path.display()),
                expected: manifest.dim,
                found: bag.dim(),
            });
        }
        bags.push(bag);
    }
    let ds = Dataset {
        name: manifest.name,
        dim: manifest.dim,
        bags,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `<id>.emb` for every bag plus `manifest.json` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.bags.len());
    for bag in &ds.bags {
        let file = format!("{}.emb", bag.id);
        format::save_bag(bag, &dir.join(&file))?;
        entries.push(ManifestEntry {
            id: bag.id.clone(),
            label: bag.label,
            path: file,
        });
    }
    let manifest = Manifest {
        name: ds.name.clone(),
        dim: ds.dim,
        bags: entries,
    };
    let path = dir.join("manifest.json");
    artifact::write_json(&path, &manifest)?;
    Ok(path)
}
