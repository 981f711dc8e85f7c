use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::skt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the directory holding the manifest.
    pub path: String,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion_class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Checks that every path resolves and its SKT1 header matches the entry.
    pub fn validate(&self, base: &Path) -> Result<()> {
        for e in &self.entries {
            let path = base.join(&e.path);
            let shape = skt::read_shape(&path).map_err(|err| match err {
                Error::Io { .. } => Error::Validation {
                    path: path.clone(),
                    detail: "file does not exist or is unreadable".into(),
                },
                other => other,
            })?;
            let recorded = vec![e.n, e.c, e.h, e.w];
            if shape != recorded {
                return Err(Error::Validation {
                    path,
                    detail: format!("manifest records (n, c, h, w) = {recorded:?}, header has {shape:?}"),
                });
            }
        }
        Ok(())
    }

    fn check_schema(&self) -> Result<()> {
        if self.split == Split::Test {
            if let Some(i) = self.entries.iter().position(|e| e.motion_class.is_none()) {
                return Err(Error::Schema {
                    field: format!("entries[{i}].motion_class"),
                    detail: "required on test-split entries".into(),
                });
            }
        }
        for (i, e) in self.entries.iter().enumerate() {
            for (name, v) in [("n", e.n), ("c", e.c), ("h", e.h), ("w", e.w)] {
                if v == 0 {
                    return Err(Error::Schema {
                        field: format!("entries[{i}].{name}"),
                        detail: "must be positive".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

fn field_of(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    msg.split('`').nth(1).unwrap_or("document").to_string()
}

/// Parses a manifest; does not touch the referenced video files.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = serde_json::from_str(text).map_err(|e| Error::Schema {
        field: field_of(&e),
        detail: e.to_string(),
    })?;
    manifest.check_schema()?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.check_schema()?;
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
