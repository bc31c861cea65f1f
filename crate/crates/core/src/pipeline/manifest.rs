use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum visits per patient for a trend to be defined.
pub const MIN_VISITS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientEntry {
    pub id: String,
    /// Visit files in chronological order.
    pub visits: Vec<PathBuf>,
}

/// `{"patients": [{"id": "P01", "visits": ["v1.nii.gz", ...]}, ...]}`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub patients: Vec<PatientEntry>,
}

impl Manifest {
    /// Parse and validate. Relative visit paths are resolved against
    /// `base_dir` when given.
    pub fn from_json(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut m: Manifest =
            serde_json::from_str(text).map_err(|e| Error::Manifest(format!("malformed manifest: {e}")))?;
        if let Some(dir) = base_dir {
            for p in &mut m.patients {
                for v in &mut p.visits {
                    if v.is_relative() {
                        *v = dir.join(&*v);
                    }
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    /// Read a manifest file; relative paths are taken relative to it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        if self.patients.is_empty() {
            return Err(Error::Input("manifest lists no patients".into()));
        }
        let mut seen = HashSet::new();
        for p in &self.patients {
            if p.id.trim().is_empty() {
                return Err(Error::Manifest("patient id must not be empty".into()));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate patient id {}", p.id)));
            }
            if p.visits.len() < MIN_VISITS {
                return Err(Error::Manifest(format!(
                    "patient {} has {} visits; at least three visits are required",
                    p.id,
                    p.visits.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}
