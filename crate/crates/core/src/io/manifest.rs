use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{Error, Result};

/// One case of a dataset manifest. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub case_id: String,
    pub flair: PathBuf,
    pub t1gd: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
    pub split: Split,
    /// Appearance mode of synthetic cases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub cases: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.cases {
            if c.case_id.is_empty() {
                return Err(Error::InvalidArgument("empty case_id in manifest".into()));
            }
            if !seen.insert(c.case_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate case id {:?}",
                    c.case_id
                )));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}
