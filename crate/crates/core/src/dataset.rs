//! In-memory dataset: co-registered FLAIR/T1Gd pairs with optional ground
//! truth, as listed by a manifest.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_labels, read_volume, DatasetManifest};
use crate::metrics::LabelVolume;
use crate::tensor::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Flair,
    T1gd,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Flair, Modality::T1gd];
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Flair => "flair",
            Modality::T1gd => "t1gd",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flair" => Ok(Modality::Flair),
            "t1gd" => Ok(Modality::T1gd),
            _ => Err(Error::InvalidArgument(format!("unknown modality {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug)]
pub struct CaseData {
    pub id: String,
    pub split: Split,
    pub flair: Volume,
    pub t1gd: Volume,
    pub gt: Option<LabelVolume>,
    /// Generator appearance mode when known (synthetic data only).
    pub hard: Option<bool>,
}

impl CaseData {
    pub fn image(&self, modality: Modality) -> &Volume {
        match modality {
            Modality::Flair => &self.flair,
            Modality::T1gd => &self.t1gd,
        }
    }

    pub fn gt(&self) -> Result<&LabelVolume> {
        self.gt
            .as_ref()
            .ok_or_else(|| Error::MissingGroundTruth(self.id.clone()))
    }

    pub fn dims(&self) -> &[usize] {
        self.flair.dims()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub cases: Vec<CaseData>,
}

impl Dataset {
    pub fn new(cases: Vec<CaseData>) -> Result<Self> {
        for c in &cases {
            if c.flair.dims() != c.t1gd.dims() || c.flair.channels() != 1 || c.t1gd.channels() != 1
            {
                return Err(Error::Shape(format!(
                    "case {}: FLAIR and T1Gd must be single-channel with equal dims",
                    c.id
                )));
            }
            if let Some(gt) = &c.gt {
                if gt.dims() != c.flair.dims() {
                    return Err(Error::Shape(format!(
                        "case {}: ground truth dims differ",
                        c.id
                    )));
                }
            }
        }
        let mut ids: Vec<&str> = cases.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!(
                "duplicate case id {:?}",
                w[0]
            )));
        }
        Ok(Dataset { cases })
    }

    /// Reads every volume referenced by the manifest.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        Self::from_manifest(&manifest, manifest_path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_manifest(manifest: &DatasetManifest, root: &Path) -> Result<Self> {
        let mut cases = Vec::with_capacity(manifest.cases.len());
        for entry in &manifest.cases {
            let flair = read_volume(&root.join(&entry.flair))?;
            let t1gd = read_volume(&root.join(&entry.t1gd))?;
            let gt = match &entry.gt {
                Some(p) => Some(read_labels(&root.join(p))?),
                None => None,
            };
            cases.push(CaseData {
                id: entry.case_id.clone(),
                split: entry.split,
                flair,
                t1gd,
                gt,
                hard: entry.hard,
            });
        }
        Self::new(cases)
    }

    pub fn get(&self, id: &str) -> Result<&CaseData> {
        self.cases
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::UnknownCase(id.to_string()))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaseData> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.split(split).map(|c| c.id.clone()).collect()
    }
}
