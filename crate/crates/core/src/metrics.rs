//! Label volumes, evaluation regions and DSC reporting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::criterion::{dice_binary, Mask};
use crate::error::{Error, Result};
use crate::tensor::{voxel_count, Volume};

pub const BACKGROUND: u8 = 0;
pub const EDEMA: u8 = 1;
pub const ENHANCING: u8 = 2;
pub const NECROTIC: u8 = 3;
pub const CLASS_COUNT: usize = 4;

/// One label per voxel: 0 background, 1 edema, 2 enhancing tumor,
/// 3 necrotic core.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Vec<usize>,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Vec<usize>, labels: Vec<u8>) -> Result<Self> {
        if dims.len() != 2 && dims.len() != 3 {
            return Err(Error::Shape(format!(
                "label volumes have 2 or 3 axes, got {dims:?}"
            )));
        }
        if labels.len() != voxel_count(&dims) {
            return Err(Error::Shape(format!(
                "label count {} does not match dims {dims:?}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= CLASS_COUNT) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: CLASS_COUNT,
            });
        }
        Ok(LabelVolume { dims, labels })
    }

    /// Interprets a single-channel volume of integral values as labels.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        if v.channels() != 1 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                got: v.channels(),
            });
        }
        let labels = v
            .data()
            .iter()
            .map(|&x| {
                if x.fract() != 0.0 || !(0.0..CLASS_COUNT as f32).contains(&x) {
                    Err(Error::InvalidArgument(format!("{x} is not a label value")))
                } else {
                    Ok(x as u8)
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        LabelVolume::new(v.dims().to_vec(), labels)
    }

    pub fn to_volume(&self) -> Volume {
        Volume::from_parts(
            self.dims.clone(),
            1,
            self.labels.iter().map(|&l| l as f32).collect(),
        )
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    /// Enhancing tumor.
    #[serde(rename = "ET")]
    Et,
    /// Tumor core: ET and NC.
    #[serde(rename = "TC")]
    Tc,
    /// Whole tumor: ED, ET and NC.
    #[serde(rename = "WT")]
    Wt,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Et, Region::Tc, Region::Wt];

    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::Wt => matches!(label, EDEMA | ENHANCING | NECROTIC),
            Region::Tc => matches!(label, ENHANCING | NECROTIC),
            Region::Et => label == ENHANCING,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Et => "ET",
            Region::Tc => "TC",
            Region::Wt => "WT",
        })
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ET" => Ok(Region::Et),
            "TC" => Ok(Region::Tc),
            "WT" => Ok(Region::Wt),
            _ => Err(Error::InvalidArgument(format!("unknown region {s:?}"))),
        }
    }
}

pub fn region_mask(labels: &LabelVolume, region: Region) -> Mask {
    Mask::new(
        labels.dims.clone(),
        labels.labels.iter().map(|&l| region.contains(l)).collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub region: Region,
    pub per_image: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl RegionStats {
    fn from_values(region: Region, per_image: Vec<f64>) -> Self {
        let n = per_image.len() as f64;
        let mean = per_image.iter().sum::<f64>() / n;
        let std = (per_image
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n)
            .sqrt();
        RegionStats {
            region,
            per_image,
            mean,
            std,
        }
    }

    /// `0.713 ± 0.068`
    pub fn display(&self) -> String {
        format!("{:.3} \u{b1} {:.3}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DscReport {
    pub case_ids: Vec<String>,
    pub regions: Vec<RegionStats>,
}

impl DscReport {
    pub fn region(&self, region: Region) -> &RegionStats {
        self.regions.iter().find(|r| r.region == region).unwrap()
    }

    pub fn mean(&self, region: Region) -> f64 {
        self.region(region).mean
    }

    /// `region,mean,std` rows followed by a per-case table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("region,mean,std\n");
        for r in &self.regions {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.region, r.mean, r.std));
        }
        out.push_str("\ncase_id,dsc_et,dsc_tc,dsc_wt\n");
        for (i, id) in self.case_ids.iter().enumerate() {
            out.push_str(&format!(
                "{id},{:.6},{:.6},{:.6}\n",
                self.region(Region::Et).per_image[i],
                self.region(Region::Tc).per_image[i],
                self.region(Region::Wt).per_image[i]
            ));
        }
        out
    }

    pub fn pretty(&self) -> String {
        let mut out = String::new();
        out.push_str("| ET | TC | WT |\n|----|----|----|\n|");
        for r in &self.regions {
            out.push_str(&format!(" {} |", r.display()));
        }
        out.push('\n');
        out
    }
}

/// Per-image DSC for ET, TC and WT; two empty masks count as 1.0.
pub fn dsc_report(
    case_ids: &[String],
    preds: &[LabelVolume],
    gts: &[LabelVolume],
) -> Result<DscReport> {
    if preds.len() != gts.len() || case_ids.len() != preds.len() {
        return Err(Error::Shape(format!(
            "unpaired lists: {} ids, {} predictions, {} ground truths",
            case_ids.len(),
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut regions = Vec::with_capacity(3);
    for region in Region::ALL {
        let values = preds
            .iter()
            .zip(gts)
            .map(|(p, g)| dice_binary(&region_mask(p, region), &region_mask(g, region)))
            .collect::<Result<Vec<f64>>>()?;
        regions.push(RegionStats::from_values(region, values));
    }
    Ok(DscReport {
        case_ids: case_ids.to_vec(),
        regions,
    })
}
