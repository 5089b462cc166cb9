//! Image-selection criterion: Otsu-binarize a layer-1 activation, compare
//! it to the ground-truth region with Dice, keep the best labeled filter
//! per region, and recommend the worst-scoring remaining image.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Modality;
use crate::error::{Error, Result};
use crate::metrics::Region;
use crate::tensor::Volume;

pub const OTSU_BINS: usize = 256;

/// Binary voxel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: Vec<usize>,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Vec<usize>, bits: Vec<bool>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), bits.len());
        Mask { dims, bits }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Mask {
        Mask::new(self.dims.clone(), self.bits.iter().map(|b| !b).collect())
    }
}

/// Threshold edge `j` of a histogram of `OTSU_BINS` bins over `[lo, hi]`.
#[inline]
fn edge(lo: f64, width: f64, j: usize) -> f64 {
    lo + j as f64 * width
}

/// Otsu threshold of a flat list of values.
///
/// The histogram has 256 equal bins over `[min, max]`; candidate
/// thresholds are the 255 inner bin edges. Values `<= t` form the lower
/// class, matching [`binarize`]. The class means use the actual values,
/// not bin centers. Ties go to the lowest edge.
pub fn otsu_values(values: &[f32]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("otsu input"));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    if !(hi > lo) {
        return Err(Error::ConstantInput);
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut counts = [0u64; OTSU_BINS];
    let mut sums = [0f64; OTSU_BINS];
    for &v in values {
        let x = v as f64;
        // Bin b holds edge(b) < x <= edge(b + 1); bin 0 is closed below.
        let mut b =
            (((x - lo) / width).ceil() as isize - 1).clamp(0, OTSU_BINS as isize - 1) as usize;
        while b > 0 && x <= edge(lo, width, b) {
            b -= 1;
        }
        while b + 1 < OTSU_BINS && x > edge(lo, width, b + 1) {
            b += 1;
        }
        counts[b] += 1;
        sums[b] += x;
    }
    let total = values.len() as f64;
    let grand: f64 = sums.iter().sum();
    let mut n0 = 0u64;
    let mut s0 = 0f64;
    let mut best = (1usize, -1.0f64);
    for j in 1..OTSU_BINS {
        n0 += counts[j - 1];
        s0 += sums[j - 1];
        let n1 = values.len() as u64 - n0;
        let var = if n0 == 0 || n1 == 0 {
            0.0
        } else {
            let m0 = s0 / n0 as f64;
            let m1 = (grand - s0) / n1 as f64;
            (n0 as f64 / total) * (n1 as f64 / total) * (m0 - m1) * (m0 - m1)
        };
        if var > best.1 {
            best = (j, var);
        }
    }
    Ok(edge(lo, width, best.0))
}

pub fn otsu_threshold(values: &Volume, channel: usize) -> Result<f64> {
    if channel >= values.channels() {
        return Err(Error::InvalidArgument(format!(
            "channel {channel} outside 0..{}",
            values.channels()
        )));
    }
    otsu_values(values.channel(channel))
}

/// `value > threshold`.
pub fn binarize_values(values: &[f32], dims: &[usize], threshold: f64) -> Mask {
    Mask::new(
        dims.to_vec(),
        values.iter().map(|&v| v as f64 > threshold).collect(),
    )
}

pub fn binarize(values: &Volume, channel: usize, threshold: f64) -> Mask {
    binarize_values(values.channel(channel), values.dims(), threshold)
}

/// `2|a ∩ b| / (|a| + |b|)`, and 1.0 when both masks are empty.
pub fn dice_binary(a: &Mask, b: &Mask) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!(
            "mask dims {:?} and {:?} differ",
            a.dims, b.dims
        )));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Filter of one of the two layer-1 banks, written `flair-3` / `t1gd-3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FilterId {
    pub modality: Modality,
    pub index: usize,
}

impl FilterId {
    pub fn new(modality: Modality, index: usize) -> Self {
        FilterId { modality, index }
    }
}

impl fmt::Display for FilterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.modality, self.index)
    }
}

impl FromStr for FilterId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (m, i) = s
            .rsplit_once('-')
            .ok_or_else(|| Error::UnknownFilter(s.to_string()))?;
        let modality = m.parse().map_err(|_| Error::UnknownFilter(s.to_string()))?;
        let index = i.parse().map_err(|_| Error::UnknownFilter(s.to_string()))?;
        Ok(FilterId { modality, index })
    }
}

impl Serialize for FilterId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FilterId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterLabel {
    #[serde(rename = "good_WT")]
    GoodWt,
    #[serde(rename = "good_ET")]
    GoodEt,
    #[default]
    #[serde(rename = "none")]
    None,
}

impl FilterLabel {
    pub fn region(self) -> Option<Region> {
        match self {
            FilterLabel::GoodWt => Some(Region::Wt),
            FilterLabel::GoodEt => Some(Region::Et),
            FilterLabel::None => None,
        }
    }

    pub fn for_region(region: Region) -> Option<FilterLabel> {
        match region {
            Region::Wt => Some(FilterLabel::GoodWt),
            Region::Et => Some(FilterLabel::GoodEt),
            Region::Tc => None,
        }
    }
}

impl FromStr for FilterLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "good_WT" => Ok(FilterLabel::GoodWt),
            "good_ET" => Ok(FilterLabel::GoodEt),
            "none" => Ok(FilterLabel::None),
            _ => Err(Error::InvalidArgument(format!(
                "unknown filter label {s:?}"
            ))),
        }
    }
}

/// User labels on layer-1 filters. Filters without an entry are `none`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterAnnotation {
    pub labels: BTreeMap<FilterId, FilterLabel>,
}

impl FilterAnnotation {
    pub fn set(&mut self, id: FilterId, label: FilterLabel) {
        if label == FilterLabel::None {
            self.labels.remove(&id);
        } else {
            self.labels.insert(id, label);
        }
    }

    pub fn get(&self, id: &FilterId) -> FilterLabel {
        self.labels.get(id).copied().unwrap_or_default()
    }

    pub fn filters_for(&self, region: Region) -> Vec<FilterId> {
        let want = FilterLabel::for_region(region);
        self.labels
            .iter()
            .filter(|(_, &l)| Some(l) == want)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.values().any(|&l| l != FilterLabel::None)
    }
}

/// Rectified layer-1 activations of one image, per modality.
#[derive(Clone, Debug)]
pub struct Layer1Activations {
    pub flair: Volume,
    pub t1gd: Volume,
}

impl Layer1Activations {
    pub fn get(&self, id: &FilterId) -> Option<&[f32]> {
        let v = match id.modality {
            Modality::Flair => &self.flair,
            Modality::T1gd => &self.t1gd,
        };
        (id.index < v.channels()).then(|| v.channel(id.index))
    }

    pub fn dims(&self) -> &[usize] {
        self.flair.dims()
    }
}

/// Dice of one Otsu-binarized activation against a region mask. A
/// constant activation scores 0 and has no threshold.
pub fn filter_dice(activation: &[f32], gt: &Mask) -> Result<(f64, Option<f64>)> {
    match otsu_values(activation) {
        Ok(t) => {
            let mask = binarize_values(activation, gt.dims(), t);
            Ok((dice_binary(&mask, gt)?, Some(t)))
        }
        Err(Error::ConstantInput) => Ok((0.0, None)),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    pub region: Region,
    pub best_filter: FilterId,
    pub dice: f64,
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub records: Vec<ScoreRecord>,
    pub aggregate: f64,
    /// 1-based position in the ascending ranking; 0 until ranked.
    pub rank: usize,
}

impl ImageScore {
    pub fn region(&self, region: Region) -> Option<&ScoreRecord> {
        self.records.iter().find(|r| r.region == region)
    }
}

/// Scores one image: for WT and ET, the best Dice among filters labeled
/// good for that region; the aggregate is the mean over regions that have
/// at least one labeled filter.
pub fn score_image(
    image_id: &str,
    activations: &Layer1Activations,
    annotations: &FilterAnnotation,
    gt_wt: &Mask,
    gt_et: &Mask,
) -> Result<ImageScore> {
    if !annotations.has_labels() {
        return Err(Error::NoLabeledFilters);
    }
    let mut records = Vec::new();
    for (region, gt) in [(Region::Wt, gt_wt), (Region::Et, gt_et)] {
        let mut best: Option<ScoreRecord> = None;
        for id in annotations.filters_for(region) {
            let act = activations
                .get(&id)
                .ok_or_else(|| Error::UnknownFilter(id.to_string()))?;
            let (dice, threshold) = filter_dice(act, gt)?;
            if best.as_ref().is_none_or(|b| dice > b.dice) {
                best = Some(ScoreRecord {
                    image_id: image_id.to_string(),
                    region,
                    best_filter: id,
                    dice,
                    threshold,
                });
            }
        }
        records.extend(best);
    }
    let aggregate = records.iter().map(|r| r.dice).sum::<f64>() / records.len() as f64;
    Ok(ImageScore {
        image_id: image_id.to_string(),
        records,
        aggregate,
        rank: 0,
    })
}

/// Remaining images ranked ascending by aggregate (ties by id).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ImageScore>,
}

fn worst_first(a: &ImageScore, b: &ImageScore) -> Ordering {
    a.aggregate
        .total_cmp(&b.aggregate)
        .then_with(|| a.image_id.cmp(&b.image_id))
}

impl ScoreTable {
    pub fn new(mut rows: Vec<ImageScore>) -> Self {
        rows.sort_by(worst_first);
        for (i, r) in rows.iter_mut().enumerate() {
            r.rank = i + 1;
        }
        ScoreTable { rows }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageScore> {
        self.rows.iter().find(|r| r.image_id == image_id)
    }

    pub fn min_aggregate(&self) -> Option<f64> {
        self.rows
            .iter()
            .map(|r| r.aggregate)
            .min_by(|a, b| a.total_cmp(b))
    }

    pub const CSV_HEADER: &'static str =
        "image_id,region,best_filter_id,threshold,dice,aggregate,rank";

    /// One row per image and scored region.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            for rec in &row.records {
                let threshold = rec.threshold.map(|t| format!("{t:.9}")).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{:.9},{:.9},{}\n",
                    row.image_id,
                    rec.region,
                    rec.best_filter,
                    threshold,
                    rec.dice,
                    row.aggregate,
                    row.rank
                ));
            }
        }
        out
    }
}

/// The image with the lowest aggregate; ties go to the smallest id.
pub fn rank_and_recommend(table: &ScoreTable) -> Result<String> {
    table
        .rows
        .iter()
        .min_by(|a, b| worst_first(a, b))
        .map(|r| r.image_id.clone())
        .ok_or(Error::EmptyTable)
}

const FIRST_PICK_BINS: usize = 64;

/// Suggests a typical first image: the one whose per-modality intensity
/// histograms have the smallest mean chi-squared distance to the dataset
/// average histogram.
pub fn recommend_first(images: &[(&str, Vec<&Volume>)]) -> Option<String> {
    let first = images.first()?;
    let modalities = first.1.len();
    let mut dist = vec![0.0f64; images.len()];
    for m in 0..modalities {
        let (lo, hi) = images
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |acc, (_, vols)| {
                let (l, h) = vols[m].channel_range(0);
                (acc.0.min(l), acc.1.max(h))
            });
        let width = ((hi - lo) / FIRST_PICK_BINS as f64).max(f64::MIN_POSITIVE);
        let hists: Vec<Vec<f64>> = images
            .iter()
            .map(|(_, vols)| {
                let data = vols[m].channel(0);
                let mut h = vec![0.0; FIRST_PICK_BINS];
                for &v in data {
                    let b = (((v as f64 - lo) / width) as usize).min(FIRST_PICK_BINS - 1);
                    h[b] += 1.0;
                }
                h.iter_mut().for_each(|x| *x /= data.len() as f64);
                h
            })
            .collect();
        let mut avg = vec![0.0; FIRST_PICK_BINS];
        for h in &hists {
            for (a, x) in avg.iter_mut().zip(h) {
                *a += x / hists.len() as f64;
            }
        }
        for (d, h) in dist.iter_mut().zip(&hists) {
            let chi: f64 = h
                .iter()
                .zip(&avg)
                .filter(|(x, a)| *x + *a > 0.0)
                .map(|(x, a)| (x - a) * (x - a) / (x + a))
                .sum();
            *d += chi / modalities as f64;
        }
    }
    images
        .iter()
        .zip(&dist)
        .min_by(|(a, da), (b, db)| da.total_cmp(db).then_with(|| a.0.cmp(b.0)))
        .map(|((id, _), _)| id.to_string())
}
