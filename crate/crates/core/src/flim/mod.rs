//! Encoder layers learned directly from user markers: marker-based
//! normalization, patch extraction and k-means filter synthesis. Nothing
//! here uses backpropagation.

mod kmeans;
mod learn;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{linear_index, KernelBank, Volume};

pub use kmeans::{kmeans, KMeans};
pub use learn::{
    extend_encoder, extract_patches, learn_layer, marker_stats, normalize, run_encoder, run_layer,
    EncoderOutput, Patch,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Object,
    Background,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::Object => "object",
            Tag::Background => "background",
        })
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "object" => Ok(Tag::Object),
            "background" => Ok(Tag::Background),
            other => Err(Error::InvalidArgument(format!(
                "unknown marker tag {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerEntry {
    pub coord: Vec<usize>,
    pub marker_id: u32,
    pub tag: Tag,
}

/// User scribbles on one image. Entries sharing a `marker_id` form one
/// connected stroke.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerSet {
    pub image_id: String,
    pub entries: Vec<MarkerEntry>,
}

impl MarkerSet {
    pub fn new(image_id: impl Into<String>) -> Self {
        MarkerSet {
            image_id: image_id.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, coord: Vec<usize>, marker_id: u32, tag: Tag) {
        self.entries.push(MarkerEntry {
            coord,
            marker_id,
            tag,
        });
    }

    pub fn has_object(&self) -> bool {
        self.entries.iter().any(|e| e.tag == Tag::Object)
    }

    pub fn marker_ids(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|e| e.marker_id).collect()
    }

    /// Checks every coordinate against `dims`. The error names the
    /// offending entry index.
    pub fn validate(&self, dims: &[usize]) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.marker_id == 0 {
                return Err(Error::Malformed {
                    line: i,
                    message: "marker ids start at 1".into(),
                });
            }
            if linear_index(dims, &e.coord).is_none() {
                return Err(Error::Malformed {
                    line: i,
                    message: format!("coordinate {:?} outside volume {dims:?}", e.coord),
                });
            }
        }
        Ok(())
    }

    /// Maps coordinates onto a grid pooled by `factor` per axis, clamping
    /// to `dims` and dropping duplicates within each marker.
    pub fn downsample(&self, factor: &[usize], dims: &[usize]) -> MarkerSet {
        let mut seen = BTreeSet::new();
        let mut out = MarkerSet::new(self.image_id.clone());
        for e in &self.entries {
            let coord: Vec<usize> = e
                .coord
                .iter()
                .zip(factor.iter().zip(dims))
                .map(|(&c, (&f, &d))| (c / f).min(d - 1))
                .collect();
            if seen.insert((e.marker_id, coord.clone())) {
                out.push(coord, e.marker_id, e.tag);
            }
        }
        out
    }
}

/// Per-channel z-score statistics taken from marker voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub mean: Vec<f64>,
    pub stdev: Vec<f64>,
}

pub const STDEV_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn per_axis(&self, ndim: usize) -> (Vec<usize>, Vec<usize>) {
        (vec![self.window; ndim], vec![self.stride; ndim])
    }
}

/// Hyperparameters of one learned layer. The kernel is isotropic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel_size: usize,
    pub filters_per_marker: usize,
    pub total_filters: usize,
    pub pool: PoolSpec,
}

impl LayerSpec {
    pub fn new(kernel_size: usize, filters_per_marker: usize, total_filters: usize) -> Self {
        LayerSpec {
            kernel_size,
            filters_per_marker,
            total_filters,
            pool: PoolSpec {
                window: 2,
                stride: 2,
            },
        }
    }

    /// Three layers of 32, 64 and 64 filters, 3-wide kernels, three filters
    /// per marker and 2/2 max pooling.
    pub fn default_stack() -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(3, 3, 32),
            LayerSpec::new(3, 3, 64),
            LayerSpec::new(3, 3, 64),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) || self.kernel_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.filters_per_marker == 0 || self.total_filters == 0 {
            return Err(Error::InvalidArgument(
                "filters_per_marker and total_filters must be >= 1".into(),
            ));
        }
        if self.pool.window == 0 || self.pool.stride == 0 {
            return Err(Error::InvalidArgument(
                "pooling window and stride must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Where a learned filter came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterProvenance {
    pub image_id: String,
    pub marker_id: u32,
    pub cluster: usize,
    pub tag: Tag,
    /// Number of per-marker centroids merged into this filter by the
    /// global reduction (1 when no reduction happened).
    pub merged: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub norm: NormParams,
    pub bank: KernelBank,
    pub pool: PoolSpec,
    pub provenance: Vec<FilterProvenance>,
    pub warnings: Vec<String>,
}

impl EncoderLayer {
    pub fn filter_count(&self) -> usize {
        self.bank.count()
    }
}

/// Input of `learn_layer`: one image (already passed through the previous
/// layers) and its markers mapped onto that image's grid.
#[derive(Clone, Copy, Debug)]
pub struct LayerSample<'a> {
    pub image: &'a Volume,
    pub markers: &'a MarkerSet,
}

/// FNV-1a, stable across platforms and releases.
pub(crate) fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn marker_seed(seed: u64, image_id: &str, marker_id: u32) -> u64 {
    seed ^ stable_hash(&[image_id.as_bytes(), &marker_id.to_le_bytes()])
}
