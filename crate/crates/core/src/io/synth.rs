//! Synthetic FLAIR/T1Gd tumor phantoms and an oracle that plays the
//! human marking them.
//!
//! Each case is a noisy uniform "brain" holding one ellipsoidal lesion with
//! a necrotic core, an enhancing rim and an edema halo. A minority of cases
//! use a second appearance: an irregular boundary, a dim enhancing rim and
//! a lesion that is darker than the brain on FLAIR.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry};
use super::volume::{write_labels, write_volume};
use crate::dataset::{CaseData, Split};
use crate::error::{Error, Result};
use crate::flim::{stable_hash, MarkerSet, Tag};
use crate::metrics::{region_mask, LabelVolume, Region, BACKGROUND, EDEMA, ENHANCING, NECROTIC};
use crate::tensor::{linear_index, voxel_count, Volume};

pub const MIN_SYNTH_EXTENT: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub dims: Vec<usize>,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub noise: f64,
}

impl SynthConfig {
    pub fn new(n_cases: usize, dims: Vec<usize>, seed: u64) -> Self {
        SynthConfig {
            n_cases,
            dims,
            seed,
            val_fraction: 0.1,
            test_fraction: 0.3,
            noise: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 {
            return Err(Error::InvalidArgument(
                "at least one case is required".into(),
            ));
        }
        if self.dims.len() != 2 && self.dims.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "dims need 2 or 3 axes, got {:?}",
                self.dims
            )));
        }
        if self.dims.iter().any(|&d| d < MIN_SYNTH_EXTENT) {
            return Err(Error::InvalidArgument(format!(
                "every extent must be at least {MIN_SYNTH_EXTENT}, got {:?}",
                self.dims
            )));
        }
        let fr = self.val_fraction + self.test_fraction;
        if !(0.0..=1.0).contains(&self.val_fraction)
            || !(0.0..=1.0).contains(&self.test_fraction)
            || fr >= 1.0
        {
            return Err(Error::InvalidArgument(
                "split fractions must leave training cases".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidArgument(
                "noise must be a finite non-negative sigma".into(),
            ));
        }
        Ok(())
    }

    /// Split of each case index: training first, then validation, then test.
    pub fn splits(&self) -> Vec<Split> {
        let n = self.n_cases;
        let test = (n as f64 * self.test_fraction).round() as usize;
        let val = (n as f64 * self.val_fraction).round() as usize;
        let train = n.saturating_sub(test + val).max(1);
        let val = val.min(n - train);
        (0..n)
            .map(|i| {
                if i < train {
                    Split::Train
                } else if i < train + val {
                    Split::Val
                } else {
                    Split::Test
                }
            })
            .collect()
    }
}

/// Indices of cases drawn in the hard appearance mode, spread evenly so
/// every split receives some.
pub fn hard_indices(n: usize) -> Vec<usize> {
    let count = (n / 5).max(2).min(n);
    (0..count)
        .map(|j| ((j as f64 + 0.5) * n as f64 / count as f64) as usize)
        .collect()
}

pub fn case_id(index: usize) -> String {
    format!("case{index:03}")
}

struct Appearance {
    /// Brain, edema, enhancing rim, necrotic core.
    flair: [f64; 4],
    t1gd: [f64; 4],
}

const EASY: Appearance = Appearance {
    flair: [0.3, 0.8, 0.75, 0.7],
    t1gd: [0.3, 0.3, 0.9, 0.1],
};

const HARD: Appearance = Appearance {
    flair: [0.3, 0.1, 0.08, 0.05],
    t1gd: [0.3, 0.3, 0.4, 0.1],
};

fn label_of(r: f64) -> u8 {
    if r <= 0.3 {
        NECROTIC
    } else if r <= 0.65 {
        ENHANCING
    } else if r <= 1.0 {
        EDEMA
    } else {
        BACKGROUND
    }
}

fn coords(dims: &[usize], mut i: usize) -> Vec<usize> {
    let mut c = vec![0; dims.len()];
    for a in (0..dims.len()).rev() {
        c[a] = i % dims[a];
        i /= dims[a];
    }
    c
}

fn lesion(dims: &[usize], hard: bool, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let nd = dims.len();
    let smallest = *dims.iter().min().expect("nonempty dims") as f64;
    loop {
        let center: Vec<f64> = dims
            .iter()
            .map(|&d| d as f64 * rng.random_range(0.4..0.6))
            .collect();
        let base = smallest * rng.random_range(0.24..0.3);
        let radii: Vec<f64> = (0..nd)
            .map(|_| base * rng.random_range(0.85..1.15))
            .collect();
        let freq = [
            rng.random_range(3..=5) as f64,
            rng.random_range(2..=3) as f64,
        ];
        let phase = [
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
        ];
        let labels: Vec<u8> = (0..voxel_count(dims))
            .map(|i| {
                let c = coords(dims, i);
                let d: Vec<f64> = (0..nd)
                    .map(|a| (c[a] as f64 + 0.5 - center[a]) / radii[a])
                    .collect();
                let mut r = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                if hard && r > 0.0 {
                    let theta = d[nd - 2].atan2(d[nd - 1]);
                    let mut m = (freq[0] * theta + phase[0]).sin();
                    if nd == 3 {
                        m *= (freq[1] * (d[0] / r).acos() + phase[1]).cos();
                    }
                    r /= 1.0 + 0.3 * m;
                }
                label_of(r)
            })
            .collect();
        if [EDEMA, ENHANCING, NECROTIC]
            .iter()
            .all(|l| labels.contains(l))
        {
            return labels;
        }
    }
}

/// Generates one case deterministically from `seed` and its index.
pub fn synth_case(
    index: usize,
    dims: &[usize],
    hard: bool,
    seed: u64,
    noise: f64,
) -> Result<(Volume, Volume, LabelVolume)> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ stable_hash(&[b"synth", &(index as u64).to_le_bytes()]));
    let labels = lesion(dims, hard, &mut rng);
    let look = if hard { &HARD } else { &EASY };
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut draw = |table: &[f64; 4]| -> Vec<f32> {
        labels
            .iter()
            .map(|&l| {
                let n = if noise > 0.0 {
                    normal.sample(&mut rng)
                } else {
                    0.0
                };
                (table[l as usize] + n) as f32
            })
            .collect()
    };
    let flair = draw(&look.flair);
    let t1gd = draw(&look.t1gd);
    Ok((
        Volume::new(dims.to_vec(), 1, flair)?,
        Volume::new(dims.to_vec(), 1, t1gd)?,
        LabelVolume::new(dims.to_vec(), labels)?,
    ))
}

/// Generates the whole dataset in memory.
pub fn synth_cases(cfg: &SynthConfig) -> Result<Vec<CaseData>> {
    cfg.validate()?;
    let hard = hard_indices(cfg.n_cases);
    let splits = cfg.splits();
    (0..cfg.n_cases)
        .map(|i| {
            let is_hard = hard.contains(&i);
            let (flair, t1gd, gt) = synth_case(i, &cfg.dims, is_hard, cfg.seed, cfg.noise)?;
            Ok(CaseData {
                id: case_id(i),
                split: splits[i],
                flair,
                t1gd,
                gt: Some(gt),
                hard: Some(is_hard),
            })
        })
        .collect()
}

/// Writes the dataset under `out` (volumes in `out/cases/`, manifest at
/// `out/manifest.json`) and returns the manifest.
pub fn synth_dataset(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    let cases = synth_cases(cfg)?;
    let mut manifest = DatasetManifest::default();
    for c in &cases {
        let rel = |suffix: &str| PathBuf::from("cases").join(format!("{}_{suffix}.vol", c.id));
        let (fp, tp, gp) = (rel("flair"), rel("t1gd"), rel("gt"));
        write_volume(&c.flair, &out.join(&fp))?;
        write_volume(&c.t1gd, &out.join(&tp))?;
        write_labels(c.gt()?, &out.join(&gp))?;
        manifest.cases.push(ManifestEntry {
            case_id: c.id.clone(),
            flair: fp,
            t1gd: tp,
            gt: Some(gp),
            split: c.split,
            hard: c.hard,
        });
    }
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// Marker ids used by [`oracle_markers`].
pub const ORACLE_ET_MARKER: u32 = 1;
pub const ORACLE_WT_MARKER: u32 = 2;
pub const ORACLE_BG_MARKER: u32 = 3;

fn morph(mask: &[bool], dims: &[usize], radius: usize, erode: bool) -> Vec<bool> {
    let nd = dims.len();
    let offsets: Vec<Vec<isize>> = (0..(2 * radius + 1).pow(nd as u32))
        .map(|k| {
            let mut k = k;
            (0..nd)
                .map(|_| {
                    let o = (k % (2 * radius + 1)) as isize - radius as isize;
                    k /= 2 * radius + 1;
                    o
                })
                .collect()
        })
        .collect();
    (0..mask.len())
        .map(|i| {
            let c = coords(dims, i);
            let mut hits = offsets.iter().map(|o| {
                let n: Option<Vec<usize>> = c
                    .iter()
                    .zip(o)
                    .map(|(&x, &d)| x.checked_add_signed(d))
                    .collect();
                n.and_then(|n| linear_index(dims, &n))
                    .is_some_and(|j| mask[j])
            });
            if erode {
                hits.all(|h| h)
            } else {
                hits.any(|h| h)
            }
        })
        .collect()
}

fn pick(candidates: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = sample(rng, candidates.len(), n.min(candidates.len()))
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    idx.sort_unstable();
    idx
}

/// Markers a careful annotator could have drawn: `n_per_class` voxels from
/// the eroded enhancing rim, from the eroded whole tumor, and from the
/// background beyond a 2-voxel margin around the tumor. Returns warnings
/// when an eroded region was empty and the raw region was used instead.
pub fn oracle_markers(
    case_id: &str,
    gt: &LabelVolume,
    n_per_class: usize,
    seed: u64,
) -> Result<(MarkerSet, Vec<String>)> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument(
            "n_per_class must be at least 1".into(),
        ));
    }
    let dims = gt.dims();
    let wt = region_mask(gt, Region::Wt);
    if wt.count() == 0 {
        return Err(Error::NoObjectMarkers);
    }
    let et = region_mask(gt, Region::Et);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(&[b"oracle", case_id.as_bytes()]));
    let mut set = MarkerSet::new(case_id);
    let mut warnings = Vec::new();
    let mut object =
        |mask: &[bool], marker: u32, name: &str, set: &mut MarkerSet, rng: &mut ChaCha8Rng| {
            if !mask.iter().any(|&b| b) {
                return;
            }
            let eroded = morph(mask, dims, 1, true);
            let source = if eroded.iter().any(|&b| b) {
                eroded
            } else {
                warnings.push(format!(
                    "{case_id}: {name} vanished under erosion; sampling the raw region"
                ));
                mask.to_vec()
            };
            let cand: Vec<usize> = (0..source.len()).filter(|&i| source[i]).collect();
            for i in pick(&cand, n_per_class, rng) {
                set.push(coords(dims, i), marker, Tag::Object);
            }
        };
    object(et.bits(), ORACLE_ET_MARKER, "ET", &mut set, &mut rng);
    object(wt.bits(), ORACLE_WT_MARKER, "WT", &mut set, &mut rng);
    let grown = morph(wt.bits(), dims, 2, false);
    let bg: Vec<usize> = (0..grown.len()).filter(|&i| !grown[i]).collect();
    for i in pick(&bg, n_per_class, &mut rng) {
        set.push(coords(dims, i), ORACLE_BG_MARKER, Tag::Background);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((set, warnings))
}
