use std::collections::BTreeMap;

use log::warn;

use super::{
    kmeans, marker_seed, EncoderLayer, FilterProvenance, LayerSample, LayerSpec, MarkerSet,
    NormParams, Tag, STDEV_FLOOR,
};
use crate::error::{Error, Result};
use crate::tensor::{conv_same, max_pool, promote, relu_in_place, KernelBank, Volume};

/// Population mean and standard deviation per channel over every marker
/// voxel of every image. Standard deviations are floored at 1e-6.
pub fn marker_stats(samples: &[LayerSample<'_>]) -> Result<NormParams> {
    let channels = match samples.first() {
        Some(s) => s.image.channels(),
        None => return Err(Error::Empty("marker union")),
    };
    if samples.iter().any(|s| s.image.channels() != channels) {
        return Err(Error::ChannelMismatch {
            expected: channels,
            got: samples
                .iter()
                .map(|s| s.image.channels())
                .find(|&c| c != channels)
                .unwrap(),
        });
    }
    let mut sum = vec![0.0f64; channels];
    let mut count = 0usize;
    for s in samples {
        s.markers.validate(s.image.dims())?;
        for e in &s.markers.entries {
            let idx = s.image.linear_index(&e.coord).unwrap();
            for (c, acc) in sum.iter_mut().enumerate() {
                *acc += s.image.channel(c)[idx] as f64;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("marker union"));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0f64; channels];
    for s in samples {
        for e in &s.markers.entries {
            let idx = s.image.linear_index(&e.coord).unwrap();
            for (c, acc) in sq.iter_mut().enumerate() {
                let d = s.image.channel(c)[idx] as f64 - mean[c];
                *acc += d * d;
            }
        }
    }
    let stdev = sq
        .iter()
        .map(|s| (s / count as f64).sqrt().max(STDEV_FLOOR))
        .collect();
    Ok(NormParams { mean, stdev })
}

/// Per-channel `(x - mean) / stdev`.
pub fn normalize(image: &Volume, norm: &NormParams) -> Result<Volume> {
    if norm.mean.len() != image.channels() || norm.stdev.len() != image.channels() {
        return Err(Error::ChannelMismatch {
            expected: norm.mean.len(),
            got: image.channels(),
        });
    }
    let mut out = image.clone();
    for c in 0..image.channels() {
        let (m, s) = (norm.mean[c], norm.stdev[c]);
        for v in out.channel_mut(c) {
            *v = ((*v as f64 - m) / s) as f32;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub marker_id: u32,
    pub tag: Tag,
    /// Channel-major, then row-major over the kernel extent; the same
    /// layout as one filter of a [`KernelBank`].
    pub values: Vec<f32>,
}

/// One patch per marker voxel, centered on the voxel, taken from the
/// normalized image. Positions outside the volume read as zero.
pub fn extract_patches(
    image: &Volume,
    norm: &NormParams,
    markers: &MarkerSet,
    kernel_size: usize,
) -> Result<Vec<Patch>> {
    if kernel_size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd, got {kernel_size}"
        )));
    }
    if markers.entries.is_empty() {
        return Err(Error::Empty("marker voxels"));
    }
    markers.validate(image.dims())?;
    let normalized = normalize(image, norm)?;
    Ok(patches_from_normalized(&normalized, markers, kernel_size))
}

fn patches_from_normalized(image: &Volume, markers: &MarkerSet, kernel_size: usize) -> Vec<Patch> {
    let nd = image.dims().len();
    let [d0, d1, d2] = promote(image.dims(), 1);
    let [k0, k1, k2] = promote(&vec![kernel_size; nd], 1);
    let (r0, r1, r2) = ((k0 / 2) as isize, (k1 / 2) as isize, (k2 / 2) as isize);
    markers
        .entries
        .iter()
        .map(|e| {
            let [c0, c1, c2] = promote(&e.coord, 0);
            let mut values = Vec::with_capacity(image.channels() * k0 * k1 * k2);
            for ch in 0..image.channels() {
                let src = image.channel(ch);
                for a in 0..k0 as isize {
                    let z = c0 as isize + a - r0;
                    for b in 0..k1 as isize {
                        let y = c1 as isize + b - r1;
                        for x in (c2 as isize - r2)..(c2 as isize - r2 + k2 as isize) {
                            let inside = z >= 0
                                && y >= 0
                                && x >= 0
                                && (z as usize) < d0
                                && (y as usize) < d1
                                && (x as usize) < d2;
                            values.push(if inside {
                                src[((z as usize) * d1 + y as usize) * d2 + x as usize]
                            } else {
                                0.0
                            });
                        }
                    }
                }
            }
            Patch {
                marker_id: e.marker_id,
                tag: e.tag,
                values,
            }
        })
        .collect()
}

struct Candidate {
    centroid: Vec<f64>,
    provenance: FilterProvenance,
}

/// Learns one encoder layer from marker patches.
///
/// Each marker's patches are clustered into `filters_per_marker`
/// centroids. When the pooled centroids exceed `total_filters` they are
/// reduced by a second k-means. Every surviving filter is scaled to unit
/// L2 norm; zero-norm centroids are dropped with a warning. The result does
/// not depend on the order of `samples`.
pub fn learn_layer(
    samples: &[LayerSample<'_>],
    spec: &LayerSpec,
    seed: u64,
) -> Result<EncoderLayer> {
    spec.validate()?;
    if !samples.iter().any(|s| s.markers.has_object()) {
        return Err(Error::NoObjectMarkers);
    }
    let mut ordered: Vec<LayerSample<'_>> = samples.to_vec();
    ordered.sort_by(|a, b| a.markers.image_id.cmp(&b.markers.image_id));
    for w in ordered.windows(2) {
        if w[0].markers.image_id == w[1].markers.image_id {
            return Err(Error::InvalidArgument(format!(
                "image {:?} supplied twice",
                w[0].markers.image_id
            )));
        }
    }
    let nd = ordered[0].image.dims().len();
    let in_channels = ordered[0].image.channels();

    let norm = marker_stats(&ordered)?;

    let mut candidates = Vec::new();
    for s in &ordered {
        let normalized = normalize(s.image, &norm)?;
        let patches = patches_from_normalized(&normalized, s.markers, spec.kernel_size);
        let mut groups: BTreeMap<u32, (Tag, Vec<Vec<f64>>)> = BTreeMap::new();
        for p in patches {
            groups
                .entry(p.marker_id)
                .or_insert_with(|| (p.tag, Vec::new()))
                .1
                .push(p.values.iter().map(|&v| v as f64).collect());
        }
        for (marker_id, (tag, points)) in groups {
            let km = kmeans(
                &points,
                spec.filters_per_marker,
                marker_seed(seed, &s.markers.image_id, marker_id),
            )?;
            for (cluster, centroid) in km.centroids.into_iter().enumerate() {
                candidates.push(Candidate {
                    centroid,
                    provenance: FilterProvenance {
                        image_id: s.markers.image_id.clone(),
                        marker_id,
                        cluster,
                        tag,
                        merged: 1,
                    },
                });
            }
        }
    }

    if candidates.len() > spec.total_filters {
        let points: Vec<Vec<f64>> = candidates.iter().map(|c| c.centroid.clone()).collect();
        let km = kmeans(&points, spec.total_filters, seed)?;
        let mut reduced = Vec::with_capacity(km.k);
        for (j, centroid) in km.centroids.into_iter().enumerate() {
            let members: Vec<usize> = (0..points.len())
                .filter(|&i| km.assignment[i] == j)
                .collect();
            if members.is_empty() {
                continue;
            }
            // Representative member: nearest to the merged centroid.
            let rep = *members
                .iter()
                .min_by(|&&a, &&b| {
                    let da: f64 = points[a]
                        .iter()
                        .zip(&centroid)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    let db: f64 = points[b]
                        .iter()
                        .zip(&centroid)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            let mut provenance = candidates[rep].provenance.clone();
            provenance.merged = members.len();
            reduced.push(Candidate {
                centroid,
                provenance,
            });
        }
        candidates = reduced;
    }

    let mut weights = Vec::new();
    let mut provenance = Vec::new();
    let mut warnings = Vec::new();
    for c in candidates {
        let norm2: f64 = c.centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm2 <= f64::EPSILON {
            let msg = format!(
                "dropped zero-norm filter from image {} marker {} cluster {}",
                c.provenance.image_id, c.provenance.marker_id, c.provenance.cluster
            );
            warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        weights.extend(c.centroid.iter().map(|v| (v / norm2) as f32));
        provenance.push(c.provenance);
    }
    if provenance.is_empty() {
        return Err(Error::AllCentroidsZero);
    }
    let count = provenance.len();
    let bank = KernelBank::new(
        count,
        in_channels,
        vec![spec.kernel_size; nd],
        weights,
        vec![0.0; count],
    )?;
    Ok(EncoderLayer {
        norm,
        bank,
        pool: spec.pool,
        provenance,
        warnings,
    })
}

/// Normalize, convolve and rectify; then pool. Returns both the
/// rectified activation (the skip tap) and the pooled volume.
pub fn run_layer(input: &Volume, layer: &EncoderLayer) -> Result<(Volume, Volume)> {
    if input.channels() != layer.bank.in_channels() {
        return Err(Error::ChannelMismatch {
            expected: layer.bank.in_channels(),
            got: input.channels(),
        });
    }
    let normalized = normalize(input, &layer.norm)?;
    let mut pre_pool = conv_same(&normalized, &layer.bank)?;
    relu_in_place(&mut pre_pool);
    let (window, stride) = layer.pool.per_axis(input.dims().len());
    let pooled = max_pool(&pre_pool, &window, &stride)?;
    Ok((pre_pool, pooled))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// Rectified activation of every layer before pooling, shallow first.
    pub pre_pools: Vec<Volume>,
    /// Pooled output of the last layer.
    pub pooled: Volume,
}

pub fn run_encoder(input: &Volume, layers: &[EncoderLayer]) -> Result<EncoderOutput> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("encoder has no layers".into()));
    }
    let mut pre_pools = Vec::with_capacity(layers.len());
    let mut current = input.clone();
    for layer in layers {
        let (pre, pooled) = run_layer(&current, layer)?;
        pre_pools.push(pre);
        current = pooled;
    }
    Ok(EncoderOutput {
        pre_pools,
        pooled: current,
    })
}

/// Learns the layers of `specs` beyond those already in `layers`, feeding
/// each new layer the pooled output of the previous ones on every marked
/// image, with markers mapped onto the pooled grid.
pub fn extend_encoder(
    mut layers: Vec<EncoderLayer>,
    images: &[(&Volume, &MarkerSet)],
    specs: &[LayerSpec],
    seed: u64,
) -> Result<Vec<EncoderLayer>> {
    if images.is_empty() {
        return Err(Error::NoObjectMarkers);
    }
    while layers.len() < specs.len() {
        let depth = layers.len();
        let mut inputs = Vec::with_capacity(images.len());
        for (image, markers) in images {
            let mut current = (*image).clone();
            let mut factor = vec![1usize; image.dims().len()];
            for layer in &layers {
                current = run_layer(&current, layer)?.1;
                for f in factor.iter_mut() {
                    *f *= layer.pool.stride;
                }
            }
            let mapped = markers.downsample(&factor, current.dims());
            inputs.push((current, mapped));
        }
        let samples: Vec<LayerSample<'_>> = inputs
            .iter()
            .map(|(image, markers)| LayerSample { image, markers })
            .collect();
        let layer_seed = seed.wrapping_add(depth as u64);
        layers.push(learn_layer(&samples, &specs[depth], layer_seed)?);
    }
    Ok(layers)
}
