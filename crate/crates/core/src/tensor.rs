//! Dense channel-major volumes and the convolution, pooling and
//! resampling kernels shared by the encoder, the criterion and the decoder.
//!
//! Volumes are 2D or 3D. Internally every kernel promotes a 2D volume to
//! 3D with a leading axis of extent 1, so there is a single code path.
//! Reductions accumulate in `f64` regardless of the storage type, and
//! always in the same order, so results are bit-reproducible.

use std::fmt;

use crate::error::{Error, Result};
use num_traits::Float;

/// Storage scalar for volumes. Production math is `f32`; gradient checks
/// run the same code in `f64`.
pub trait Real: Float + Default + Send + Sync + fmt::Debug + 'static {
    fn of(v: f64) -> Self;
    fn wide(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn wide(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn wide(self) -> f64 {
        self
    }
}

/// Multi-channel scalar grid with physical spacing.
///
/// `data` holds `channels` planes back to back, each in row-major order over
/// `dims` (last axis fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T = f32> {
    dims: Vec<usize>,
    channels: usize,
    spacing: Vec<f64>,
    data: Vec<T>,
}

pub(crate) fn voxel_count(dims: &[usize]) -> usize {
    dims.iter().product()
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() != 2 && dims.len() != 3 {
        return Err(Error::Shape(format!(
            "volumes have 2 or 3 spatial axes, got {}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Shape(format!("zero extent in {dims:?}")));
    }
    Ok(())
}

impl<T: Real> Volume<T> {
    pub fn new(dims: Vec<usize>, channels: usize, data: Vec<T>) -> Result<Self> {
        check_dims(&dims)?;
        let expected = channels * voxel_count(&dims);
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match {channels} x {dims:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data"));
        }
        let spacing = vec![1.0; dims.len()];
        Ok(Volume {
            dims,
            channels,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Vec<usize>, channels: usize) -> Result<Self> {
        check_dims(&dims)?;
        let n = channels * voxel_count(&dims);
        Ok(Volume {
            spacing: vec![1.0; dims.len()],
            dims,
            channels,
            data: vec![T::zero(); n],
        })
    }

    /// Builds a volume without validation. Callers guarantee the invariants.
    pub(crate) fn from_parts(dims: Vec<usize>, channels: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), channels * voxel_count(&dims));
        Volume {
            spacing: vec![1.0; dims.len()],
            dims,
            channels,
            data,
        }
    }

    pub fn with_spacing(mut self, spacing: Vec<f64>) -> Result<Self> {
        if spacing.len() != self.dims.len() {
            return Err(Error::Shape(format!(
                "spacing {spacing:?} does not match dims {:?}",
                self.dims
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn voxels(&self) -> usize {
        voxel_count(&self.dims)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies a subset of channels into a new volume.
    pub fn select_channels(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.channels || range.start > range.end {
            return Err(Error::InvalidArgument(format!(
                "channel range {range:?} outside 0..{}",
                self.channels
            )));
        }
        let n = self.voxels();
        let data = self.data[range.start * n..range.end * n].to_vec();
        Ok(Volume {
            dims: self.dims.clone(),
            channels: range.len(),
            spacing: self.spacing.clone(),
            data,
        })
    }

    /// Row-major linear index of a voxel coordinate.
    pub fn linear_index(&self, coord: &[usize]) -> Option<usize> {
        linear_index(&self.dims, coord)
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            dims: self.dims.clone(),
            channels: self.channels,
            spacing: self.spacing.clone(),
            data: self.data.iter().map(|v| U::of(v.wide())).collect(),
        }
    }

    /// Minimum and maximum of one channel.
    pub fn channel_range(&self, c: usize) -> (f64, f64) {
        self.channel(c)
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                let v = v.wide();
                (lo.min(v), hi.max(v))
            })
    }
}

pub(crate) fn linear_index(dims: &[usize], coord: &[usize]) -> Option<usize> {
    if coord.len() != dims.len() {
        return None;
    }
    let mut idx = 0;
    for (&c, &d) in coord.iter().zip(dims) {
        if c >= d {
            return None;
        }
        idx = idx * d + c;
    }
    Some(idx)
}

/// Promotes 2D extents to 3D by prepending `fill`.
pub(crate) fn promote(v: &[usize], fill: usize) -> [usize; 3] {
    match v.len() {
        2 => [fill, v[0], v[1]],
        _ => [v[0], v[1], v[2]],
    }
}

/// Filter bank: `count` filters over `in_channels` input channels.
///
/// Weights are laid out filter-major, then input channel, then row-major
/// over the kernel extent.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank<T = f32> {
    count: usize,
    in_channels: usize,
    extent: Vec<usize>,
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Real> KernelBank<T> {
    pub fn new(
        count: usize,
        in_channels: usize,
        extent: Vec<usize>,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        if extent.len() != 2 && extent.len() != 3 {
            return Err(Error::Shape(format!(
                "kernel extent must have 2 or 3 axes, got {extent:?}"
            )));
        }
        if extent.iter().any(|&e| e % 2 == 0) {
            return Err(Error::InvalidArgument(format!(
                "kernel extents must be odd, got {extent:?}"
            )));
        }
        let expected = count * in_channels * voxel_count(&extent);
        if weights.len() != expected {
            return Err(Error::Shape(format!(
                "weight length {} does not match {count} x {in_channels} x {extent:?}",
                weights.len()
            )));
        }
        if bias.len() != count {
            return Err(Error::Shape(format!(
                "bias length {} does not match {count} filters",
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel bank"));
        }
        Ok(KernelBank {
            count,
            in_channels,
            extent,
            weights,
            bias,
        })
    }

    pub fn zeros(count: usize, in_channels: usize, extent: Vec<usize>) -> Result<Self> {
        let n = count * in_channels * voxel_count(&extent);
        Self::new(
            count,
            in_channels,
            extent,
            vec![T::zero(); n],
            vec![T::zero(); count],
        )
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn extent(&self) -> &[usize] {
        &self.extent
    }

    pub fn kernel_len(&self) -> usize {
        voxel_count(&self.extent)
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    pub fn buffers_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.weights, &mut self.bias)
    }

    /// Weights of one filter across all input channels.
    pub fn filter(&self, f: usize) -> &[T] {
        let n = self.in_channels * self.kernel_len();
        &self.weights[f * n..(f + 1) * n]
    }

    pub fn is_pointwise(&self) -> bool {
        self.extent.iter().all(|&e| e == 1)
    }

    pub fn cast<U: Real>(&self) -> KernelBank<U> {
        KernelBank {
            count: self.count,
            in_channels: self.in_channels,
            extent: self.extent.clone(),
            weights: self.weights.iter().map(|v| U::of(v.wide())).collect(),
            bias: self.bias.iter().map(|v| U::of(v.wide())).collect(),
        }
    }
}

/// "Same" cross-correlation with zero padding.
pub fn conv_same<T: Real>(input: &Volume<T>, bank: &KernelBank<T>) -> Result<Volume<T>> {
    if input.channels != bank.in_channels {
        return Err(Error::ChannelMismatch {
            expected: bank.in_channels,
            got: input.channels,
        });
    }
    if bank.extent.len() != input.dims.len() {
        return Err(Error::Shape(format!(
            "kernel extent {:?} does not match volume dims {:?}",
            bank.extent, input.dims
        )));
    }
    if bank.extent.iter().zip(&input.dims).any(|(&k, &d)| k > d) {
        return Err(Error::KernelTooLarge {
            kernel: bank.extent.clone(),
            input: input.dims.clone(),
        });
    }
    if bank.is_pointwise() {
        let out = pointwise(input.data(), input.channels, input.voxels(), bank);
        return Ok(Volume {
            dims: input.dims.clone(),
            channels: bank.count,
            spacing: input.spacing.clone(),
            data: out,
        });
    }

    let [d0, d1, d2] = promote(&input.dims, 1);
    let [k0, k1, k2] = promote(&bank.extent, 1);
    let (p0, p1, p2) = ((k0 / 2) as isize, (k1 / 2) as isize, (k2 / 2) as isize);
    let n = input.voxels();
    let klen = bank.kernel_len();
    let mut out = Vec::with_capacity(bank.count * n);
    let mut acc = vec![0f64; n];

    for f in 0..bank.count {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for c in 0..bank.in_channels {
            let src = input.channel(c);
            let kernel = &bank.weights[(f * bank.in_channels + c) * klen..][..klen];
            for a in 0..k0 {
                for b in 0..k1 {
                    for e in 0..k2 {
                        let w = kernel[(a * k1 + b) * k2 + e].wide();
                        if w == 0.0 {
                            continue;
                        }
                        let (o0, o1, o2) = (a as isize - p0, b as isize - p1, e as isize - p2);
                        let (z_lo, z_hi) = valid_range(d0, o0);
                        let (y_lo, y_hi) = valid_range(d1, o1);
                        let (x_lo, x_hi) = valid_range(d2, o2);
                        if x_lo >= x_hi {
                            continue;
                        }
                        for z in z_lo..z_hi {
                            let iz = (z as isize + o0) as usize;
                            for y in y_lo..y_hi {
                                let iy = (y as isize + o1) as usize;
                                let out_row = &mut acc[(z * d1 + y) * d2..][x_lo..x_hi];
                                let ix0 = (x_lo as isize + o2) as usize;
                                let in_row = &src[(iz * d1 + iy) * d2 + ix0..][..x_hi - x_lo];
                                for (o, &i) in out_row.iter_mut().zip(in_row) {
                                    *o += w * i.wide();
                                }
                            }
                        }
                    }
                }
            }
        }
        let b = bank.bias[f].wide();
        out.extend(acc.iter().map(|&a| T::of(a + b)));
    }

    Ok(Volume {
        dims: input.dims.clone(),
        channels: bank.count,
        spacing: input.spacing.clone(),
        data: out,
    })
}

/// Output positions `o` along an axis of extent `d` such that `o + offset`
/// stays inside the axis.
#[inline]
fn valid_range(d: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (d as isize - offset).clamp(0, d as isize) as usize;
    (lo.min(hi), hi)
}

/// 1-extent convolution over a flat channel-major buffer.
pub(crate) fn pointwise<T: Real>(
    input: &[T],
    in_channels: usize,
    voxels: usize,
    bank: &KernelBank<T>,
) -> Vec<T> {
    debug_assert_eq!(input.len(), in_channels * voxels);
    let mut out = Vec::with_capacity(bank.count * voxels);
    let mut acc = vec![0f64; voxels];
    for f in 0..bank.count {
        let b = bank.bias[f].wide();
        acc.iter_mut().for_each(|a| *a = b);
        for c in 0..in_channels {
            let w = bank.weights[f * in_channels + c].wide();
            if w == 0.0 {
                continue;
            }
            let src = &input[c * voxels..(c + 1) * voxels];
            for (a, &x) in acc.iter_mut().zip(src) {
                *a += w * x.wide();
            }
        }
        out.extend(acc.iter().map(|&a| T::of(a)));
    }
    out
}

pub fn relu<T: Real>(input: &Volume<T>) -> Volume<T> {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub(crate) fn relu_in_place<T: Real>(v: &mut Volume<T>) {
    for x in v.data.iter_mut() {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Output extent of a pooling window along one axis.
pub fn pooled_extent(dim: usize, window: usize, stride: usize) -> usize {
    (dim - window) / stride + 1
}

/// Channel-wise max pooling without padding.
pub fn max_pool<T: Real>(
    input: &Volume<T>,
    window: &[usize],
    stride: &[usize],
) -> Result<Volume<T>> {
    let nd = input.dims.len();
    if window.len() != nd || stride.len() != nd {
        return Err(Error::Shape(format!(
            "pooling window {window:?} / stride {stride:?} do not match dims {:?}",
            input.dims
        )));
    }
    if window.iter().chain(stride).any(|&w| w == 0) {
        return Err(Error::InvalidArgument(
            "pooling window and stride must be >= 1".into(),
        ));
    }
    if window.iter().zip(&input.dims).any(|(&w, &d)| w > d) {
        return Err(Error::WindowTooLarge {
            window: window.to_vec(),
            input: input.dims.clone(),
        });
    }
    let out_dims: Vec<usize> = input
        .dims
        .iter()
        .zip(window.iter().zip(stride))
        .map(|(&d, (&w, &s))| pooled_extent(d, w, s))
        .collect();
    let [d0, d1, d2] = promote(&input.dims, 1);
    let [w0, w1, w2] = promote(window, 1);
    let [s0, s1, s2] = promote(stride, 1);
    let [q0, q1, q2] = promote(&out_dims, 1);
    let mut data = Vec::with_capacity(input.channels * q0 * q1 * q2);
    for c in 0..input.channels {
        let src = input.channel(c);
        for z in 0..q0 {
            for y in 0..q1 {
                for x in 0..q2 {
                    let mut m = T::neg_infinity();
                    for a in 0..w0 {
                        for b in 0..w1 {
                            let row = ((z * s0 + a) * d1 + y * s1 + b) * d2 + x * s2;
                            for &v in &src[row..row + w2] {
                                if v > m {
                                    m = v;
                                }
                            }
                        }
                    }
                    data.push(m);
                }
            }
        }
    }
    let _ = d0;
    Ok(Volume {
        dims: out_dims,
        channels: input.channels,
        spacing: input
            .spacing
            .iter()
            .zip(stride)
            .map(|(&sp, &s)| sp * s as f64)
            .collect(),
        data,
    })
}

/// Replicates every voxel `factor` times along each axis.
pub fn upsample_nearest<T: Real>(input: &Volume<T>, factor: &[usize]) -> Result<Volume<T>> {
    if factor.len() != input.dims.len() {
        return Err(Error::Shape(format!(
            "upsampling factor {factor:?} does not match dims {:?}",
            input.dims
        )));
    }
    if factor.contains(&0) {
        return Err(Error::InvalidArgument(
            "upsampling factor must be >= 1".into(),
        ));
    }
    let out_dims: Vec<usize> = input
        .dims
        .iter()
        .zip(factor)
        .map(|(&d, &f)| d * f)
        .collect();
    let [d0, d1, d2] = promote(&input.dims, 1);
    let [f0, f1, f2] = promote(factor, 1);
    let (o1, o2) = (d1 * f1, d2 * f2);
    let mut data = Vec::with_capacity(input.channels * voxel_count(&out_dims));
    let mut row = Vec::with_capacity(o2);
    for c in 0..input.channels {
        let src = input.channel(c);
        for z in 0..d0 * f0 {
            for y in 0..o1 {
                row.clear();
                let base = ((z / f0) * d1 + y / f1) * d2;
                for &v in &src[base..base + d2] {
                    row.extend(std::iter::repeat_n(v, f2));
                }
                data.extend_from_slice(&row);
            }
        }
    }
    Ok(Volume {
        dims: out_dims,
        channels: input.channels,
        spacing: input
            .spacing
            .iter()
            .zip(factor)
            .map(|(&sp, &f)| sp / f as f64)
            .collect(),
        data,
    })
}

/// Adjoint of [`upsample_nearest`]: sums each `factor` block.
pub fn block_sum<T: Real>(input: &Volume<T>, factor: &[usize]) -> Result<Volume<T>> {
    if factor.len() != input.dims.len() || factor.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "bad block factor {factor:?}"
        )));
    }
    if input.dims.iter().zip(factor).any(|(&d, &f)| d % f != 0) {
        return Err(Error::Shape(format!(
            "dims {:?} not divisible by {factor:?}",
            input.dims
        )));
    }
    let out_dims: Vec<usize> = input
        .dims
        .iter()
        .zip(factor)
        .map(|(&d, &f)| d / f)
        .collect();
    let [d0, d1, d2] = promote(&input.dims, 1);
    let [f0, f1, f2] = promote(factor, 1);
    let [q0, q1, q2] = promote(&out_dims, 1);
    let nq = q0 * q1 * q2;
    let mut data = Vec::with_capacity(input.channels * nq);
    let mut acc = vec![0f64; nq];
    for c in 0..input.channels {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let src = input.channel(c);
        for z in 0..d0 {
            for y in 0..d1 {
                let row = &src[(z * d1 + y) * d2..][..d2];
                let base = ((z / f0) * q1 + y / f1) * q2;
                for (x, &v) in row.iter().enumerate() {
                    acc[base + x / f2] += v.wide();
                }
            }
        }
        data.extend(acc.iter().map(|&a| T::of(a)));
    }
    Ok(Volume::from_parts(out_dims, input.channels, data))
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels<T: Real>(a: &Volume<T>, b: &Volume<T>) -> Result<Volume<T>> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!(
            "cannot concatenate dims {:?} and {:?}",
            a.dims, b.dims
        )));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Volume {
        dims: a.dims.clone(),
        channels: a.channels + b.channels,
        spacing: a.spacing.clone(),
        data,
    })
}
