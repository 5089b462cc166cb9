//! Slice extraction, window-leveling and PNG encoding.

use flim_core::criterion::Mask;
use flim_core::metrics::{LabelVolume, EDEMA, ENHANCING, NECROTIC};

use crate::error::{ApiError, ApiResult};

/// Lower and upper percentiles of the display window.
pub const WINDOW: (f64, f64) = (0.01, 0.99);
pub const OVERLAY_ALPHA: f64 = 0.5;

pub const EDEMA_COLOR: [u8; 3] = [0, 255, 0];
pub const ENHANCING_COLOR: [u8; 3] = [255, 255, 0];
pub const NECROTIC_COLOR: [u8; 3] = [255, 0, 0];
pub const ACTIVATION_COLOR: [u8; 3] = [0, 255, 255];

/// Voxel indices of one 2D slice in row-major order plus its height and
/// width. A 2D volume is its own single slice along axis 0.
#[derive(Debug)]
pub struct SliceGrid {
    pub height: usize,
    pub width: usize,
    pub voxels: Vec<usize>,
}

pub fn slice_grid(dims: &[usize], axis: usize, index: usize) -> ApiResult<SliceGrid> {
    let out_of_range =
        |what: String| ApiError::new(axum::http::StatusCode::RANGE_NOT_SATISFIABLE, what);
    match dims.len() {
        2 => {
            if axis != 0 || index != 0 {
                return Err(out_of_range(format!(
                    "2D volume has only slice 0 on axis 0, got axis {axis} index {index}"
                )));
            }
            Ok(SliceGrid {
                height: dims[0],
                width: dims[1],
                voxels: (0..dims[0] * dims[1]).collect(),
            })
        }
        3 => {
            if axis > 2 {
                return Err(out_of_range(format!("axis {axis} outside 0..3")));
            }
            if index >= dims[axis] {
                return Err(out_of_range(format!(
                    "index {index} outside 0..{}",
                    dims[axis]
                )));
            }
            let (r, c) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let mut voxels = Vec::with_capacity(dims[r] * dims[c]);
            let mut coord = [0usize; 3];
            coord[axis] = index;
            for i in 0..dims[r] {
                for j in 0..dims[c] {
                    coord[r] = i;
                    coord[c] = j;
                    voxels.push((coord[0] * dims[1] + coord[1]) * dims[2] + coord[2]);
                }
            }
            Ok(SliceGrid {
                height: dims[r],
                width: dims[c],
                voxels,
            })
        }
        n => Err(ApiError::unprocessable(format!(
            "volumes have 2 or 3 axes, got {n}"
        ))),
    }
}

/// Nearest-rank percentiles of the whole channel.
pub fn window(values: &[f32]) -> (f32, f32) {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    if sorted.is_empty() {
        return (0.0, 0.0);
    }
    let at = |p: f64| sorted[(p * (sorted.len() - 1) as f64).round() as usize];
    (at(WINDOW.0), at(WINDOW.1))
}

pub fn gray_level(v: f32, lo: f32, hi: f32) -> u8 {
    if hi <= lo {
        return 0;
    }
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

pub fn label_color(label: u8) -> Option<[u8; 3]> {
    match label {
        EDEMA => Some(EDEMA_COLOR),
        ENHANCING => Some(ENHANCING_COLOR),
        NECROTIC => Some(NECROTIC_COLOR),
        _ => None,
    }
}

pub fn label_overlay(labels: &LabelVolume) -> Vec<Option<[u8; 3]>> {
    labels.labels().iter().map(|&l| label_color(l)).collect()
}

pub fn mask_overlay(mask: &Mask, color: [u8; 3]) -> Vec<Option<[u8; 3]>> {
    mask.bits().iter().map(|&b| b.then_some(color)).collect()
}

fn blend(gray: u8, color: u8) -> u8 {
    (gray as f64 * (1.0 - OVERLAY_ALPHA) + color as f64 * OVERLAY_ALPHA).round() as u8
}

/// Grayscale PNG, or RGB when an overlay is given.
pub fn render_png(
    values: &[f32],
    grid: &SliceGrid,
    overlay: Option<&[Option<[u8; 3]>]>,
) -> Vec<u8> {
    let (lo, hi) = window(values);
    let gray: Vec<u8> = grid
        .voxels
        .iter()
        .map(|&v| gray_level(values[v], lo, hi))
        .collect();
    let (color, data) = match overlay {
        None => (png::ColorType::Grayscale, gray),
        Some(ov) => {
            let mut rgb = Vec::with_capacity(gray.len() * 3);
            for (&g, &v) in gray.iter().zip(&grid.voxels) {
                match ov[v] {
                    Some(c) => rgb.extend(c.iter().map(|&x| blend(g, x))),
                    None => rgb.extend([g, g, g]),
                }
            }
            (png::ColorType::Rgb, rgb)
        }
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, grid.width as u32, grid.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory PNG header");
        w.write_image_data(&data).expect("in-memory PNG data");
    }
    out
}
