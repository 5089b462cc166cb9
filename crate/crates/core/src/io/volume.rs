//! Volume files: the native container and uncompressed NIfTI-1.
//!
//! Native layout: the 8-byte magic `FLIMVOL\x01`, a little-endian `u32`
//! header length, a JSON header `{dims, channels, spacing, dtype}` and the
//! raw little-endian payload in channel-major, row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::tensor::{voxel_count, Volume};

pub const NATIVE_MAGIC: &[u8; 8] = b"FLIMVOL\x01";
const NIFTI_HEADER: usize = 348;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32le")]
    F32,
    #[serde(rename = "u8")]
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeHeader {
    dims: Vec<usize>,
    channels: usize,
    spacing: Vec<f64>,
    dtype: Dtype,
}

/// Decoded file contents before conversion to a float or label volume.
enum Decoded {
    F32(Volume),
    U8 {
        dims: Vec<usize>,
        spacing: Vec<f64>,
        data: Vec<u8>,
    },
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_native(header: &NativeHeader, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(NATIVE_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

/// Serializes a volume in the native container.
pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let header = NativeHeader {
        dims: volume.dims().to_vec(),
        channels: volume.channels(),
        spacing: volume.spacing().to_vec(),
        dtype: Dtype::F32,
    };
    let payload: Vec<u8> = volume.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    encode_native(&header, &payload)
}

pub fn encode_labels(labels: &LabelVolume) -> Vec<u8> {
    let header = NativeHeader {
        dims: labels.dims().to_vec(),
        channels: 1,
        spacing: vec![1.0; labels.dims().len()],
        dtype: Dtype::U8,
    };
    encode_native(&header, labels.labels())
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    write_bytes(path, &encode_volume(volume))
}

pub fn write_labels(labels: &LabelVolume, path: &Path) -> Result<()> {
    write_bytes(path, &encode_labels(labels))
}

fn decode_native(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < 12 {
        return Err(Error::Header("file shorter than the fixed preamble".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if hlen > body.len() {
        return Err(Error::Header(format!(
            "header length {hlen} exceeds remaining {} bytes",
            body.len()
        )));
    }
    let header: NativeHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Header(e.to_string()))?;
    if header.dims.len() != 2 && header.dims.len() != 3 {
        return Err(Error::Header(format!(
            "expected 2 or 3 axes, got {:?}",
            header.dims
        )));
    }
    if header.channels == 0 || header.dims.contains(&0) {
        return Err(Error::Header("zero-sized dimension".into()));
    }
    if header.spacing.len() != header.dims.len() {
        return Err(Error::Header("spacing needs one value per axis".into()));
    }
    let payload = &body[hlen..];
    let count = header
        .dims
        .iter()
        .try_fold(header.channels, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Header("dims overflow".into()))?;
    let expected = count * header.dtype.width();
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    match header.dtype {
        Dtype::F32 => {
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("volume payload"));
            }
            let v =
                Volume::new(header.dims, header.channels, data)?.with_spacing(header.spacing)?;
            Ok(Decoded::F32(v))
        }
        Dtype::U8 => {
            if header.channels != 1 {
                return Err(Error::Header("u8 payloads are single-channel".into()));
            }
            Ok(Decoded::U8 {
                dims: header.dims,
                spacing: header.spacing,
                data: payload.to_vec(),
            })
        }
    }
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut a: [u8; N] = self.bytes[at..at + N].try_into().expect("in header");
        if matches!(self.endian, Endian::Big) {
            a.reverse();
        }
        a
    }

    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.arr(at))
    }

    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.arr(at))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.arr(at))
    }
}

fn decode_nifti(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < NIFTI_HEADER {
        return Err(Error::Header("file shorter than a NIfTI-1 header".into()));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::BadMagic(format!(
            "neither the native container nor single-file NIfTI-1 (found {:?})",
            String::from_utf8_lossy(&bytes[344..348])
        )));
    }
    // Byte order: dim[0] must lie in 1..=7 when read in the file's order.
    let le = Reader {
        bytes,
        endian: Endian::Little,
    };
    let be = Reader {
        bytes,
        endian: Endian::Big,
    };
    let r = if (1..=7).contains(&le.i16(40)) {
        le
    } else if (1..=7).contains(&be.i16(40)) {
        be
    } else {
        return Err(Error::Header(
            "dim[0] outside 1..=7 in either byte order".into(),
        ));
    };
    if r.i32(0) != NIFTI_HEADER as i32 {
        return Err(Error::Header(format!(
            "sizeof_hdr is {}, expected 348",
            r.i32(0)
        )));
    }
    let ndim = r.i16(40) as usize;
    let dim: Vec<i64> = (1..=ndim).map(|i| r.i16(40 + 2 * i) as i64).collect();
    if dim.iter().any(|&d| d < 1) {
        return Err(Error::Header(format!("non-positive extent in {dim:?}")));
    }
    let (spatial, channels) = match ndim {
        2 | 3 => (ndim, 1),
        4 => (3, dim[3] as usize),
        _ => return Err(Error::Header(format!("unsupported dimensionality {ndim}"))),
    };
    // NIfTI stores x fastest; reversing the axes gives row-major order.
    let dims: Vec<usize> = dim[..spatial].iter().rev().map(|&d| d as usize).collect();
    let spacing: Vec<f64> = (1..=spatial)
        .rev()
        .map(|i| {
            let p = r.f32(76 + 4 * i).abs() as f64;
            if p > 0.0 && p.is_finite() {
                p
            } else {
                1.0
            }
        })
        .collect();
    let datatype = r.i16(70);
    let width = match datatype {
        2 => 1,
        4 => 2,
        16 => 4,
        other => {
            return Err(Error::UnsupportedDtype(format!(
                "NIfTI datatype code {other}"
            )))
        }
    };
    let offset = r.f32(108);
    if !(offset >= NIFTI_HEADER as f32) || offset.fract() != 0.0 {
        return Err(Error::Header(format!("vox_offset {offset} is invalid")));
    }
    let offset = offset as usize;
    let count = channels * voxel_count(&dims);
    let expected = count * width;
    let found = bytes.len().saturating_sub(offset);
    if found < expected {
        return Err(Error::PayloadLength { expected, found });
    }
    let payload = &bytes[offset..offset + expected];
    let slope = r.f32(112);
    let inter = r.f32(116);
    let scaled = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    if datatype == 2 && !scaled && channels == 1 {
        return Ok(Decoded::U8 {
            dims,
            spacing,
            data: payload.to_vec(),
        });
    }
    let pr = Reader {
        bytes: payload,
        endian: r.endian,
    };
    let mut data: Vec<f32> = match datatype {
        2 => payload.iter().map(|&b| b as f32).collect(),
        4 => (0..count).map(|i| pr.i16(2 * i) as f32).collect(),
        _ => (0..count).map(|i| pr.f32(4 * i)).collect(),
    };
    if scaled {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("volume payload"));
    }
    Ok(Decoded::F32(
        Volume::new(dims, channels, data)?.with_spacing(spacing)?,
    ))
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() >= 8 && &bytes[..8] == NATIVE_MAGIC {
        decode_native(bytes)
    } else if bytes.len() >= 7 && bytes[..7] == NATIVE_MAGIC[..7] {
        Err(Error::BadMagic(format!(
            "unsupported native container version {}",
            bytes[7]
        )))
    } else if bytes.len() >= NIFTI_HEADER {
        decode_nifti(bytes)
    } else {
        Err(Error::BadMagic("unrecognized volume file".into()))
    }
}

/// Parses a native or NIfTI-1 volume from memory.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    match decode(bytes)? {
        Decoded::F32(v) => Ok(v),
        Decoded::U8 {
            dims,
            spacing,
            data,
        } => Volume::new(dims, 1, data.into_iter().map(f32::from).collect())?.with_spacing(spacing),
    }
}

/// Parses a label volume; float payloads must hold integral labels.
pub fn decode_labels(bytes: &[u8]) -> Result<LabelVolume> {
    match decode(bytes)? {
        Decoded::F32(v) => LabelVolume::from_volume(&v),
        Decoded::U8 { dims, data, .. } => LabelVolume::new(dims, data),
    }
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&read_bytes(path)?)
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    decode_labels(&read_bytes(path)?)
}

/// Serializes a float volume as single-file little-endian NIfTI-1.
pub fn encode_nifti(volume: &Volume) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_HEADER + 4];
    let put_i16 =
        |h: &mut Vec<u8>, at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 =
        |h: &mut Vec<u8>, at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(NIFTI_HEADER as i32).to_le_bytes());
    let dims: Vec<usize> = volume.dims().iter().rev().copied().collect();
    let spacing: Vec<f64> = volume.spacing().iter().rev().copied().collect();
    let multi = volume.channels() > 1;
    let ndim = if multi { 4 } else { dims.len() };
    put_i16(&mut h, 40, ndim as i16);
    for (i, &d) in dims.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * i, d as i16);
    }
    if multi {
        if dims.len() == 2 {
            put_i16(&mut h, 46, 1);
        }
        put_i16(&mut h, 48, volume.channels() as i16);
    }
    put_i16(&mut h, 70, 16);
    put_i16(&mut h, 72, 32);
    put_f32(&mut h, 76, 1.0);
    for (i, &s) in spacing.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * i, s as f32);
    }
    put_f32(&mut h, 108, (NIFTI_HEADER + 4) as f32);
    put_f32(&mut h, 112, 1.0);
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend(volume.data().iter().flat_map(|v| v.to_le_bytes()));
    h
}
