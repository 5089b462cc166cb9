//! Independent reference implementations and fixtures shared by the
//! integration tests. Every oracle here is written in the most literal way
//! possible and shares no code with the library kernels.

#![allow(dead_code)]

use flim_core::dataset::{CaseData, Dataset};
use flim_core::io::{synth_cases, SynthConfig};
use flim_core::{KernelBank, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_volume(r: &mut ChaCha8Rng, dims: &[usize], channels: usize) -> Volume {
    let n: usize = dims.iter().product::<usize>() * channels;
    Volume::new(
        dims.to_vec(),
        channels,
        (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_bank(
    r: &mut ChaCha8Rng,
    count: usize,
    in_ch: usize,
    extent: &[usize],
    bias: bool,
) -> KernelBank {
    let k: usize = extent.iter().product();
    let w = (0..count * in_ch * k)
        .map(|_| r.random_range(-1.0f32..1.0))
        .collect();
    let b = (0..count)
        .map(|_| {
            if bias {
                r.random_range(-1.0f32..1.0)
            } else {
                0.0
            }
        })
        .collect();
    KernelBank::new(count, in_ch, extent.to_vec(), w, b).unwrap()
}

/// Pads a 2D shape to 3D with a leading unit axis.
pub fn as3(dims: &[usize]) -> [usize; 3] {
    match dims {
        [a, b] => [1, *a, *b],
        [a, b, c] => [*a, *b, *c],
        _ => panic!("2 or 3 axes"),
    }
}

fn at(v: &Volume, c: usize, z: usize, y: usize, x: usize) -> f64 {
    let [_, d1, d2] = as3(v.dims());
    v.channel(c)[(z * d1 + y) * d2 + x] as f64
}

/// Zero-padded same-size cross-correlation written as seven nested loops.
pub fn naive_conv(input: &Volume, bank: &KernelBank) -> Vec<f64> {
    let [d0, d1, d2] = as3(input.dims());
    let [k0, k1, k2] = as3(bank.extent());
    let mut out = Vec::new();
    for f in 0..bank.count() {
        for z in 0..d0 {
            for y in 0..d1 {
                for x in 0..d2 {
                    let mut s = bank.bias()[f] as f64;
                    for c in 0..bank.in_channels() {
                        for a in 0..k0 {
                            for b in 0..k1 {
                                for e in 0..k2 {
                                    let iz = z as isize + a as isize - (k0 / 2) as isize;
                                    let iy = y as isize + b as isize - (k1 / 2) as isize;
                                    let ix = x as isize + e as isize - (k2 / 2) as isize;
                                    if iz < 0
                                        || iy < 0
                                        || ix < 0
                                        || iz >= d0 as isize
                                        || iy >= d1 as isize
                                        || ix >= d2 as isize
                                    {
                                        continue;
                                    }
                                    let w = bank.weights()[((f * bank.in_channels() + c) * k0 * k1
                                        + a * k1
                                        + b)
                                        * k2
                                        + e] as f64;
                                    s += w * at(input, c, iz as usize, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

/// Max over every window, scanning each window explicitly.
pub fn naive_pool(input: &Volume, window: usize, stride: usize) -> (Vec<usize>, Vec<f32>) {
    let nd = input.dims().len();
    let [d0, d1, d2] = as3(input.dims());
    let (w0, s0) = if nd == 3 { (window, stride) } else { (1, 1) };
    let o = |d: usize, w: usize, s: usize| (d - w) / s + 1;
    let (o0, o1, o2) = (o(d0, w0, s0), o(d1, window, stride), o(d2, window, stride));
    let mut out = Vec::new();
    for c in 0..input.channels() {
        for z in 0..o0 {
            for y in 0..o1 {
                for x in 0..o2 {
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..w0 {
                        for b in 0..window {
                            for e in 0..window {
                                m = m.max(at(input, c, z * s0 + a, y * stride + b, x * stride + e));
                            }
                        }
                    }
                    out.push(m as f32);
                }
            }
        }
    }
    let dims = if nd == 3 {
        vec![o0, o1, o2]
    } else {
        vec![o1, o2]
    };
    (dims, out)
}

/// Output voxel reads input voxel `coord / factor`.
pub fn naive_upsample(input: &Volume, factor: usize) -> Vec<f32> {
    let nd = input.dims().len();
    let [d0, d1, d2] = as3(input.dims());
    let f0 = if nd == 3 { factor } else { 1 };
    let mut out = Vec::new();
    for c in 0..input.channels() {
        for z in 0..d0 * f0 {
            for y in 0..d1 * factor {
                for x in 0..d2 * factor {
                    out.push(at(input, c, z / f0, y / factor, x / factor) as f32);
                }
            }
        }
    }
    out
}

/// Between-class variance of the split `x <= t` versus `x > t`, from the
/// raw values.
pub fn between_class_variance(values: &[f32], t: f64) -> f64 {
    let lower: Vec<f64> = values
        .iter()
        .map(|&v| v as f64)
        .filter(|&v| v <= t)
        .collect();
    let upper: Vec<f64> = values
        .iter()
        .map(|&v| v as f64)
        .filter(|&v| v > t)
        .collect();
    if lower.is_empty() || upper.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let m0 = lower.iter().sum::<f64>() / lower.len() as f64;
    let m1 = upper.iter().sum::<f64>() / upper.len() as f64;
    (lower.len() as f64 / n) * (upper.len() as f64 / n) * (m0 - m1).powi(2)
}

/// Exhaustive scan over the 255 inner edges of a 256-bin histogram on
/// `[min, max]`. Returns `(threshold, variance)`; ties keep the lowest edge.
pub fn otsu_oracle(values: &[f32]) -> Option<(f64, f64)> {
    let lo = values
        .iter()
        .map(|&v| v as f64)
        .fold(f64::INFINITY, f64::min);
    let hi = values
        .iter()
        .map(|&v| v as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return None;
    }
    let w = (hi - lo) / 256.0;
    let mut best: Option<(f64, f64)> = None;
    for j in 1..256 {
        let t = lo + j as f64 * w;
        let v = between_class_variance(values, t);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((t, v));
        }
    }
    best
}

/// Minimal k-means objective over every 2-partition of `points`.
pub fn best_two_partition(points: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = points.len();
    let mut best = (f64::INFINITY, vec![]);
    for mask in 1..(1u32 << n) - 1 {
        let mut obj = 0.0;
        for side in [0, 1] {
            let members: Vec<&Vec<f64>> = (0..n)
                .filter(|&i| ((mask >> i) & 1) as usize == side)
                .map(|i| &points[i])
                .collect();
            let dim = points[0].len();
            let mean: Vec<f64> = (0..dim)
                .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
                .collect();
            obj += members
                .iter()
                .map(|p| {
                    p.iter()
                        .zip(&mean)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>();
        }
        if obj < best.0 {
            best = (obj, (0..n).map(|i| ((mask >> i) & 1) as usize).collect());
        }
    }
    best
}

/// Dice from explicit counts.
pub fn dice_oracle(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let total = (a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count()) as f64;
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

/// Central finite difference of `f` at `x[i]`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Relative error with a small absolute floor so vanishing gradients do
/// not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn small_synth(n: usize, dims: &[usize], seed: u64) -> Vec<CaseData> {
    let mut c = SynthConfig::new(n, dims.to_vec(), seed);
    c.val_fraction = 0.0;
    c.test_fraction = 0.25;
    synth_cases(&c).unwrap()
}

pub fn small_dataset(n: usize, dims: &[usize], seed: u64) -> Dataset {
    Dataset::new(small_synth(n, dims, seed)).unwrap()
}

/// Two-level 2D network learned from oracle markers on a 16x16 case.
pub fn tiny_net(seed: u64) -> (flim_core::sunet::SUNet, Vec<CaseData>) {
    use flim_core::flim::{extend_encoder, LayerSpec};
    use flim_core::io::oracle_markers;
    use flim_core::sunet::{assemble, ArchSpec};
    let cases = small_synth(4, &[16, 16], seed);
    let c = &cases[0];
    let (m, _) = oracle_markers(&c.id, c.gt().unwrap(), 6, seed).unwrap();
    let specs = vec![LayerSpec::new(3, 2, 6), LayerSpec::new(3, 2, 6)];
    let ef = extend_encoder(vec![], &[(&c.flair, &m)], &specs, seed).unwrap();
    let et = extend_encoder(vec![], &[(&c.t1gd, &m)], &specs, seed + 1).unwrap();
    let arch = ArchSpec {
        flair: specs.clone(),
        t1gd: specs,
        decoder_widths: vec![8],
        classes: 4,
    };
    (assemble(ef, et, arch, seed).unwrap(), cases)
}

pub fn header_json(bytes: &mut Vec<u8>, json: &str) {
    bytes.extend_from_slice(flim_core::io::NATIVE_MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(json.as_bytes());
}

/// Malformed volume files, each with the error it must produce.
pub fn malformed_volumes() -> Vec<(&'static str, Vec<u8>, fn(&flim_core::Error) -> bool)> {
    use flim_core::Error;
    let native = |json: &str, payload: &[u8]| {
        let mut b = Vec::new();
        header_json(&mut b, json);
        b.extend_from_slice(payload);
        b
    };
    let good_header = r#"{"dims":[2,2],"channels":1,"spacing":[1.0,1.0],"dtype":"f32le"}"#;
    let nan: Vec<u8> = [0.0f32, f32::NAN, 1.0, 2.0]
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let v = Volume::new(vec![2, 3, 4], 1, (0..24).map(|i| i as f32).collect()).unwrap();
    let nifti = flim_core::io::encode_nifti(&v);
    let mut bad_dtype = nifti.clone();
    bad_dtype[70..72].copy_from_slice(&64i16.to_le_bytes());
    let mut bad_size = nifti.clone();
    bad_size[0..4].copy_from_slice(&100i32.to_le_bytes());
    let mut bad_magic = nifti.clone();
    bad_magic[344..348].copy_from_slice(b"ni1\0");
    let truncated_nifti = nifti[..nifti.len() - 10].to_vec();
    let mut bad_ndim = nifti.clone();
    bad_ndim[40..42].copy_from_slice(&0x7fffi16.to_le_bytes());
    let mut v2 = native(good_header, &[0; 16]);
    v2[7] = 2;
    vec![
        ("empty file", vec![], |e| matches!(e, Error::BadMagic(_))),
        ("random text", b"hello, not a volume".to_vec(), |e| {
            matches!(e, Error::BadMagic(_))
        }),
        ("future native version", v2, |e| {
            matches!(e, Error::BadMagic(_))
        }),
        ("truncated preamble", b"FLIMVOL\x01\x05".to_vec(), |e| {
            matches!(e, Error::Header(_))
        }),
        (
            "header length past end",
            {
                let mut b = flim_core::io::NATIVE_MAGIC.to_vec();
                b.extend_from_slice(&1000u32.to_le_bytes());
                b.extend_from_slice(b"{}");
                b
            },
            |e| matches!(e, Error::Header(_)),
        ),
        ("header not json", native("{dims: nope", &[]), |e| {
            matches!(e, Error::Header(_))
        }),
        (
            "unknown header field",
            native(
                r#"{"dims":[2,2],"channels":1,"spacing":[1,1],"dtype":"f32le","x":1}"#,
                &[0; 16],
            ),
            |e| matches!(e, Error::Header(_)),
        ),
        (
            "unsupported native dtype",
            native(
                r#"{"dims":[2,2],"channels":1,"spacing":[1,1],"dtype":"f64le"}"#,
                &[0; 32],
            ),
            |e| matches!(e, Error::Header(_)),
        ),
        (
            "four axes",
            native(
                r#"{"dims":[1,2,2,1],"channels":1,"spacing":[1,1,1,1],"dtype":"f32le"}"#,
                &[0; 16],
            ),
            |e| matches!(e, Error::Header(_)),
        ),
        (
            "zero extent",
            native(
                r#"{"dims":[0,2],"channels":1,"spacing":[1,1],"dtype":"f32le"}"#,
                &[],
            ),
            |e| matches!(e, Error::Header(_)),
        ),
        (
            "spacing length",
            native(
                r#"{"dims":[2,2],"channels":1,"spacing":[1],"dtype":"f32le"}"#,
                &[0; 16],
            ),
            |e| matches!(e, Error::Header(_)),
        ),
        ("short payload", native(good_header, &[0; 15]), |e| {
            matches!(
                e,
                Error::PayloadLength {
                    expected: 16,
                    found: 15
                }
            )
        }),
        ("long payload", native(good_header, &[0; 20]), |e| {
            matches!(
                e,
                Error::PayloadLength {
                    expected: 16,
                    found: 20
                }
            )
        }),
        ("nan payload", native(good_header, &nan), |e| {
            matches!(e, Error::NonFinite(_))
        }),
        ("nifti bad magic", bad_magic, |e| {
            matches!(e, Error::BadMagic(_))
        }),
        ("nifti unsupported dtype", bad_dtype, |e| {
            matches!(e, Error::UnsupportedDtype(_))
        }),
        ("nifti sizeof_hdr", bad_size, |e| {
            matches!(e, Error::Header(_))
        }),
        ("nifti dim[0] out of range", bad_ndim, |e| {
            matches!(e, Error::Header(_))
        }),
        ("nifti truncated payload", truncated_nifti, |e| {
            matches!(e, Error::PayloadLength { .. })
        }),
    ]
}

/// Malformed marker CSV bodies with the 1-based line that must be reported.
pub fn malformed_markers() -> Vec<(&'static str, &'static str, usize)> {
    vec![
        ("wrong header", "case,x,y,z,marker_id,tag\n", 1),
        (
            "marker id zero",
            "case_id,x,y,z,marker_id,tag\nc,1,1,1,0,object\n",
            2,
        ),
        (
            "bad tag",
            "case_id,x,y,z,marker_id,tag\nc,1,1,1,1,object\nc,1,2,1,1,tumour\n",
            3,
        ),
        (
            "negative coordinate",
            "case_id,x,y,z,marker_id,tag\nc,-1,1,1,1,object\n",
            2,
        ),
        (
            "mixed 2d and 3d",
            "case_id,x,y,z,marker_id,tag\nc,1,1,1,1,object\nc,1,1,,1,object\n",
            3,
        ),
        (
            "missing field",
            "case_id,x,y,z,marker_id,tag\nc,1,1,1,1,object\nc,1,1\n",
            3,
        ),
    ]
}

/// Two-level decoder over 8x8 features: bottom 2x2, skips at 4x4 and 8x8.
/// Draws are repeated until every hidden pre-activation sits at least
/// `KINK_MARGIN` from zero, so a finite-difference stencil never crosses a
/// ReLU kink.
pub fn grad_fixture(
    r: &mut ChaCha8Rng,
) -> (
    flim_core::sunet::Decoder<f64>,
    flim_core::train::FeatureSample<f64>,
) {
    loop {
        let (dec, sample) = draw_decoder(r);
        if min_hidden_preactivation(&dec, &sample) >= KINK_MARGIN {
            return (dec, sample);
        }
    }
}

pub const KINK_MARGIN: f64 = 1e-2;

fn draw_decoder(
    r: &mut ChaCha8Rng,
) -> (
    flim_core::sunet::Decoder<f64>,
    flim_core::train::FeatureSample<f64>,
) {
    let (cb, c1, c0, width) = (3, 3, 2, 4);
    let bank = |r: &mut ChaCha8Rng, out: usize, inp: usize| {
        let w = (0..out * inp).map(|_| r.random_range(-1.0..1.0)).collect();
        let b = (0..out).map(|_| r.random_range(-0.3..0.3)).collect();
        KernelBank::<f64>::new(out, inp, vec![1, 1], w, b).unwrap()
    };
    let hidden = bank(r, width, cb + c1);
    let head = bank(r, 4, width + c0);
    let dec = flim_core::sunet::Decoder::new(vec![hidden], head, vec![2, 2]).unwrap();
    let features = flim_core::sunet::EncoderFeatures {
        skips: vec![rand64(r, &[8, 8], c0, 1.0), rand64(r, &[4, 4], c1, 1.0)],
        bottom: rand64(r, &[2, 2], cb, 1.0),
    };
    let gt = rand_labels(r, &[8, 8]);
    (dec, flim_core::train::FeatureSample { features, gt })
}

/// Smallest |pre-activation| of the hidden stage, computed with explicit
/// loops over the 4x4 grid.
fn min_hidden_preactivation(
    dec: &flim_core::sunet::Decoder<f64>,
    s: &flim_core::train::FeatureSample<f64>,
) -> f64 {
    let bank = &dec.hidden()[0];
    let bottom = &s.features.bottom;
    let skip = &s.features.skips[1];
    let mut min = f64::INFINITY;
    for o in 0..bank.count() {
        for y in 0..4 {
            for x in 0..4 {
                let mut z = bank.bias()[o];
                for c in 0..bottom.channels() {
                    z += bank.weights()[o * bank.in_channels() + c]
                        * bottom.channel(c)[(y / 2) * 2 + x / 2];
                }
                for c in 0..skip.channels() {
                    z += bank.weights()[o * bank.in_channels() + bottom.channels() + c]
                        * skip.channel(c)[y * 4 + x];
                }
                min = min.min(z.abs());
            }
        }
    }
    min
}

pub fn rand64(r: &mut ChaCha8Rng, dims: &[usize], ch: usize, scale: f64) -> Volume<f64> {
    let n = dims.iter().product::<usize>() * ch;
    Volume::new(
        dims.to_vec(),
        ch,
        (0..n).map(|_| r.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

pub fn rand_labels(r: &mut ChaCha8Rng, dims: &[usize]) -> flim_core::metrics::LabelVolume {
    let n = dims.iter().product();
    flim_core::metrics::LabelVolume::new(
        dims.to_vec(),
        (0..n).map(|_| r.random_range(0u8..4)).collect(),
    )
    .unwrap()
}
