mod common;

use common::*;
use flim_core::flim::{
    extract_patches, kmeans, learn_layer, marker_stats, normalize, run_encoder, run_layer,
    LayerSample, LayerSpec, MarkerSet, NormParams, Tag,
};
use flim_core::io::oracle_markers;
use flim_core::tensor::conv_same;
use flim_core::{Error, Volume};
use proptest::prelude::*;
use rand::Rng;

fn unit_norm(w: &[f32]) -> f64 {
    w.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn stats_match_flat_list_over_two_images() {
    let mut r = rng(1);
    let a = random_volume(&mut r, &[6, 6], 2);
    let b = random_volume(&mut r, &[6, 6], 2);
    let mut ma = MarkerSet::new("a");
    let mut mb = MarkerSet::new("b");
    for i in 0..5 {
        ma.push(vec![i, 1], 1, Tag::Object);
        mb.push(vec![5 - i, 4], 1, Tag::Background);
    }
    let s = marker_stats(&[
        LayerSample {
            image: &a,
            markers: &ma,
        },
        LayerSample {
            image: &b,
            markers: &mb,
        },
    ])
    .unwrap();
    for c in 0..2 {
        let mut flat = Vec::new();
        for (img, m) in [(&a, &ma), (&b, &mb)] {
            for e in &m.entries {
                flat.push(img.channel(c)[e.coord[0] * 6 + e.coord[1]] as f64);
            }
        }
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        let var = flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / flat.len() as f64;
        assert!((s.mean[c] - mean).abs() < 1e-12);
        assert!((s.stdev[c] - var.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn stats_need_marker_voxels() {
    let v = Volume::<f32>::zeros(vec![3, 3], 1).unwrap();
    let m = MarkerSet::new("a");
    assert!(marker_stats(&[LayerSample {
        image: &v,
        markers: &m
    }])
    .is_err());
}

#[test]
fn center_patch_is_normalized_neighborhood() {
    let mut r = rng(2);
    let v = random_volume(&mut r, &[5, 5, 5], 1);
    let norm = NormParams {
        mean: vec![0.25],
        stdev: vec![2.0],
    };
    let mut m = MarkerSet::new("a");
    m.push(vec![2, 2, 2], 1, Tag::Object);
    m.push(vec![0, 0, 0], 2, Tag::Background);
    let p = extract_patches(&v, &norm, &m, 3).unwrap();
    assert_eq!(p.len(), 2);
    let n = normalize(&v, &norm).unwrap();
    let mut k = 0;
    for z in 1..4 {
        for y in 1..4 {
            for x in 1..4 {
                assert_eq!(p[0].values[k], n.data()[(z * 5 + y) * 5 + x]);
                k += 1;
            }
        }
    }
    // Corner: every position with a coordinate of -1 reads zero.
    assert_eq!(p[1].values.iter().filter(|&&v| v == 0.0).count(), 27 - 8);
}

#[test]
fn kmeans_two_blobs_match_exhaustive_partition() {
    let mut r = rng(3);
    for _ in 0..50 {
        let mut pts = Vec::new();
        for (cx, cy) in [(0.0, 0.0), (10.0, 10.0)] {
            for _ in 0..3 {
                pts.push(vec![
                    cx + r.random_range(-1.0..1.0),
                    cy + r.random_range(-1.0..1.0),
                ]);
            }
        }
        let km = kmeans(&pts, 2, r.random()).unwrap();
        let (best, part) = best_two_partition(&pts);
        assert!((km.objective - best).abs() < 1e-9);
        let same = (0..6).all(|i| (km.assignment[i] == km.assignment[0]) == (part[i] == part[0]));
        assert!(same);
    }
}

#[test]
fn kmeans_k1_is_mean_and_full_k_is_zero() {
    let pts = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]];
    let one = kmeans(&pts, 1, 0).unwrap();
    assert!((one.centroids[0][0] - 3.0).abs() < 1e-12 && (one.centroids[0][1] - 3.0).abs() < 1e-12);
    assert_eq!(kmeans(&pts, 3, 0).unwrap().objective, 0.0);
    let clamped = kmeans(&pts, 5, 0).unwrap();
    assert!(clamped.clamped() && clamped.k == 3);
    assert!(kmeans(&[], 1, 0).is_err());
}

fn blob_image() -> (Volume, MarkerSet) {
    let mut data = vec![0.0f32; 100];
    for y in 3..7 {
        for x in 3..7 {
            data[y * 10 + x] = 1.0;
        }
    }
    let v = Volume::new(vec![10, 10], 1, data).unwrap();
    let mut m = MarkerSet::new("img");
    m.push(vec![4, 4], 1, Tag::Object);
    m.push(vec![5, 5], 1, Tag::Object);
    m.push(vec![0, 9], 2, Tag::Background);
    m.push(vec![9, 0], 2, Tag::Background);
    (v, m)
}

#[test]
fn identical_patches_give_that_patch_normalized() {
    // Interior voxels of a constant block share one patch.
    let (v, _) = blob_image();
    let mut m = MarkerSet::new("img");
    m.push(vec![4, 4], 1, Tag::Object);
    m.push(vec![5, 5], 1, Tag::Object);
    m.push(vec![0, 0], 2, Tag::Background);
    let layer = learn_layer(
        &[LayerSample {
            image: &v,
            markers: &m,
        }],
        &LayerSpec::new(3, 1, 2),
        0,
    )
    .unwrap();
    let norm = &layer.norm;
    let p = extract_patches(&v, norm, &m, 3).unwrap();
    let obj = &p[0].values;
    let n = unit_norm(obj);
    let f = layer.bank.filter(0);
    for (a, b) in f.iter().zip(obj) {
        assert!((*a as f64 - *b as f64 / n).abs() < 1e-6);
    }
}

#[test]
fn two_markers_give_their_normalized_means() {
    let (v, m) = blob_image();
    let layer = learn_layer(
        &[LayerSample {
            image: &v,
            markers: &m,
        }],
        &LayerSpec::new(3, 1, 2),
        0,
    )
    .unwrap();
    assert_eq!(layer.filter_count(), 2);
    let patches = extract_patches(&v, &layer.norm, &m, 3).unwrap();
    for (f, marker) in [(0, 1u32), (1, 2u32)] {
        let group: Vec<&Vec<f32>> = patches
            .iter()
            .filter(|p| p.marker_id == marker)
            .map(|p| &p.values)
            .collect();
        let mean: Vec<f64> = (0..9)
            .map(|i| group.iter().map(|g| g[i] as f64).sum::<f64>() / group.len() as f64)
            .collect();
        let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_eq!(layer.provenance[f].marker_id, marker);
        for (a, b) in layer.bank.filter(f).iter().zip(&mean) {
            assert!((*a as f64 - b / n).abs() < 1e-6);
        }
    }
}

#[test]
fn learning_requires_object_markers() {
    let (v, _) = blob_image();
    let mut m = MarkerSet::new("img");
    m.push(vec![0, 0], 1, Tag::Background);
    let err = learn_layer(
        &[LayerSample {
            image: &v,
            markers: &m,
        }],
        &LayerSpec::new(3, 1, 2),
        0,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NoObjectMarkers));
}

#[test]
fn response_at_source_voxel_is_patch_norm() {
    let cases = small_synth(2, &[16, 16], 4);
    let c = &cases[0];
    let (m, _) = oracle_markers(&c.id, c.gt().unwrap(), 6, 0).unwrap();
    let spec = LayerSpec::new(3, 6, 1000);
    let layer = learn_layer(
        &[LayerSample {
            image: &c.flair,
            markers: &m,
        }],
        &spec,
        0,
    )
    .unwrap();
    // With k equal to the patch count per marker every patch is its own
    // centroid (up to duplicates), so each filter is a normalized patch.
    let patches = extract_patches(&c.flair, &layer.norm, &m, 3).unwrap();
    let normalized = normalize(&c.flair, &layer.norm).unwrap();
    let response = conv_same(&normalized, &layer.bank).unwrap();
    let mut checked = 0;
    for (f, prov) in layer.provenance.iter().enumerate() {
        let filt = layer.bank.filter(f);
        for (p, e) in patches.iter().zip(&m.entries) {
            if p.marker_id != prov.marker_id {
                continue;
            }
            let n = unit_norm(&p.values);
            let aligned = filt
                .iter()
                .zip(&p.values)
                .all(|(a, b)| (*a as f64 - *b as f64 / n).abs() < 1e-6);
            if aligned {
                let at = response.channel(f)[e.coord[0] * 16 + e.coord[1]] as f64;
                assert!((at - n).abs() < 1e-4 * n.max(1.0), "{at} vs {n}");
                // Cauchy-Schwarz: no patch of the same norm responds more.
                for q in &patches {
                    let qn = unit_norm(&q.values);
                    let dot: f64 = filt
                        .iter()
                        .zip(&q.values)
                        .map(|(a, b)| *a as f64 * *b as f64)
                        .sum();
                    assert!(dot * n / qn.max(1e-12) <= n + 1e-4);
                }
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn zero_input_gives_zero_activation() {
    let (v, m) = blob_image();
    let mut layer = learn_layer(
        &[LayerSample {
            image: &v,
            markers: &m,
        }],
        &LayerSpec::new(3, 1, 2),
        0,
    )
    .unwrap();
    layer.norm.mean = vec![0.0];
    let zero = Volume::<f32>::zeros(vec![10, 10], 1).unwrap();
    let (pre, pooled) = run_layer(&zero, &layer).unwrap();
    assert!(pre.data().iter().all(|&x| x == 0.0));
    assert_eq!(pooled.dims(), &[5, 5]);
}

#[test]
fn three_layer_encoder_shapes_on_32_cube() {
    let cases = small_synth(2, &[32, 32, 32], 9);
    let c = &cases[0];
    let (m, _) = oracle_markers(&c.id, c.gt().unwrap(), 5, 0).unwrap();
    let specs = vec![
        LayerSpec::new(3, 2, 8),
        LayerSpec::new(3, 2, 8),
        LayerSpec::new(3, 2, 8),
    ];
    let layers = flim_core::flim::extend_encoder(vec![], &[(&c.flair, &m)], &specs, 1).unwrap();
    let out = run_encoder(&c.flair, &layers).unwrap();
    let dims: Vec<&[usize]> = out.pre_pools.iter().map(|v| v.dims()).collect();
    assert_eq!(dims, vec![&[32, 32, 32][..], &[16, 16, 16], &[8, 8, 8]]);
    assert_eq!(out.pooled.dims(), &[4, 4, 4]);
    // Layer i+1 consumes layer i's pooled output.
    let (_, p1) = run_layer(&c.flair, &layers[0]).unwrap();
    let (pre2, _) = run_layer(&p1, &layers[1]).unwrap();
    assert_eq!(pre2, out.pre_pools[1]);
    let single = run_encoder(&c.flair, &layers[..1]).unwrap();
    assert_eq!(
        single.pre_pools[0],
        run_layer(&c.flair, &layers[0]).unwrap().0
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn learned_filters_are_unit_norm_and_bounded(seed in any::<u64>(), fpm in 1usize..4, total in 2usize..12) {
        let cases = small_synth(2, &[16, 16], seed % 1000);
        let c = &cases[0];
        let (m, _) = oracle_markers(&c.id, c.gt().unwrap(), 8, seed).unwrap();
        let layer = learn_layer(&[LayerSample { image: &c.t1gd, markers: &m }], &LayerSpec::new(3, fpm, total), seed).unwrap();
        prop_assert!(layer.filter_count() <= total);
        prop_assert_eq!(layer.provenance.len(), layer.filter_count());
        for f in 0..layer.filter_count() {
            prop_assert!((unit_norm(layer.bank.filter(f)) - 1.0).abs() <= 1e-5);
            prop_assert!(layer.bank.bias()[f] == 0.0);
        }
    }

    #[test]
    fn kmeans_objective_never_increases(seed in any::<u64>(), n in 2usize..40, k in 1usize..6) {
        let mut r = rng(seed);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
        let km = kmeans(&pts, k, seed).unwrap();
        for w in km.history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        }
        prop_assert!((km.history.last().unwrap() - km.objective).abs() < 1e-9 * km.objective.max(1.0));
    }

    #[test]
    fn learning_is_deterministic_and_order_free(seed in any::<u64>()) {
        let cases = small_synth(3, &[16, 16], seed % 97);
        let marks: Vec<MarkerSet> = cases.iter().map(|c| oracle_markers(&c.id, c.gt().unwrap(), 6, seed).unwrap().0).collect();
        let samples: Vec<LayerSample> = cases.iter().zip(&marks).map(|(c, m)| LayerSample { image: &c.flair, markers: m }).collect();
        let spec = LayerSpec::new(3, 2, 5);
        let a = learn_layer(&samples, &spec, seed).unwrap();
        let b = learn_layer(&samples, &spec, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let mut rev = samples.clone();
        rev.reverse();
        prop_assert_eq!(&a, &learn_layer(&rev, &spec, seed).unwrap());
    }
}
