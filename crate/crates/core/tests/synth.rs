use std::collections::BTreeSet;

use cscl_core::metrics::{boundary_mask, region_histogram, HistogramRegion};
use cscl_core::synth::{generate_scene, read_dataset, write_dataset, SceneConfig, SyntheticScene};

fn scene(seed: u64, parcels: usize) -> SyntheticScene {
    let cfg = SceneConfig {
        num_parcels: parcels,
        seed,
        ..Default::default()
    };
    generate_scene(&cfg, seed as usize).unwrap()
}

#[test]
fn boundary_fraction_grows_with_parcel_count() {
    let counts = [2, 5, 10, 20, 40];
    let mut frac = vec![0.0; counts.len()];
    for seed in 0..50 {
        for (k, &n) in counts.iter().enumerate() {
            let b = boundary_mask(&scene(seed, n).labels);
            frac[k] += b.data().iter().filter(|&&v| v).count() as f64 / b.len() as f64;
        }
    }
    assert!(frac.windows(2).all(|w| w[0] < w[1]), "{frac:?}");
}

/// Summed per-channel variance of the selected pixels.
fn variance(s: &SyntheticScene, pixels: &[usize]) -> f64 {
    let ch = s.image.shape()[2];
    let n = pixels.len() as f64;
    (0..ch)
        .map(|c| {
            let v: Vec<f64> = pixels.iter().map(|&p| s.image.data()[p * ch + c] as f64).collect();
            let mean = v.iter().sum::<f64>() / n;
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
        })
        .sum()
}

#[test]
fn parcel_interiors_are_more_homogeneous() {
    let (mut eligible, mut quieter) = (0, 0);
    for seed in 0..50 {
        let s = scene(seed, 20);
        let boundary = boundary_mask(&s.labels);
        let ids: BTreeSet<i32> = s.parcel_ids.data().iter().copied().collect();
        for id in ids {
            let whole: Vec<usize> = (0..s.parcel_ids.len())
                .filter(|&p| s.parcel_ids.data()[p] == id && s.labels.classes.data()[p] >= 0)
                .collect();
            let interior: Vec<usize> = whole.iter().copied().filter(|&p| !boundary.data()[p]).collect();
            if interior.len() < 25 {
                continue;
            }
            let hist = region_histogram(&s.image, &s.parcel_ids, &s.labels, id, HistogramRegion::Interior).unwrap();
            assert!(hist.iter().all(|h| h.iter().sum::<u64>() as usize <= interior.len()));
            eligible += 1;
            if variance(&s, &interior) < variance(&s, &whole) {
                quieter += 1;
            }
        }
    }
    assert!(eligible > 0);
    assert!(quieter as f64 >= 0.9 * eligible as f64, "{quieter}/{eligible}");
}

#[test]
fn default_scene_has_every_parcel() {
    let s = generate_scene(&SceneConfig::default(), 0).unwrap();
    let ids: BTreeSet<i32> = s.parcel_ids.data().iter().copied().collect();
    assert_eq!(ids.len(), 20);
    assert_eq!(s.image.shape(), &[64, 64, 4]);
    assert_eq!(s.labels_sr.height(), 256);
}

#[test]
fn ten_scene_dataset_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let scenes: Vec<_> = (0..10).map(|k| scene(100 + k, 20)).collect();
    write_dataset(&scenes, dir.path()).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), scenes);
}
