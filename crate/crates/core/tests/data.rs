mod common;

use common::rng;
use dgcnet::hsi::{
    largest_remainder, load_cube, save_cube, stratified_split, synth_cube, synth_cube_with_signatures, BandStats,
    HsiCube, PatchExtractor, SplitRatio, SplitSpec,
};
use dgcnet::{compute_metrics, Error, Metrics};
use proptest::prelude::*;
use rand::Rng;

fn arb_cube() -> impl Strategy<Value = HsiCube> {
    (1usize..6, 1usize..6, 1usize..5, 1usize..5, any::<bool>()).prop_flat_map(|(rows, cols, bands, classes, named)| {
        let n = rows * cols;
        (
            prop::collection::vec(-1e6f32..1e6, n * bands),
            prop::collection::vec(0..=classes as u16, n),
        )
            .prop_map(move |(values, labels)| {
                let names = named.then(|| (0..classes).map(|k| format!("class {k}")).collect());
                HsiCube::new(rows, cols, bands, classes, values, labels, names).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cube_round_trips_bitwise(cube in arb_cube()) {
        let bytes = cube.to_bytes();
        let back = HsiCube::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(&back, &cube);
    }

    #[test]
    fn any_flipped_byte_is_rejected(cube in arb_cube(), at: prop::sample::Index, bit in 0u8..8) {
        let mut bytes = cube.to_bytes();
        let i = at.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(HsiCube::from_bytes(&bytes).is_err());
    }

    #[test]
    fn largest_remainder_sums_and_stays_close(n in 0usize..500, w in prop::collection::vec(1u32..10, 1..5)) {
        let parts = largest_remainder(n, &w);
        prop_assert_eq!(parts.iter().sum::<usize>(), n);
        let total: u32 = w.iter().sum();
        for (p, wi) in parts.iter().zip(&w) {
            let exact = n as f64 * *wi as f64 / total as f64;
            prop_assert!((*p as f64 - exact).abs() < 1.0);
        }
    }
}

#[test]
fn cube_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cube = synth_cube(3, 12, 10, 6, 3, 0.1).unwrap();
    let path = dir.path().join("cube.hsic");
    save_cube(&cube, &path).unwrap();
    assert_eq!(load_cube(&path).unwrap(), cube);
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last / 2] ^= 0x10;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_cube(&path), Err(Error::Checksum { .. })));
}

#[test]
fn synthetic_classes_are_separable_by_nearest_centroid() {
    let cube = synth_cube(11, 40, 40, 24, 3, 0.05).unwrap();
    let hist = cube.class_histogram();
    assert!(cube.labels.contains(&0), "border pixels are unlabeled");
    assert_eq!(hist.len(), 3);
    assert!(hist.iter().all(|&h| h >= 30), "{hist:?}");

    let split = stratified_split(&cube.labels, &SplitSpec { ratio: "6:1:3".parse().unwrap(), seed: 1 }).unwrap();
    let b = cube.bands;
    let spectrum = |p: usize| &cube.values[p * b..(p + 1) * b];
    let mut centroids = vec![vec![0.0f64; b]; 3];
    let mut counts = [0usize; 3];
    for &p in &split.train {
        let k = cube.labels[p] as usize - 1;
        counts[k] += 1;
        for (c, v) in centroids[k].iter_mut().zip(spectrum(p)) {
            *c += *v as f64;
        }
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = split
        .test
        .iter()
        .filter(|&&p| {
            let d = |k: usize| -> f64 { centroids[k].iter().zip(spectrum(p)).map(|(c, v)| (c - *v as f64).powi(2)).sum() };
            let best = (0..3).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap();
            best + 1 == cube.labels[p] as usize
        })
        .count();
    let oa = correct as f64 / split.test.len() as f64;
    assert!(oa > 0.95, "nearest-centroid OA {oa}");
}

#[test]
fn synthesis_is_seeded() {
    let a = synth_cube_with_signatures(4, 20, 20, 8, 3, 0.05).unwrap();
    let b = synth_cube_with_signatures(4, 20, 20, 8, 3, 0.05).unwrap();
    assert_eq!(a.cube, b.cube);
    assert_eq!(a.signatures.len(), 3);
    assert_ne!(synth_cube(5, 20, 20, 8, 3, 0.05).unwrap(), a.cube);
    assert!(synth_cube(1, 20, 20, 8, 1, 0.05).is_err());
    assert!(synth_cube(1, 3, 3, 8, 3, 0.05).is_err());
    assert!(synth_cube(1, 20, 20, 8, 3, -1.0).is_err());
}

#[test]
fn patches_invert_to_the_raw_spectra() {
    let cube = synth_cube(6, 9, 7, 5, 2, 0.1).unwrap();
    let pixels = cube.labeled_pixels();
    let stats = BandStats::from_pixels(&cube, &pixels).unwrap();
    // population statistics, computed directly
    for k in 0..cube.bands {
        let vals: Vec<f64> = pixels.iter().map(|&p| cube.values[p * cube.bands + k] as f64).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((stats.mean[k] - m).abs() < 1e-9 && (stats.std[k] - s).abs() < 1e-9);
    }
    let ex = PatchExtractor::new(&cube, 5, &stats).unwrap();
    assert_eq!(ex.padded_extent(), (13, 11));
    for &p in &pixels {
        let (i, j) = (p / cube.cols, p % cube.cols);
        let s = ex.extract(i, j).unwrap();
        assert_eq!(s.label, cube.labels[p] as usize - 1);
        let patch = &s.patch;
        for di in 0..5 {
            for dj in 0..5 {
                let (r, c) = (i as isize + di as isize - 2, j as isize + dj as isize - 2);
                let inside = r >= 0 && c >= 0 && (r as usize) < cube.rows && (c as usize) < cube.cols;
                for k in 0..cube.bands {
                    let v = patch.get(0, 0, k, di, dj);
                    if inside {
                        let raw = cube.spectrum(r as usize, c as usize)[k] as f64;
                        assert!((v * stats.std[k] + stats.mean[k] - raw).abs() < 1e-4);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }
    assert!(PatchExtractor::new(&cube, 4, &stats).is_err());
    let unlabeled = (0..cube.labels.len()).find(|&p| cube.labels[p] == 0).unwrap();
    assert!(ex.extract_pixel(unlabeled).is_err());
}

#[test]
fn stratified_splits_partition_each_class_proportionally() {
    let cube = synth_cube(8, 30, 30, 4, 5, 0.1).unwrap();
    let labeled = cube.labeled_pixels();
    for ratio in ["2:1:7", "3:1:6", "4:1:5", "5:1:4", "6:1:3"] {
        let ratio: SplitRatio = ratio.parse().unwrap();
        let split = stratified_split(&cube.labels, &SplitSpec { ratio, seed: 9 }).unwrap();
        let mut all: Vec<usize> = [&split.train, &split.val, &split.test].into_iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, labeled, "{ratio:?}: not a partition");
        let parts = ratio.parts();
        let total: u32 = parts.iter().sum();
        for k in 1..=cube.classes as u16 {
            let n = labeled.iter().filter(|&&p| cube.labels[p] == k).count();
            for (set, w) in [&split.train, &split.val, &split.test].into_iter().zip(parts) {
                let got = set.iter().filter(|&&p| cube.labels[p] == k).count();
                let exact = n as f64 * w as f64 / total as f64;
                assert!((got as f64 - exact).abs() <= 1.0, "{ratio:?} class {k}: {got} vs {exact}");
            }
        }
        let again = stratified_split(&cube.labels, &SplitSpec { ratio, seed: 9 }).unwrap();
        assert_eq!(again, split);
        let other = stratified_split(&cube.labels, &SplitSpec { ratio, seed: 10 }).unwrap();
        assert_ne!(other.train, split.train);
    }
}

#[test]
fn split_rejects_bad_ratios_and_tiny_classes() {
    for bad in ["6:1", "0:1:9", "a:b:c", "1:1:1:1"] {
        assert!(bad.parse::<SplitRatio>().is_err(), "{bad}");
    }
    let labels = [1u16, 1, 1, 2, 2, 0];
    let err = stratified_split(&labels, &SplitSpec { ratio: "6:1:3".parse().unwrap(), seed: 0 }).unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
}

/// Direct formulas over the label lists, without a confusion matrix.
fn oracle(truth: &[usize], pred: &[usize], k: usize) -> (f64, f64, f64) {
    let n = truth.len() as f64;
    let oa = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / n;
    let mut recalls = Vec::new();
    let mut pe = 0.0;
    for c in 0..k {
        let in_truth = truth.iter().filter(|&&t| t == c).count();
        let in_pred = pred.iter().filter(|&&p| p == c).count();
        if in_truth > 0 {
            let hit = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p == c).count();
            recalls.push(hit as f64 / in_truth as f64);
        }
        pe += in_truth as f64 * in_pred as f64 / (n * n);
    }
    let aa = recalls.iter().sum::<f64>() / recalls.len() as f64;
    (oa, aa, (oa - pe) / (1.0 - pe))
}

#[test]
fn metrics_match_direct_formulas() {
    let mut r = rng(12);
    for _ in 0..100 {
        let k = r.random_range(2..8);
        let n = r.random_range(20..400);
        let skill = r.random_range(0.0..1.0);
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if r.random_bool(skill) { t } else { r.random_range(0..k) })
            .collect();
        let m = compute_metrics(&truth, &pred, k).unwrap();
        let (oa, aa, kappa) = oracle(&truth, &pred, k);
        assert!((m.overall_accuracy - oa).abs() < 1e-12);
        assert!((m.average_accuracy - aa).abs() < 1e-12);
        assert!((m.kappa - kappa).abs() < 1e-12);
        assert_eq!(m.total(), n as u64);
        assert_eq!(Metrics::from_confusion(k, m.confusion.clone()).unwrap(), m);
    }
}

#[test]
fn chance_predictions_have_zero_kappa() {
    let mut r = rng(13);
    let truth: Vec<usize> = (0..10_000).map(|_| r.random_range(0..4)).collect();
    let pred: Vec<usize> = (0..10_000).map(|_| r.random_range(0..4)).collect();
    let m = compute_metrics(&truth, &pred, 4).unwrap();
    assert!(m.kappa.abs() < 0.02, "{}", m.kappa);
    let perfect = compute_metrics(&truth, &truth, 4).unwrap();
    assert_eq!((perfect.overall_accuracy, perfect.kappa), (1.0, 1.0));
}

#[test]
fn absent_classes_are_left_out_of_the_average() {
    let m = compute_metrics(&[0, 0, 2, 2], &[0, 1, 2, 2], 3).unwrap();
    assert_eq!(m.absent_classes, vec![1]);
    assert_eq!(m.per_class_accuracy, vec![Some(0.5), None, Some(1.0)]);
    assert_eq!(m.average_accuracy, 0.75);
    assert!(compute_metrics(&[0, 3], &[0, 0], 3).is_err());
    assert!(compute_metrics(&[0], &[0, 0], 3).is_err());
    assert!(compute_metrics(&[], &[], 3).is_err());
}
