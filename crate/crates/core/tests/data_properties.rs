use std::collections::{BTreeMap, BTreeSet};

use planseg::data::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn volume_from(values: Vec<f32>, seg: Vec<u8>) -> Volume {
    let n = values.len();
    let other: Vec<f32> = values.iter().map(|v| v * 0.5 + 3.0).collect();
    Volume::new("c", "p", [n, 1, 1], [1.0; 3], vec![values, other], Some(seg)).unwrap()
}

/// Percentile by explicit rank walk: the value at fractional rank `h`
/// interpolates the two neighbouring order statistics.
fn oracle_percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * p / 100.0;
    let below = h.floor();
    let frac = h - below;
    let i = below as usize;
    if i + 1 >= v.len() {
        return v[i];
    }
    (1.0 - frac) * v[i] + frac * v[i + 1]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn stats_match_oracle(values in prop::collection::vec(-500.0f32..500.0, 2..300), mask_seed in any::<u64>()) {
        let n = values.len();
        let mut seg: Vec<u8> = (0..n).map(|i| ((mask_seed >> (i % 64)) & 1) as u8).collect();
        seg[0] = 1;
        let v = volume_from(values.clone(), seg.clone());
        let stats = compute_normalization_stats(&[&v]).unwrap();
        for (c, ch) in v.channels.iter().enumerate() {
            let fg: Vec<f64> = ch.iter().zip(&seg).filter(|(_, &l)| l == 1).map(|(&x, _)| x as f64).collect();
            let lo = oracle_percentile(&fg, 0.5);
            let hi = oracle_percentile(&fg, 99.5);
            let s = stats.channels[c];
            prop_assert!((s.clip_lower - lo).abs() <= 1e-9 * lo.abs().max(1.0));
            prop_assert!((s.clip_upper - hi).abs() <= 1e-9 * hi.abs().max(1.0));
            let mut inside: Vec<f64> = fg.iter().copied().filter(|x| *x >= lo && *x <= hi).collect();
            if inside.is_empty() {
                inside = fg.iter().map(|x| x.max(lo).min(hi)).collect();
            }
            let mean = inside.iter().sum::<f64>() / inside.len() as f64;
            let sd = (inside.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / inside.len() as f64).sqrt().max(1e-8);
            prop_assert!((s.mean - mean).abs() < 1e-6 * mean.abs().max(1.0));
            prop_assert!((s.std - sd).abs() < 1e-6 * sd.max(1.0));

            // elementwise oracle and within-bounds affinity (collinearity of random triples)
            let out = normalize(&v, &stats);
            for (x, y) in ch.iter().zip(&out.channels[c]) {
                let want = ((*x as f64).clamp(s.clip_lower, s.clip_upper) - s.mean) / s.std;
                prop_assert!((*y as f64 - want).abs() <= 1e-4 * want.abs().max(1.0));
            }
            let pts: Vec<(f64, f64)> = ch.iter().zip(&out.channels[c])
                .map(|(&x, &y)| (x as f64, y as f64))
                .filter(|(x, _)| *x > s.clip_lower && *x < s.clip_upper)
                .take(3)
                .collect();
            if pts.len() == 3 && s.std > 1e-3 {
                let (a, b, c3) = (pts[0], pts[1], pts[2]);
                let cross = (b.0 - a.0) * (c3.1 - a.1) - (b.1 - a.1) * (c3.0 - a.0);
                let scale = ((b.0 - a.0).abs() + (c3.0 - a.0).abs()) * ((b.1 - a.1).abs() + (c3.1 - a.1).abs()) + 1e-9;
                prop_assert!(cross.abs() / scale < 1e-4);
            }
        }
    }

    #[test]
    fn stats_depend_only_on_pooled_foreground(a in prop::collection::vec(0.0f32..10.0, 5..50), b in prop::collection::vec(0.0f32..10.0, 5..50)) {
        let first = volume_from(a.clone(), vec![1; a.len()]);
        let second = volume_from(b.clone(), vec![1; b.len()]);
        let unlabeled = volume_from(b.clone(), vec![0; b.len()]);
        let s = compute_normalization_stats(&[&first, &second]).unwrap();
        prop_assert_eq!(&compute_normalization_stats(&[&second, &first]).unwrap(), &s);
        prop_assert_eq!(&compute_normalization_stats(&[&first, &unlabeled, &second]).unwrap(), &s);
    }

    #[test]
    fn folds_partition_patients(counts in prop::collection::vec(1usize..4, 5..40), k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(counts.len() >= k);
        let cases: Vec<(String, String)> = counts.iter().enumerate()
            .flat_map(|(p, &c)| (0..c).map(move |i| (format!("p{p}c{i}"), format!("p{p}"))))
            .collect();
        let a = assign_folds_by_patient(cases.iter().map(|(c, p)| (c.as_str(), p.as_str())), k, seed).unwrap();
        prop_assert_eq!(a.fold_of_case.len(), cases.len());
        let mut fold_of_patient = BTreeMap::new();
        for (c, p) in &cases {
            let f = a.fold_of_case[c];
            prop_assert!(f < k);
            prop_assert_eq!(*fold_of_patient.entry(p.clone()).or_insert(f), f);
        }
        let mut sizes = vec![0usize; k];
        for f in fold_of_patient.values() {
            sizes[*f] += 1;
        }
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut seen = BTreeSet::new();
        for f in 0..k {
            for c in a.validation_cases(f) {
                prop_assert!(seen.insert(c.to_string()));
            }
        }
        prop_assert_eq!(seen.len(), cases.len());
    }

    #[test]
    fn forced_patches_contain_foreground(seed in any::<u64>(), fg in prop::collection::vec(0usize..(20 * 14 * 9), 1..4), px in 4usize..24, py in 4usize..16, pz in 4usize..12) {
        let dims = [20, 14, 9];
        let n = dims.iter().product();
        let mut seg = vec![0u8; n];
        for &i in &fg {
            seg[i] = 1;
        }
        let v = Volume::new("c", "p", dims, [1.0; 3], vec![vec![1.0; n], vec![2.0; n]], Some(seg)).unwrap();
        let s = PatchSampler::new(&v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let p = s.sample([px, py, pz], true, &mut rng);
            prop_assert!(p.labels.contains(&1));
        }
    }
}

/// 10,000 uniform draws of a 32^3 patch corner in a 64^3 volume (33 positions
/// per axis, 35,937 joint cells). Per-axis marginals must stay within 5 sigma
/// of the binomial expectation, and a 3x3x3 coarse-grained joint histogram
/// must pass a chi-square bound at 5 sigma.
#[test]
fn uniform_corners_are_uniform() {
    let dims = [64, 64, 64];
    let n: usize = dims.iter().product();
    let v = Volume::new(
        "c",
        "p",
        dims,
        [1.0; 3],
        vec![vec![0.0; n], vec![0.0; n]],
        Some(vec![0; n]),
    )
    .unwrap();
    let s = PatchSampler::new(&v);
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let draws = 10_000usize;
    let mut marg = [[0usize; 33]; 3];
    let mut coarse = [0usize; 27];
    for _ in 0..draws {
        let c = s.sample_corner([32; 3], false, &mut rng);
        for a in 0..3 {
            assert!(c[a] <= 32);
            marg[a][c[a]] += 1;
        }
        coarse[(c[0] / 11) + 3 * (c[1] / 11) + 9 * (c[2] / 11)] += 1;
    }
    let p = 1.0 / 33.0;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for m in &marg {
        for &count in m {
            assert!((count as f64 - mean).abs() < 5.0 * sd, "{count} vs {mean}");
        }
    }
    let e = draws as f64 / 27.0;
    let chi2: f64 = coarse.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
    // 26 degrees of freedom: mean 26, sd sqrt(52)
    assert!(chi2 < 26.0 + 5.0 * 52f64.sqrt(), "chi2 {chi2}");
}

#[test]
fn synthetic_dataset_round_trips_through_disk() {
    let spec = SyntheticSpec {
        num_patients: 3,
        cases_per_patient: CasesPerPatient::Total(4),
        shape: [32, 32, 32],
        spacing: [1.0, 1.0, 2.0],
        lesion_count: (1, 2),
        seed: 77,
    };
    let vols = generate_synthetic_dataset(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &vols).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), vols);
    let index = read_index(dir.path()).unwrap();
    assert_eq!(index.patients.len(), 3);
}
