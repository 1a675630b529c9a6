mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use region_vlad::codebook::train_codebook_rows;
use region_vlad::matcher::{row_cosine, ScanTiming};
use region_vlad::tensor_io::{decode_npy, encode_npy, GroundTruth, ManifestEntry, Traverse};
use region_vlad::*;

use common::*;

fn tensor_strategy(max_k: usize, max_side: usize, levels: u32) -> impl Strategy<Value = FeatureTensor> {
    (1..=max_k, 1..=max_side, 1..=max_side).prop_flat_map(move |(k, h, w)| {
        proptest::collection::vec(0..levels, k * h * w)
            .prop_map(move |v| FeatureTensor::new("t", k, h, w, v.into_iter().map(|x| x as f32).collect()).unwrap())
    })
}

fn config_strategy() -> impl Strategy<Value = RegionConfig> {
    (
        1usize..20,
        prop_oneof![Just(Neighbourhood::Four), Just(Neighbourhood::Eight)],
        prop_oneof![Just(0.05), Just(0.34), Just(0.5), Just(1.0)],
    )
        .prop_map(|(top_n, neighbourhood, similarity_tau)| RegionConfig {
            top_n,
            neighbourhood,
            similarity_tau,
            ..RegionConfig::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn npy_roundtrip_is_bitwise(k in 1usize..5, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..k * h * w)
            .map(|_| loop {
                let v = f32::from_bits(rng.random());
                if v.is_finite() { break v; }
            })
            .collect();
        let t = FeatureTensor::new("r", k, h, w, data).unwrap();
        let back = decode_npy(&encode_npy(&t), "r").unwrap();
        let bits = |t: &FeatureTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn labelling_matches_flood_fill(t in tensor_strategy(4, 8, 4), cfg in config_strategy()) {
        let rs = extract_regions(&t, &cfg).unwrap();
        prop_assert_eq!(partition_of(&rs), flood_fill_partition(&t, &cfg));
    }

    #[test]
    fn regions_are_tight_and_energies_exact(t in tensor_strategy(3, 8, 4), cfg in config_strategy()) {
        let rs = extract_regions(&t, &cfg).unwrap();
        for r in &rs.regions {
            let rows = r.pixels.iter().map(|p| p.0);
            let cols = r.pixels.iter().map(|p| p.1);
            prop_assert_eq!(r.bbox.row_min, rows.clone().min().unwrap());
            prop_assert_eq!(r.bbox.row_max, rows.max().unwrap());
            prop_assert_eq!(r.bbox.col_min, cols.clone().min().unwrap());
            prop_assert_eq!(r.bbox.col_max, cols.max().unwrap());
            let sum: f64 = r.pixels.iter().map(|&(i, j)| f64::from(t.at(r.channel, i, j))).sum();
            prop_assert_eq!(r.mean_energy, sum / r.pixels.len() as f64);
        }
    }

    #[test]
    fn selection_takes_the_top_energies(t in tensor_strategy(4, 8, 5), cfg in config_strategy()) {
        let rs = extract_regions(&t, &cfg).unwrap();
        let h = rs.regions.len();
        prop_assert_eq!(rs.selected.len(), cfg.top_n.min(h));
        let chosen: Vec<f64> = rs.selected_regions().map(|r| r.mean_energy).collect();
        prop_assert!(chosen.windows(2).all(|w| w[0] >= w[1]));
        let mut all: Vec<f64> = rs.regions.iter().map(|r| r.mean_energy).collect();
        all.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assert_eq!(chosen, all[..rs.selected.len()].to_vec());
    }

    #[test]
    fn channel_relabelling_permutes_regions(t in tensor_strategy(4, 6, 4), cfg in config_strategy(), rot in 0usize..4) {
        let (k, h, w) = t.shape();
        let plane = h * w;
        let mut data = Vec::with_capacity(t.data().len());
        for ch in 0..k {
            data.extend_from_slice(t.channel((ch + rot) % k));
        }
        let permuted = FeatureTensor::new("t", k, h, w, data).unwrap();
        let summary = |rs: &RegionSet| {
            let mut v: Vec<(u64, usize)> = rs.regions.iter().map(|r| (r.mean_energy.to_bits(), r.pixels.len())).collect();
            v.sort();
            v
        };
        let a = extract_regions(&t, &cfg).unwrap();
        let b = extract_regions(&permuted, &cfg).unwrap();
        prop_assert_eq!(summary(&a), summary(&b));
        prop_assert!(plane > 0);
    }

    #[test]
    fn scaling_scales_energies_and_keeps_selection(
        t in tensor_strategy(4, 8, 6),
        cfg in config_strategy(),
        c in prop_oneof![Just(0.25f32), Just(0.5), Just(2.0), Just(8.0)],
    ) {
        let (k, h, w) = t.shape();
        let scaled = FeatureTensor::new("t", k, h, w, t.data().iter().map(|v| v * c).collect()).unwrap();
        let a = extract_regions(&t, &cfg).unwrap();
        let b = extract_regions(&scaled, &cfg).unwrap();
        prop_assert_eq!(&a.selected, &b.selected);
        for (x, y) in a.regions.iter().zip(&b.regions) {
            prop_assert_eq!(x.mean_energy * f64::from(c), y.mean_energy);
        }
    }

    #[test]
    fn aggregation_is_linear(
        a in tensor_strategy(3, 6, 50),
        seed in any::<u64>(),
        cfg in config_strategy(),
    ) {
        let (k, h, w) = a.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b_data: Vec<f32> = (0..k * h * w).map(|_| rng.random_range(0..50) as f32).collect();
        let b = FeatureTensor::new("t", k, h, w, b_data).unwrap();
        let sum = FeatureTensor::new("t", k, h, w, a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
        let rs = extract_regions(&a, &cfg).unwrap();
        let fa = aggregate_regions(&a, &rs).unwrap();
        let fb = aggregate_regions(&b, &rs).unwrap();
        let fs = aggregate_regions(&sum, &rs).unwrap();
        for ((x, y), s) in fa.as_slice().iter().zip(fb.as_slice()).zip(fs.as_slice()) {
            prop_assert_eq!(x + y, *s);
        }
    }
}

fn random_rows(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<f64> {
    (0..n * dim).map(|_| rng.random_range(-5.0..5.0)).collect()
}

#[test]
fn kmeans_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows = random_rows(&mut rng, 1000, 8);
    let cfg = KMeansConfig { seed: 99, ..KMeansConfig::with_clusters(64) };
    let a = train_codebook_rows(&rows, 8, &cfg).unwrap();
    let b = train_codebook_rows(&rows, 8, &cfg).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(a.meta, b.meta);
}

#[test]
fn kmeans_partition_is_consistent_at_convergence() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // well separated blobs so the run fully converges
        let mut rows = Vec::new();
        for c in 0..5 {
            for _ in 0..40 {
                rows.push(c as f64 * 100.0 + rng.random_range(-1.0..1.0));
                rows.push(rng.random_range(-1.0..1.0));
            }
        }
        let cfg = KMeansConfig { seed, tol: 0.0, ..KMeansConfig::with_clusters(5) };
        let cb = train_codebook_rows(&rows, 2, &cfg).unwrap();
        let mut sums = vec![[0.0f64; 2]; 5];
        let mut counts = vec![0usize; 5];
        for r in rows.chunks(2) {
            let (u, _) = cb.nearest(r);
            sums[u][0] += r[0];
            sums[u][1] += r[1];
            counts[u] += 1;
        }
        for u in 0..5 {
            assert!(counts[u] > 0);
            for d in 0..2 {
                let mean = sums[u][d] / counts[u] as f64;
                let c = f64::from(cb.centroid(u)[d]);
                assert!((mean - c).abs() <= 1e-6 * mean.abs().max(1.0), "seed {seed}: {mean} vs {c}");
            }
        }
    }
}

#[test]
fn quantizing_centroids_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = random_rows(&mut rng, 300, 6);
    let cb = train_codebook_rows(&rows, 6, &KMeansConfig::with_clusters(32)).unwrap();
    let as_features: Vec<Vec<f64>> = (0..32)
        .map(|u| cb.centroid(u).iter().map(|&v| f64::from(v)).collect())
        .collect();
    let f = RegionalFeatures::from_rows("c", &as_features).unwrap();
    assert_eq!(quantize(&f, &cb).unwrap().0, (0..32).collect::<Vec<_>>());
}

#[test]
fn quantize_matches_brute_force_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let centroid_rows = random_rows(&mut rng, 128, 16);
    let cb = region_vlad::codebook::Codebook::from_centroids(
        128,
        16,
        centroid_rows.iter().map(|&v| v as f32).collect(),
        region_vlad::codebook::TrainMeta {
            seed: 0,
            iterations_run: 0,
            final_inertia: 0.0,
            inertia_history: vec![],
            training_rows: 0,
        },
    )
    .unwrap();
    let centroids: Vec<Vec<f64>> = (0..128).map(|u| cb.centroid(u).iter().map(|&v| f64::from(v)).collect()).collect();
    let rows: Vec<Vec<f64>> = (0..200).map(|_| random_rows(&mut rng, 1, 16)).collect();
    let f = RegionalFeatures::from_rows("q", &rows).unwrap();
    let labels = quantize(&f, &cb).unwrap();
    for (row, &l) in rows.iter().zip(labels.iter()) {
        assert_eq!(l, nearest_brute(row, &centroids));
    }
}

#[test]
fn vlad_is_invariant_to_feature_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let rows = random_rows(&mut rng, 200, 4);
    let cb = train_codebook_rows(&rows, 4, &KMeansConfig::with_clusters(8)).unwrap();
    let feats: Vec<Vec<f64>> = rows.chunks(4).take(30).map(|r| r.to_vec()).collect();
    let mut shuffled = feats.clone();
    shuffled.reverse();
    shuffled.swap(3, 17);
    let enc = |rows: &[Vec<f64>]| {
        let f = RegionalFeatures::from_rows("x", rows).unwrap();
        let l = quantize(&f, &cb).unwrap();
        (encode_vlad(&f, &l, &cb, &VladConfig::default()).unwrap(), l)
    };
    let (a, la) = enc(&feats);
    let (b, _) = enc(&shuffled);
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((x - y).abs() < 1e-12);
    }
    let used: std::collections::BTreeSet<usize> = la.iter().copied().collect();
    assert_eq!(a.clusters() - a.nonzero_rows(), 8 - used.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cosine_ignores_positive_row_scaling(
        a in proptest::collection::vec(-3.0f64..3.0, 5),
        b in proptest::collection::vec(-3.0f64..3.0, 5),
        c in 0.01f64..100.0,
    ) {
        let scaled: Vec<f64> = b.iter().map(|v| v * c).collect();
        prop_assert!((row_cosine(&a, &b) - row_cosine(&a, &scaled)).abs() < 1e-12);
    }

    #[test]
    fn recall_never_drops_along_the_sweep(
        outcomes in proptest::collection::vec((0u8..20, any::<bool>()), 1..40),
    ) {
        let n = outcomes.len();
        let entries = |t, p: &str, count: usize| (0..count).map(|i| ManifestEntry {
            image_id: format!("{p}{i}"),
            tensor_path: Default::default(),
            frame: None,
            traverse: t,
        }).collect::<Vec<_>>();
        let manifest = DatasetManifest::new(
            "p",
            entries(Traverse::Query, "q", n),
            entries(Traverse::Reference, "r", n + 1),
            GroundTruth::Pairs((0..n).map(|i| (i, i)).collect()),
        ).unwrap();
        let results: Vec<MatchResult> = outcomes.iter().enumerate().map(|(i, &(s, ok))| {
            let best_index = if ok { i } else { i + 1 };
            MatchResult {
                query_id: format!("q{i}"),
                scores: vec![(best_index, f64::from(s))],
                best_index,
                best_id: format!("r{best_index}"),
                best_score: f64::from(s),
                timing: ScanTiming::default(),
            }
        }).collect();
        let curve = pr_curve(&results, &manifest).unwrap();
        prop_assert!(curve.points.windows(2).all(|w| w[0].threshold > w[1].threshold));
        prop_assert!(curve.points.windows(2).all(|w| w[0].recall <= w[1].recall));
        prop_assert!(curve.points.iter().all(|p| (0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall)));
        prop_assert!((0.0..=1.0).contains(&curve.auc));

        // every query duplicated: same counts ratio, same curve
        let doubled_manifest = DatasetManifest::new(
            "p2",
            entries(Traverse::Query, "q", 2 * n),
            entries(Traverse::Reference, "r", 2 * n + 1),
            GroundTruth::Pairs((0..2 * n).map(|i| (i, i)).collect()),
        ).unwrap();
        let doubled: Vec<MatchResult> = results.iter().cloned().chain(results.iter().enumerate().map(|(i, r)| {
            let j = i + n;
            let best_index = if r.best_index == i { j } else { j + 1 };
            MatchResult { query_id: format!("q{j}"), best_index, best_id: format!("r{best_index}"), ..r.clone() }
        })).collect();
        let c2 = pr_curve(&doubled, &doubled_manifest).unwrap();
        prop_assert!((c2.auc - curve.auc).abs() < 1e-12);
    }
}
