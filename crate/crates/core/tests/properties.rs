use envinfer::cluster::{kmeans_plus_plus, lloyd, ClusterAssignment};
use envinfer::colored::{correlation_stats, synthesize, SynthesisConfig};
use envinfer::envs::{build_environments, minority_split};
use envinfer::erm::make_spurious_free_subset;
use envinfer::mnist::{parse_idx_images, parse_idx_labels, RawDataset, Split};
use envinfer::persist::{decode_artifact, encode_artifact, ArtifactKind};
use envinfer::rng::RngStream;
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [0x0000_0803u32, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn raw_dataset(n: usize, seed: u64) -> RawDataset {
    let mut rng = RngStream::new(seed, "raw");
    let images = Array3::from_shape_fn((n, 4, 4), |_| rng.uniform());
    let digits = (0..n).map(|_| rng.below(10) as u8).collect();
    RawDataset::new(images, digits, Split::Train).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn idx_images_reject_any_length_change(n in 1usize..5, rows in 1usize..6, cols in 1usize..6, grow in any::<bool>()) {
        let pixels = vec![7u8; n * rows * cols];
        let mut bytes = idx_images(n, rows, cols, &pixels);
        prop_assert!(parse_idx_images(&bytes).is_ok());
        if grow {
            bytes.push(0);
        } else {
            bytes.pop();
        }
        prop_assert!(parse_idx_images(&bytes).is_err());
    }

    #[test]
    fn idx_labels_reject_any_length_change(labels in prop::collection::vec(0u8..10, 1..20), grow in any::<bool>()) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&labels);
        prop_assert_eq!(parse_idx_labels(&bytes).unwrap(), labels);
        if grow {
            bytes.push(1);
        } else {
            bytes.pop();
        }
        prop_assert!(parse_idx_labels(&bytes).is_err());
    }

    #[test]
    fn rng_streams_replay(seed in any::<u64>(), label in "[a-z]{1,8}") {
        let mut a = RngStream::new(seed, &label);
        let mut b = RngStream::new(seed, &label);
        for _ in 0..32 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn synthesis_is_a_function_of_its_config(seed in any::<u64>(), p in 0.0f64..=1.0, n in 1usize..40) {
        let raw = raw_dataset(n, seed);
        let config = SynthesisConfig { color_correlation: p, seed, ..Default::default() };
        let a = synthesize(&raw, &config).unwrap();
        let b = synthesize(&raw, &config).unwrap();
        prop_assert_eq!(&a, &b);
        for i in 0..n {
            let channel = a.color_ids[i] as usize;
            let width = a.side * a.side;
            let off: f64 = a.images.row(i).iter().skip((1 - channel) * width).take(width).sum();
            prop_assert_eq!(off, 0.0);
        }
    }

    #[test]
    fn balanced_environment_contains_the_minority(
        assignment in prop::collection::vec(0usize..4, 8..80),
        seed in any::<u64>(),
    ) {
        let mut rng = RngStream::new(seed, "labels");
        let labels: Vec<u8> = assignment.iter().map(|_| rng.below(2) as u8).collect();
        let clusters = ClusterAssignment {
            centroids: Array2::zeros((4, 1)),
            inertia: 0.0,
            k: 4,
            assignment: assignment.clone(),
        };
        let split = minority_split(&clusters, &labels).unwrap();
        let Ok(pair) = build_environments(&split, seed) else {
            prop_assert_eq!(split.minority_count(), 0);
            return Ok(());
        };
        prop_assert!(pair.minority.iter().all(|i| pair.balanced.binary_search(i).is_ok()));
        prop_assert_eq!(pair.balanced.len(), 2 * pair.minority.len());
        prop_assert!(pair.balanced.windows(2).all(|w| w[0] < w[1]));
        for (i, c) in pair.balanced.iter().zip(&pair.clusters) {
            prop_assert_eq!(assignment[*i], *c);
        }
    }

    #[test]
    fn lloyd_never_increases_inertia(
        points in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 4..40),
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        let n = points.len();
        let data = Array2::from_shape_fn((n, 3), |(i, j)| points[i][j]);
        let init = kmeans_plus_plus(data.view(), k, &mut RngStream::new(seed, "init"));
        let run = lloyd(data.view(), init, 50, 0.0);
        for w in run.trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "trace {:?}", run.trace);
        }
        prop_assert_eq!(*run.trace.last().unwrap(), run.inertia);
    }

    #[test]
    fn spurious_free_subset_is_balanced(n in 40usize..200, p in 0.05f64..0.95, seed in any::<u64>()) {
        let data = synthesize(&raw_dataset(n, seed), &SynthesisConfig { color_correlation: p, seed, ..Default::default() }).unwrap();
        match make_spurious_free_subset(&data, seed) {
            Ok(subset) => {
                let stats = correlation_stats(&data.select(&subset)).unwrap();
                let g = stats.group_counts;
                prop_assert!(g[0][0] == g[0][1] && g[0][1] == g[1][0] && g[1][0] == g[1][1]);
                prop_assert!(subset.windows(2).all(|w| w[0] < w[1]));
            }
            Err(_) => {
                let stats = correlation_stats(&data).unwrap();
                prop_assert!(stats.group_counts.iter().flatten().any(|&c| c == 0));
            }
        }
    }

    #[test]
    fn flipped_bytes_fail_decoding_or_change_the_key(payload in prop::collection::vec(any::<u8>(), 1..64), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode_artifact(ArtifactKind::Checkpoint, &payload, 42);
        let (header, body) = decode_artifact(ArtifactKind::Checkpoint, &bytes).unwrap();
        prop_assert_eq!(header.upstream_hash, 42);
        prop_assert_eq!(body, &payload[..]);
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        match decode_artifact(ArtifactKind::Checkpoint, &bytes) {
            // The upstream key is not part of the checksum; a flip there reads
            // back as a different key, which the cache treats as a miss.
            Ok((header, _)) => prop_assert!((24..32).contains(&i) && header.upstream_hash != 42),
            Err(_) => prop_assert!(!(24..32).contains(&i)),
        }
    }
}
