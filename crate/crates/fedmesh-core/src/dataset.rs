//! Data ingestion and partitioning: IDX file parsing for MNIST-family
//! datasets, a synthetic Gaussian-cluster generator for desk-scale runs,
//! IID sharding, and train/test splitting.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::scenario::{DataSource, SyntheticSpec};

/// A labeled dataset. Features are row-major `n_samples x n_features`,
/// every value in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub n_features: usize,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self, DatasetError> {
        if n_features == 0 {
            return Err(DatasetError::Shape("n_features must be >= 1".into()));
        }
        if features.len() != labels.len() * n_features {
            return Err(DatasetError::Shape(format!(
                "feature count {} != {} samples x {} features",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DatasetError::Shape(format!(
                "label {bad} >= n_classes {n_classes}"
            )));
        }
        Ok(Dataset {
            features,
            n_features,
            labels,
            n_classes,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Materializes the subset selected by `indices`.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            n_features: self.n_features,
            labels,
            n_classes: self.n_classes,
        }
    }

    /// Sample count per class.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.n_classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }
}

/// Per-node shard assignment over training-sample indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("idx format error: {0}")]
    Format(String),
    #[error("idx truncation: {0}")]
    Truncated(String),
    #[error("dataset shape error: {0}")]
    Shape(String),
    #[error("empty dataset")]
    Empty,
    #[error("partition requires 1 <= n_nodes <= n_train, got n_train={n_train} n_nodes={n_nodes}")]
    BadPartition { n_train: usize, n_nodes: usize },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Decoded content of one IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// Label vector (type code 0x08, 1 dimension).
    Labels(Vec<u8>),
    /// Image tensor flattened per sample and scaled by 1/255
    /// (type code 0x08, 3 dimensions).
    Images {
        n: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<f64>,
    },
}

/// Parses an IDX buffer: magic `[0, 0, type_code, n_dims]` followed by
/// big-endian u32 dimension sizes and the payload.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData, DatasetError> {
    if bytes.len() < 4 {
        return Err(DatasetError::Truncated("buffer shorter than magic".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(DatasetError::Format(format!(
            "bad magic {:02x} {:02x} {:02x} {:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let type_code = bytes[2];
    let n_dims = bytes[3] as usize;
    if type_code != 0x08 {
        return Err(DatasetError::Format(format!(
            "unsupported type code 0x{type_code:02x} (only unsigned byte 0x08)"
        )));
    }
    if n_dims != 1 && n_dims != 3 {
        return Err(DatasetError::Format(format!(
            "unsupported dimension count {n_dims} (labels=1, images=3)"
        )));
    }
    let header_len = 4 + 4 * n_dims;
    if bytes.len() < header_len {
        return Err(DatasetError::Truncated(
            "buffer ends inside dimension header".into(),
        ));
    }
    let mut dims = [0usize; 3];
    for (d, dim) in dims.iter_mut().take(n_dims).enumerate() {
        let off = 4 + 4 * d;
        *dim = u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let total: usize = dims[..n_dims]
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| DatasetError::Format("dimension product overflows".into()))?;
    let payload = &bytes[header_len..];
    if payload.len() < total {
        return Err(DatasetError::Truncated(format!(
            "declared {} values but only {} bytes remain",
            total,
            payload.len()
        )));
    }
    if n_dims == 1 {
        Ok(IdxData::Labels(payload[..total].to_vec()))
    } else {
        let pixels = payload[..total].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(IdxData::Images {
            n: dims[0],
            rows: dims[1],
            cols: dims[2],
            pixels,
        })
    }
}

/// The four standard file names inside an MNIST-layout data directory.
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn idx_pair_to_dataset(images: IdxData, labels: IdxData) -> Result<Dataset, DatasetError> {
    let (n, rows, cols, pixels) = match images {
        IdxData::Images { n, rows, cols, pixels } => (n, rows, cols, pixels),
        IdxData::Labels(_) => {
            return Err(DatasetError::Format("expected image file, got labels".into()))
        }
    };
    let labels = match labels {
        IdxData::Labels(l) => l,
        IdxData::Images { .. } => {
            return Err(DatasetError::Format("expected label file, got images".into()))
        }
    };
    if labels.len() != n {
        return Err(DatasetError::Shape(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    Dataset::new(
        pixels,
        rows * cols,
        labels.into_iter().map(|l| l as usize).collect(),
        10,
    )
}

/// Loads the train and test sets from `data_dir` using the standard
/// MNIST/FashionMNIST file names. No network access; files must be present
/// and uncompressed.
pub fn load_idx_dir(data_dir: &Path) -> Result<(Dataset, Dataset), DatasetError> {
    let train = idx_pair_to_dataset(
        parse_idx(&read_file(&data_dir.join(MNIST_FILES[0]))?)?,
        parse_idx(&read_file(&data_dir.join(MNIST_FILES[1]))?)?,
    )?;
    let test = idx_pair_to_dataset(
        parse_idx(&read_file(&data_dir.join(MNIST_FILES[2]))?)?,
        parse_idx(&read_file(&data_dir.join(MNIST_FILES[3]))?)?,
    )?;
    Ok((train, test))
}

/// Generates Gaussian class clusters: one center per class drawn uniformly
/// in [0,1]^d, samples = center + N(0, stddev^2) clipped to [0,1]. Classes
/// are balanced; everything is deterministic in `seed`.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.n_classes;
    let d = spec.n_features;

    let centers: Vec<f64> = (0..k * d).map(|_| rng.random::<f64>()).collect();

    let mut features = Vec::with_capacity(spec.n_samples * d);
    let mut labels = Vec::with_capacity(spec.n_samples);
    let base = spec.n_samples / k;
    let extra = spec.n_samples % k;
    let noise = if spec.cluster_stddev > 0.0 {
        Some(Normal::new(0.0, spec.cluster_stddev).expect("stddev validated nonneg"))
    } else {
        None
    };
    for class in 0..k {
        let count = base + usize::from(class < extra);
        let center = &centers[class * d..(class + 1) * d];
        for _ in 0..count {
            for &c in center {
                let v = match &noise {
                    Some(n) => (c + n.sample(&mut rng)).clamp(0.0, 1.0),
                    None => c,
                };
                features.push(v);
            }
            labels.push(class);
        }
    }
    Dataset {
        features,
        n_features: d,
        labels,
        n_classes: k,
    }
}

/// Splits `0..n_train` into `n_nodes` disjoint near-equal shards after a
/// seeded uniform shuffle. Shard sizes differ by at most one.
pub fn partition_iid(n_train: usize, n_nodes: usize, seed: u64) -> Result<Partition, DatasetError> {
    if n_nodes == 0 || n_train < n_nodes {
        return Err(DatasetError::BadPartition { n_train, n_nodes });
    }
    let mut indices: Vec<usize> = (0..n_train).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let base = n_train / n_nodes;
    let extra = n_train % n_nodes;
    let mut shards = Vec::with_capacity(n_nodes);
    let mut offset = 0;
    for node in 0..n_nodes {
        let size = base + usize::from(node < extra);
        shards.push(indices[offset..offset + size].to_vec());
        offset += size;
    }
    Ok(Partition { shards, seed })
}

/// Stratified train/test split: a seeded shuffle within each class, then a
/// largest-remainder apportionment of the test budget across classes so the
/// total is exactly `round(n * test_fraction)` while both sides keep every
/// class that has at least two samples.
pub fn split_train_test(
    ds: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DatasetError> {
    if ds.n_samples() == 0 {
        return Err(DatasetError::Empty);
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::Shape(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let n = ds.n_samples();
    let test_total = ((n as f64 * test_fraction).round() as usize).clamp(1, n.saturating_sub(1));

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let counts: Vec<usize> = by_class.iter().map(|c| c.len()).collect();
    let test_counts = apportion_test(&counts, test_fraction, test_total);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_idx = Vec::with_capacity(test_total);
    let mut train_idx = Vec::with_capacity(n - test_total);
    for (class, mut members) in by_class.into_iter().enumerate() {
        members.shuffle(&mut rng);
        let t = test_counts[class];
        test_idx.extend_from_slice(&members[..t]);
        train_idx.extend_from_slice(&members[t..]);
    }
    train_idx.shuffle(&mut rng);
    test_idx.shuffle(&mut rng);

    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

/// Largest-remainder apportionment of `test_total` across classes with
/// per-class bounds keeping both splits populated where possible.
fn apportion_test(counts: &[usize], fraction: f64, test_total: usize) -> Vec<usize> {
    let k = counts.len();
    let mut lo: Vec<usize> = counts.iter().map(|&c| usize::from(c >= 2)).collect();
    if lo.iter().sum::<usize>() > test_total {
        lo = vec![0; k];
    }
    let mut hi: Vec<usize> = counts
        .iter()
        .map(|&c| if c >= 2 { c - 1 } else { c })
        .collect();
    if hi.iter().sum::<usize>() < test_total {
        hi = counts.to_vec();
    }

    let quotas: Vec<f64> = counts.iter().map(|&c| c as f64 * fraction).collect();
    let mut alloc: Vec<usize> = quotas
        .iter()
        .zip(&lo)
        .zip(&hi)
        .map(|((&q, &l), &h)| (q.floor() as usize).clamp(l, h))
        .collect();

    // Hand out or claw back one at a time, preferring the class whose
    // allocation is furthest below (or above) its quota. Ties break on the
    // lower class index, keeping the result deterministic.
    loop {
        let assigned: usize = alloc.iter().sum();
        if assigned == test_total {
            break;
        }
        if assigned < test_total {
            let candidate = (0..k)
                .filter(|&c| alloc[c] < hi[c])
                .max_by(|&a, &b| {
                    let da = quotas[a] - alloc[a] as f64;
                    let db = quotas[b] - alloc[b] as f64;
                    da.partial_cmp(&db)
                        .unwrap()
                        .then(b.cmp(&a))
                });
            match candidate {
                Some(c) => alloc[c] += 1,
                None => break,
            }
        } else {
            let candidate = (0..k)
                .filter(|&c| alloc[c] > lo[c])
                .max_by(|&a, &b| {
                    let da = alloc[a] as f64 - quotas[a];
                    let db = alloc[b] as f64 - quotas[b];
                    da.partial_cmp(&db)
                        .unwrap()
                        .then(b.cmp(&a))
                });
            match candidate {
                Some(c) => alloc[c] -= 1,
                None => break,
            }
        }
    }
    alloc
}

/// Builds the train/test pair a scenario describes: IDX files from disk for
/// MNIST-family sources, generator output plus a split for synthetic.
pub fn load_for_scenario(
    spec: &crate::scenario::DatasetSpec,
    master_seed: u64,
) -> Result<(Dataset, Dataset), DatasetError> {
    use crate::seeds::{derive_seed, tags};
    match spec.source {
        DataSource::Mnist | DataSource::FashionMnist => load_idx_dir(Path::new(&spec.data_dir)),
        DataSource::Synthetic => {
            let synth = spec
                .synthetic
                .as_ref()
                .ok_or_else(|| DatasetError::Shape("synthetic spec missing".into()))?;
            let full = gen_synthetic(synth, derive_seed(master_seed, tags::DATASET));
            split_train_test(&full, spec.test_fraction, derive_seed(master_seed, tags::SPLIT))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_idx_labels_hand_laid_buffer() {
        // magic 00 00 08 01, one dim = 3, payload 01 02 03
        let bytes = [0, 0, 0x08, 0x01, 0, 0, 0, 3, 1, 2, 3];
        assert_eq!(parse_idx(&bytes).unwrap(), IdxData::Labels(vec![1, 2, 3]));
    }

    #[test]
    fn parse_idx_images_hand_laid_buffer() {
        // magic 00 00 08 03, dims 1,2,2, payload 00 FF 00 FF
        let bytes = [
            0, 0, 0x08, 0x03, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0x00, 0xFF, 0x00, 0xFF,
        ];
        match parse_idx(&bytes).unwrap() {
            IdxData::Images { n, rows, cols, pixels } => {
                assert_eq!((n, rows, cols), (1, 2, 2));
                assert_eq!(pixels, vec![0.0, 1.0, 0.0, 1.0]);
            }
            other => panic!("expected images, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_errors() {
        let bytes = [0, 0, 0x08, 0x01, 0, 0, 0, 5, 1, 2];
        assert!(matches!(parse_idx(&bytes), Err(DatasetError::Truncated(_))));
    }

    #[test]
    fn bad_magic_errors() {
        let bytes = [9, 9, 0x08, 0x01, 0, 0, 0, 0];
        assert!(matches!(parse_idx(&bytes), Err(DatasetError::Format(_))));
    }

    fn synth_spec(n_samples: usize, d: usize, k: usize, stddev: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_samples,
            n_features: d,
            n_classes: k,
            cluster_stddev: stddev,
        }
    }

    /// Independent oracle: classify every sample by the nearest class
    /// centroid computed from the labels.
    fn nearest_centroid_accuracy(ds: &Dataset) -> f64 {
        let k = ds.n_classes;
        let d = ds.n_features;
        let mut centroids = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..ds.n_samples() {
            let label = ds.labels[i];
            counts[label] += 1;
            for (j, &v) in ds.row(i).iter().enumerate() {
                centroids[label * d + j] += v;
            }
        }
        for class in 0..k {
            if counts[class] > 0 {
                for j in 0..d {
                    centroids[class * d + j] /= counts[class] as f64;
                }
            }
        }
        let mut correct = 0usize;
        for i in 0..ds.n_samples() {
            let row = ds.row(i);
            let best = (0..k)
                .min_by(|&a, &b| {
                    let da: f64 = row
                        .iter()
                        .zip(&centroids[a * d..(a + 1) * d])
                        .map(|(x, c)| (x - c) * (x - c))
                        .sum();
                    let db: f64 = row
                        .iter()
                        .zip(&centroids[b * d..(b + 1) * d])
                        .map(|(x, c)| (x - c) * (x - c))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == ds.labels[i] {
                correct += 1;
            }
        }
        correct as f64 / ds.n_samples() as f64
    }

    #[test]
    fn synthetic_clusters_are_separable() {
        let ds = gen_synthetic(&synth_spec(1000, 10, 2, 0.01), 7);
        assert!(nearest_centroid_accuracy(&ds) >= 0.99);
    }

    #[test]
    fn synthetic_zero_stddev_collapses_to_centers() {
        let ds = gen_synthetic(&synth_spec(10, 4, 2, 0.0), 3);
        let first_of_class: Vec<&[f64]> = vec![ds.row(0), ds.row(5)];
        for i in 0..ds.n_samples() {
            let expect = first_of_class[ds.labels[i]];
            assert_eq!(ds.row(i), expect);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(&synth_spec(200, 6, 3, 0.05), 11);
        let b = gen_synthetic(&synth_spec(200, 6, 3, 0.05), 11);
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_values_in_unit_interval() {
        let ds = gen_synthetic(&synth_spec(500, 8, 4, 0.5), 13);
        assert!(ds.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn partition_60000_by_4_gives_equal_disjoint_shards() {
        let p = partition_iid(60000, 4, 5).unwrap();
        assert_eq!(p.shards.len(), 4);
        let mut all: Vec<usize> = Vec::new();
        for shard in &p.shards {
            assert_eq!(shard.len(), 15000);
            all.extend_from_slice(shard);
        }
        all.sort_unstable();
        assert_eq!(all, (0..60000).collect::<Vec<_>>());
    }

    #[test]
    fn partition_near_equal_sizes() {
        let p = partition_iid(5, 2, 1).unwrap();
        let mut sizes: Vec<usize> = p.shards.iter().map(|s| s.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 3]);
    }

    #[test]
    fn partition_deterministic() {
        assert_eq!(partition_iid(100, 3, 9).unwrap(), partition_iid(100, 3, 9).unwrap());
    }

    #[test]
    fn partition_rejects_zero_nodes() {
        assert!(partition_iid(10, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_is_set_partition(n_train in 1usize..500, n_nodes in 1usize..16, seed in 0u64..1000) {
            prop_assume!(n_train >= n_nodes);
            let p = partition_iid(n_train, n_nodes, seed).unwrap();
            let mut all: Vec<usize> = p.shards.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n_train).collect::<Vec<_>>());
            let max = p.shards.iter().map(|s| s.len()).max().unwrap();
            let min = p.shards.iter().map(|s| s.len()).min().unwrap();
            prop_assert!(max - min <= 1);
        }
    }

    #[test]
    fn split_sizes_80_20() {
        let ds = gen_synthetic(&synth_spec(100, 4, 2, 0.1), 2);
        let (train, test) = split_train_test(&ds, 0.2, 3).unwrap();
        assert_eq!(train.n_samples(), 80);
        assert_eq!(test.n_samples(), 20);
    }

    #[test]
    fn split_deterministic_and_disjoint() {
        let ds = gen_synthetic(&synth_spec(101, 4, 3, 0.1), 2);
        let (tr1, te1) = split_train_test(&ds, 0.3, 8).unwrap();
        let (tr2, te2) = split_train_test(&ds, 0.3, 8).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        assert_eq!(tr1.n_samples() + te1.n_samples(), 101);

        // Union of both sides' rows equals the original multiset of rows.
        let mut original: Vec<Vec<u64>> = (0..ds.n_samples())
            .map(|i| ds.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut recombined: Vec<Vec<u64>> = (0..tr1.n_samples())
            .map(|i| tr1.row(i).iter().map(|v| v.to_bits()).collect())
            .chain((0..te1.n_samples()).map(|i| te1.row(i).iter().map(|v| v.to_bits()).collect()))
            .collect();
        original.sort();
        recombined.sort();
        assert_eq!(original, recombined);
    }

    #[test]
    fn split_preserves_class_presence() {
        let ds = gen_synthetic(&synth_spec(20, 3, 4, 0.05), 6);
        let (train, test) = split_train_test(&ds, 0.25, 1).unwrap();
        for hist in [train.label_histogram(), test.label_histogram()] {
            assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
        }
    }

    #[test]
    fn iid_shards_have_near_uniform_label_shares() {
        // Statistical check: per-class shard share within +-5 percentage
        // points of the global share, 10 seeds.
        let k = 4;
        let nodes = 4;
        let ds = gen_synthetic(&synth_spec(10 * k * nodes * 10, 5, k, 0.2), 3);
        let global = ds.label_histogram();
        let n = ds.n_samples();
        for seed in 0..10u64 {
            let p = partition_iid(n, nodes, seed).unwrap();
            for shard_idx in &p.shards {
                let shard = ds.subset(shard_idx);
                let hist = shard.label_histogram();
                for class in 0..k {
                    let share = hist[class] as f64 / shard.n_samples() as f64;
                    let global_share = global[class] as f64 / n as f64;
                    assert!(
                        (share - global_share).abs() <= 0.05,
                        "seed {seed} class {class}: {share} vs {global_share}"
                    );
                }
            }
        }
    }

    #[test]
    fn all_ingested_values_unit_interval() {
        let bytes = [
            0, 0, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2, 0x00, 0x80, 0xFF, 0x40,
        ];
        match parse_idx(&bytes).unwrap() {
            IdxData::Images { pixels, .. } => {
                assert!(pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            _ => unreachable!(),
        }
    }
}
