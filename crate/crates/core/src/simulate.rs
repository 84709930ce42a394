//! Construction of SAR PU benchmark data from fully labeled data.
//!
//! 1. Cluster the data with k-means and, per cluster, draw a Bernoulli
//!    parameter for each artificial binary propensity attribute; sample the
//!    attributes and append them as extra columns.
//! 2. Split into train and test sets several times.
//! 3. For each split, draw several labelings of the train set with
//!    `s ~ Bernoulli(y * e(x_e))`, where
//!    `e(x_e) = prod_i (p_low^(1 - x_e_i) * p_high^(x_e_i))^(1/k)`.
//!
//! Every random draw comes from a ChaCha stream derived from the run seed and
//! a stream id, so each (split, labeling) instance is reproducible on its
//! own.

use std::fmt::Write as _;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio;
use crate::error::{Error, Result};
use crate::types::{LabeledDataset, PuDataset};

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub k_clusters: usize,
    pub k_prop_attrs: usize,
    pub p_low: f64,
    pub p_high: f64,
    pub n_splits: usize,
    pub n_labelings: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            k_clusters: 5,
            k_prop_attrs: 2,
            p_low: 0.2,
            p_high: 0.8,
            n_splits: 5,
            n_labelings: 5,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.k_clusters == 0 {
            return bad("k_clusters must be positive".into());
        }
        if !(0.0 < self.p_low && self.p_low <= self.p_high && self.p_high < 1.0) {
            return bad(format!(
                "need 0 < p_low <= p_high < 1, got p_low={} p_high={}",
                self.p_low, self.p_high
            ));
        }
        if self.n_splits == 0 || self.n_labelings == 0 {
            return bad("n_splits and n_labelings must be positive".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        Ok(())
    }
}

/// Stream used for the propensity attributes.
pub const ATTRIBUTE_STREAM: u64 = 0;

pub fn split_stream(split: usize) -> u64 {
    (1 << 32) | split as u64
}

pub fn labeling_stream(split: usize, labeling: usize) -> u64 {
    (2 << 32) | ((split as u64) << 16) | labeling as u64
}

/// Deterministic random stream `id` of the run seeded with `seed`.
pub fn substream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Propensity score of a binary propensity-attribute vector: the geometric
/// interpolation between `p_low` (all zeros) and `p_high` (all ones).
///
/// An empty vector gets the midpoint `sqrt(p_low * p_high)`, i.e. a constant
/// labeling probability.
pub fn propensity_score(x_e: &[u8], p_low: f64, p_high: f64) -> f64 {
    if x_e.is_empty() {
        return (p_low * p_high).sqrt();
    }
    let k = x_e.len() as f64;
    let log_sum: f64 = x_e
        .iter()
        .map(|&x| if x == 1 { p_high.ln() } else { p_low.ln() })
        .sum();
    (log_sum / k).exp().clamp(p_low, p_high)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

fn squared_distance(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; at most 100 iterations.
pub fn kmeans(features: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = features.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k-means needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| squared_distance(features.row(i), features.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&nearest) {
            Ok(dist) => dist.sample(&mut rng),
            // All remaining points coincide with a center.
            Err(_) => (0..n).find(|i| !chosen.contains(i)).expect("k <= n"),
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(squared_distance(features.row(i), features.row(next)));
        }
    }
    let mut centroids = features.select(Axis(0), &chosen);

    let assign = |centroids: &Array2<f64>| -> (Vec<usize>, f64) {
        let mut inertia = 0.0;
        let labels = features
            .rows()
            .into_iter()
            .map(|row| {
                let (best, dist) = centroids
                    .rows()
                    .into_iter()
                    .map(|c| squared_distance(row, c))
                    .enumerate()
                    .fold((0, f64::INFINITY), |acc, (j, d)| if d < acc.1 { (j, d) } else { acc });
                inertia += dist;
                best
            })
            .collect();
        (labels, inertia)
    };

    let (mut assignments, mut inertia) = assign(&centroids);
    let mut iterations = 0;
    for _ in 0..100 {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (row, &a) in features.rows().into_iter().zip(&assignments) {
            sums.row_mut(a).scaled_add(1.0, &row);
            counts[a] += 1;
        }
        for (j, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mean = &sums.row(j) / count as f64;
                centroids.row_mut(j).assign(&mean);
            }
        }
        let (next, next_inertia) = assign(&centroids);
        inertia = next_inertia;
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

/// A labeled dataset extended with artificial propensity attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    pub data: LabeledDataset,
    pub propensity_attr_indices: Vec<usize>,
    /// Bernoulli parameter per (cluster, attribute).
    pub cluster_theta: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

impl AugmentedDataset {
    pub fn propensity_scores(&self, p_low: f64, p_high: f64) -> Vec<f64> {
        row_propensities(self.data.features(), &self.propensity_attr_indices, p_low, p_high)
    }
}

/// Propensity score of each row, reading the binary attributes at `indices`.
pub fn row_propensities(
    features: ArrayView2<'_, f64>,
    indices: &[usize],
    p_low: f64,
    p_high: f64,
) -> Vec<f64> {
    features
        .rows()
        .into_iter()
        .map(|row| {
            let x_e: Vec<u8> = indices.iter().map(|&j| u8::from(row[j] > 0.5)).collect();
            propensity_score(&x_e, p_low, p_high)
        })
        .collect()
}

pub fn attach_propensity_attrs(
    data: &LabeledDataset,
    config: &SimulationConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedDataset> {
    let n = data.n_rows();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot attach attributes to an empty dataset".into()));
    }
    if config.k_prop_attrs == 0 {
        return Ok(AugmentedDataset {
            data: data.clone(),
            propensity_attr_indices: Vec::new(),
            cluster_theta: Vec::new(),
            assignments: vec![0; n],
            inertia: f64::NAN,
        });
    }
    let clusters = kmeans(data.features(), config.k_clusters, rng.random())?;
    let theta: Vec<Vec<f64>> = (0..config.k_clusters)
        .map(|_| (0..config.k_prop_attrs).map(|_| rng.random::<f64>()).collect())
        .collect();
    let extra = Array2::from_shape_fn((n, config.k_prop_attrs), |(i, j)| {
        if rng.random::<f64>() < theta[clusters.assignments[i]][j] {
            1.0
        } else {
            0.0
        }
    });
    let features = concatenate(Axis(1), &[data.features(), extra.view()])
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let d = data.n_cols();
    Ok(AugmentedDataset {
        data: LabeledDataset::new(features, data.classes().to_vec())?,
        propensity_attr_indices: (d..d + config.k_prop_attrs).collect(),
        cluster_theta: theta,
        assignments: clusters.assignments,
        inertia: clusters.inertia,
    })
}

/// Draw `s_i ~ Bernoulli(y_i * propensity(row_i))` for every row.
pub fn label_pu_with(
    data: &LabeledDataset,
    propensity_attr_indices: &[usize],
    propensity: impl Fn(ndarray::ArrayView1<'_, f64>) -> f64,
    rng: &mut impl Rng,
) -> Result<PuDataset> {
    let e: Vec<f64> = data.features().rows().into_iter().map(&propensity).collect();
    let s: Vec<u8> = data
        .classes()
        .iter()
        .zip(&e)
        .map(|(&y, &e)| {
            let u: f64 = rng.random();
            u8::from(y == 1 && u < e)
        })
        .collect();
    let (features, classes) = data.clone().into_parts();
    Ok(PuDataset::new(features, s)?
        .with_hidden_classes(classes)?
        .with_true_propensity(e)?
        .with_propensity_attrs(propensity_attr_indices.to_vec()))
}

pub fn label_pu(
    data: &LabeledDataset,
    propensity_attr_indices: &[usize],
    config: &SimulationConfig,
    rng: &mut impl Rng,
) -> Result<PuDataset> {
    let (p_low, p_high) = (config.p_low, config.p_high);
    label_pu_with(
        data,
        propensity_attr_indices,
        |row| {
            let x_e: Vec<u8> = propensity_attr_indices
                .iter()
                .map(|&j| u8::from(row[j] > 0.5))
                .collect();
            propensity_score(&x_e, p_low, p_high)
        },
        rng,
    )
}

#[derive(Debug, Clone)]
pub struct ExperimentInstance {
    pub split: usize,
    pub labeling: usize,
    pub stream: u64,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub train: PuDataset,
    /// Test data keeps its true classes.
    pub test: LabeledDataset,
    /// True propensity scores of the test rows.
    pub test_propensity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: SimulationConfig,
    pub n_rows: usize,
    pub n_cols: usize,
    pub propensity_attr_indices: Vec<usize>,
    pub cluster_theta: Vec<Vec<f64>>,
    pub inertia: f64,
    /// (split, labeling, stream id) for every instance.
    pub instances: Vec<(usize, usize, u64)>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::from("sarpu-manifest-v1\n");
        let _ = writeln!(out, "seed\t{}", c.seed);
        let _ = writeln!(out, "rows\t{}", self.n_rows);
        let _ = writeln!(out, "cols\t{}", self.n_cols);
        let _ = writeln!(out, "k_clusters\t{}", c.k_clusters);
        let _ = writeln!(out, "k_prop_attrs\t{}", c.k_prop_attrs);
        let _ = writeln!(out, "p_low\t{}", c.p_low);
        let _ = writeln!(out, "p_high\t{}", c.p_high);
        let _ = writeln!(out, "n_splits\t{}", c.n_splits);
        let _ = writeln!(out, "n_labelings\t{}", c.n_labelings);
        let _ = writeln!(out, "test_fraction\t{}", c.test_fraction);
        let idx: Vec<String> = self.propensity_attr_indices.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(out, "propensity_attrs\t{}", idx.join(","));
        let _ = writeln!(out, "kmeans_inertia\t{}", self.inertia);
        let _ = writeln!(out, "attribute_stream\t{ATTRIBUTE_STREAM}");
        for (k, theta) in self.cluster_theta.iter().enumerate() {
            let vals: Vec<String> = theta.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(out, "cluster_theta\t{k}\t{}", vals.join("\t"));
        }
        for &(split, labeling, stream) in &self.instances {
            let _ = writeln!(
                out,
                "instance\t{split}\t{labeling}\tsplit_stream={}\tlabeling_stream={stream}",
                split_stream(split)
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub augmented: AugmentedDataset,
    pub instances: Vec<ExperimentInstance>,
    pub manifest: RunManifest,
}

/// Build the `n_splits * n_labelings` train/test instances. Propensity
/// attributes are attached before splitting, so train and test share them.
pub fn make_experiment_instances(data: &LabeledDataset, config: &SimulationConfig) -> Result<Experiment> {
    config.validate()?;
    let n = data.n_rows();
    let n_test = ((n as f64) * config.test_fraction).round() as usize;
    if n_test == 0 || n - n_test < 2 {
        return Err(Error::InvalidArgument(format!(
            "{n} rows are too few for a test fraction of {}",
            config.test_fraction
        )));
    }
    let mut attr_rng = substream(config.seed, ATTRIBUTE_STREAM);
    let augmented = attach_propensity_attrs(data, config, &mut attr_rng)?;
    let indices = augmented.propensity_attr_indices.clone();
    let all_e = augmented.propensity_scores(config.p_low, config.p_high);

    let mut instances = Vec::with_capacity(config.n_splits * config.n_labelings);
    for split in 0..config.n_splits {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(config.seed, split_stream(split)));
        let mut test_rows = order[..n_test].to_vec();
        let mut train_rows = order[n_test..].to_vec();
        test_rows.sort_unstable();
        train_rows.sort_unstable();
        let train_data = augmented.data.select_rows(&train_rows);
        let test = augmented.data.select_rows(&test_rows);
        let test_propensity: Vec<f64> = test_rows.iter().map(|&i| all_e[i]).collect();
        for labeling in 0..config.n_labelings {
            let stream = labeling_stream(split, labeling);
            let train = label_pu(
                &train_data,
                &indices,
                config,
                &mut substream(config.seed, stream),
            )?;
            instances.push(ExperimentInstance {
                split,
                labeling,
                stream,
                train_rows: train_rows.clone(),
                test_rows: test_rows.clone(),
                train,
                test: test.clone(),
                test_propensity: test_propensity.clone(),
            });
        }
    }
    let manifest = RunManifest {
        config: config.clone(),
        n_rows: n,
        n_cols: augmented.data.n_cols(),
        propensity_attr_indices: indices,
        cluster_theta: augmented.cluster_theta.clone(),
        inertia: augmented.inertia,
        instances: instances.iter().map(|i| (i.split, i.labeling, i.stream)).collect(),
    };
    Ok(Experiment {
        augmented,
        instances,
        manifest,
    })
}

/// Two Gaussian classes in `dim` dimensions whose means differ by
/// `separation` (in units of the unit noise) along every axis scaled by
/// `1/sqrt(dim)`, min-max scaled to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobConfig {
    pub n: usize,
    pub dim: usize,
    pub positive_fraction: f64,
    pub separation: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            dim: 4,
            positive_fraction: 0.5,
            separation: 4.0,
        }
    }
}

pub fn synthetic_blobs(config: &BlobConfig, seed: u64) -> Result<LabeledDataset> {
    if config.n < 2 || config.dim == 0 {
        return Err(Error::InvalidArgument("blobs need n >= 2 and dim >= 1".into()));
    }
    if !(config.positive_fraction > 0.0 && config.positive_fraction < 1.0) {
        return Err(Error::InvalidArgument("positive_fraction must lie in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pos = ((config.n as f64) * config.positive_fraction).round() as usize;
    let n_pos = n_pos.clamp(1, config.n - 1);
    let offset = config.separation / 2.0 / (config.dim as f64).sqrt();
    let classes: Vec<u8> = (0..config.n).map(|i| u8::from(i < n_pos)).collect();
    let raw = Array2::from_shape_fn((config.n, config.dim), |(i, _)| {
        let z: f64 = StandardNormal.sample(&mut rng);
        if classes[i] == 1 {
            z + offset
        } else {
            z - offset
        }
    });
    let (scaled, _) = dataio::min_max_scale(raw.view());
    LabeledDataset::new(scaled, classes)
}

/// Mean of a column, used by statistical checks.
pub fn column_mean(features: ArrayView2<'_, f64>, rows: &[usize], col: usize) -> f64 {
    let v: Array1<f64> = rows.iter().map(|&i| features[[i, col]]).collect();
    v.mean().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_pu;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn propensity_score_examples() {
        assert_abs_diff_eq!(propensity_score(&[1, 1, 1, 1], 0.2, 0.8), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(propensity_score(&[0, 0], 0.2, 0.8), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(propensity_score(&[1, 0], 0.2, 0.8), 0.4, epsilon = 1e-15);
    }

    #[test]
    fn propensity_score_is_bounded_and_monotone() {
        for k in 1..=5usize {
            for mask in 0..(1u32 << k) {
                let x: Vec<u8> = (0..k).map(|j| ((mask >> j) & 1) as u8).collect();
                let p = propensity_score(&x, 0.2, 0.8);
                assert!((0.2..=0.8).contains(&p));
                for j in 0..k {
                    if x[j] == 0 {
                        let mut up = x.clone();
                        up[j] = 1;
                        assert!(propensity_score(&up, 0.2, 0.8) >= p);
                    }
                }
            }
        }
    }

    #[test]
    fn kmeans_edge_cases() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0]];
        let one = kmeans(x.view(), 1, 7).unwrap();
        assert!(one.assignments.iter().all(|&a| a == 0));
        let all = kmeans(x.view(), 4, 7).unwrap();
        assert_eq!(all.inertia, 0.0);
        let mut sorted = all.assignments.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert!(kmeans(x.view(), 5, 7).is_err());
        assert!(kmeans(x.view(), 0, 7).is_err());
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200;
        let x = Array2::from_shape_fn((n, 2), |(i, _)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.1 * z + if i < n / 2 { 10.0 } else { -10.0 }
        });
        for seed in 0..5 {
            let res = kmeans(x.view(), 2, seed).unwrap();
            let first = res.assignments[0];
            for (i, &a) in res.assignments.iter().enumerate() {
                assert_eq!(a == first, i < n / 2);
            }
        }
    }

    #[test]
    fn zero_attributes_leave_data_unchanged() {
        let data = LabeledDataset::new(array![[0.1], [0.2]], vec![1, 0]).unwrap();
        let config = SimulationConfig {
            k_prop_attrs: 0,
            ..SimulationConfig::default()
        };
        let aug = attach_propensity_attrs(&data, &config, &mut substream(1, 0)).unwrap();
        assert_eq!(aug.data, data);
        assert!(aug.propensity_attr_indices.is_empty());
    }

    #[test]
    fn attributes_are_deterministic() {
        let data = synthetic_blobs(&BlobConfig { n: 300, ..BlobConfig::default() }, 3).unwrap();
        let config = SimulationConfig::default();
        let a = attach_propensity_attrs(&data, &config, &mut substream(9, 0)).unwrap();
        let b = attach_propensity_attrs(&data, &config, &mut substream(9, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.propensity_attr_indices, vec![4, 5]);
        assert!(a.data.features().column(4).iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn negatives_are_never_labeled() {
        let data = synthetic_blobs(&BlobConfig { n: 400, ..BlobConfig::default() }, 2).unwrap();
        let pu = label_pu_with(&data, &[], |_| 1.0, &mut substream(0, 5)).unwrap();
        assert_eq!(pu.observed(), data.classes());
        let pu = label_pu_with(&data, &[], |_| 0.5, &mut substream(0, 6)).unwrap();
        for (&s, &y) in pu.observed().iter().zip(data.classes()) {
            assert!(s <= y);
        }
        assert!(validate_pu(&pu).is_empty());
    }

    #[test]
    fn instances_follow_protocol() {
        let data = synthetic_blobs(&BlobConfig { n: 200, ..BlobConfig::default() }, 4).unwrap();
        let config = SimulationConfig {
            seed: 17,
            ..SimulationConfig::default()
        };
        let exp = make_experiment_instances(&data, &config).unwrap();
        assert_eq!(exp.instances.len(), 25);
        for inst in &exp.instances {
            let first = &exp.instances[inst.split * config.n_labelings];
            assert_eq!(inst.train_rows, first.train_rows);
            assert_eq!(inst.test_rows, first.test_rows);
            assert_eq!(inst.test.n_rows(), 40);
            assert!(validate_pu(&inst.train).is_empty());
        }
        let single = make_experiment_instances(
            &data,
            &SimulationConfig {
                n_splits: 1,
                n_labelings: 1,
                ..config.clone()
            },
        )
        .unwrap();
        assert_eq!(single.instances.len(), 1);
        assert!(exp.manifest.to_text().contains("cluster_theta\t4\t"));
    }
}
