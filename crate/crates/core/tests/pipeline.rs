use std::collections::HashSet;
use std::fs;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;

use sarpu_core::bench::{self, BenchConfig, Method, Metric};
use sarpu_core::dataio::{self, RawTable, Schema};
use sarpu_core::glm::TrainConfig;
use sarpu_core::sar_em::{self, EmConfig};
use sarpu_core::scar_baselines::{self, StratifyConfig};
use sarpu_core::simulate::{self, BlobConfig, SimulationConfig};
use sarpu_core::types::{validate_pu, LabeledDataset};

fn blobs(n: usize, seed: u64) -> LabeledDataset {
    simulate::synthetic_blobs(&BlobConfig { n, ..BlobConfig::default() }, seed).unwrap()
}

#[test]
fn labeled_fraction_follows_propensity() {
    let n = 10_000;
    let data = LabeledDataset::new(Array2::zeros((n, 1)), vec![1; n]).unwrap();
    let pu = simulate::label_pu_with(&data, &[], |_| 0.4, &mut rand_chacha::ChaCha8Rng::seed_from_u64(5)).unwrap();
    let frac = pu.labeled_count() as f64 / n as f64;
    let sigma = (0.4f64 * 0.6 / n as f64).sqrt();
    assert!((frac - 0.4).abs() < 3.0 * sigma, "labeled fraction {frac}");
}

#[test]
fn instances_are_valid_and_reproducible() {
    let data = blobs(500, 1);
    let config = SimulationConfig {
        seed: 42,
        ..SimulationConfig::default()
    };
    let a = simulate::make_experiment_instances(&data, &config).unwrap();
    let b = simulate::make_experiment_instances(&data, &config).unwrap();
    assert_eq!(a.manifest.to_text(), b.manifest.to_text());
    for (x, y) in a.instances.iter().zip(&b.instances) {
        assert!(validate_pu(&x.train).is_empty());
        assert_eq!(dataio::pu_to_text(&x.train), dataio::pu_to_text(&y.train));
        let mut rows: Vec<usize> = x.train_rows.iter().chain(&x.test_rows).copied().collect();
        rows.sort_unstable();
        assert_eq!(rows, (0..500).collect::<Vec<_>>());
    }
    let other = simulate::make_experiment_instances(&data, &SimulationConfig { seed: 43, ..config }).unwrap();
    assert_ne!(
        dataio::pu_to_text(&a.instances[0].train),
        dataio::pu_to_text(&other.instances[0].train)
    );
}

#[test]
fn strata_partition_rows_with_constant_propensity() {
    let data = blobs(1000, 2);
    let exp = simulate::make_experiment_instances(
        &data,
        &SimulationConfig {
            n_splits: 1,
            n_labelings: 1,
            seed: 3,
            ..SimulationConfig::default()
        },
    )
    .unwrap();
    let pu = &exp.instances[0].train;
    let red = scar_baselines::reduce_sar_to_scar(pu, &StratifyConfig::default()).unwrap();
    let mut seen = HashSet::new();
    for stratum in &red.stratification.strata {
        let c = red.e_hat[stratum.rows[0]];
        for &i in &stratum.rows {
            assert!(seen.insert(i), "row {i} in two strata");
            assert_eq!(red.e_hat[i], c);
        }
    }
    assert_eq!(seen.len(), pu.n_rows());
}

#[test]
fn estimate_c_is_permutation_invariant() {
    let data = blobs(800, 4);
    let pu = simulate::label_pu_with(&data, &[], |_| 0.5, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
    let config = TrainConfig::default();
    let model = scar_baselines::train_naive(&pu, &config).unwrap();
    let a = scar_baselines::estimate_c(&pu, &model, config.prob_clip).unwrap();
    let reversed: Vec<usize> = (0..pu.n_rows()).rev().collect();
    let shuffled = pu.select_rows(&reversed);
    let model2 = scar_baselines::train_naive(&shuffled, &config).unwrap();
    let b = scar_baselines::estimate_c(&shuffled, &model2, config.prob_clip).unwrap();
    assert_eq!(a, b);
}

#[test]
fn em_propensity_model_reads_only_propensity_columns() {
    let data = blobs(600, 5);
    let exp = simulate::make_experiment_instances(
        &data,
        &SimulationConfig {
            n_splits: 1,
            n_labelings: 1,
            ..SimulationConfig::default()
        },
    )
    .unwrap();
    let pu = &exp.instances[0].train;
    let out = sar_em::run_em(pu, &EmConfig::default()).unwrap();
    assert_eq!(out.propensity.dim(), pu.propensity_attr_indices().len());
    assert_eq!(out.classifier.dim(), pu.n_cols());
    for pair in out.trace.windows(2) {
        assert!(pair[1].loglik >= pair[0].loglik - 1e-9);
    }
}

#[test]
fn bench_aggregation_ignores_method_order() {
    let data = blobs(300, 6);
    let config = BenchConfig {
        simulation: SimulationConfig {
            n_splits: 2,
            n_labelings: 2,
            ..SimulationConfig::default()
        },
        jobs: Some(2),
        ..BenchConfig::default()
    };
    let a = bench::run_benchmark("blobs", &data, &[Method::Naive, Method::SarEm, Method::Supervised], &config).unwrap();
    let b = bench::run_benchmark("blobs", &data, &[Method::Supervised, Method::Naive, Method::SarEm], &config).unwrap();
    assert_eq!(a.summary_table(), b.summary_table());
    assert_eq!(a.long_table(), b.long_table());
    let only = bench::run_benchmark("blobs", &data, &[Method::SarEm], &config).unwrap();
    assert_eq!(only.result(Method::SarEm), a.result(Method::SarEm));
    assert_eq!(a.result(Method::SarEm).unwrap().metric(Metric::MseE).unwrap().values.len(), 4);
}

#[test]
fn bundled_csv_loads() {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data");
    let schema = Schema::load(format!("{root}/breast_cancer.schema").as_ref()).unwrap();
    let loaded = dataio::load_csv(format!("{root}/breast_cancer.csv").as_ref(), &schema).unwrap();
    assert_eq!(loaded.data.n_rows(), 569);
    assert_eq!(loaded.data.n_cols(), 30);
    assert_eq!(loaded.data.positive_count(), 212);
    assert!(loaded.data.features().iter().all(|v| (-1.0..=1.0).contains(v)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scaling_round_trips(values in prop::collection::vec(-1e6f64..1e6, 2..30)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut csv = String::from("v,y\n");
        for (i, v) in values.iter().enumerate() {
            csv.push_str(&format!("{v:?},{}\n", i % 2));
        }
        fs::write(&path, csv).unwrap();
        let schema = Schema::parse("v:continuous\ny:label\n").unwrap();
        let loaded = dataio::load_csv(&path, &schema).unwrap();
        let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for (i, &v) in values.iter().enumerate() {
            let back = loaded.preprocessor.inverse_scale(0, loaded.data.features()[[i, 0]]).unwrap();
            if hi > lo {
                prop_assert!((back - v).abs() <= 1e-12 * v.abs().max(hi - lo));
            } else {
                prop_assert_eq!(back, v);
            }
        }
    }

    #[test]
    fn one_hot_rows_sum_to_one(cells in prop::collection::vec(0usize..4, 1..30), unseen in 0usize..4) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let names = ["a", "b", "c", "d"];
        let mut csv = String::from("k,c,y\n");
        for (i, &c) in cells.iter().enumerate() {
            csv.push_str(&format!("{i},{},{}\n", names[c], i % 2));
        }
        fs::write(&path, csv).unwrap();
        let schema = Schema::parse("k:continuous\nc:categorical\ny:label\n").unwrap();
        let table = RawTable::read(&path, &schema).unwrap();
        let fit_rows: Vec<usize> = (0..cells.len()).filter(|&i| cells[i] != unseen).collect();
        prop_assume!(!fit_rows.is_empty());
        let all: Vec<usize> = (0..cells.len()).collect();
        let loaded = dataio::load_csv_with(&table, &fit_rows, &all).unwrap();
        let x = loaded.data.features();
        for (i, &c) in cells.iter().enumerate() {
            let sum: f64 = x.row(i).iter().skip(1).sum();
            prop_assert_eq!(sum, if c == unseen { 0.0 } else { 1.0 });
        }
        prop_assert_eq!(loaded.unknown_categories, cells.iter().filter(|&&c| c == unseen).count());
    }
}
