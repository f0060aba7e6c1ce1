use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use standda::experiments::{gen_synthetic, run_trials, trial_seed, SynthParams};
use standda::inference::{
    build_eta, divide_and_conquer, nuisance_line, stand_da, InferenceConfig, SearchConfig,
    REPORT_VERSION,
};
use standda::model::sample_matrix_normal_with;
use standda::network::Layer;
use standda::{CovarianceSpec, DataPair, ModelBundle, PiecewiseLinearNetwork};

fn affine(w: Array2<f64>, b: Array1<f64>) -> Layer {
    Layer::Affine { weight: w, bias: b }
}

fn sequential() -> InferenceConfig {
    InferenceConfig {
        parallel_anomalies: false,
        ..Default::default()
    }
}

fn random_pair(n_s: usize, n_t: usize, d: usize, seed: u64) -> DataPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sample_matrix_normal_with(
        Array2::zeros((n_s, d)).view(),
        Array2::eye(n_s).view(),
        Array2::eye(d).view(),
        &mut rng,
    )
    .unwrap();
    let t = sample_matrix_normal_with(
        Array2::from_elem((n_t, d), 2.0).view(),
        Array2::eye(n_t).view(),
        Array2::eye(d).view(),
        &mut rng,
    )
    .unwrap();
    DataPair::new(s, t).unwrap()
}

fn ar_spec(n_s: usize, n_t: usize, d: usize, rho: f64) -> CovarianceSpec {
    let col = Array2::from_shape_fn((d, d), |(i, j)| rho.powi((i as i32 - j as i32).abs()));
    let row = |n: usize| Array2::from_shape_fn((n, n), |(i, j)| 0.3f64.powi((i as i32 - j as i32).abs()));
    CovarianceSpec::new(row(n_s), col.clone(), row(n_t), col).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn eta_and_line_identities(
        seed in 0u64..1_000_000,
        n_s in 1usize..12,
        n_t in 2usize..10,
        d in 1usize..5,
        rho in 0.0f64..0.9,
        flagged in 1usize..4,
    ) {
        let data = random_pair(n_s, n_t, d, seed);
        let spec = ar_spec(n_s, n_t, d, rho);
        let flagged = flagged.min(n_t - 1);
        let anomalies: Vec<usize> = (0..flagged).collect();
        let j = anomalies[seed as usize % flagged];
        let dir = build_eta(&data, &spec, &anomalies, j).unwrap();

        // Direct sum of absolute deviations from the unflagged target mean.
        let rest: Vec<usize> = (flagged..n_t).collect();
        let mut direct = 0.0;
        for k in 0..d {
            let mean = rest.iter().map(|&l| data.target[[l, k]]).sum::<f64>() / rest.len() as f64;
            direct += (data.target[[j, k]] - mean).abs();
        }
        prop_assert!((dir.z_obs - direct).abs() <= 1e-10 * direct.max(1.0));
        prop_assert!(dir.z_obs >= 0.0);
        prop_assert!(dir.variance > 0.0);
        prop_assert!(dir.eta.iter().take(n_s * d).all(|&v| v == 0.0));

        let observed = data.vectorized();
        let line = nuisance_line(&dir, &spec, &observed, 20.0).unwrap();
        prop_assert!((dir.eta.dot(&line.direction) - 1.0).abs() < 1e-10);
        prop_assert!(dir.eta.dot(&line.offset).abs() < 1e-8 * dir.z_obs.max(1.0));
        let back = line.point(dir.z_obs);
        for (x, y) in back.iter().zip(observed.iter()) {
            prop_assert!((x - y).abs() < 1e-8);
        }
        let half = 20.0 * dir.variance.sqrt();
        prop_assert!((line.z_max - line.z_min - 2.0 * half).abs() < 1e-9 * half);
    }
}

/// Every unit is pushed deep into its active half, the decoder is constant,
/// and one target row dominates, so nothing changes over the search range.
fn saturated_bundle() -> ModelBundle {
    let ext = PiecewiseLinearNetwork::new(
        vec![
            affine(array![[1.0]], array![1000.0]),
            Layer::Relu,
            affine(array![[1.0]], array![0.0]),
        ],
        1,
    )
    .unwrap();
    let ae = PiecewiseLinearNetwork::new(
        vec![
            affine(array![[0.0]], array![1000.0]),
            Layer::Relu,
            affine(array![[1.0]], array![0.0]),
        ],
        1,
    )
    .unwrap();
    ModelBundle::new(ext, ae).unwrap()
}

#[test]
fn saturated_network_gives_one_window() {
    let bundle = saturated_bundle();
    let data = DataPair::new(
        array![[100.0], [101.0], [102.0]],
        array![[1.0e4], [103.0], [104.0], [105.0]],
    )
    .unwrap();
    let spec = CovarianceSpec::identity(3, 4, 1);
    let dir = build_eta(&data, &spec, &[0], 0).unwrap();
    let line = nuisance_line(&dir, &spec, &data.vectorized(), 20.0).unwrap();
    let search = divide_and_conquer(&line, &bundle, 3, 4, &[0], dir.sigma(), &SearchConfig::default()).unwrap();
    assert_eq!(search.accepted.len(), 1);
    let only = search.accepted.intervals()[0];
    assert_eq!((only.lower, only.upper), (line.z_min, line.z_max));
    assert_eq!(search.diagnostics.windows, 1);

    let run = stand_da(&data, &spec, &bundle, &sequential()).unwrap();
    assert_eq!(run.anomalies, vec![1]);
    let r = &run.reports[0];
    assert_eq!(r.p_oc, r.p_selective);
    assert_eq!(r.region, r.oc_region);
}

#[test]
fn reports_contain_observation_and_valid_p_values() {
    let bundle = ModelBundle::random(&[4, 6, 3], &[3, 2, 3], 3).unwrap();
    let params = SynthParams::new(20, 10, 4, 0.0, 0.0);
    let mut reports = 0;
    for t in 0..50 {
        let trial = gen_synthetic(&params, trial_seed(1, 0, t)).unwrap();
        let run = stand_da(&trial.data, &trial.spec, &bundle, &sequential()).unwrap();
        assert!(run.failures.is_empty(), "{:?}", run.failures);
        for r in &run.reports {
            reports += 1;
            assert!(r.region.contains(r.z_obs), "region misses z_obs {}", r.z_obs);
            assert!(r.oc_region.contains(r.z_obs));
            for p in [r.p_selective, r.p_oc, r.p_naive, r.p_bonferroni] {
                assert!((0.0..=1.0).contains(&p));
            }
            assert!(r.p_bonferroni >= r.p_naive);
        }
    }
    assert!(reports > 20);
}

#[test]
fn scale_equivariance_for_bias_free_networks() {
    let mut bundle = ModelBundle::random(&[3, 5, 2], &[2, 2, 2], 8).unwrap();
    for net in [&mut bundle.extractor, &mut bundle.autoencoder] {
        let layers = net
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Affine { weight, bias } => affine(weight.clone(), Array1::zeros(bias.len())),
                Layer::Relu => Layer::Relu,
            })
            .collect();
        *net = PiecewiseLinearNetwork::new(layers, net.input_dim()).unwrap();
    }
    let data = random_pair(12, 8, 3, 5);
    let spec = ar_spec(12, 8, 3, 0.4);
    let base = stand_da(&data, &spec, &bundle, &sequential()).unwrap();
    assert!(!base.reports.is_empty());
    for c in [0.5, 3.0] {
        let scaled = DataPair::new(&data.source * c, &data.target * c).unwrap();
        let run = stand_da(&scaled, &spec.scaled(c * c), &bundle, &sequential()).unwrap();
        assert_eq!(run.anomalies, base.anomalies);
        for (a, b) in run.reports.iter().zip(&base.reports) {
            assert!((a.p_selective - b.p_selective).abs() < 1e-8);
            assert!((a.p_oc - b.p_oc).abs() < 1e-8);
            assert!((a.p_naive - b.p_naive).abs() < 1e-8);
        }
    }
}

#[test]
fn report_json_is_versioned_and_reproducible() {
    let bundle = ModelBundle::random(&[4, 6, 3], &[3, 2, 3], 3).unwrap();
    let trial = gen_synthetic(&SynthParams::new(20, 10, 4, 1.0, 0.0), 4).unwrap();
    let parallel = InferenceConfig::default();
    let a = serde_json::to_string(&stand_da(&trial.data, &trial.spec, &bundle, &parallel).unwrap()).unwrap();
    let b = serde_json::to_string(&stand_da(&trial.data, &trial.spec, &bundle, &sequential()).unwrap()).unwrap();
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["version"], REPORT_VERSION);
    assert!(v["reports"][0]["region"]["intervals"].is_array());
    assert!(v["reports"][0]["diagnostics"]["windows"].is_u64());
}

#[test]
fn over_conditioned_test_is_conservative_under_the_null() {
    let bundle = ModelBundle::random(&[10, 8, 4], &[4, 2, 4], 0).unwrap();
    let params = SynthParams::new(50, 25, 10, 0.0, 0.0);
    let batch = run_trials(&params, &bundle, &sequential(), 120, 31, 0).unwrap();
    let n = batch.records.len() as f64;
    let rejected = batch.records.iter().filter(|r| r.p_oc <= 0.05).count() as f64;
    let sd = (0.05 * 0.95 / n).sqrt();
    assert!(rejected / n <= 0.05 + 2.0 * sd, "oc rejection rate {}", rejected / n);
}

#[test]
fn union_region_gives_smaller_p_values_than_single_window() {
    let bundle = ModelBundle::random(&[10, 8, 4], &[4, 2, 4], 0).unwrap();
    let params = SynthParams::new(150, 50, 10, 2.0, 0.0);
    let batch = run_trials(&params, &bundle, &sequential(), 40, 77, 0).unwrap();
    assert!(batch.records.len() >= 200, "{} anomalies", batch.records.len());
    let n = batch.records.len() as f64;
    let mean_sel = batch.records.iter().map(|r| r.p_selective).sum::<f64>() / n;
    let mean_oc = batch.records.iter().map(|r| r.p_oc).sum::<f64>() / n;
    assert!(mean_oc >= mean_sel, "mean oc {mean_oc} < mean selective {mean_sel}");
}
