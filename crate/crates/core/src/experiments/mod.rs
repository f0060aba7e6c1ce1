//! Desk-scale simulation studies: false positive rate under the null, power
//! under injected anomalies, and runtime against network depth.

pub mod ingest;
pub mod synth;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::Backend;
use crate::error::{Error, Result};
use crate::inference::{infer_anomaly, stand_da, InferenceConfig, SearchConfig};
use crate::network::ModelBundle;

pub use ingest::{ingest_csv, write_csv, SplitSpec, Standardize};
pub use synth::{gen_synthetic, SynthParams, SyntheticTrial};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Fpr,
    Tpr,
    Runtime,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    StandDa,
    StandDaOc,
    Naive,
    Bonferroni,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::StandDa,
        Method::StandDaOc,
        Method::Naive,
        Method::Bonferroni,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::StandDa => "stand-da",
            Method::StandDaOc => "stand-da-oc",
            Method::Naive => "naive",
            Method::Bonferroni => "bonferroni",
        }
    }
}

/// Widths of a randomly initialized bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomBundleSpec {
    pub extractor: Vec<usize>,
    pub autoencoder: Vec<usize>,
    pub seed: u64,
}

impl Default for RandomBundleSpec {
    fn default() -> Self {
        Self {
            extractor: vec![10, 8, 4],
            autoencoder: vec![4, 2, 4],
            seed: 0,
        }
    }
}

impl RandomBundleSpec {
    pub fn build(&self) -> Result<ModelBundle> {
        ModelBundle::random(&self.extractor, &self.autoencoder, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub ns_list: Vec<usize>,
    pub nt: usize,
    pub d: usize,
    pub deltas: Vec<f64>,
    pub rho: f64,
    pub trials: usize,
    pub alpha: f64,
    pub rate: f64,
    pub seed: u64,
    /// Bundle file; a random bundle from `random_bundle` is used when absent.
    pub bundle: Option<PathBuf>,
    pub random_bundle: RandomBundleSpec,
    pub backend: Backend,
    pub step_sigmas: f64,
    pub range_sigmas: f64,
    /// Power study sizes.
    pub tpr_ns: usize,
    pub tpr_nt: usize,
    /// Runtime study: padding depths (see [`depth_bundle`]) and their width.
    pub layer_counts: Vec<usize>,
    pub layer_width: usize,
    pub runtime_ns: usize,
    pub runtime_nt: usize,
    pub runtime_reps: usize,
    pub runtime_instances: usize,
    /// Real-data mode.
    pub data: Option<PathBuf>,
    pub split: Option<SplitSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Fpr,
            ns_list: vec![50, 100, 150, 200],
            nt: 25,
            d: 10,
            deltas: vec![0.5, 1.0, 1.5, 2.0],
            rho: 0.0,
            trials: 120,
            alpha: 0.05,
            rate: 0.05,
            seed: 0,
            bundle: None,
            random_bundle: RandomBundleSpec::default(),
            backend: Backend::Sequential,
            step_sigmas: 1e-3,
            range_sigmas: 20.0,
            tpr_ns: 150,
            tpr_nt: 50,
            layer_counts: vec![8, 16, 32, 64],
            layer_width: 8,
            runtime_ns: 150,
            runtime_nt: 25,
            runtime_reps: 5,
            runtime_instances: 5,
            data: None,
            split: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Data(format!("{key}: {msg}")));
        if self.trials == 0 {
            return bad("trials", "must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", format!("must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return bad("rate", format!("must lie in (0, 1), got {}", self.rate));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho", format!("must lie in [0, 1), got {}", self.rho));
        }
        if let Some(delta) = self.deltas.iter().find(|&&x| !(x >= 0.0)) {
            return bad("deltas", format!("must be >= 0, got {delta}"));
        }
        if self.runtime_reps == 0 {
            return bad("runtime_reps", "must be >= 1".into());
        }
        if self.runtime_instances == 0 {
            return bad("runtime_instances", "must be >= 1".into());
        }
        Ok(())
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            alpha: self.alpha,
            search: SearchConfig {
                rate: self.rate,
                step_sigmas: self.step_sigmas,
                range_sigmas: self.range_sigmas,
                backend: self.backend,
                ..SearchConfig::default()
            },
            // Trials already saturate the pool.
            parallel_anomalies: false,
        }
    }

    pub fn load_bundle(&self) -> Result<ModelBundle> {
        match &self.bundle {
            Some(path) => ModelBundle::load(path),
            None => self.random_bundle.build(),
        }
    }
}

/// Independent seed for trial `index` of stream `stream`.
pub fn trial_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

/// One tested hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub n_source: usize,
    pub delta: f64,
    pub trial: usize,
    /// 1-based target row.
    pub anomaly_index: usize,
    pub injected: bool,
    pub p_selective: f64,
    pub p_oc: f64,
    pub p_naive: f64,
    pub p_bonferroni: f64,
}

impl HypothesisRecord {
    pub fn p(&self, method: Method) -> f64 {
        match method {
            Method::StandDa => self.p_selective,
            Method::StandDaOc => self.p_oc,
            Method::Naive => self.p_naive,
            Method::Bonferroni => self.p_bonferroni,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialBatch {
    pub records: Vec<HypothesisRecord>,
    /// Anomalies whose p-value could not be computed.
    pub failures: usize,
    /// Trials in which no target row was flagged.
    pub empty_trials: usize,
}

/// Runs `trials` synthetic trials in parallel and collects every hypothesis.
pub fn run_trials(
    params: &SynthParams,
    bundle: &ModelBundle,
    cfg: &InferenceConfig,
    trials: usize,
    seed: u64,
    stream: u64,
) -> Result<TrialBatch> {
    let outcomes: Vec<Result<(Vec<HypothesisRecord>, usize)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let trial = gen_synthetic(params, trial_seed(seed, stream, t as u64))?;
            let run = stand_da(&trial.data, &trial.spec, bundle, cfg)?;
            for f in &run.failures {
                log::warn!("trial {t}, anomaly {}: {}", f.anomaly_index, f.error);
            }
            let records = run
                .reports
                .iter()
                .map(|r| HypothesisRecord {
                    n_source: params.n_source,
                    delta: params.delta,
                    trial: t,
                    anomaly_index: r.anomaly_index,
                    injected: trial.target_labels[r.anomaly_index - 1],
                    p_selective: r.p_selective,
                    p_oc: r.p_oc,
                    p_naive: r.p_naive,
                    p_bonferroni: r.p_bonferroni,
                })
                .collect();
            Ok((records, run.failures.len()))
        })
        .collect();
    let mut batch = TrialBatch::default();
    for outcome in outcomes {
        let (records, failures) = outcome?;
        if records.is_empty() && failures == 0 {
            batch.empty_trials += 1;
        }
        batch.records.extend(records);
        batch.failures += failures;
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    /// `n_s` for false-positive studies, `Δ` for power studies.
    pub setting: f64,
    pub method: Method,
    pub rejections: usize,
    pub tested: usize,
    pub rate: f64,
    /// Normal-approximation 95% interval.
    pub ci_low: f64,
    pub ci_high: f64,
}

fn rate_row<'a>(
    setting: f64,
    method: Method,
    alpha: f64,
    records: impl Iterator<Item = &'a HypothesisRecord>,
) -> RateRow {
    let (mut rejections, mut tested) = (0, 0);
    for r in records {
        tested += 1;
        if r.p(method) <= alpha {
            rejections += 1;
        }
    }
    let rate = if tested > 0 { rejections as f64 / tested as f64 } else { 0.0 };
    let half = if tested > 0 {
        1.96 * (rate * (1.0 - rate) / tested as f64).sqrt()
    } else {
        0.0
    };
    RateRow {
        setting,
        method,
        rejections,
        tested,
        rate,
        ci_low: (rate - half).max(0.0),
        ci_high: (rate + half).min(1.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub rows: Vec<RateRow>,
    pub records: Vec<HypothesisRecord>,
    pub failures: usize,
    pub empty_trials: usize,
}

/// False positive rates for each `n_s`, counted per hypothesis.
pub fn run_fpr(cfg: &ExperimentConfig, bundle: &ModelBundle) -> Result<StudyResult> {
    cfg.validate()?;
    let inference = cfg.inference();
    let mut result = StudyResult {
        rows: Vec::new(),
        records: Vec::new(),
        failures: 0,
        empty_trials: 0,
    };
    for (s, &n_s) in cfg.ns_list.iter().enumerate() {
        let params = SynthParams::new(n_s, cfg.nt, cfg.d, 0.0, cfg.rho);
        let batch = run_trials(&params, bundle, &inference, cfg.trials, cfg.seed, s as u64)?;
        for m in Method::ALL {
            result
                .rows
                .push(rate_row(n_s as f64, m, cfg.alpha, batch.records.iter()));
        }
        result.records.extend(batch.records);
        result.failures += batch.failures;
        result.empty_trials += batch.empty_trials;
    }
    Ok(result)
}

/// Power for each `Δ`, over detected target rows that were truly injected.
pub fn run_tpr(cfg: &ExperimentConfig, bundle: &ModelBundle) -> Result<StudyResult> {
    cfg.validate()?;
    if cfg.deltas.is_empty() {
        return Err(Error::Data("deltas: must not be empty".into()));
    }
    let inference = cfg.inference();
    let mut result = StudyResult {
        rows: Vec::new(),
        records: Vec::new(),
        failures: 0,
        empty_trials: 0,
    };
    for (s, &delta) in cfg.deltas.iter().enumerate() {
        let params = SynthParams::new(cfg.tpr_ns, cfg.tpr_nt, cfg.d, delta, cfg.rho);
        let batch = run_trials(&params, bundle, &inference, cfg.trials, cfg.seed, 1000 + s as u64)?;
        // With no injection every detection is a null; report it as such.
        let relevant = |r: &&HypothesisRecord| delta == 0.0 || r.injected;
        for m in Method::ALL {
            result
                .rows
                .push(rate_row(delta, m, cfg.alpha, batch.records.iter().filter(relevant)));
        }
        result.records.extend(batch.records);
        result.failures += batch.failures;
        result.empty_trials += batch.empty_trials;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub layers: usize,
    pub backend: Backend,
    pub median_ms: f64,
    /// One p-value per instance.
    pub p_selective: Vec<f64>,
    /// Windows visited, summed over instances.
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeResult {
    pub rows: Vec<RuntimeRow>,
    /// Largest p-value disagreement between backends on one instance.
    pub max_backend_gap: f64,
}

/// Extractor `d → 2w → w`; autoencoder `w × l/2 → 4 → 2 → 4 → w × l/2`, so
/// depth grows on both sides of a fixed bottleneck.
pub fn depth_bundle(d: usize, width: usize, layers: usize, seed: u64) -> Result<ModelBundle> {
    if layers < 2 || layers % 2 != 0 {
        return Err(Error::Data(format!(
            "layer_counts: entries must be even and >= 2, got {layers}"
        )));
    }
    let half = std::iter::repeat_n(width, layers / 2);
    let ae: Vec<usize> = half.clone().chain([4, 2, 4]).chain(half).collect();
    ModelBundle::random(&[d, 2 * width, width], &ae, seed)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median over repetitions of the wall time to compute one anomaly's
/// p-value on each of `runtime_instances` fixed instances (summed), per depth
/// and backend. Runs serially so timings are not contended.
pub fn run_runtime(cfg: &ExperimentConfig) -> Result<RuntimeResult> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut max_gap = 0.0f64;
    let params = SynthParams::new(cfg.runtime_ns, cfg.runtime_nt, cfg.d, 0.0, cfg.rho);
    for &layers in &cfg.layer_counts {
        let bundle = depth_bundle(cfg.d, cfg.layer_width, layers, cfg.random_bundle.seed)?;
        let mut instances = Vec::new();
        for t in 0..10_000u64 {
            if instances.len() == cfg.runtime_instances {
                break;
            }
            let trial = gen_synthetic(&params, trial_seed(cfg.seed, 2000, t))?;
            let det = bundle.detect_anomalies(&trial.data, cfg.rate)?;
            if let Some(&j) = det.target_anomalies.first() {
                instances.push((trial, det.target_anomalies, j));
            }
        }
        if instances.len() < cfg.runtime_instances {
            return Err(Error::Data(format!(
                "too few instances with a detected target row for {layers} layers"
            )));
        }
        let mut p_values: Vec<Vec<f64>> = Vec::new();
        for backend in Backend::all() {
            let mut inference = cfg.inference();
            inference.search.backend = backend;
            let mut times = Vec::with_capacity(cfg.runtime_reps);
            let mut ps = Vec::new();
            let mut windows = 0;
            for rep in 0..cfg.runtime_reps {
                let start = Instant::now();
                for (trial, anomalies, j) in &instances {
                    let report = infer_anomaly(&trial.data, &trial.spec, &bundle, anomalies, *j, &inference)?;
                    if rep == 0 {
                        ps.push(report.p_selective);
                        windows += report.diagnostics.search.windows;
                    }
                }
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            rows.push(RuntimeRow {
                layers,
                backend,
                median_ms: median(times),
                p_selective: ps.clone(),
                windows,
            });
            p_values.push(ps);
        }
        for (a, b) in p_values[0].iter().zip(&p_values[1]) {
            max_gap = max_gap.max((a - b).abs());
        }
    }
    Ok(RuntimeResult {
        rows,
        max_backend_gap: max_gap,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))
}

fn write_records(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| Error::Csv(e.to_string()))?;
    for row in rows {
        w.write_record(&row).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// `n_s,method,rejections,tested,fpr`
pub fn write_fpr_csv(path: impl AsRef<Path>, rows: &[RateRow]) -> Result<()> {
    write_records(
        path.as_ref(),
        &["n_s", "method", "rejections", "tested", "fpr"],
        rows.iter().map(|r| {
            vec![
                (r.setting as usize).to_string(),
                r.method.name().to_string(),
                r.rejections.to_string(),
                r.tested.to_string(),
                r.rate.to_string(),
            ]
        }),
    )
}

/// `delta,method,tpr`
pub fn write_tpr_csv(path: impl AsRef<Path>, rows: &[RateRow]) -> Result<()> {
    write_records(
        path.as_ref(),
        &["delta", "method", "tpr"],
        rows.iter().map(|r| {
            vec![
                r.setting.to_string(),
                r.method.name().to_string(),
                r.rate.to_string(),
            ]
        }),
    )
}

/// `layers,backend,median_ms`
pub fn write_runtime_csv(path: impl AsRef<Path>, rows: &[RuntimeRow]) -> Result<()> {
    write_records(
        path.as_ref(),
        &["layers", "backend", "median_ms"],
        rows.iter().map(|r| {
            vec![
                r.layers.to_string(),
                r.backend.name().to_string(),
                format!("{:.3}", r.median_ms),
            ]
        }),
    )
}

/// Kolmogorov–Smirnov distance between the sample and Uniform(0, 1).
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| ((i as f64 + 1.0) / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"trails": 3}"#).unwrap_err();
        assert!(err.to_string().contains("trails"));
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"trials": 3}"#).unwrap();
        assert_eq!(cfg.trials, 3);
        assert_eq!(cfg.nt, 25);
    }

    #[test]
    fn validation() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.alpha = 1.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("alpha"));
        cfg = ExperimentConfig { rho: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg = ExperimentConfig { trials: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..50).map(|i| trial_seed(3, 0, i)).collect();
        let b: Vec<u64> = (0..50).map(|i| trial_seed(3, 1, i)).collect();
        let mut all = a.clone();
        all.extend(&b);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 100);
        assert_eq!(a[7], trial_seed(3, 0, 7));
    }

    #[test]
    fn rate_rows_count_hypotheses() {
        let rec = |p: f64| HypothesisRecord {
            n_source: 1,
            delta: 0.0,
            trial: 0,
            anomaly_index: 1,
            injected: false,
            p_selective: p,
            p_oc: p,
            p_naive: p,
            p_bonferroni: 1.0,
        };
        let records = [rec(0.01), rec(0.5), rec(0.04), rec(0.9)];
        let row = rate_row(10.0, Method::StandDa, 0.05, records.iter());
        assert_eq!((row.rejections, row.tested), (2, 4));
        assert_eq!(row.rate, 0.5);
        let row = rate_row(10.0, Method::Bonferroni, 0.05, records.iter());
        assert_eq!(row.rejections, 0);
    }

    #[test]
    fn ks_distance() {
        let grid: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_uniform(&grid) - 0.005).abs() < 1e-12);
        assert!((ks_uniform(&[0.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn depth_bundle_counts_layers() {
        let b = depth_bundle(10, 8, 6, 0).unwrap();
        assert_eq!(b.extractor.widths(), vec![16, 16, 8]);
        assert_eq!(b.autoencoder.affine_count(), 8);
        assert!(depth_bundle(10, 8, 5, 0).is_err());
    }

    #[test]
    fn small_fpr_study_runs() {
        let cfg = ExperimentConfig {
            ns_list: vec![30],
            nt: 10,
            d: 3,
            trials: 3,
            random_bundle: RandomBundleSpec {
                extractor: vec![3, 4, 2],
                autoencoder: vec![2, 1, 2],
                seed: 1,
            },
            ..Default::default()
        };
        let bundle = cfg.load_bundle().unwrap();
        let a = run_fpr(&cfg, &bundle).unwrap();
        let b = run_fpr(&cfg, &bundle).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 4);
        for r in &a.records {
            assert!((0.0..=1.0).contains(&r.p_selective));
        }
        let dir = tempfile::tempdir().unwrap();
        write_fpr_csv(dir.path().join("fpr.csv"), &a.rows).unwrap();
        let text = std::fs::read_to_string(dir.path().join("fpr.csv")).unwrap();
        assert!(text.starts_with("n_s,method,rejections,tested,fpr\n30,stand-da,"));
    }
}
