use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use standda::experiments::{
    gen_synthetic, ingest_csv, run_fpr, run_runtime, run_tpr, write_fpr_csv, write_runtime_csv,
    write_tpr_csv, ExperimentConfig, Mode, RateRow, RuntimeResult, SplitSpec,
};
use standda::inference::{stand_da, InferenceConfig, RunReport};
use standda::{CovarianceSpec, DataPair, Detection, ModelBundle};

use crate::config::{resolve, BundleCheckConfig, InferRunConfig, Sources};
use crate::failure::Failure;

/// Everything a command leaves behind for the manifest.
pub struct Run {
    pub out: PathBuf,
    pub config: Option<Value>,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
}

impl Run {
    pub fn new(out: PathBuf) -> Self {
        Self {
            out,
            config: None,
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn record_config(&mut self, cfg: &impl Serialize) {
        self.config = serde_json::to_value(cfg).ok();
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::config(e.to_string()))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<(), Failure> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
    }
}

fn read_bundle(path: &Path) -> Result<ModelBundle, Failure> {
    ModelBundle::load(path).map_err(|e| Failure::from(e).context(format!("bundle {}", path.display())))
}

fn load_bundle(path: Option<&Path>, fallback: impl FnOnce() -> standda::Result<ModelBundle>) -> Result<ModelBundle, Failure> {
    match path {
        Some(p) => read_bundle(p),
        None => fallback().map_err(|e| Failure::from(e).context("random_bundle")),
    }
}

fn read_csv(path: &Path, split: &SplitSpec) -> Result<(DataPair, CovarianceSpec), Failure> {
    if !path.is_file() {
        return Err(Failure::io(format!("data {}: file not found", path.display())));
    }
    ingest_csv(path, split).map_err(|e| Failure::from(e).context(format!("data {}", path.display())))
}

fn load_data(cfg: &InferRunConfig) -> Result<(DataPair, CovarianceSpec), Failure> {
    match (&cfg.data, &cfg.split) {
        (Some(path), Some(split)) => read_csv(path, split),
        _ => {
            let trial = gen_synthetic(&cfg.synthetic, cfg.seed).map_err(|e| Failure::from(e).context("synthetic"))?;
            Ok((trial.data, trial.spec))
        }
    }
}

fn check_dims(bundle: &ModelBundle, data: &DataPair) -> Result<(), Failure> {
    if bundle.input_dim() != data.dim() {
        return Err(Failure::config(format!(
            "bundle: expects {} input columns, data has {}",
            bundle.input_dim(),
            data.dim()
        )));
    }
    Ok(())
}

pub fn detect(run: &mut Run, src: &Sources<'_>) -> Result<(), Failure> {
    let cfg: InferRunConfig = resolve(Some(&InferRunConfig::default()), src)?;
    run.record_config(&cfg);
    cfg.validate()?;
    let bundle = load_bundle(cfg.bundle.as_deref(), || cfg.random_bundle.build())?;
    let (data, _) = load_data(&cfg)?;
    check_dims(&bundle, &data)?;
    let errors = bundle.reconstruction_errors(&data)?;
    let errors = errors.to_vec();
    let det = Detection::from_errors(&errors, data.n_source(), cfg.rate)?;
    let n_s = data.n_source();

    let mut table = format!("{:>8}  {:>14}\n", "anomaly", "error");
    for &j in &det.target_anomalies {
        writeln!(table, "{:>8}  {:>14.6}", j + 1, errors[n_s + j]).unwrap();
    }
    print!("{table}");
    run.write_json(
        "detection.json",
        &json!({
            "n_source": n_s,
            "n_target": data.n_target(),
            "dim": data.dim(),
            "rate": cfg.rate,
            "anomalies": det.target_anomalies.iter().map(|j| j + 1).collect::<Vec<_>>(),
            "flagged_source_rows": det.anomalous.iter().filter(|&&i| i < n_s).map(|i| i + 1).collect::<Vec<_>>(),
            "threshold_row": det.threshold_row + 1,
            "target_errors": &errors[n_s..],
        }),
    )?;
    run.write_text("summary.txt", &table)
}

fn summary_table(report: &RunReport) -> String {
    let reject = format!("reject@{}", report.alpha);
    let mut s = format!(
        "{:>8}  {:>12}  {:>12}  {:>12}  {:>12}  {:>12}  {:>11}\n",
        "anomaly", "T_j", "p_selective", "p_naive", "p_bonf", "p_oc", reject
    );
    for r in &report.reports {
        writeln!(
            s,
            "{:>8}  {:>12.6}  {:>12.4e}  {:>12.4e}  {:>12.4e}  {:>12.4e}  {:>11}",
            r.anomaly_index,
            r.z_obs,
            r.p_selective,
            r.p_naive,
            r.p_bonferroni,
            r.p_oc,
            if r.rejects(report.alpha) { "yes" } else { "no" }
        )
        .unwrap();
    }
    for f in &report.failures {
        writeln!(s, "{:>8}  failed: {}", f.anomaly_index, f.error).unwrap();
    }
    s
}

fn run_inference(
    run: &mut Run,
    data: &DataPair,
    spec: &CovarianceSpec,
    bundle: &ModelBundle,
    cfg: &InferenceConfig,
) -> Result<(), Failure> {
    check_dims(bundle, data)?;
    let report = stand_da(data, spec, bundle, cfg)?;
    let table = summary_table(&report);
    print!("{table}");
    run.write_json("reports.json", &report)?;
    run.write_text("summary.txt", &table)?;
    if report.reports.is_empty() && !report.failures.is_empty() {
        return Err(Failure::numeric(format!(
            "inference failed for every anomaly; first: {}",
            report.failures[0].error
        )));
    }
    Ok(())
}

pub fn infer(run: &mut Run, src: &Sources<'_>) -> Result<(), Failure> {
    let cfg: InferRunConfig = resolve(Some(&InferRunConfig::default()), src)?;
    run.record_config(&cfg);
    cfg.validate()?;
    let bundle = load_bundle(cfg.bundle.as_deref(), || cfg.random_bundle.build())?;
    let (data, spec) = load_data(&cfg)?;
    run_inference(run, &data, &spec, &bundle, &cfg.inference())
}

fn rate_table(label: &str, rows: &[RateRow]) -> String {
    let mut s = format!(
        "{:>8}  {:>12}  {:>14}  {:>8}  {:>17}\n",
        label, "method", "rejected", "rate", "95% interval"
    );
    for r in rows {
        writeln!(
            s,
            "{:>8}  {:>12}  {:>14}  {:>8.4}  [{:.4}, {:.4}]",
            r.setting,
            r.method.name(),
            format!("{}/{}", r.rejections, r.tested),
            r.rate,
            r.ci_low,
            r.ci_high
        )
        .unwrap();
    }
    s
}

fn runtime_table(res: &RuntimeResult) -> String {
    let mut s = format!("{:>8}  {:>10}  {:>12}  {:>10}\n", "layers", "backend", "median_ms", "windows");
    for r in &res.rows {
        writeln!(s, "{:>8}  {:>10}  {:>12.3}  {:>10}", r.layers, r.backend.name(), r.median_ms, r.windows).unwrap();
    }
    writeln!(s, "max p-value gap between backends: {:e}", res.max_backend_gap).unwrap();
    s
}

fn plots(figure: &str, csv: &str, x: &str, y: &str, group: &str) -> Value {
    json!({
        "figures": [{ "name": figure, "csv": csv, "x": x, "y": y, "group": group }],
        "counting": "per-hypothesis",
    })
}

fn experiment_bundle(run: &mut Run, cfg: &ExperimentConfig) -> Result<ModelBundle, Failure> {
    if cfg.bundle.is_none() {
        run.notes.push(format!(
            "randomly initialized bundle (extractor {:?}, autoencoder {:?}, seed {}); power magnitudes differ from trained networks",
            cfg.random_bundle.extractor, cfg.random_bundle.autoencoder, cfg.random_bundle.seed
        ));
    }
    load_bundle(cfg.bundle.as_deref(), || cfg.random_bundle.build())
}

fn runtime_study(run: &mut Run, cfg: &ExperimentConfig, json_name: &str) -> Result<(), Failure> {
    let res = run_runtime(cfg)?;
    let table = runtime_table(&res);
    print!("{table}");
    let csv = run.path("runtime.csv");
    write_runtime_csv(&csv, &res.rows)?;
    run.write_json(json_name, &res)?;
    run.write_json("plots.json", &plots("runtime", "runtime.csv", "layers", "median_ms", "backend"))?;
    run.write_text("summary.txt", &table)?;
    run.notes.push("wall times are hardware-specific".into());
    Ok(())
}

pub fn experiment(run: &mut Run, src: &Sources<'_>) -> Result<(), Failure> {
    let cfg: ExperimentConfig = resolve(Some(&ExperimentConfig::default()), src)?;
    run.record_config(&cfg);
    cfg.validate()?;
    match cfg.mode {
        Mode::Fpr => {
            let bundle = experiment_bundle(run, &cfg)?;
            let res = run_fpr(&cfg, &bundle)?;
            let table = rate_table("n_s", &res.rows);
            print!("{table}");
            let csv = run.path("fpr.csv");
            write_fpr_csv(&csv, &res.rows)?;
            run.write_json("study.json", &res)?;
            run.write_json("plots.json", &plots("fpr", "fpr.csv", "n_s", "fpr", "method"))?;
            run.write_text("summary.txt", &table)?;
            push_study_notes(run, res.failures, res.empty_trials);
        }
        Mode::Tpr => {
            let bundle = experiment_bundle(run, &cfg)?;
            let res = run_tpr(&cfg, &bundle)?;
            let table = rate_table("delta", &res.rows);
            print!("{table}");
            let csv = run.path("tpr.csv");
            write_tpr_csv(&csv, &res.rows)?;
            run.write_json("study.json", &res)?;
            run.write_json("plots.json", &plots("tpr", "tpr.csv", "delta", "tpr", "method"))?;
            run.write_text("summary.txt", &table)?;
            push_study_notes(run, res.failures, res.empty_trials);
        }
        Mode::Runtime => runtime_study(run, &cfg, "runtime.json")?,
        Mode::Real => {
            let (Some(path), Some(split)) = (&cfg.data, &cfg.split) else {
                return Err(Failure::config("data: real mode needs both data and split"));
            };
            let bundle = load_bundle(cfg.bundle.as_deref(), || cfg.random_bundle.build())?;
            let (data, spec) = read_csv(path, split)?;
            let inference = InferenceConfig {
                parallel_anomalies: true,
                ..cfg.inference()
            };
            run_inference(run, &data, &spec, &bundle, &inference)?;
        }
    }
    Ok(())
}

fn push_study_notes(run: &mut Run, failures: usize, empty_trials: usize) {
    run.notes.push("rates count hypotheses (one per detected target anomaly), not trials".into());
    run.notes.push(format!("{failures} hypotheses failed numerically and are excluded"));
    run.notes.push(format!("{empty_trials} trials detected no target anomaly"));
}

pub fn bench(run: &mut Run, src: &Sources<'_>) -> Result<(), Failure> {
    let mut cfg: ExperimentConfig = resolve(Some(&ExperimentConfig::default()), src)?;
    cfg.mode = Mode::Runtime;
    run.record_config(&cfg);
    cfg.validate()?;
    runtime_study(run, &cfg, "bench.json")
}

pub fn validate_bundle(run: &mut Run, src: &Sources<'_>) -> Result<(), Failure> {
    let cfg: BundleCheckConfig = resolve(None, src)?;
    run.record_config(&cfg);
    let bundle = read_bundle(&cfg.bundle)?;
    let describe = |net: &standda::PiecewiseLinearNetwork| {
        json!({
            "input_dim": net.input_dim(),
            "output_dim": net.output_dim(),
            "affine_layers": net.affine_count(),
            "widths": net.widths(),
        })
    };
    let summary = json!({
        "input_dim": bundle.input_dim(),
        "feature_dim": bundle.feature_dim(),
        "extractor": describe(&bundle.extractor),
        "autoencoder": describe(&bundle.autoencoder),
        "metadata": bundle.metadata,
    });
    println!(
        "bundle ok: {} inputs, {} features, {} + {} affine layers",
        bundle.input_dim(),
        bundle.feature_dim(),
        bundle.extractor.affine_count(),
        bundle.autoencoder.affine_count()
    );
    run.write_json("bundle.json", &summary)
}
