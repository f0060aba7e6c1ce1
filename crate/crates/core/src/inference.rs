//! End-to-end selective inference for detected anomalies.
//!
//! For a flagged target row `j` the statistic is `T_j = Σ_k |X^t_{jk} − mean_k|`
//! (mean over unflagged target rows). Writing `T_j = ηᵀ vec(X)` with the
//! observed signs baked into `η`, the data are restricted to the line
//! `a + b z` that leaves the Σ-orthogonal nuisance part fixed. The truncation
//! region is the set of `z` on that line where the detector flags the same
//! target rows and the signs inside `T_j` are unchanged; the p-value is a
//! two-sided truncated-normal tail over that region.

use std::time::Instant;

use ndarray::{s, Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{kernels::pattern_of, AffineTriple, Backend, Engine};
use crate::error::{Error, Result};
use crate::events::{ad_event_constraints, sign_event_constraints, target_contrast};
use crate::interval::{Interval, IntervalSet};
use crate::model::{mat_rows, CovarianceSpec, DataPair};
use crate::network::{l1_row_errors, Detection, ModelBundle, PiecewiseLinearNetwork};
use crate::truncnorm;

pub const REPORT_VERSION: &str = "stand-da-report/1";

/// Test direction for one flagged target row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestDirection {
    /// 0-based index within the target block.
    pub anomaly: usize,
    pub eta: Array1<f64>,
    pub variance: f64,
    pub z_obs: f64,
    pub signs: Vec<f64>,
}

impl TestDirection {
    pub fn sigma(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Builds `η_j` for target row `j` given the flagged target rows `anomalies`.
pub fn build_eta(
    data: &DataPair,
    spec: &CovarianceSpec,
    anomalies: &[usize],
    j: usize,
) -> Result<TestDirection> {
    let (n_s, n_t, d) = (data.n_source(), data.n_target(), data.dim());
    if !anomalies.contains(&j) {
        return Err(Error::Data(format!("target row {j} is not among the anomalies")));
    }
    let stacked = data.stacked();
    let diff = target_contrast(stacked.view(), n_s, j, anomalies)?;
    let signs: Vec<f64> = diff.iter().map(|&v| pattern_of(v)).collect();
    let complement: Vec<usize> = (0..n_t).filter(|l| !anomalies.contains(l)).collect();
    let inv = 1.0 / complement.len() as f64;

    let mut target = Array2::<f64>::zeros((n_t, d));
    for k in 0..d {
        target[[j, k]] = signs[k];
        for &l in &complement {
            target[[l, k]] = -signs[k] * inv;
        }
    }
    let mut eta = Array1::zeros((n_s + n_t) * d);
    eta.slice_mut(s![n_s * d..])
        .assign(&Array1::from_iter(target.iter().copied()));

    let z_obs = eta.dot(&data.vectorized());
    let variance = eta.dot(&spec.sigma_times(eta.view())?);
    if !(variance > 0.0) {
        return Err(Error::Data(format!("test direction has variance {variance}")));
    }
    Ok(TestDirection {
        anomaly: j,
        eta,
        variance,
        z_obs,
        signs,
    })
}

/// The line `a + b z` through the observed data along the test direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceLine {
    pub offset: Array1<f64>,
    pub direction: Array1<f64>,
    pub z_min: f64,
    pub z_max: f64,
}

impl NuisanceLine {
    pub fn point(&self, z: f64) -> Array1<f64> {
        &self.offset + &(&self.direction * z)
    }
}

/// `b = Σηᵀ/(ηᵀΣη)`, `a = x_obs − b·z_obs`, searched over `z_obs ± range_sigmas·σ`.
pub fn nuisance_line(
    direction: &TestDirection,
    spec: &CovarianceSpec,
    observed: &Array1<f64>,
    range_sigmas: f64,
) -> Result<NuisanceLine> {
    let b = spec.sigma_times(direction.eta.view())? / direction.variance;
    let a = observed - &(&b * direction.z_obs);
    let half = range_sigmas * direction.sigma();
    Ok(NuisanceLine {
        offset: a,
        direction: b,
        z_min: direction.z_obs - half,
        z_max: direction.z_obs + half,
    })
}

/// Tuning of the line search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub rate: f64,
    /// Step past each window end, in units of σ.
    pub step_sigmas: f64,
    /// Half-width of the searched range, in units of σ.
    pub range_sigmas: f64,
    /// Windows closer than this (absolute z) are merged.
    pub merge_tol: f64,
    /// Probe gaps left between consecutive windows by the fixed step.
    pub refine_gaps: bool,
    pub backend: Backend,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            rate: 0.05,
            step_sigmas: 1e-3,
            range_sigmas: 20.0,
            merge_tol: 1e-9,
            refine_gaps: true,
            backend: Backend::Sequential,
        }
    }
}

/// One visited sub-problem window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub interval: Interval,
    pub accepted: bool,
    /// z at which the window was computed.
    pub probe: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchDiagnostics {
    pub windows: usize,
    pub accepted_windows: usize,
    pub empty_windows: usize,
    pub stalls: usize,
    pub gap_probes: usize,
    pub zero_residuals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearch {
    /// Union of accepted windows within the searched range.
    pub accepted: IntervalSet,
    pub windows: Vec<Window>,
    pub diagnostics: SearchDiagnostics,
}

/// Outcome of evaluating the pipeline at one point of the line.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub window: Interval,
    pub detection: Detection,
}

/// Reusable per-line state. Rows the line does not move (zero direction)
/// are propagated once; each probe re-runs the engine on the moving rows only
/// and scatters them into the full tap and output triples. Rows are
/// independent under the network, so this is exact.
pub struct LineProbe<'n> {
    engine: Engine<'n>,
    input: AffineTriple,
    moving: Vec<usize>,
    fixed_interval: Interval,
    tap: AffineTriple,
    out: AffineTriple,
    n_source: usize,
    rate: f64,
}

fn gather_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(ndarray::Axis(0), rows)
}

fn scatter_rows(dst: &mut AffineTriple, src: &AffineTriple, rows: &[usize]) {
    for (k, &i) in rows.iter().enumerate() {
        dst.value.row_mut(i).assign(&src.value.row(k));
        dst.offset.row_mut(i).assign(&src.offset.row(k));
        dst.slope.row_mut(i).assign(&src.slope.row(k));
    }
}

impl<'n> LineProbe<'n> {
    pub fn new(
        net: &'n PiecewiseLinearNetwork,
        seam: usize,
        line: &NuisanceLine,
        n_source: usize,
        rows: usize,
        rate: f64,
        backend: Backend,
    ) -> Result<Self> {
        let cols = net.input_dim();
        let a = mat_rows(line.offset.view(), rows, cols)?;
        let b = mat_rows(line.direction.view(), rows, cols)?;
        let (moving, fixed): (Vec<usize>, Vec<usize>) =
            (0..rows).partition(|&i| b.row(i).iter().any(|&v| v != 0.0));

        let tap_cols = net
            .widths()
            .get(seam.wrapping_sub(1))
            .copied()
            .unwrap_or(cols);
        let mut tap = AffineTriple::zeros(rows, tap_cols, 0.0);
        let mut out = AffineTriple::zeros(rows, net.output_dim(), 0.0);
        let mut fixed_interval = Interval::REAL_LINE;
        if !fixed.is_empty() {
            let input = AffineTriple::from_line(gather_rows(&a, &fixed), gather_rows(&b, &fixed), 0.0)?;
            let mut engine = Engine::new(net, backend).with_tap(seam);
            let res = engine.conditioned_forward(&input, Interval::REAL_LINE)?;
            fixed_interval = res.interval;
            scatter_rows(&mut tap, res.tap.expect("tap configured"), &fixed);
            scatter_rows(&mut out, res.output, &fixed);
        }
        Ok(Self {
            engine: Engine::new(net, backend).with_tap(seam),
            input: AffineTriple::from_line(gather_rows(&a, &moving), gather_rows(&b, &moving), 0.0)?,
            moving,
            fixed_interval,
            tap,
            out,
            n_source,
            rate,
        })
    }

    /// Z_u ∩ Z_v at `z` and the detector outcome there.
    pub fn probe(&mut self, z: f64, zero_residuals: &mut usize) -> Result<Probe> {
        self.input.set_z(z);
        let res = self.engine.conditioned_forward(&self.input, self.fixed_interval)?;
        scatter_rows(&mut self.tap, res.tap.expect("tap configured"), &self.moving);
        scatter_rows(&mut self.out, res.output, &self.moving);
        let network_interval = res.interval;
        self.tap.z = z;
        self.out.z = z;
        let errors = l1_row_errors(self.tap.value.view(), self.out.value.view());
        let detection = Detection::from_errors(
            errors.as_slice().expect("contiguous"),
            self.n_source,
            self.rate,
        )?;
        let (cs, lines) =
            ad_event_constraints(&self.tap, &self.out, detection.threshold_row, &detection.anomalous)?;
        *zero_residuals += lines.zero_residuals;
        let window = network_interval.intersect(&cs.solve());
        if window.is_empty() {
            return Err(Error::EmptyInterval { layer: usize::MAX, z });
        }
        // Round-off can leave z a hair outside its own window.
        let window = Interval::new(window.lower.min(z), window.upper.max(z));
        Ok(Probe { window, detection })
    }
}

/// Walks the line over `[z_min, z_max]`, collecting windows on which the
/// detector reproduces `observed` target anomalies.
pub fn divide_and_conquer(
    line: &NuisanceLine,
    bundle: &ModelBundle,
    n_source: usize,
    n_target: usize,
    observed: &[usize],
    sigma: f64,
    cfg: &SearchConfig,
) -> Result<LineSearch> {
    let net = bundle.extractor.chain(&bundle.autoencoder)?;
    let seam = bundle.extractor.layers().len();
    let mut probe = LineProbe::new(
        &net,
        seam,
        line,
        n_source,
        n_source + n_target,
        cfg.rate,
        cfg.backend,
    )?;
    let step = cfg.step_sigmas * sigma;
    let range = Interval::new(line.z_min, line.z_max);
    let mut diag = SearchDiagnostics::default();
    let mut windows = Vec::new();

    let mut visit = |z: f64, diag: &mut SearchDiagnostics, windows: &mut Vec<Window>| -> Option<Interval> {
        match probe.probe(z, &mut diag.zero_residuals) {
            Ok(p) => {
                diag.windows += 1;
                if p.window.width() < 1e-12 {
                    diag.stalls += 1;
                }
                let accepted = p.detection.target_anomalies == observed;
                windows.push(Window {
                    interval: p.window,
                    accepted,
                    probe: z,
                });
                Some(p.window)
            }
            Err(Error::EmptyInterval { .. }) => {
                diag.empty_windows += 1;
                None
            }
            Err(e) => {
                log::warn!("probe at z = {z} failed: {e}");
                diag.empty_windows += 1;
                None
            }
        }
    };

    let mut z = line.z_min;
    while z <= line.z_max {
        z = match visit(z, &mut diag, &mut windows) {
            Some(w) => w.upper.max(z) + step,
            None => z + step,
        };
    }

    if cfg.refine_gaps {
        let min_gap = (1e-10 * sigma).max(cfg.merge_tol);
        let mut budget = 10_000usize;
        loop {
            let covered = IntervalSet::from_intervals(
                windows.iter().map(|w| w.interval).collect(),
                cfg.merge_tol,
            );
            let mut gaps = Vec::new();
            let mut prev = line.z_min;
            for piece in covered.intervals() {
                if piece.lower - prev > min_gap {
                    gaps.push(Interval::new(prev, piece.lower));
                }
                prev = prev.max(piece.upper);
            }
            if line.z_max - prev > min_gap {
                gaps.push(Interval::new(prev, line.z_max));
            }
            let gaps: Vec<_> = gaps.into_iter().filter(|g| g.intersect(&range).width() > min_gap).collect();
            if gaps.is_empty() || budget == 0 {
                break;
            }
            let mut progressed = false;
            for g in gaps {
                if budget == 0 {
                    break;
                }
                budget -= 1;
                diag.gap_probes += 1;
                let mid = 0.5 * (g.lower + g.upper);
                if let Some(w) = visit(mid, &mut diag, &mut windows) {
                    progressed |= w.width() > 0.0;
                } else {
                    // Mark the midpoint so the gap splits and shrinks.
                    windows.push(Window {
                        interval: Interval::new(mid, mid),
                        accepted: false,
                        probe: mid,
                    });
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
    }

    let accepted = IntervalSet::from_intervals(
        windows
            .iter()
            .filter(|w| w.accepted)
            .map(|w| w.interval.intersect(&range))
            .collect(),
        cfg.merge_tol,
    );
    diag.accepted_windows = windows.iter().filter(|w| w.accepted).count();
    windows.sort_by(|a, b| a.interval.lower.total_cmp(&b.interval.lower));
    Ok(LineSearch {
        accepted,
        windows,
        diagnostics: diag,
    })
}

/// Interval on which the signs inside the test statistic stay fixed.
pub fn sign_event_interval(
    line: &NuisanceLine,
    direction: &TestDirection,
    n_source: usize,
    n_target: usize,
    anomalies: &[usize],
) -> Result<Interval> {
    let d = direction.signs.len();
    let rows = n_source + n_target;
    let data = AffineTriple::from_line(
        mat_rows(line.offset.view(), rows, d)?,
        mat_rows(line.direction.view(), rows, d)?,
        direction.z_obs,
    )?;
    let cs = sign_event_constraints(&data, n_source, direction.anomaly, anomalies, &direction.signs)?;
    Ok(cs.solve())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub alpha: f64,
    pub search: SearchConfig,
    /// Run the per-anomaly line searches concurrently.
    pub parallel_anomalies: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            search: SearchConfig::default(),
            parallel_anomalies: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceDiagnostics {
    #[serde(flatten)]
    pub search: SearchDiagnostics,
    /// Wall time of this anomaly's computation; not serialized so that
    /// reports are reproducible byte for byte.
    #[serde(skip)]
    pub wall_ms: f64,
}

/// Per-anomaly result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    /// 1-based index within the target block.
    pub anomaly_index: usize,
    pub z_obs: f64,
    pub variance: f64,
    pub signs: Vec<f64>,
    /// Final truncation region (accepted windows ∩ sign event).
    pub region: IntervalSet,
    /// Window containing the observation ∩ sign event.
    pub oc_region: IntervalSet,
    pub sign_interval: Interval,
    pub p_selective: f64,
    pub p_oc: f64,
    pub p_naive: f64,
    pub p_bonferroni: f64,
    pub diagnostics: InferenceDiagnostics,
}

impl InferenceReport {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_selective <= alpha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyFailure {
    pub anomaly_index: usize,
    pub error: String,
}

/// Everything produced by one run over a data pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub n_source: usize,
    pub n_target: usize,
    pub dim: usize,
    pub rate: f64,
    pub alpha: f64,
    /// 1-based flagged target rows.
    pub anomalies: Vec<usize>,
    pub reports: Vec<InferenceReport>,
    pub failures: Vec<AnomalyFailure>,
}

/// Full inference for one flagged target row `j` (0-based).
pub fn infer_anomaly(
    data: &DataPair,
    spec: &CovarianceSpec,
    bundle: &ModelBundle,
    anomalies: &[usize],
    j: usize,
    cfg: &InferenceConfig,
) -> Result<InferenceReport> {
    let start = Instant::now();
    let (n_s, n_t) = (data.n_source(), data.n_target());
    let direction = build_eta(data, spec, anomalies, j)?;
    let observed = data.vectorized();
    let line = nuisance_line(&direction, spec, &observed, cfg.search.range_sigmas)?;
    let search = divide_and_conquer(&line, bundle, n_s, n_t, anomalies, direction.sigma(), &cfg.search)?;
    let sign_interval = sign_event_interval(&line, &direction, n_s, n_t, anomalies)?;

    let net = bundle.extractor.chain(&bundle.autoencoder)?;
    let mut probe = LineProbe::new(
        &net,
        bundle.extractor.layers().len(),
        &line,
        n_s,
        n_s + n_t,
        cfg.search.rate,
        cfg.search.backend,
    )?;
    let mut zero = 0;
    let observed_window = probe.probe(direction.z_obs, &mut zero)?;
    if observed_window.detection.target_anomalies != anomalies {
        return Err(Error::Data(format!(
            "replay at the observation flags {:?}, expected {:?}",
            observed_window.detection.target_anomalies, anomalies
        )));
    }

    let range = Interval::new(line.z_min, line.z_max);
    let own_window = observed_window.window.intersect(&range);
    let mut z1 = search.accepted.clone();
    if !z1.contains(direction.z_obs) {
        z1 = z1.union(&IntervalSet::single(own_window), cfg.search.merge_tol);
    }
    let region = z1.intersect_interval(&sign_interval);
    let oc_region = IntervalSet::single(own_window.intersect(&sign_interval));

    let p_selective = truncnorm::selective_p(direction.z_obs, direction.variance, &region)?;
    let p_oc = truncnorm::selective_p(direction.z_obs, direction.variance, &oc_region)?;
    let p_naive = truncnorm::naive_p(direction.z_obs, direction.variance);
    let p_bonferroni = truncnorm::bonferroni_p(p_naive, n_t);

    Ok(InferenceReport {
        anomaly_index: j + 1,
        z_obs: direction.z_obs,
        variance: direction.variance,
        signs: direction.signs,
        region,
        oc_region,
        sign_interval,
        p_selective,
        p_oc,
        p_naive,
        p_bonferroni,
        diagnostics: InferenceDiagnostics {
            search: search.diagnostics,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    })
}

/// Detects anomalies and computes every p-value for each flagged target row.
/// Failures are isolated per anomaly.
pub fn stand_da(
    data: &DataPair,
    spec: &CovarianceSpec,
    bundle: &ModelBundle,
    cfg: &InferenceConfig,
) -> Result<RunReport> {
    spec.check_shape(data)?;
    let detection = bundle.detect_anomalies(data, cfg.search.rate)?;
    let anomalies = detection.target_anomalies;
    let run = |&j: &usize| (j, infer_anomaly(data, spec, bundle, &anomalies, j, cfg));
    let outcomes: Vec<_> = if cfg.parallel_anomalies {
        anomalies.par_iter().map(run).collect()
    } else {
        anomalies.iter().map(run).collect()
    };
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (j, outcome) in outcomes {
        match outcome {
            Ok(r) => reports.push(r),
            Err(e) => failures.push(AnomalyFailure {
                anomaly_index: j + 1,
                error: e.to_string(),
            }),
        }
    }
    Ok(RunReport {
        version: REPORT_VERSION.to_string(),
        n_source: data.n_source(),
        n_target: data.n_target(),
        dim: data.dim(),
        rate: cfg.search.rate,
        alpha: cfg.alpha,
        anomalies: anomalies.iter().map(|j| j + 1).collect(),
        reports,
        failures,
    })
}

/// Over-conditioned p-values only, in anomaly order.
pub fn stand_da_oc(
    data: &DataPair,
    spec: &CovarianceSpec,
    bundle: &ModelBundle,
    cfg: &InferenceConfig,
) -> Result<Vec<(usize, f64)>> {
    Ok(stand_da(data, spec, bundle, cfg)?
        .reports
        .iter()
        .map(|r| (r.anomaly_index, r.p_oc))
        .collect())
}

/// Rebuilds the data at `z` on the line and reruns the detector with plain
/// forward passes.
pub fn replay(
    line: &NuisanceLine,
    bundle: &ModelBundle,
    n_source: usize,
    n_target: usize,
    rate: f64,
    z: f64,
) -> Result<(DataPair, Detection)> {
    let d = bundle.input_dim();
    let data = DataPair::from_vectorized(line.point(z).view(), n_source, n_target, d)?;
    let detection = bundle.detect_anomalies(&data, rate)?;
    Ok((data, detection))
}

/// Signs of target row `j` minus the unflagged target mean.
pub fn contrast_signs(data: &DataPair, j: usize, anomalies: &[usize]) -> Result<Vec<f64>> {
    let stacked = data.stacked();
    Ok(target_contrast(stacked.view(), data.n_source(), j, anomalies)?
        .into_iter()
        .map(pattern_of)
        .collect())
}
