//! Conditioned forward propagation of `X(z) = A + B z`.
//!
//! The engine carries three matrices per layer (value at the current `z`,
//! offset, slope) and, at each ReLU, fixes the activation pattern seen by the
//! value matrix while shrinking a running interval `[l, r]` to the set of `z`
//! for which that pattern holds. Within the returned interval the network is
//! exactly the affine map `z ↦ offset + slope·z`.

pub mod kernels;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::LinearConstraintSet;
use crate::interval::Interval;
use crate::network::{Layer, PiecewiseLinearNetwork};
use kernels::Bounds;

/// `(X, A, B)` with `X = A + B z` at the carried `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTriple {
    pub value: Array2<f64>,
    pub offset: Array2<f64>,
    pub slope: Array2<f64>,
    pub z: f64,
}

impl AffineTriple {
    pub fn zeros(rows: usize, cols: usize, z: f64) -> Self {
        Self {
            value: Array2::zeros((rows, cols)),
            offset: Array2::zeros((rows, cols)),
            slope: Array2::zeros((rows, cols)),
            z,
        }
    }

    pub fn from_parts(
        value: Array2<f64>,
        offset: Array2<f64>,
        slope: Array2<f64>,
        z: f64,
    ) -> Result<Self> {
        if value.dim() != offset.dim() {
            return Err(Error::dim("triple offset columns", value.ncols(), offset.ncols()));
        }
        if value.dim() != slope.dim() {
            return Err(Error::dim("triple slope columns", value.ncols(), slope.ncols()));
        }
        Ok(Self {
            value: value.as_standard_layout().into_owned(),
            offset: offset.as_standard_layout().into_owned(),
            slope: slope.as_standard_layout().into_owned(),
            z,
        })
    }

    /// Instantiates the line at `z`: value = offset + slope·z.
    pub fn from_line(offset: Array2<f64>, slope: Array2<f64>, z: f64) -> Result<Self> {
        let value = &offset + &(&slope * z);
        Self::from_parts(value, offset, slope, z)
    }

    pub fn rows(&self) -> usize {
        self.value.nrows()
    }

    pub fn cols(&self) -> usize {
        self.value.ncols()
    }

    /// Moves the carried point to `z`, recomputing the value matrix.
    pub fn set_z(&mut self, z: f64) {
        self.z = z;
        ndarray::Zip::from(&mut self.value)
            .and(&self.offset)
            .and(&self.slope)
            .for_each(|x, &a, &b| *x = a + b * z);
    }

    /// `offset + slope·z` for an arbitrary `z`.
    pub fn eval(&self, z: f64) -> Array2<f64> {
        &self.offset + &(&self.slope * z)
    }

    /// Largest `|value − (offset + slope·z)|`.
    pub fn consistency_gap(&self) -> f64 {
        let mut gap: f64 = 0.0;
        ndarray::Zip::from(&self.value)
            .and(&self.offset)
            .and(&self.slope)
            .for_each(|&x, &a, &b| gap = gap.max((x - (a + b * self.z)).abs()));
        gap
    }

    fn resize(&mut self, rows: usize, cols: usize) {
        if self.value.dim() != (rows, cols) {
            *self = Self::zeros(rows, cols, self.z);
        }
    }

    fn slices_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64]) {
        (
            self.value.as_slice_mut().expect("standard layout"),
            self.offset.as_slice_mut().expect("standard layout"),
            self.slope.as_slice_mut().expect("standard layout"),
        )
    }
}

/// Execution strategy for the three fused kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Single-threaded reference.
    #[default]
    Sequential,
    /// Row-parallel tiled kernels; the value, offset and slope streams run
    /// concurrently.
    Parallel,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Sequential => "sequential",
            Backend::Parallel => "parallel",
        }
    }

    pub fn all() -> [Backend; 2] {
        [Backend::Sequential, Backend::Parallel]
    }

    /// Work below one task's worth runs on the calling thread.
    fn effective(self, work: usize) -> Backend {
        if work < kernels::PAR_TASK_WORK {
            Backend::Sequential
        } else {
            self
        }
    }

    /// `out ← input · w`, stream by stream.
    pub fn matmul(self, input: &AffineTriple, w: ArrayView2<'_, f64>, out: &mut AffineTriple) {
        let (inner, cols) = w.dim();
        let w = w.as_standard_layout();
        let w = w.as_slice().expect("standard layout");
        out.resize(input.rows(), cols);
        out.z = input.z;
        let (xv, av, bv) = (
            input.value.as_slice().expect("standard layout"),
            input.offset.as_slice().expect("standard layout"),
            input.slope.as_slice().expect("standard layout"),
        );
        let (xo, ao, bo) = out.slices_mut();
        match self.effective(input.rows() * inner * cols) {
            Backend::Sequential => {
                kernels::matmul_seq(xv, w, xo, inner, cols);
                kernels::matmul_seq(av, w, ao, inner, cols);
                kernels::matmul_seq(bv, w, bo, inner, cols);
            }
            Backend::Parallel => {
                rayon::join(
                    || kernels::matmul_tiled_par(xv, w, xo, inner, cols),
                    || {
                        rayon::join(
                            || kernels::matmul_tiled_par(av, w, ao, inner, cols),
                            || kernels::matmul_tiled_par(bv, w, bo, inner, cols),
                        )
                    },
                );
            }
        }
    }

    /// Adds the bias to value and offset; the slope is z-independent of it.
    pub fn add_bias(self, t: &mut AffineTriple, bias: ArrayView1<'_, f64>) {
        let bias = bias.to_vec();
        let work = t.rows() * t.cols();
        let (x, a, _) = t.slices_mut();
        match self.effective(work) {
            Backend::Sequential => {
                kernels::add_bias_seq(x, &bias);
                kernels::add_bias_seq(a, &bias);
            }
            Backend::Parallel => {
                rayon::join(
                    || kernels::add_bias_par(x, &bias),
                    || kernels::add_bias_par(a, &bias),
                );
            }
        }
    }

    /// ReLU under the observed pattern, tightening `interval` in place.
    pub fn si_relu(self, t: &mut AffineTriple, interval: Interval) -> Interval {
        let cols = t.cols().max(1);
        let work = 4 * t.rows() * cols;
        let (x, a, b) = t.slices_mut();
        let found = match self.effective(work) {
            Backend::Sequential => kernels::si_relu_seq(x, a, b),
            Backend::Parallel => kernels::si_relu_par(x, a, b, cols),
        };
        Bounds::from_interval(interval).merge(found).into_interval()
    }
}

/// `t · w` on every stream.
pub fn affine_matmul(t: &AffineTriple, w: ArrayView2<'_, f64>) -> Result<AffineTriple> {
    if t.cols() != w.nrows() {
        return Err(Error::dim("affine_matmul", w.nrows(), t.cols()));
    }
    let mut out = AffineTriple::zeros(t.rows(), w.ncols(), t.z);
    Backend::Sequential.matmul(t, w, &mut out);
    Ok(out)
}

pub fn affine_add_bias(t: &AffineTriple, bias: ArrayView1<'_, f64>) -> Result<AffineTriple> {
    if t.cols() != bias.len() {
        return Err(Error::dim("affine_add_bias", t.cols(), bias.len()));
    }
    let mut out = t.clone();
    Backend::Sequential.add_bias(&mut out, bias);
    Ok(out)
}

pub fn si_relu(t: &AffineTriple, interval: Interval) -> (AffineTriple, Interval) {
    let mut out = t.clone();
    let interval = Backend::Sequential.si_relu(&mut out, interval);
    (out, interval)
}

/// Activation-pattern constraints `p z ≤ q` recorded at one ReLU layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConstraints {
    pub layer: usize,
    pub constraints: LinearConstraintSet,
}

/// Result of one conditioned pass; triples borrow the engine's workspaces.
#[derive(Debug)]
pub struct ForwardOutput<'e> {
    pub output: &'e AffineTriple,
    pub tap: Option<&'e AffineTriple>,
    pub interval: Interval,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Input,
    Copy,
    Buffer(usize),
}

/// Owns pre-allocated per-layer workspaces for one network and row count.
/// Reuse one engine across many calls; engines are not shared between threads.
#[derive(Debug)]
pub struct Engine<'n> {
    net: &'n PiecewiseLinearNetwork,
    backend: Backend,
    tap_after: Option<usize>,
    buffers: Vec<AffineTriple>,
    input_copy: AffineTriple,
    tap_copy: AffineTriple,
    log: Option<Vec<LayerConstraints>>,
}

impl<'n> Engine<'n> {
    pub fn new(net: &'n PiecewiseLinearNetwork, backend: Backend) -> Self {
        let buffers = net
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Affine { weight, .. } => Some(AffineTriple::zeros(0, weight.ncols(), 0.0)),
                Layer::Relu => None,
            })
            .collect();
        Self {
            net,
            backend,
            tap_after: None,
            buffers,
            input_copy: AffineTriple::zeros(0, 0, 0.0),
            tap_copy: AffineTriple::zeros(0, 0, 0.0),
            log: None,
        }
    }

    /// Captures the triple after the first `layers` layers (the
    /// extractor/autoencoder seam).
    pub fn with_tap(mut self, layers: usize) -> Self {
        self.tap_after = Some(layers);
        self
    }

    /// Records every ReLU constraint as an explicit `p z ≤ q` list.
    pub fn with_constraint_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn constraint_log(&self) -> Option<&[LayerConstraints]> {
        self.log.as_deref()
    }

    /// Propagates `input` through the network. `interval0` should contain
    /// `input.z`; the returned interval is `interval0` cut down by every
    /// activation-pattern constraint.
    pub fn conditioned_forward<'e>(
        &'e mut self,
        input: &'e AffineTriple,
        interval0: Interval,
    ) -> Result<ForwardOutput<'e>> {
        if input.cols() != self.net.input_dim() {
            return Err(Error::dim("conditioned_forward input", self.net.input_dim(), input.cols()));
        }
        if let Some(log) = self.log.as_mut() {
            log.clear();
        }
        let backend = self.backend;
        let mut interval = interval0;
        let mut current = Slot::Input;
        if self.tap_after == Some(0) {
            self.tap_copy.clone_from(input);
        }
        let mut next_buffer = 0;
        for (index, layer) in self.net.layers().iter().enumerate() {
            match layer {
                Layer::Affine { weight, bias } => {
                    let (done, rest) = self.buffers.split_at_mut(next_buffer);
                    let out = &mut rest[0];
                    let src = match current {
                        Slot::Input => input,
                        Slot::Copy => &self.input_copy,
                        Slot::Buffer(b) => &done[b],
                    };
                    backend.matmul(src, weight.view(), out);
                    backend.add_bias(out, bias.view());
                    current = Slot::Buffer(next_buffer);
                    next_buffer += 1;
                }
                Layer::Relu => {
                    let target = match current {
                        Slot::Input | Slot::Copy => {
                            self.input_copy.clone_from(input);
                            current = Slot::Copy;
                            &mut self.input_copy
                        }
                        Slot::Buffer(b) => &mut self.buffers[b],
                    };
                    if let Some(log) = self.log.as_mut() {
                        log.push(LayerConstraints {
                            layer: index,
                            constraints: relu_constraints(target),
                        });
                    }
                    interval = backend.si_relu(target, interval);
                    if interval.is_empty() {
                        return Err(Error::EmptyInterval {
                            layer: index,
                            z: input.z,
                        });
                    }
                }
            }
            if self.tap_after == Some(index + 1) {
                let src = match current {
                    Slot::Input => input,
                    Slot::Copy => &self.input_copy,
                    Slot::Buffer(b) => &self.buffers[b],
                };
                self.tap_copy.clone_from(src);
            }
        }
        let output = match current {
            Slot::Input => input,
            Slot::Copy => &self.input_copy,
            Slot::Buffer(b) => &self.buffers[b],
        };
        let tap = self
            .tap_after
            .filter(|&t| t <= self.net.layers().len())
            .map(|_| &self.tap_copy);
        Ok(ForwardOutput {
            output,
            tap,
            interval,
        })
    }
}

fn relu_constraints(t: &AffineTriple) -> LinearConstraintSet {
    let mut cs = LinearConstraintSet::new();
    for ((&x, &a), &b) in t.value.iter().zip(t.offset.iter()).zip(t.slope.iter()) {
        let f = kernels::pattern_of(x);
        if b.abs() < kernels::SLOPE_EPS {
            cs.push_sign(f, a, 0.0);
        } else {
            cs.push_sign(f, a, b);
        }
    }
    cs
}

/// Per-layer activation patterns of a plain forward pass, `sign(0) = -1`.
pub fn activation_patterns(net: &PiecewiseLinearNetwork, x: ArrayView2<'_, f64>) -> Vec<Vec<bool>> {
    let mut cur = x.to_owned();
    let mut out = Vec::new();
    for layer in net.layers() {
        match layer {
            Layer::Affine { weight, bias } => {
                cur = cur.dot(weight);
                cur += bias;
            }
            Layer::Relu => {
                out.push(cur.iter().map(|&v| v > 0.0).collect());
                cur.mapv_inplace(|v| v.max(0.0));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
