//! Piecewise-linear networks (affine + ReLU), the extractor/autoencoder
//! bundle, and the reconstruction-error anomaly detector.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DataPair;

pub const BUNDLE_VERSION: &str = "stand-da-bundle/1";

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `x ↦ x W + c` with `W` of shape `in × out`.
    Affine { weight: Array2<f64>, bias: Array1<f64> },
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinearNetwork {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
}

impl PiecewiseLinearNetwork {
    /// Builds a network, checking that affine shapes chain.
    ///
    /// A network without affine layers needs an explicit width, so
    /// `input_dim` is taken from the first affine layer when present.
    pub fn new(layers: Vec<Layer>, input_dim: usize) -> Result<Self> {
        Self::validate(layers, input_dim, "network")
    }

    fn validate(layers: Vec<Layer>, input_dim: usize, network: &'static str) -> Result<Self> {
        let mut width = input_dim;
        for (index, layer) in layers.iter().enumerate() {
            if let Layer::Affine { weight, bias } = layer {
                if weight.nrows() != width {
                    return Err(Error::BundleLayer {
                        network,
                        index,
                        reason: format!("weight has {} rows, expected {width}", weight.nrows()),
                    });
                }
                if bias.len() != weight.ncols() {
                    return Err(Error::BundleLayer {
                        network,
                        index,
                        reason: format!(
                            "bias length {} does not match {} weight columns",
                            bias.len(),
                            weight.ncols()
                        ),
                    });
                }
                width = weight.ncols();
            }
        }
        Ok(Self {
            layers,
            input_dim,
            output_dim: width,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn affine_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Affine { .. }))
            .count()
    }

    /// Width after each layer.
    pub fn widths(&self) -> Vec<usize> {
        let mut width = self.input_dim;
        self.layers
            .iter()
            .map(|l| {
                if let Layer::Affine { weight, .. } = l {
                    width = weight.ncols();
                }
                width
            })
            .collect()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::dim("forward input", self.input_dim, x.ncols()));
        }
        let mut cur = x.to_owned();
        for layer in &self.layers {
            match layer {
                Layer::Affine { weight, bias } => {
                    cur = cur.dot(weight);
                    cur += bias;
                }
                Layer::Relu => cur.mapv_inplace(|v| v.max(0.0)),
            }
        }
        Ok(cur)
    }

    /// Layers of `self` followed by layers of `next`.
    pub fn chain(&self, next: &PiecewiseLinearNetwork) -> Result<Self> {
        if self.output_dim != next.input_dim {
            return Err(Error::dim("chain", self.output_dim, next.input_dim));
        }
        let mut layers = self.layers.clone();
        layers.extend(next.layers.iter().cloned());
        Self::new(layers, self.input_dim)
    }

    /// Random affine/ReLU stack through `dims`, ReLU after every affine layer
    /// except the last. Weights use a He-style scale.
    pub fn random(dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("finite scale");
            let weight = Array2::from_shape_simple_fn((w[0], w[1]), || normal.sample(rng));
            let bias = Array1::from_shape_simple_fn(w[1], || rng.random_range(-0.1..0.1));
            layers.push(Layer::Affine { weight, bias });
            if i + 2 < dims.len() {
                layers.push(Layer::Relu);
            }
        }
        Self::new(layers, dims[0]).expect("dims chain by construction")
    }
}

/// Feature extractor and autoencoder, applied in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub extractor: PiecewiseLinearNetwork,
    pub autoencoder: PiecewiseLinearNetwork,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl ModelBundle {
    pub fn new(
        extractor: PiecewiseLinearNetwork,
        autoencoder: PiecewiseLinearNetwork,
    ) -> Result<Self> {
        if extractor.output_dim() != autoencoder.input_dim() {
            return Err(Error::BundleSchema(format!(
                "autoencoder input dim {} does not match extractor output dim {}",
                autoencoder.input_dim(),
                extractor.output_dim()
            )));
        }
        if autoencoder.output_dim() != autoencoder.input_dim() {
            return Err(Error::BundleSchema(format!(
                "autoencoder output dim {} does not match its input dim {}",
                autoencoder.output_dim(),
                autoencoder.input_dim()
            )));
        }
        Ok(Self {
            extractor,
            autoencoder,
            metadata: BTreeMap::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.output_dim()
    }

    /// Random bundle with the given extractor and autoencoder widths.
    pub fn random(extractor_dims: &[usize], ae_dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = PiecewiseLinearNetwork::random(extractor_dims, &mut rng);
        let autoencoder = PiecewiseLinearNetwork::random(ae_dims, &mut rng);
        let mut bundle = Self::new(extractor, autoencoder)?;
        bundle
            .metadata
            .insert("source".into(), serde_json::json!("random"));
        bundle.metadata.insert("seed".into(), serde_json::json!(seed));
        Ok(bundle)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawBundle = serde_json::from_str(text)
            .map_err(|e| Error::BundleSchema(format!("malformed bundle: {e}")))?;
        if raw.version != BUNDLE_VERSION {
            return Err(Error::BundleSchema(format!(
                "unsupported version {:?}, expected {BUNDLE_VERSION:?}",
                raw.version
            )));
        }
        let extractor = parse_network(raw.extractor, "extractor")?;
        let autoencoder = parse_network(raw.autoencoder, "autoencoder")?;
        let mut bundle = Self::new(extractor, autoencoder)?;
        bundle.metadata = raw.metadata;
        Ok(bundle)
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = RawBundle {
            version: BUNDLE_VERSION.to_string(),
            extractor: to_raw(&self.extractor),
            autoencoder: to_raw(&self.autoencoder),
            metadata: self.metadata.clone(),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Per-row ℓ1 distance between extracted features and their reconstruction,
    /// over source rows stacked on target rows.
    pub fn reconstruction_errors(&self, data: &DataPair) -> Result<Array1<f64>> {
        if data.dim() != self.input_dim() {
            return Err(Error::dim("reconstruction input", self.input_dim(), data.dim()));
        }
        let features = self.extractor.forward(data.stacked().view())?;
        let recon = self.autoencoder.forward(features.view())?;
        Ok(l1_row_errors(features.view(), recon.view()))
    }

    pub fn detect_anomalies(&self, data: &DataPair, rate: f64) -> Result<Detection> {
        let errors = self.reconstruction_errors(data)?;
        Detection::from_errors(errors.as_slice().expect("contiguous"), data.n_source(), rate)
    }
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    ModelBundle::load(path)
}

pub fn save_bundle(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    bundle.save(path)
}

/// Row sums of `|a - b|`, accumulated left to right.
pub fn l1_row_errors(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array1<f64> {
    Array1::from_iter(a.axis_iter(Axis(0)).zip(b.axis_iter(Axis(0))).map(|(ra, rb)| {
        ra.iter()
            .zip(rb.iter())
            .fold(0.0, |acc, (x, y)| acc + (x - y).abs())
    }))
}

/// Outcome of thresholding reconstruction errors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    /// Flagged rows of the stacked data, ascending, 0-based.
    pub anomalous: Vec<usize>,
    /// Stacked row holding the threshold order statistic.
    pub threshold_row: usize,
    /// Flagged target rows, ascending, 0-based within the target block.
    pub target_anomalies: Vec<usize>,
}

/// `⌈rate·n⌉`, guarded against representation error in `rate·n`.
pub fn anomaly_count(rate: f64, n: usize) -> Result<usize> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Rate { rate, n });
    }
    let m = (rate * n as f64 - 1e-9).ceil().max(1.0) as usize;
    if m >= n {
        return Err(Error::Rate { rate, n });
    }
    Ok(m)
}

impl Detection {
    /// Flags the `m = ⌈rate·n⌉` largest errors; ties go to the lower index.
    pub fn from_errors(errors: &[f64], n_source: usize, rate: f64) -> Result<Self> {
        let n = errors.len();
        let m = anomaly_count(rate, n)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| errors[j].total_cmp(&errors[i]).then(i.cmp(&j)));
        let threshold_row = order[m - 1];
        let mut anomalous = order[..m].to_vec();
        anomalous.sort_unstable();
        let target_anomalies = anomalous
            .iter()
            .filter(|&&i| i >= n_source)
            .map(|&i| i - n_source)
            .collect();
        Ok(Self {
            anomalous,
            threshold_row,
            target_anomalies,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct RawBundle {
    version: String,
    extractor: Vec<RawLayer>,
    autoencoder: Vec<RawLayer>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct RawLayer {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
}

fn parse_network(raw: Vec<RawLayer>, network: &'static str) -> Result<PiecewiseLinearNetwork> {
    let mut layers = Vec::with_capacity(raw.len());
    let mut input_dim = None;
    for (index, l) in raw.into_iter().enumerate() {
        let err = |reason: String| Error::BundleLayer {
            network,
            index,
            reason,
        };
        match l.kind.as_str() {
            "affine" => {
                let rows = l.weight.ok_or_else(|| err("affine layer without weight".into()))?;
                let bias = l.bias.ok_or_else(|| err("affine layer without bias".into()))?;
                let n_in = rows.len();
                let n_out = rows.first().map_or(0, Vec::len);
                if n_in == 0 || n_out == 0 {
                    return Err(err("empty weight matrix".into()));
                }
                if let Some(r) = rows.iter().position(|r| r.len() != n_out) {
                    return Err(err(format!("ragged weight row {r}")));
                }
                let weight = Array2::from_shape_vec((n_in, n_out), rows.concat())
                    .expect("rectangular by check");
                input_dim.get_or_insert(n_in);
                layers.push(Layer::Affine {
                    weight,
                    bias: Array1::from(bias),
                });
            }
            "relu" => layers.push(Layer::Relu),
            other => return Err(err(format!("unsupported layer kind {other:?}"))),
        }
    }
    let input_dim = input_dim.ok_or_else(|| {
        Error::BundleSchema(format!("{network} has no affine layer"))
    })?;
    PiecewiseLinearNetwork::validate(layers, input_dim, network)
}

fn to_raw(net: &PiecewiseLinearNetwork) -> Vec<RawLayer> {
    net.layers()
        .iter()
        .map(|l| match l {
            Layer::Affine { weight, bias } => RawLayer {
                kind: "affine".into(),
                weight: Some(weight.outer_iter().map(|r| r.to_vec()).collect()),
                bias: Some(bias.to_vec()),
            },
            Layer::Relu => RawLayer {
                kind: "relu".into(),
                weight: None,
                bias: None,
            },
        })
        .collect()
}
