//! Synthetic residual model used as the profiling substrate.
//!
//! Each layer computes `h_p(x) = x + tanh(W_p x + b_p)`. Every layer carries
//! its full-precision weights and a per-row symmetric round-to-nearest
//! quantization of them at 8, 4 and 3 bits, so any [`PrecisionConfig`] can be
//! evaluated without re-quantizing.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::precision::Precision;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model dimensions: layers={layers}, hidden_dim={hidden_dim} (need layers >= 1, hidden_dim >= 2)")]
    InvalidDimensions { layers: usize, hidden_dim: usize },
    #[error("input has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("precision config covers {got} layers, model has {expected}")]
    ConfigLength { expected: usize, got: usize },
    #[error("layer {layer}: {reason}")]
    BadLayer { layer: usize, reason: String },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn from_rows(rows: Vec<Vec<S>>) -> Option<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return None;
        }
        Some(Self {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[S]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows()
            .map(|row| {
                row.iter()
                    .zip(x)
                    .fold(S::zero(), |acc, (&w, &v)| acc + w * v)
            })
            .collect()
    }
}

/// Step of the symmetric `bits`-bit grid for a row: `max|w| / (2^(bits-1) - 1)`,
/// or 1 for an all-zero row.
pub fn row_scale<S: Scalar>(row: &[S], bits: u32) -> S {
    assert!(bits >= 2, "quantization needs at least 2 bits, got {bits}");
    let max_abs = row.iter().fold(S::zero(), |m, w| m.max(w.abs()));
    if max_abs == S::zero() {
        return S::one();
    }
    let levels = S::lit(f64::from((1u32 << (bits - 1)) - 1));
    max_abs / levels
}

/// Round-to-nearest onto the row's symmetric grid.
pub fn quantize_row<S: Scalar>(row: &[S], bits: u32) -> Vec<S> {
    let scale = row_scale(row, bits);
    row.iter().map(|&w| (w / scale).round() * scale).collect()
}

/// Per-row symmetric uniform quantization of a weight matrix.
pub fn quantize_weights<S: Scalar>(w: &Matrix<S>, bits: u32) -> Matrix<S> {
    let mut data = Vec::with_capacity(w.data.len());
    for row in w.iter_rows() {
        data.extend(quantize_row(row, bits));
    }
    Matrix {
        rows: w.rows,
        cols: w.cols,
        data,
    }
}

/// One residual block and its quantized realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    weight: Matrix<S>,
    bias: Vec<S>,
    q8: Matrix<S>,
    q4: Matrix<S>,
    q3: Matrix<S>,
}

impl<S: Scalar> Layer<S> {
    pub fn new(weight: Matrix<S>, bias: Vec<S>) -> Result<Self, String> {
        if weight.rows() != weight.cols() {
            return Err(format!(
                "weight is {}x{}, expected square",
                weight.rows(),
                weight.cols()
            ));
        }
        if bias.len() != weight.rows() {
            return Err(format!(
                "bias has length {}, expected {}",
                bias.len(),
                weight.rows()
            ));
        }
        Ok(Self {
            q8: quantize_weights(&weight, 8),
            q4: quantize_weights(&weight, 4),
            q3: quantize_weights(&weight, 3),
            weight,
            bias,
        })
    }

    pub fn weight(&self, precision: Precision) -> &Matrix<S> {
        match precision {
            Precision::Full => &self.weight,
            Precision::Q8 => &self.q8,
            Precision::Q4 => &self.q4,
            Precision::Q3 => &self.q3,
        }
    }

    pub fn bias(&self) -> &[S] {
        &self.bias
    }

    /// `x + tanh(W x + b)` with the weights of the given precision.
    pub fn apply(&self, x: &[S], precision: Precision) -> Vec<S> {
        let pre = self.weight(precision).matvec(x);
        x.iter()
            .zip(pre)
            .zip(&self.bias)
            .map(|((&xi, z), &b)| xi + (z + b).tanh())
            .collect()
    }
}

/// Per-layer precision assignment. The quantized set is every layer whose
/// tag is not [`Precision::Full`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PrecisionConfig {
    tags: Vec<Precision>,
}

impl PrecisionConfig {
    pub fn full(num_layers: usize) -> Self {
        Self::uniform(num_layers, Precision::Full)
    }

    pub fn uniform(num_layers: usize, precision: Precision) -> Self {
        Self {
            tags: vec![precision; num_layers],
        }
    }

    pub fn from_tags(tags: Vec<Precision>) -> Self {
        Self { tags }
    }

    /// Full precision except the listed layers, which get `precision`.
    pub fn with_quantized<I: IntoIterator<Item = usize>>(
        num_layers: usize,
        layers: I,
        precision: Precision,
    ) -> Self {
        let mut cfg = Self::full(num_layers);
        for p in layers {
            cfg.tags[p] = precision;
        }
        cfg
    }

    pub fn set(&mut self, layer: usize, precision: Precision) {
        self.tags[layer] = precision;
    }

    pub fn tag(&self, layer: usize) -> Precision {
        self.tags[layer]
    }

    pub fn tags(&self) -> &[Precision] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn is_quantized(&self, layer: usize) -> bool {
        self.tags[layer].is_quantized()
    }

    pub fn quantized_set(&self) -> BTreeSet<usize> {
        (0..self.tags.len())
            .filter(|&p| self.is_quantized(p))
            .collect()
    }
}

/// Inputs and outputs of every layer for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<S> {
    pub inputs: Vec<Vec<S>>,
    pub outputs: Vec<Vec<S>>,
}

impl<S> ActivationTrace<S> {
    pub fn final_output(&self) -> &[S] {
        self.outputs.last().expect("a model has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<S> {
    hidden_dim: usize,
    seed: Option<u64>,
    layers: Vec<Layer<S>>,
}

impl<S: Scalar> ToyModel<S> {
    /// Generates a model from a seed. Layer `p` gets a gain drawn from
    /// `[0.25, 2.5)` so layers differ in how strongly they transform their
    /// input; weights are uniform in `±gain/sqrt(d)`, biases in `±0.1`.
    pub fn build(seed: u64, num_layers: usize, hidden_dim: usize) -> Result<Self, ModelError> {
        if num_layers < 1 || hidden_dim < 2 {
            return Err(ModelError::InvalidDimensions {
                layers: num_layers,
                hidden_dim,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = 1.0 / (hidden_dim as f64).sqrt();
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            let gain: f64 = rng.random_range(0.25..2.5);
            let rows = (0..hidden_dim)
                .map(|_| {
                    (0..hidden_dim)
                        .map(|_| S::lit(gain * norm * rng.random_range(-1.0..1.0)))
                        .collect()
                })
                .collect();
            let bias = (0..hidden_dim)
                .map(|_| S::lit(rng.random_range(-0.1..0.1)))
                .collect();
            let weight = Matrix::from_rows(rows).expect("rectangular by construction");
            layers.push(Layer::new(weight, bias).expect("square by construction"));
        }
        Ok(Self {
            hidden_dim,
            seed: Some(seed),
            layers,
        })
    }

    /// Builds a model from explicit `(weight, bias)` pairs.
    pub fn from_layers(parts: Vec<(Matrix<S>, Vec<S>)>) -> Result<Self, ModelError> {
        let hidden_dim = parts.first().map_or(0, |(w, _)| w.rows());
        if parts.is_empty() || hidden_dim < 2 {
            return Err(ModelError::InvalidDimensions {
                layers: parts.len(),
                hidden_dim,
            });
        }
        let layers = parts
            .into_iter()
            .enumerate()
            .map(|(p, (w, b))| {
                if w.rows() != hidden_dim {
                    return Err(ModelError::BadLayer {
                        layer: p,
                        reason: format!("width {} differs from {hidden_dim}", w.rows()),
                    });
                }
                Layer::new(w, b).map_err(|reason| ModelError::BadLayer { layer: p, reason })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            hidden_dim,
            seed: None,
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn layer(&self, p: usize) -> &Layer<S> {
        &self.layers[p]
    }

    fn check(&self, config: &PrecisionConfig, x: &[S]) -> Result<(), ModelError> {
        if config.len() != self.layers.len() {
            return Err(ModelError::ConfigLength {
                expected: self.layers.len(),
                got: config.len(),
            });
        }
        if x.len() != self.hidden_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.hidden_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Full forward pass recording every layer's input and output.
    pub fn forward(
        &self,
        config: &PrecisionConfig,
        x: &[S],
    ) -> Result<ActivationTrace<S>, ModelError> {
        self.check(config, x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Vec<S>> = Vec::with_capacity(self.layers.len());
        for (p, layer) in self.layers.iter().enumerate() {
            let input = outputs.last().map_or_else(|| x.to_vec(), Clone::clone);
            outputs.push(layer.apply(&input, config.tag(p)));
            inputs.push(input);
        }
        Ok(ActivationTrace { inputs, outputs })
    }

    /// Final output only; same arithmetic as [`ToyModel::forward`].
    pub fn output(&self, config: &PrecisionConfig, x: &[S]) -> Result<Vec<S>, ModelError> {
        self.check(config, x)?;
        let mut h = x.to_vec();
        for (p, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h, config.tag(p));
        }
        Ok(h)
    }
}

/// `n` seeded pseudo-random unit vectors of dimension `dim`.
pub fn calibration_batch<S: Scalar>(seed: u64, n: usize, dim: usize) -> Vec<Vec<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ca11_b4a7_c400);
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                break v.into_iter().map(|x| S::lit(x / norm)).collect();
            }
        })
        .collect()
}

/// Cosine similarity with a flag for zero-norm inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine<S> {
    pub value: S,
    /// One of the inputs had zero norm; `value` is then 0.
    pub degenerate: bool,
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> Cosine<S> {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (S::zero(), S::zero(), S::zero());
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na == S::zero() || nb == S::zero() {
        return Cosine {
            value: S::zero(),
            degenerate: true,
        };
    }
    let value = dot / (na.sqrt() * nb.sqrt());
    Cosine {
        value: value.max(-S::one()).min(S::one()),
        degenerate: false,
    }
}
