//! Offline layer-ordering profiler.
//!
//! Three cosine-similarity sensitivities are measured on a calibration batch:
//!
//! * transformation score: `cos(h_p(x), x_p)`, how little layer `p` changes
//!   its input;
//! * replacement score: `cos(h_p(x), h_p^Q(x))`, how little quantizing layer
//!   `p` changes its own output;
//! * degradation score: `cos(f^(Q)(x), f^(Q ∪ {p})(x))`, how little the model
//!   output moves when `p` joins the current quantized set `Q`.
//!
//! The weighted sum of the three is the layer's importance score. The greedy
//! profiler repeatedly quantizes the candidate with the highest score, so the
//! resulting sequence starts with the layer whose quantization costs least.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::precision::Precision;
use crate::scalar::Scalar;
use crate::toymodel::{cosine, ModelError, PrecisionConfig, ToyModel};

pub const SEQUENCE_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("calibration batch is empty")]
    EmptyBatch,
    #[error("layer {0} is already in the quantized set")]
    AlreadyQuantized(usize),
    #[error("layer {layer} out of range for a {layers}-layer model")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("unsupported quantization width {0} (expected 3, 4 or 8)")]
    UnsupportedBits(u32),
    #[error("invalid score weights: {0}")]
    InvalidWeights(String),
    #[error("sequence is not a permutation of 0..{layers}: {reason}")]
    NotPermutation { layers: usize, reason: String },
    #[error("sequence covers {found} layers but the model has {expected}")]
    LayerCountMismatch { expected: usize, found: usize },
    #[error("unsupported sequence file version {0}")]
    UnsupportedVersion(u32),
    #[error("sequence file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed sequence file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Weights of the transformation, replacement and degradation scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LisWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
}

impl Default for LisWeights {
    fn default() -> Self {
        Self {
            alpha1: 0.25,
            alpha2: 0.25,
            beta: 0.5,
        }
    }
}

impl LisWeights {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let all = [self.alpha1, self.alpha2, self.beta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ProfileError::InvalidWeights(format!(
                "weights must be finite and non-negative, got {self:?}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(ProfileError::InvalidWeights("all weights are zero".into()));
        }
        Ok(())
    }

    pub fn combine<S: Scalar>(&self, lts: S, lrs: S, mds: S) -> S {
        S::lit(self.alpha1) * lts + S::lit(self.alpha2) * lrs + S::lit(self.beta) * mds
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    LisGreedy,
    FrontToBack,
    BackToFront,
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    FrontToBack,
    BackToFront,
    Random,
}

/// A prioritized order in which layers are quantized at runtime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapSequence {
    pub version: u32,
    #[serde(rename = "L")]
    pub num_layers: usize,
    pub bits: u32,
    /// Score weights used for a greedy sequence; `None` for baselines.
    pub weights: Option<LisWeights>,
    pub provenance: Provenance,
    pub order: Vec<usize>,
    /// Score of the chosen layer at each greedy step; empty for baselines.
    pub per_step_lis: Vec<f64>,
}

impl SwapSequence {
    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.version != SEQUENCE_FILE_VERSION {
            return Err(ProfileError::UnsupportedVersion(self.version));
        }
        let layers = self.num_layers;
        let not_perm = |reason: String| Err(ProfileError::NotPermutation { layers, reason });
        if self.order.len() != layers {
            return not_perm(format!("order has {} entries", self.order.len()));
        }
        let mut seen = vec![false; layers];
        for &p in &self.order {
            if p >= layers {
                return not_perm(format!("index {p} out of range"));
            }
            if std::mem::replace(&mut seen[p], true) {
                return not_perm(format!("index {p} repeated"));
            }
        }
        if !self.per_step_lis.is_empty() && self.per_step_lis.len() != layers {
            return not_perm(format!(
                "{} per-step scores for {layers} layers",
                self.per_step_lis.len()
            ));
        }
        Ok(())
    }

    /// Checks the sequence against the layer count of the model it drives.
    pub fn bind(&self, num_layers: usize) -> Result<(), ProfileError> {
        self.validate()?;
        if self.num_layers != num_layers {
            return Err(ProfileError::LayerCountMismatch {
                expected: num_layers,
                found: self.num_layers,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sequence serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProfileError> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|source| ProfileError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProfileError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ProfileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let seq: SwapSequence =
            serde_json::from_str(&text).map_err(|source| ProfileError::Json {
                path: path.display().to_string(),
                source,
            })?;
        seq.validate()?;
        Ok(seq)
    }
}

fn precision_for(bits: u32) -> Result<Precision, ProfileError> {
    Precision::from_bits(bits).ok_or(ProfileError::UnsupportedBits(bits))
}

fn mean<S: Scalar>(values: impl Iterator<Item = S>) -> S {
    let (sum, n) = values.fold((S::zero(), 0usize), |(s, n), v| (s + v, n + 1));
    sum / S::lit(n as f64)
}

fn non_empty<S>(batch: &[Vec<S>]) -> Result<(), ProfileError> {
    if batch.is_empty() {
        Err(ProfileError::EmptyBatch)
    } else {
        Ok(())
    }
}

/// Transformation score per layer: mean `cos(h_p(x), x_p)` under the
/// full-precision forward.
pub fn lts<S: Scalar>(model: &ToyModel<S>, batch: &[Vec<S>]) -> Result<Vec<S>, ProfileError> {
    non_empty(batch)?;
    let full = PrecisionConfig::full(model.num_layers());
    let traces = batch
        .iter()
        .map(|x| model.forward(&full, x))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((0..model.num_layers())
        .map(|p| {
            mean(
                traces
                    .iter()
                    .map(|t| cosine(&t.outputs[p], &t.inputs[p]).value),
            )
        })
        .collect())
}

/// Replacement score per layer: mean cosine between layer `p`'s
/// full-precision output and its output with quantized weights, on the same
/// full-precision input.
pub fn lrs<S: Scalar>(
    model: &ToyModel<S>,
    batch: &[Vec<S>],
    bits: u32,
) -> Result<Vec<S>, ProfileError> {
    non_empty(batch)?;
    let precision = precision_for(bits)?;
    let full = PrecisionConfig::full(model.num_layers());
    let traces = batch
        .iter()
        .map(|x| model.forward(&full, x))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((0..model.num_layers())
        .map(|p| {
            let layer = model.layer(p);
            mean(traces.iter().map(|t| {
                let quantized = layer.apply(&t.inputs[p], precision);
                cosine(&t.outputs[p], &quantized).value
            }))
        })
        .collect())
}

fn outputs<S: Scalar>(
    model: &ToyModel<S>,
    cfg: &PrecisionConfig,
    batch: &[Vec<S>],
) -> Result<Vec<Vec<S>>, ProfileError> {
    Ok(batch
        .iter()
        .map(|x| model.output(cfg, x))
        .collect::<Result<_, _>>()?)
}

fn mean_cosine<S: Scalar>(a: &[Vec<S>], b: &[Vec<S>]) -> S {
    mean(a.iter().zip(b).map(|(u, v)| cosine(u, v).value))
}

fn check_layer<S: Scalar>(model: &ToyModel<S>, p: usize) -> Result<(), ProfileError> {
    if p >= model.num_layers() {
        return Err(ProfileError::LayerOutOfRange {
            layer: p,
            layers: model.num_layers(),
        });
    }
    Ok(())
}

/// Degradation score of adding layer `p` to the quantized set `quantized`.
pub fn mds<S: Scalar>(
    model: &ToyModel<S>,
    quantized: &BTreeSet<usize>,
    p: usize,
    batch: &[Vec<S>],
    bits: u32,
) -> Result<S, ProfileError> {
    non_empty(batch)?;
    check_layer(model, p)?;
    for &q in quantized {
        check_layer(model, q)?;
    }
    if quantized.contains(&p) {
        return Err(ProfileError::AlreadyQuantized(p));
    }
    let precision = precision_for(bits)?;
    let l = model.num_layers();
    let base = PrecisionConfig::with_quantized(l, quantized.iter().copied(), precision);
    let mut extended = base.clone();
    extended.set(p, precision);
    Ok(mean_cosine(
        &outputs(model, &base, batch)?,
        &outputs(model, &extended, batch)?,
    ))
}

/// Scores of one candidate during one greedy round.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore<S> {
    pub layer: usize,
    pub mds: S,
    pub lis: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyRound<S> {
    pub candidates: Vec<CandidateScore<S>>,
    pub chosen: usize,
}

/// All scores computed while profiling.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityScores<S> {
    pub weights: LisWeights,
    pub lts: Vec<S>,
    pub lrs: Vec<S>,
    pub rounds: Vec<GreedyRound<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyProfile<S> {
    pub sequence: SwapSequence,
    pub scores: SensitivityScores<S>,
}

/// Greedy construction of the swap order.
///
/// Transformation and replacement scores are computed once; each round then
/// scores every unquantized layer against the current quantized set and
/// quantizes the highest-scoring one (lowest index on ties).
pub fn profile_greedy<S: Scalar>(
    model: &ToyModel<S>,
    batch: &[Vec<S>],
    weights: LisWeights,
    bits: u32,
) -> Result<GreedyProfile<S>, ProfileError> {
    weights.validate()?;
    let precision = precision_for(bits)?;
    let lts = lts(model, batch)?;
    let lrs = lrs(model, batch, bits)?;
    let l = model.num_layers();

    let mut config = PrecisionConfig::full(l);
    let mut order = Vec::with_capacity(l);
    let mut per_step = Vec::with_capacity(l);
    let mut rounds = Vec::with_capacity(l);
    for _ in 0..l {
        let base = outputs(model, &config, batch)?;
        let mut candidates = Vec::new();
        for j in (0..l).filter(|&j| !config.is_quantized(j)) {
            let mut trial = config.clone();
            trial.set(j, precision);
            let mds = mean_cosine(&base, &outputs(model, &trial, batch)?);
            candidates.push(CandidateScore {
                layer: j,
                mds,
                lis: weights.combine(lts[j], lrs[j], mds),
            });
        }
        // strict comparison keeps the lowest index among equal scores
        let best = candidates
            .iter()
            .fold(None::<&CandidateScore<S>>, |acc, c| match acc {
                Some(b) if b.lis >= c.lis => Some(b),
                _ => Some(c),
            })
            .expect("at least one unquantized layer remains");
        let chosen = best.layer;
        per_step.push(best.lis.as_f64());
        order.push(chosen);
        config.set(chosen, precision);
        rounds.push(GreedyRound { candidates, chosen });
    }

    Ok(GreedyProfile {
        sequence: SwapSequence {
            version: SEQUENCE_FILE_VERSION,
            num_layers: l,
            bits,
            weights: Some(weights),
            provenance: Provenance::LisGreedy,
            order,
            per_step_lis: per_step,
        },
        scores: SensitivityScores {
            weights,
            lts,
            lrs,
            rounds,
        },
    })
}

pub fn greedy_sequence<S: Scalar>(
    model: &ToyModel<S>,
    batch: &[Vec<S>],
    weights: LisWeights,
    bits: u32,
) -> Result<SwapSequence, ProfileError> {
    profile_greedy(model, batch, weights, bits).map(|p| p.sequence)
}

/// Reference orderings: input-to-output, output-to-input, seeded shuffle.
pub fn baseline_sequence(
    kind: BaselineKind,
    num_layers: usize,
    seed: u64,
    bits: u32,
) -> SwapSequence {
    let (order, provenance) = match kind {
        BaselineKind::FrontToBack => ((0..num_layers).collect(), Provenance::FrontToBack),
        BaselineKind::BackToFront => ((0..num_layers).rev().collect(), Provenance::BackToFront),
        BaselineKind::Random => {
            let mut order: Vec<usize> = (0..num_layers).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            (order, Provenance::Random(seed))
        }
    };
    SwapSequence {
        version: SEQUENCE_FILE_VERSION,
        num_layers,
        bits,
        weights: None,
        provenance,
        order,
        per_step_lis: Vec::new(),
    }
}

/// Output degradation `1 - mean cos(f(x), f^(first k of seq)(x))` for every
/// depth `k = 0..=L`. Depth 0 is exactly zero.
pub fn evaluate_sequence<S: Scalar>(
    model: &ToyModel<S>,
    seq: &SwapSequence,
    batch: &[Vec<S>],
    bits: u32,
) -> Result<Vec<S>, ProfileError> {
    non_empty(batch)?;
    seq.bind(model.num_layers())?;
    let precision = precision_for(bits)?;
    let l = model.num_layers();
    let mut config = PrecisionConfig::full(l);
    let reference = outputs(model, &config, batch)?;
    let mut curve = Vec::with_capacity(l + 1);
    curve.push(S::zero());
    for &p in &seq.order {
        config.set(p, precision);
        let out = outputs(model, &config, batch)?;
        curve.push(S::one() - mean_cosine(&reference, &out));
    }
    Ok(curve)
}

/// Sum of the degradation curve over all depths.
pub fn cumulative_degradation<S: Scalar>(curve: &[S]) -> S {
    curve.iter().copied().sum()
}
