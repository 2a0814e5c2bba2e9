//! Minimal neural-network substrate with hand-written backpropagation.
//!
//! Parameters live in a [`ParameterSet`] addressed by [`ParamId`]; layers
//! hold ids, run forward passes that return explicit caches, and accumulate
//! into a [`Gradients`] buffer shaped like the parameter set. Everything is
//! `f64` and single-threaded so results are bit-reproducible for a seed.

mod gradcheck;
mod io;
mod layers;
pub(crate) mod ops;
mod train;

pub use gradcheck::{finite_difference_check, Evaluation, GradCheckReport, FD_STEP};
pub use io::{read_model_file, write_model_file, ModelFile, MODEL_MAGIC};
pub use layers::{
    Attention, AttentionCache, BiGru, BiGruRun, CnnCache, CnnEncoder, EncoderCache, EncoderKind,
    Embedding, GruCache, GruCell, Linear, SentenceEncoder,
};
pub use train::{fit, EpochRecord, FitLog};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-width of the uniform initialisation range.
pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input sequence")]
    EmptySequence,
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of columns of a matrix (last dimension).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

/// Uniform `[-0.1, 0.1]` tensor, deterministic in `seed`.
pub fn init_uniform(shape: &[usize], seed: u64) -> Tensor {
    init_uniform_with(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn init_uniform_with<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE)).collect();
    Tensor { shape: shape.to_vec(), data }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters with their Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet {
            names: Vec::new(),
            values: Vec::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(self.id(name).is_none(), "duplicate parameter `{name}`");
        self.names.push(name.to_string());
        self.first_moment.push(Tensor::zeros(value.shape()));
        self.second_moment.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], rng: &mut R) -> ParamId {
        self.add(name, init_uniform_with(shape, rng))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.values.iter().map(|t| Tensor::zeros(t.shape())).collect())
    }

    /// Overwrites the value of `name`, keeping its shape.
    pub fn load(&mut self, name: &str, value: Tensor) -> Result<(), NnError> {
        let id = self
            .id(name)
            .ok_or_else(|| NnError::Format(format!("unexpected parameter `{name}`")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "`{}` expects {:?}, file has {:?}",
                name,
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Gradient buffer aligned with a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(Vec<Tensor>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.0[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.0
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.0 {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn clear(&mut self) {
        self.0.iter_mut().for_each(|t| t.fill(0.0));
    }
}

/// Rescales `grads` so their global L2 norm is at most `clip`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, clip: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip && norm > 0.0 {
        grads.scale(clip / norm);
    }
    norm
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, NnError> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFiniteInput);
    }
    let mut out = logits.to_vec();
    ops::softmax_in_place(&mut out);
    Ok(out)
}

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-300;

/// Negative log-likelihood of `gold` under `probs`.
pub fn cross_entropy(probs: &[f64], gold: usize) -> f64 {
    -probs[gold].max(PROB_FLOOR).ln()
}

/// Gradient of `cross_entropy(softmax(logits), gold)` w.r.t. the logits,
/// given the softmax output.
pub fn softmax_cross_entropy_grad(probs: &[f64], gold: usize) -> Vec<f64> {
    let mut d = probs.to_vec();
    d[gold] -= 1.0;
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParameterSet, grads: &Gradients, cfg: &AdamConfig) -> Result<(), NnError> {
    if grads.0.len() != params.values.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} gradient tensors for {} parameters",
            grads.0.len(),
            params.values.len()
        )));
    }
    for (i, g) in grads.0.iter().enumerate() {
        if g.shape() != params.values[i].shape() {
            return Err(NnError::ShapeMismatch(format!(
                "gradient for `{}` has shape {:?}, parameter {:?}",
                params.names[i],
                g.shape(),
                params.values[i].shape()
            )));
        }
    }
    params.step += 1;
    let t = params.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.values.len() {
        let g = grads.0[i].data();
        let m = params.first_moment[i].data_mut();
        for (m, g) in m.iter_mut().zip(g) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        }
        let v = params.second_moment[i].data_mut();
        for (v, g) in v.iter_mut().zip(g) {
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        }
        let m = params.first_moment[i].data();
        let v = params.second_moment[i].data();
        let w = params.values[i].data_mut();
        for ((w, m), v) in w.iter_mut().zip(m).zip(v) {
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Training hyper-parameters shared by every model in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Sentence-vector size; also the level-1 embedding size.
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global-norm gradient clipping threshold.
    pub clip: f64,
    pub seed: u64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    pub cnn_widths: Vec<usize>,
    pub cnn_filters: usize,
    /// Attention hidden size for sequence models.
    pub attention_dim: usize,
    /// Most frequent non-reserved tokens kept in the vocabulary.
    pub vocab_cap: usize,
}

/// Missing fields in a deserialized config take their [`TrainConfig::desk`]
/// values.
impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Settings used for full-size runs.
    pub fn full_scale() -> Self {
        TrainConfig {
            hidden_dim: 1024,
            embed_dim: 1024,
            batch_size: 128,
            learning_rate: 1e-4,
            clip: 5.0,
            seed: 1,
            max_epochs: 20,
            patience: 3,
            validation_fraction: 0.1,
            cnn_widths: vec![1, 2, 3],
            cnn_filters: 1024,
            attention_dim: 1024,
            vocab_cap: 50_000,
        }
    }

    /// Small settings that train in seconds on one core.
    pub fn desk() -> Self {
        TrainConfig {
            hidden_dim: 64,
            embed_dim: 32,
            batch_size: 32,
            learning_rate: 5e-3,
            clip: 5.0,
            seed: 1,
            max_epochs: 30,
            patience: 3,
            validation_fraction: 0.1,
            cnn_widths: vec![1, 2, 3],
            cnn_filters: 32,
            attention_dim: 32,
            vocab_cap: 50_000,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("cnn_filters", self.cnn_filters),
            ("attention_dim", self.attention_dim),
            ("vocab_cap", self.vocab_cap),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(NnError::InvalidConfig(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0) || !(self.clip > 0.0) {
            return Err(NnError::InvalidConfig("learning_rate and clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(NnError::InvalidConfig("validation_fraction must lie in [0, 1)".into()));
        }
        if self.cnn_widths.is_empty() || self.cnn_widths.contains(&0) {
            return Err(NnError::InvalidConfig("cnn_widths must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_learning_rate(self.learning_rate)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}
