//! Encoder-only transformer classifier.
//!
//! Input windows `[B × W × 9]` are linearly projected, a learnable CLS token
//! is prepended, positional encodings are added, and the sequence passes
//! through post-norm encoder layers. The CLS output feeds a linear head.

mod checkpoint;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use std::fmt;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::{batch_features, WindowSample, FEATURES};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input shape {got:?} does not match expected [B, {window}, {d_in}]")]
    InputShape {
        got: Vec<usize>,
        window: usize,
        d_in: usize,
    },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionalEncoding {
    /// Fixed sin/cos table, no parameters.
    Sinusoidal,
    /// Trainable `[(W+1) × d_model]` table.
    Learned,
}

impl PositionalEncoding {
    fn code(self) -> u8 {
        match self {
            PositionalEncoding::Sinusoidal => 0,
            PositionalEncoding::Learned => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PositionalEncoding::Sinusoidal),
            1 => Some(PositionalEncoding::Learned),
            _ => None,
        }
    }
}

impl std::str::FromStr for PositionalEncoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sinusoidal" | "fixed" => Ok(PositionalEncoding::Sinusoidal),
            "learned" => Ok(PositionalEncoding::Learned),
            other => Err(format!("unknown positional encoding `{other}`")),
        }
    }
}

impl fmt::Display for PositionalEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionalEncoding::Sinusoidal => "sinusoidal",
            PositionalEncoding::Learned => "learned",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub window: usize,
    pub n_classes: usize,
    pub positional: PositionalEncoding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: FEATURES,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ff: 256,
            dropout: 0.15,
            window: 10,
            n_classes: 4,
            positional: PositionalEncoding::Sinusoidal,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_in == 0 || self.d_model == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return fail(format!("dimensions must be positive: {self:?}"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.window == 0 {
            return fail("window must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Sequence length including the CLS token.
    pub fn seq_len(&self) -> usize {
        self.window + 1
    }

    /// Names and shapes of every trainable tensor in forward order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("input.weight".to_string(), vec![self.d_in, d]),
            ("input.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![d]),
        ];
        if self.positional == PositionalEncoding::Learned {
            out.push(("pos_embedding".to_string(), vec![self.seq_len(), d]));
        }
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("attn.q.weight"), vec![d, d]),
                (p("attn.q.bias"), vec![d]),
                (p("attn.k.weight"), vec![d, d]),
                (p("attn.k.bias"), vec![d]),
                (p("attn.v.weight"), vec![d, d]),
                (p("attn.v.bias"), vec![d]),
                (p("attn.out.weight"), vec![d, d]),
                (p("attn.out.bias"), vec![d]),
                (p("norm1.gamma"), vec![d]),
                (p("norm1.beta"), vec![d]),
                (p("ffn.w1"), vec![d, f]),
                (p("ffn.b1"), vec![f]),
                (p("ffn.w2"), vec![f, d]),
                (p("ffn.b2"), vec![d]),
                (p("norm2.gamma"), vec![d]),
                (p("norm2.beta"), vec![d]),
            ]);
        }
        out.push(("head.weight".to_string(), vec![d, self.n_classes]));
        out.push(("head.bias".to_string(), vec![self.n_classes]));
        out
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let (d, f, c) = (self.d_model, self.d_ff, self.n_classes);
        let embed = self.d_in * d + d + d;
        let pos = match self.positional {
            PositionalEncoding::Sinusoidal => 0,
            PositionalEncoding::Learned => self.seq_len() * d,
        };
        let attention = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let norms = 2 * 2 * d;
        embed + pos + self.n_layers * (attention + ffn + norms) + d * c + c
    }

    /// Raw weight bytes at 4 bytes per parameter.
    pub fn size_bytes(&self) -> usize {
        4 * self.param_count()
    }
}

/// Named weight tensors in [`ModelConfig::param_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Uniform ±√(1/fan_in) weights, zero biases, unit norms, N(0, 0.02)
    /// CLS token and learned positions.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let small = Normal::new(0.0, 0.02).expect("valid normal");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in cfg.param_shapes() {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = if name == "cls_token" || name == "pos_embedding" {
                (0..n).map(|_| small.sample(rng)).collect()
            } else if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if shape.len() == 2 {
                let bound = (1.0 / shape[0] as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            } else {
                vec![0.0; n]
            };
            tensors.push(Tensor::from_f64(&shape, &values)?);
            names.push(name);
        }
        Ok(Self { names, tensors })
    }

    /// Builds params from named tensors, checking them against `cfg`.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        let expected = cfg.param_shapes();
        if named.len() != expected.len() {
            return Err(ModelError::Config(format!(
                "expected {} tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (ename, eshape)) in named.into_iter().zip(expected) {
            if name != ename || t.shape() != eshape.as_slice() {
                return Err(ModelError::Config(format!(
                    "tensor `{name}` {:?} does not match expected `{ename}` {eshape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Sum of instantiated tensor sizes.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn same_shapes<U: Scalar>(&self, other: &ModelParams<U>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Euclidean distance over all parameters.
    pub fn distance(&self, other: &ModelParams<T>) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Fixed sinusoidal table `[len × d]`: even columns sin, odd columns cos.
pub fn sinusoidal_table<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for j in 0..d {
            let pair = (j / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            data.push(T::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("consistent table")
}

/// Forward-pass mode. Training draws dropout masks from the given RNG.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Eval,
}

/// Graph handles produced by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Parameter leaves in [`ModelParams`] order.
    pub params: Vec<Var>,
    /// Final encoder output `[B × (W+1) × d_model]`.
    pub encoder_out: Var,
    /// `[B × n_classes]`
    pub logits: Var,
}

/// Records the forward pass on `graph`. Parameters become leaves that
/// require gradients iff `track_grads`.
pub fn forward<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: Tensor<T>,
    mut mode: Mode<'_>,
    track_grads: bool,
) -> Result<ForwardTrace, ModelError> {
    let shape = input.shape().to_vec();
    if shape.len() != 3 || shape[1] != cfg.window || shape[2] != cfg.d_in {
        return Err(ModelError::InputShape {
            got: shape,
            window: cfg.window,
            d_in: cfg.d_in,
        });
    }
    let (b, w) = (shape[0], shape[1]);
    let (d, heads, dk, seq) = (cfg.d_model, cfg.n_heads, cfg.d_k(), cfg.seq_len());

    let vars: Vec<Var> = params
        .tensors
        .iter()
        .map(|t| graph.leaf(t.clone(), track_grads))
        .collect();
    let mut next = vars.iter().copied();
    let mut take = || next.next().expect("parameter layout matches config");

    let mut dropout = |g: &mut Graph<T>, x: Var| -> Result<Var, TensorError> {
        match &mut mode {
            Mode::Train(rng) => g.dropout(x, cfg.dropout, true, &mut **rng),
            Mode::Eval => Ok(x),
        }
    };

    let x = graph.constant(input);
    let x = graph.reshape(x, &[b * w, cfg.d_in])?;
    let (w_in, b_in) = (take(), take());
    let h = graph.matmul(x, w_in)?;
    let h = graph.add_broadcast(h, b_in)?;
    let h = graph.reshape(h, &[b, w, d])?;

    let cls = take();
    let cls = graph.expand(cls, b)?;
    let cls = graph.reshape(cls, &[b, 1, d])?;
    let mut z = graph.concat(&[cls, h], 1)?;

    let pos = match cfg.positional {
        PositionalEncoding::Sinusoidal => graph.constant(sinusoidal_table(seq, d)),
        PositionalEncoding::Learned => take(),
    };
    z = graph.add_broadcast(z, pos)?;
    z = dropout(graph, z)?;

    let inv_sqrt_dk = T::from_f64(1.0 / (dk as f64).sqrt());
    for _ in 0..cfg.n_layers {
        let z2 = graph.reshape(z, &[b * seq, d])?;
        let heads_of = |g: &mut Graph<T>, weight: Var, bias: Var| -> Result<Var, TensorError> {
            let p = g.matmul(z2, weight)?;
            let p = g.add_broadcast(p, bias)?;
            let p = g.reshape(p, &[b, seq, heads, dk])?;
            let p = g.permute(p, &[0, 2, 1, 3])?;
            g.reshape(p, &[b * heads, seq, dk])
        };
        let (wq, bq) = (take(), take());
        let q = heads_of(graph, wq, bq)?;
        let (wk, bk) = (take(), take());
        let k = heads_of(graph, wk, bk)?;
        let (wv, bv) = (take(), take());
        let v = heads_of(graph, wv, bv)?;

        let scores = graph.bmm_nt(q, k)?;
        let scores = graph.scale(scores, inv_sqrt_dk);
        let attn = graph.softmax_lastdim(scores);
        let a = graph.bmm(attn, v)?;
        let a = graph.reshape(a, &[b, heads, seq, dk])?;
        let a = graph.permute(a, &[0, 2, 1, 3])?;
        let a = graph.reshape(a, &[b * seq, d])?;
        let (wo, bo) = (take(), take());
        let a = graph.matmul(a, wo)?;
        let a = graph.add_broadcast(a, bo)?;
        let a = dropout(graph, a)?;

        let (g1, be1) = (take(), take());
        let res = graph.add(z2, a)?;
        let u = graph.layer_norm(res, g1, be1, LAYER_NORM_EPS)?;

        let (w1, b1, w2, b2) = (take(), take(), take(), take());
        let f = graph.matmul(u, w1)?;
        let f = graph.add_broadcast(f, b1)?;
        let f = graph.relu(f);
        let f = graph.matmul(f, w2)?;
        let f = graph.add_broadcast(f, b2)?;
        let f = dropout(graph, f)?;

        let (g2, be2) = (take(), take());
        let res = graph.add(u, f)?;
        let e = graph.layer_norm(res, g2, be2, LAYER_NORM_EPS)?;
        z = graph.reshape(e, &[b, seq, d])?;
    }

    let cls_out = graph.slice(z, 1, 0, 1)?;
    let cls_out = graph.reshape(cls_out, &[b, d])?;
    let (w_out, b_out) = (take(), take());
    let logits = graph.matmul(cls_out, w_out)?;
    let logits = graph.add_broadcast(logits, b_out)?;

    Ok(ForwardTrace {
        params: vars,
        encoder_out: z,
        logits,
    })
}

/// Eval-mode logits `[B × n_classes]`.
pub fn logits<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: Tensor<T>,
) -> Result<Tensor<T>, ModelError> {
    let mut graph = Graph::new();
    let trace = forward(&mut graph, params, cfg, input, Mode::Eval, false)?;
    Ok(graph.value(trace.logits).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub classes: Vec<usize>,
    /// `[B × n_classes]` softmax probabilities.
    pub probs: Tensor<T>,
}

/// Row-wise softmax and argmax (lowest index wins ties).
pub fn classify<T: Scalar>(logits: &Tensor<T>) -> Prediction<T> {
    let c = *logits.shape().last().expect("rank 2 logits");
    let mut probs = logits.clone();
    let mut classes = Vec::with_capacity(logits.len() / c);
    for row in probs.data_mut().chunks_exact_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for e in row.iter_mut() {
            *e = (*e - max).exp();
            sum += *e;
        }
        let mut best = 0;
        for j in 0..c {
            row[j] = row[j] / sum;
            if row[j] > row[best] {
                best = j;
            }
        }
        classes.push(best);
    }
    Prediction { classes, probs }
}

pub fn predict<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: Tensor<T>,
) -> Result<Prediction<T>, ModelError> {
    Ok(classify(&logits(params, cfg, input)?))
}

/// Predicted class per window, evaluated in chunks of `batch_size`.
pub fn predict_windows(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    windows: &[WindowSample],
    batch_size: usize,
) -> Result<Vec<usize>, ModelError> {
    let indices: Vec<usize> = (0..windows.len()).collect();
    let mut out = Vec::with_capacity(windows.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let input = batch_features(windows, chunk);
        out.extend(predict(params, cfg, input)?.classes);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            window: 4,
            n_classes: 3,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn random_input<T: Scalar>(rng: &mut ChaCha8Rng, b: usize, cfg: &ModelConfig) -> Tensor<T> {
        let n = b * cfg.window * cfg.d_in;
        let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        Tensor::from_f64(&[b, cfg.window, cfg.d_in], &v).unwrap()
    }

    #[test]
    fn default_param_count_matches_enumeration() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.param_count(), 640 + 64 + 2 * (16640 + 33088 + 256) + 260);
        assert_eq!(cfg.param_count(), 100_932);
        let p = ModelParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.total_len(), cfg.param_count());
        assert_eq!(cfg.size_bytes(), 403_728);

        let learned = ModelConfig {
            positional: PositionalEncoding::Learned,
            n_classes: 5,
            ..cfg
        };
        let p = ModelParams::<f32>::init(&learned, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.total_len(), learned.param_count());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            n_classes: 1,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            window: 0,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert_eq!(ModelConfig::default().d_k(), 32);
    }

    #[test]
    fn output_shape_and_input_checks() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
        let out = logits(&p, &cfg, random_input(&mut rng, 128, &cfg)).unwrap();
        assert_eq!(out.shape(), &[128, 4]);
        assert!(out.is_finite());

        let bad = Tensor::<f32>::zeros(&[2, 9, 9]);
        assert!(matches!(logits(&p, &cfg, bad), Err(ModelError::InputShape { .. })));
        let bad = Tensor::<f32>::zeros(&[2, 10, 8]);
        assert!(matches!(logits(&p, &cfg, bad), Err(ModelError::InputShape { .. })));
    }

    #[test]
    fn eval_is_deterministic_and_train_is_stochastic() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
        let x: Tensor<f32> = random_input(&mut rng, 4, &cfg);
        assert_eq!(
            logits(&p, &cfg, x.clone()).unwrap(),
            logits(&p, &cfg, x.clone()).unwrap()
        );

        let mut g = Graph::new();
        let t = forward(&mut g, &p, &cfg, x.clone(), Mode::Train(&mut rng), false).unwrap();
        assert_ne!(g.value(t.logits), &logits(&p, &cfg, x).unwrap());
    }

    #[test]
    fn token_permutation_changes_logits() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let x: Tensor<f64> = random_input(&mut rng, 1, &cfg);
        let base = logits(&p, &cfg, x.clone()).unwrap();
        // swap tokens 0 and 1
        let mut swapped = x.clone();
        let d = swapped.data_mut();
        for j in 0..9 {
            d.swap(j, 9 + j);
        }
        assert_ne!(logits(&p, &cfg, swapped).unwrap(), base);
        assert_eq!(logits(&p, &cfg, x).unwrap(), base);
    }

    #[test]
    fn head_reads_only_cls_position() {
        let cfg = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let t = forward(&mut g, &p, &cfg, random_input(&mut rng, 3, &cfg), Mode::Eval, true).unwrap();
        let s = g.sum(t.logits);
        g.backward(s).unwrap();
        let grad = g.grad(t.encoder_out).unwrap();
        let (seq, d) = (cfg.seq_len(), cfg.d_model);
        for b in 0..3 {
            let sample = &grad[b * seq * d..(b + 1) * seq * d];
            assert!(sample[..d].iter().any(|&v| v != 0.0));
            assert!(sample[d..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let t = forward(&mut g, &p, &cfg, random_input(&mut rng, 8, &cfg), Mode::Eval, true).unwrap();
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        let loss = g.focal_loss(t.logits, &labels, &[1.0; 4], 2.0).unwrap();
        g.backward(loss).unwrap();
        for (name, &v) in p.names().iter().zip(&t.params) {
            let norm: f32 = g.grad(v).unwrap().iter().map(|x| x * x).sum();
            assert!(norm > 0.0, "{name} has zero gradient");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let input: Tensor<f64> = random_input(&mut rng, 3, &cfg);
        let labels = [0, 2, 1];
        let alpha = [0.7, 1.1, 1.2];
        let loss_of = |p: &ModelParams<f64>| {
            let mut g = Graph::new();
            let t = forward(&mut g, p, &cfg, input.clone(), Mode::Eval, false).unwrap();
            let l = g.focal_loss(t.logits, &labels, &alpha, 2.0).unwrap();
            g.value(l).data()[0]
        };

        let mut g = Graph::new();
        let t = forward(&mut g, &params, &cfg, input.clone(), Mode::Eval, true).unwrap();
        let l = g.focal_loss(t.logits, &labels, &alpha, 2.0).unwrap();
        g.backward(l).unwrap();

        let h = 1e-6;
        for (ti, &var) in t.params.iter().enumerate() {
            let analytic = g.grad(var).unwrap().to_vec();
            let n = analytic.len();
            for k in [0, n / 2, n - 1] {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].data_mut()[k] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].data_mut()[k] -= h;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let err = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(1e-4);
                assert!(
                    err < 1e-5,
                    "{} [{k}]: numeric {numeric} analytic {}",
                    params.names()[ti],
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn attention_work_scales_quadratically_in_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let count = |window: usize, rng: &mut ChaCha8Rng| {
            let cfg = ModelConfig {
                window,
                ..ModelConfig::default()
            };
            let p = ModelParams::<f32>::init(&cfg, rng).unwrap();
            let mut g = Graph::new();
            forward(&mut g, &p, &cfg, random_input(rng, 2, &cfg), Mode::Eval, false).unwrap();
            let c = g.counters();
            let per_layer = (2 * cfg.n_heads * cfg.seq_len() * cfg.seq_len() * cfg.d_k()) as u64;
            assert_eq!(c.score_macs, per_layer * cfg.n_layers as u64);
            c.score_macs
        };
        // sequence lengths 11 and 22 (CLS included)
        let s1 = count(10, &mut rng);
        let s2 = count(21, &mut rng);
        assert_eq!(s2, 4 * s1);
    }

    #[test]
    fn predict_examples() {
        let t = Tensor::<f64>::from_f64(&[3, 4], &[0., 0., 0., 0., 10., 0., 0., 0., 1., 3., 3., 2.]).unwrap();
        let p = classify(&t);
        assert_eq!(p.classes, vec![0, 0, 1]);
        assert!(p.probs.data()[..4].iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert!(p.probs.data()[4] > 0.9998);
        for row in p.probs.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let shifted = Tensor::<f64>::from_f64(&[3, 4], &t.data().iter().map(|v| v + 7.5).collect::<Vec<_>>()).unwrap();
        assert_eq!(classify(&shifted).classes, p.classes);
    }

    #[test]
    fn sinusoidal_table_values() {
        let t = sinusoidal_table::<f64>(3, 4);
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 1]), 1.0);
        assert!((t.at(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!((t.at(&[1, 3]) - (1.0 / 100.0f64).cos()).abs() < 1e-15);
    }
}
