//! Post-LN transformer encoder with a `[CLS]` classifier head.
//!
//! A forward pass exposes every hidden layer (layer 0 is the embedding output)
//! and every attention distribution, which is what the distillation code consumes.

mod checkpoint;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use train::{accuracy, predict, train_classifier, ClassifierSchedule, TrainHistory};

pub const PAD_TOKEN: u32 = 0;
pub const CLS_TOKEN: u32 = 1;
pub const SEP_TOKEN: u32 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_segments: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_layers > 0, "num_layers must be positive");
        ensure!(self.hidden_dim >= 2, "hidden_dim must be at least 2");
        ensure!(self.num_heads > 0, "num_heads must be positive");
        ensure!(
            self.hidden_dim.is_multiple_of(self.num_heads),
            "hidden_dim {} is not divisible by num_heads {}",
            self.hidden_dim,
            self.num_heads
        );
        ensure!(self.ffn_dim > 0, "ffn_dim must be positive");
        ensure!(self.vocab_size > SEP_TOKEN as usize, "vocab_size must leave room for special tokens");
        ensure!(self.max_seq_len > 0, "max_seq_len must be positive");
        ensure!(self.num_segments >= 1, "num_segments must be at least 1");
        ensure!(self.num_classes >= 2, "num_classes must be at least 2");
        ensure!((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)");
        Ok(())
    }

    /// Multiply-accumulate count of one forward pass over a sequence of `seq_len` tokens.
    pub fn forward_macs(&self, seq_len: usize) -> u64 {
        let (t, d, f) = (seq_len as u64, self.hidden_dim as u64, self.ffn_dim as u64);
        let per_layer = 4 * t * d * d + 2 * t * t * d + 2 * t * d * f;
        self.num_layers as u64 * per_layer + d * self.num_classes as u64
    }
}

/// Role of a position in the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mark {
    Cls,
    Sep,
    Ordinary,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub marks: Vec<Mark>,
}

impl TokenSequence {
    /// `[CLS] tokens`
    pub fn single(tokens: &[u32]) -> Self {
        let mut token_ids = vec![CLS_TOKEN];
        token_ids.extend_from_slice(tokens);
        let n = token_ids.len();
        let mut marks = vec![Mark::Ordinary; n];
        marks[0] = Mark::Cls;
        Self { token_ids, segment_ids: vec![0; n], marks }
    }

    /// `[CLS] a [SEP] b [SEP]` with segment 0 up to and including the first `[SEP]`.
    pub fn pair(a: &[u32], b: &[u32]) -> Self {
        let mut token_ids = vec![CLS_TOKEN];
        token_ids.extend_from_slice(a);
        token_ids.push(SEP_TOKEN);
        let first = token_ids.len();
        token_ids.extend_from_slice(b);
        token_ids.push(SEP_TOKEN);
        let n = token_ids.len();
        let marks = token_ids
            .iter()
            .enumerate()
            .map(|(i, &t)| match (i, t) {
                (0, _) => Mark::Cls,
                (_, SEP_TOKEN) => Mark::Sep,
                _ => Mark::Ordinary,
            })
            .collect();
        let segment_ids = (0..n).map(|i| u8::from(i >= first)).collect();
        Self { token_ids, segment_ids, marks }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn sep_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.marks.iter().enumerate().filter(|(_, &m)| m == Mark::Sep).map(|(i, _)| i)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n = self.token_ids.len();
        if n == 0 || n > config.max_seq_len {
            return Err(Error::Input(format!("sequence length {n} outside [1, {}]", config.max_seq_len)));
        }
        if self.segment_ids.len() != n || self.marks.len() != n {
            return Err(Error::Input("token, segment and mark lengths differ".into()));
        }
        if self.marks[0] != Mark::Cls {
            return Err(Error::Input("position 0 must be [CLS]".into()));
        }
        if let Some(t) = self.token_ids.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::Input(format!("token id {t} outside vocabulary of {}", config.vocab_size)));
        }
        if let Some(s) = self.segment_ids.iter().find(|&&s| s as usize >= config.num_segments) {
            return Err(Error::Input(format!("segment id {s} outside {} segments", config.num_segments)));
        }
        if self.segment_ids.iter().any(|&s| s > 0) && self.sep_positions().next().is_none() {
            return Err(Error::Input("segmented sequence without [SEP]".into()));
        }
        Ok(())
    }
}

/// Hidden states, attention maps and logits of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T = f32> {
    /// `L+1` tensors of shape `|x|×d`; index 0 is the embedding output.
    pub hidden: Vec<Tensor<T>>,
    /// `[layer][head]` tensors of shape `|x|×|x|`.
    pub attentions: Vec<Vec<Tensor<T>>>,
    pub logits: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn num_layers(&self) -> usize {
        self.attentions.len()
    }

    pub fn seq_len(&self) -> usize {
        self.hidden[0].shape()[0]
    }
}

/// Graph handles produced by [`Transformer::forward_graph`].
#[derive(Clone, Debug)]
pub struct BatchForward {
    pub hidden: Vec<Var>,
    /// Attention-op outputs; their cached probabilities are the attention maps.
    pub attention: Vec<Var>,
    pub logits: Var,
    pub batch: usize,
    pub seq: usize,
}

impl BatchForward {
    pub fn trace<T: Scalar>(&self, g: &Graph<T>, b: usize) -> ForwardTrace<T> {
        let d = g.shape(self.hidden[0])[1];
        let (t, n) = (self.seq, self.batch);
        let hidden = self
            .hidden
            .iter()
            .map(|&h| Tensor::new(vec![t, d], g.value(h)[b * t * d..(b + 1) * t * d].to_vec()).unwrap())
            .collect();
        let attentions = self
            .attention
            .iter()
            .map(|&a| {
                let probs = g.attention_probs(a).expect("attention node");
                let heads = probs.len() / (n * t * t);
                (0..heads)
                    .map(|h| {
                        let off = (b * heads + h) * t * t;
                        Tensor::new(vec![t, t], probs[off..off + t * t].to_vec()).unwrap()
                    })
                    .collect()
            })
            .collect();
        let c = g.shape(self.logits)[1];
        let logits = g.value(self.logits)[b * c..(b + 1) * c].to_vec();
        ForwardTrace { hidden, attentions, logits }
    }
}

/// How parameters enter the graph.
#[derive(Clone, Copy, Debug)]
pub enum ParamMode {
    /// Tracked, with gradient ids starting at the given base.
    Trainable(usize),
    Frozen,
}

/// Seeded inverted-dropout masks; one generator per training step.
#[derive(Debug)]
pub struct Dropout {
    pub rate: f32,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f32, seed: u64, step: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        Self { rate, rng }
    }

    fn mask<T: Scalar>(&mut self, n: usize) -> Vec<T> {
        use rand::Rng;
        let keep = T::from_f64_lossy(1.0 / (1.0 - self.rate as f64));
        (0..n).map(|_| if self.rng.random::<f32>() < self.rate { T::zero() } else { keep }).collect()
    }
}

const PER_LAYER: usize = 16;
const LAYER_NAMES: [&str; PER_LAYER] = [
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.out.weight",
    "attn.out.bias",
    "attn.norm.gain",
    "attn.norm.bias",
    "ffn.in.weight",
    "ffn.in.bias",
    "ffn.out.weight",
    "ffn.out.bias",
    "ffn.norm.gain",
    "ffn.norm.bias",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T = f32> {
    config: ModelConfig,
    params: Vec<Tensor<T>>,
}

/// Truncated normal (±2σ) initialization with σ = 0.02.
fn init_weight(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let normal = Normal::new(0.0f32, 0.02).unwrap();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = normal.sample(rng);
            if v.abs() <= 0.04 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl Transformer<f32> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (config.hidden_dim, config.ffn_dim);
        let mut params = vec![
            init_weight(&[config.vocab_size, d], &mut rng),
            init_weight(&[config.max_seq_len, d], &mut rng),
            init_weight(&[config.num_segments, d], &mut rng),
        ];
        for _ in 0..config.num_layers {
            for _ in 0..4 {
                params.push(init_weight(&[d, d], &mut rng));
                params.push(Tensor::zeros(&[d]));
            }
            params.push(Tensor::full(&[d], 1.0));
            params.push(Tensor::zeros(&[d]));
            params.push(init_weight(&[d, f], &mut rng));
            params.push(Tensor::zeros(&[f]));
            params.push(init_weight(&[f, d], &mut rng));
            params.push(Tensor::zeros(&[d]));
            params.push(Tensor::full(&[d], 1.0));
            params.push(Tensor::zeros(&[d]));
        }
        params.push(init_weight(&[d, config.num_classes], &mut rng));
        params.push(Tensor::zeros(&[config.num_classes]));
        Ok(Self { config, params })
    }
}

impl<T: Scalar> Transformer<T> {
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = Self::param_specs(&config);
        ensure!(params.len() == expected.len(), "expected {} tensors, got {}", expected.len(), params.len());
        for ((name, shape), t) in expected.iter().zip(&params) {
            ensure!(t.shape() == shape.as_slice(), "{name} has shape {:?}, expected {shape:?}", t.shape());
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer { config: self.config.clone(), params: self.params.iter().map(Tensor::cast).collect() }
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub(crate) fn param_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (config.hidden_dim, config.ffn_dim);
        let mut specs = vec![
            ("embed.token".to_string(), vec![config.vocab_size, d]),
            ("embed.position".to_string(), vec![config.max_seq_len, d]),
            ("embed.segment".to_string(), vec![config.num_segments, d]),
        ];
        let layer_shapes: [Vec<usize>; PER_LAYER] = [
            vec![d, d], vec![d], vec![d, d], vec![d], vec![d, d], vec![d], vec![d, d], vec![d],
            vec![d], vec![d], vec![d, f], vec![f], vec![f, d], vec![d], vec![d], vec![d],
        ];
        for l in 0..config.num_layers {
            specs.extend(LAYER_NAMES.iter().zip(&layer_shapes).map(|(n, s)| (format!("layer{l}.{n}"), s.clone())));
        }
        specs.push(("classifier.weight".into(), vec![d, config.num_classes]));
        specs.push(("classifier.bias".into(), vec![config.num_classes]));
        specs
    }

    pub(crate) fn param_names_for(config: &ModelConfig) -> Vec<String> {
        Self::param_specs(config).into_iter().map(|(n, _)| n).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        Self::param_names_for(&self.config)
    }

    fn classifier_index(&self) -> usize {
        3 + PER_LAYER * self.config.num_layers
    }

    /// Sum of token, position and segment embeddings (`|x|×d`).
    pub fn embed(&self, seq: &TokenSequence) -> Result<Tensor<T>> {
        seq.validate(&self.config)?;
        let d = self.config.hidden_dim;
        let mut out = Vec::with_capacity(seq.len() * d);
        for (i, (&tok, &seg)) in seq.token_ids.iter().zip(&seq.segment_ids).enumerate() {
            let t = self.params[0].row(tok as usize);
            let p = self.params[1].row(i);
            let s = self.params[2].row(seg as usize);
            out.extend((0..d).map(|j| t[j] + p[j] + s[j]));
        }
        Tensor::new(vec![seq.len(), d], out)
    }

    /// Records a forward pass over equal-length sequences on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        batch: &[&TokenSequence],
        mode: ParamMode,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<BatchForward> {
        ensure!(!batch.is_empty(), "empty batch");
        let seq = batch[0].len();
        for s in batch {
            s.validate(&self.config)?;
            ensure!(s.len() == seq, "batch mixes sequence lengths {} and {}", seq, s.len());
        }
        let cfg = &self.config;
        let n = batch.len();
        let numeric = |layer: usize| {
            move |e: Error| match e {
                Error::NonFinite { .. } => Error::NumericLayer { layer },
                other => other,
            }
        };
        let classifier = self.classifier_index();
        let p: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let layer = if i < 3 { 0 } else if i < classifier { (i - 3) / PER_LAYER + 1 } else { cfg.num_layers };
                match mode {
                    ParamMode::Trainable(base) => g.param(base + i, t),
                    ParamMode::Frozen => g.constant(t.clone()),
                }
                .map_err(numeric(layer))
            })
            .collect::<Result<_>>()?;

        let tok_ids: Vec<usize> = batch.iter().flat_map(|s| s.token_ids.iter().map(|&t| t as usize)).collect();
        let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..seq).collect();
        let seg_ids: Vec<usize> = batch.iter().flat_map(|s| s.segment_ids.iter().map(|&t| t as usize)).collect();

        let embed = (|| {
            let te = g.gather_rows(p[0], &tok_ids)?;
            let pe = g.gather_rows(p[1], &pos_ids)?;
            let se = g.gather_rows(p[2], &seg_ids)?;
            let x = g.add(te, pe)?;
            g.add(x, se)
        })()
        .map_err(numeric(0))?;

        let mut hidden = vec![embed];
        let mut attention = Vec::with_capacity(cfg.num_layers);
        let mut x = embed;
        for l in 0..cfg.num_layers {
            let w = &p[3 + l * PER_LAYER..3 + (l + 1) * PER_LAYER];
            let mut step = || -> Result<(Var, Var)> {
                let q = g.matmul(x, w[0])?;
                let q = g.add_bias(q, w[1])?;
                let k = g.matmul(x, w[2])?;
                let k = g.add_bias(k, w[3])?;
                let v = g.matmul(x, w[4])?;
                let v = g.add_bias(v, w[5])?;
                let ctx = g.attention(q, k, v, n, seq, cfg.num_heads)?;
                let mut o = g.matmul(ctx, w[6])?;
                o = g.add_bias(o, w[7])?;
                if let Some(d) = dropout.as_deref_mut().filter(|d| d.rate > 0.0) {
                    let m = d.mask(g.value(o).len());
                    o = g.mul_const(o, m)?;
                }
                let r = g.add(x, o)?;
                let a = g.layer_norm(r, w[8], w[9])?;
                let h = g.matmul(a, w[10])?;
                let h = g.add_bias(h, w[11])?;
                let h = match cfg.activation {
                    Activation::Gelu => g.gelu(h)?,
                    Activation::Relu => g.relu(h)?,
                };
                let mut f = g.matmul(h, w[12])?;
                f = g.add_bias(f, w[13])?;
                if let Some(d) = dropout.as_deref_mut().filter(|d| d.rate > 0.0) {
                    let m = d.mask(g.value(f).len());
                    f = g.mul_const(f, m)?;
                }
                let r = g.add(a, f)?;
                Ok((g.layer_norm(r, w[14], w[15])?, ctx))
            };
            let (out, ctx) = step().map_err(numeric(l + 1))?;
            hidden.push(out);
            attention.push(ctx);
            x = out;
        }

        let c = classifier;
        let cls_rows: Vec<usize> = (0..n).map(|b| b * seq).collect();
        let logits = (|| {
            let cls = g.gather_rows(x, &cls_rows)?;
            let z = g.matmul(cls, p[c])?;
            g.add_bias(z, p[c + 1])
        })()
        .map_err(numeric(cfg.num_layers))?;
        Ok(BatchForward { hidden, attention, logits, batch: n, seq })
    }

    /// Inference pass over one sequence (dropout disabled).
    pub fn forward(&self, seq: &TokenSequence) -> Result<ForwardTrace<T>> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, &[seq], ParamMode::Frozen, None)?;
        Ok(out.trace(&g, 0))
    }

    /// Inference over equal-length sequences; one trace per input, in order.
    pub fn forward_batch(&self, batch: &[&TokenSequence]) -> Result<Vec<ForwardTrace<T>>> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, batch, ParamMode::Frozen, None)?;
        Ok((0..batch.len()).map(|b| out.trace(&g, b)).collect())
    }

    /// Logits from an explicit last hidden layer; only the `[CLS]` row is read.
    pub fn classify_hidden(&self, last_hidden: &Tensor<T>) -> Result<Vec<T>> {
        let c = self.classifier_index();
        let cls = Tensor::new(vec![1, self.config.hidden_dim], last_hidden.row(0).to_vec())?;
        let z = cls.matmul(&self.params[c])?;
        Ok(z.data().iter().zip(self.params[c + 1].data()).map(|(&a, &b)| a + b).collect())
    }
}
