//! Toy prompt-conditioned sequence classifiers used as the black-box teacher
//! and the trainable student.
//!
//! Input layout is `[prompt rows ; token embeddings]`, where the tokens are the
//! instance followed by the template and the final template token is the mask
//! position. Class logits are the vocabulary logits of the label words.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

mod pretrain;

pub use pretrain::{
    pretrain_teacher, steered_accuracy, PretrainConfig, PretrainCorpus, PretrainExample, PretrainReport,
    PretrainedTeacher,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Mean-pool over positions, then a tanh MLP.
    PoolMlp,
    /// One residual self-attention layer, then the pool-MLP head.
    SingleAttention,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::PoolMlp => "pool-mlp",
            EncoderKind::SingleAttention => "single-attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pool-mlp" => Ok(EncoderKind::PoolMlp),
            "single-attention" => Ok(EncoderKind::SingleAttention),
            other => Err(Error::Config(format!("unknown encoder '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_prompt_tokens: usize,
    pub hidden_dim: usize,
    pub encoder: EncoderKind,
    pub label_word_ids: Vec<u32>,
}

impl ModelConfig {
    /// Flattened prompt width `n * e`.
    pub fn prompt_dim(&self) -> usize {
        self.n_prompt_tokens * self.embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.label_word_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.n_prompt_tokens == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.label_word_ids.is_empty() {
            return Err(Error::Config("at least one label word is required".into()));
        }
        for (i, &id) in self.label_word_ids.iter().enumerate() {
            if id as usize >= self.vocab_size {
                return Err(Error::Vocabulary { id, vocab_size: self.vocab_size });
            }
            if self.label_word_ids[..i].contains(&id) {
                return Err(Error::Config(format!("label word {id} repeated")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `[vocab, e]`
    pub embedding: Tensor,
    pub attention: Option<AttentionWeights>,
    /// `[e, hidden]`, applied to the mean-pooled sequence.
    pub pool_proj: Tensor,
    /// `[e, hidden]`, applied to the mask-position row.
    pub mask_proj: Tensor,
    pub hidden_bias: Tensor,
    /// `[hidden, vocab]`
    pub head: Tensor,
    pub head_bias: Tensor,
}

impl Weights {
    /// Tensors in checkpoint order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![("embedding", &self.embedding)];
        if let Some(a) = &self.attention {
            v.extend([("attn.query", &a.query), ("attn.key", &a.key), ("attn.value", &a.value)]);
        }
        v.extend([
            ("mlp.pool_proj", &self.pool_proj),
            ("mlp.mask_proj", &self.mask_proj),
            ("mlp.hidden_bias", &self.hidden_bias),
            ("head.weight", &self.head),
            ("head.bias", &self.head_bias),
        ]);
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v = vec![("embedding", &mut self.embedding)];
        if let Some(a) = &mut self.attention {
            v.extend([("attn.query", &mut a.query), ("attn.key", &mut a.key), ("attn.value", &mut a.value)]);
        }
        v.extend([
            ("mlp.pool_proj", &mut self.pool_proj),
            ("mlp.mask_proj", &mut self.mask_proj),
            ("mlp.hidden_bias", &mut self.hidden_bias),
            ("head.weight", &mut self.head),
            ("head.bias", &mut self.head_bias),
        ]);
        v
    }
}

/// Public token-embedding table of a model, used to build prompts from
/// vocabulary tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    table: Tensor,
}

impl EmbeddingTable {
    pub fn new(table: Tensor) -> Result<Self> {
        table.dims2().ok_or_else(|| Error::dim("embedding_table", format!("{:?}", table.shape())))?;
        Ok(Self { table })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn row(&self, id: usize) -> &[f64] {
        let e = self.embed_dim();
        &self.table.data()[id * e..(id + 1) * e]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.table
    }

    /// Concatenated embeddings of `ids`.
    pub fn lookup(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ids.len() * self.embed_dim());
        for &id in ids {
            if id as usize >= self.vocab_size() {
                return Err(Error::Vocabulary { id, vocab_size: self.vocab_size() });
            }
            out.extend_from_slice(self.row(id as usize));
        }
        Ok(out)
    }

    /// Embeddings of `n` tokens drawn uniformly from the vocabulary.
    pub fn random_prompt(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..self.vocab_size() as u32)).collect();
        self.lookup(&ids).expect("ids drawn in range")
    }
}

/// A continuous prompt followed by instance-plus-template token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub prompt: Vec<f64>,
    pub token_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    weights: Weights,
}

/// Model weights recorded on a tape. Frozen weights become constants; a frozen
/// head is pre-gathered to the label columns.
pub struct BoundModel {
    embedding: Option<Var>,
    attention: Option<[Var; 3]>,
    pool_proj: Var,
    mask_proj: Var,
    hidden_bias: Var,
    head: Var,
    head_bias: Var,
    head_gathered: bool,
    pub(crate) trainable: Vec<Var>,
}

impl ModelParams {
    /// Random initialization: embeddings ~ N(0, 1), projections ~ N(0, 1/fan_in), biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, e, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let mut normal = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("sized")
        };
        let embedding = normal(&[v, e], 1.0);
        let attention = match config.encoder {
            EncoderKind::PoolMlp => None,
            EncoderKind::SingleAttention => {
                let s = 1.0 / (e as f64).sqrt();
                Some(AttentionWeights { query: normal(&[e, e], s), key: normal(&[e, e], s), value: normal(&[e, e], s) })
            }
        };
        let s_in = 1.0 / (e as f64).sqrt();
        let weights = Weights {
            embedding,
            attention,
            pool_proj: normal(&[e, h], s_in),
            mask_proj: normal(&[e, h], s_in),
            hidden_bias: Tensor::zeros(&[h]),
            head: normal(&[h, v], 1.0 / (h as f64).sqrt()),
            head_bias: Tensor::zeros(&[v]),
        };
        Ok(Self { config, weights })
    }

    pub fn from_parts(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let (v, e, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let expect = |t: &Tensor, shape: &[usize], name: &str| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::dim("model weights", format!("{name} has shape {:?}, expected {shape:?}", t.shape())))
            }
        };
        expect(&weights.embedding, &[v, e], "embedding")?;
        match (&weights.attention, config.encoder) {
            (Some(a), EncoderKind::SingleAttention) => {
                expect(&a.query, &[e, e], "attn.query")?;
                expect(&a.key, &[e, e], "attn.key")?;
                expect(&a.value, &[e, e], "attn.value")?;
            }
            (None, EncoderKind::PoolMlp) => {}
            _ => return Err(Error::Config("attention weights do not match encoder kind".into())),
        }
        expect(&weights.pool_proj, &[e, h], "mlp.pool_proj")?;
        expect(&weights.mask_proj, &[e, h], "mlp.mask_proj")?;
        expect(&weights.hidden_bias, &[h], "mlp.hidden_bias")?;
        expect(&weights.head, &[h, v], "head.weight")?;
        expect(&weights.head_bias, &[v], "head.bias")?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn embedding_table(&self) -> EmbeddingTable {
        EmbeddingTable { table: self.weights.embedding.clone() }
    }

    pub fn set_trainable(&mut self, flag: bool) {
        for (_, t) in self.weights.named_mut() {
            t.set_requires_grad(flag);
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.weights.embedding.requires_grad()
    }

    /// Digest over every weight value, in checkpoint order.
    pub fn checksum(&self) -> String {
        let all: Vec<f64> = self.weights.named().iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
        crate::checkpoint::digest_f64(&all)
    }

    pub fn validate_input(&self, input: &ModelInput) -> Result<()> {
        let d = self.config.prompt_dim();
        if input.prompt.len() != d {
            return Err(Error::dim("forward", format!("prompt width {} but model expects {d}", input.prompt.len())));
        }
        self.validate_tokens(&input.token_ids)
    }

    pub fn validate_tokens(&self, token_ids: &[u32]) -> Result<()> {
        if token_ids.is_empty() {
            return Err(Error::Contract("token_ids must be nonempty".into()));
        }
        if let Some(&id) = token_ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Vocabulary { id, vocab_size: self.config.vocab_size });
        }
        Ok(())
    }

    /// Records the weights on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let w = &self.weights;
        let mut trainable = Vec::new();
        let mut put = |tape: &mut Tape, t: &Tensor| {
            let v = tape.leaf(t);
            if t.requires_grad() {
                trainable.push(v);
            }
            v
        };
        let embedding = w.embedding.requires_grad().then(|| put(tape, &w.embedding));
        let attention = w.attention.as_ref().map(|a| [put(tape, &a.query), put(tape, &a.key), put(tape, &a.value)]);
        let pool_proj = put(tape, &w.pool_proj);
        let mask_proj = put(tape, &w.mask_proj);
        let hidden_bias = put(tape, &w.hidden_bias);
        let labels: Vec<usize> = self.config.label_word_ids.iter().map(|&i| i as usize).collect();
        let (head, head_bias, head_gathered) = if w.head.requires_grad() {
            (put(tape, &w.head), put(tape, &w.head_bias), false)
        } else {
            let (h, v) = (self.config.hidden_dim, self.config.vocab_size);
            let hd = w.head.data();
            let gathered: Vec<f64> = (0..h).flat_map(|r| labels.iter().map(move |&c| hd[r * v + c])).collect();
            let bias: Vec<f64> = labels.iter().map(|&c| w.head_bias.data()[c]).collect();
            let head = tape.constant(&[h, labels.len()], gathered).expect("sized");
            let bias = tape.constant(&[labels.len()], bias).expect("sized");
            (head, bias, true)
        };
        BoundModel { embedding, attention, pool_proj, mask_proj, hidden_bias, head, head_bias, head_gathered, trainable }
    }

    /// Token embeddings `[L, e]` for `token_ids`.
    pub fn embed_tokens(&self, tape: &mut Tape, bound: &BoundModel, token_ids: &[u32]) -> Result<Var> {
        self.validate_tokens(token_ids)?;
        match bound.embedding {
            Some(table) => {
                let ids: Vec<usize> = token_ids.iter().map(|&i| i as usize).collect();
                tape.gather_rows(table, &ids)
            }
            None => {
                let e = self.config.embed_dim;
                let values = self.embedding_rows(token_ids);
                tape.constant(&[token_ids.len(), e], values)
            }
        }
    }

    fn embedding_rows(&self, token_ids: &[u32]) -> Vec<f64> {
        let e = self.config.embed_dim;
        let data = self.weights.embedding.data();
        token_ids.iter().flat_map(|&i| data[i as usize * e..(i as usize + 1) * e].iter().copied()).collect()
    }

    /// Class logits `[C]` for a prompt variable (any shape with `n * e` entries).
    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundModel, prompt: Var, token_ids: &[u32]) -> Result<Var> {
        let (n, e) = (self.config.n_prompt_tokens, self.config.embed_dim);
        if tape.value(prompt).len() != n * e {
            return Err(Error::dim(
                "forward",
                format!("prompt width {} but model expects {}", tape.value(prompt).len(), n * e),
            ));
        }
        let prompt_rows = tape.reshape(prompt, &[n, e])?;
        let tokens = self.embed_tokens(tape, bound, token_ids)?;
        let mut x = tape.concat(&[prompt_rows, tokens])?;
        if let Some([q, k, v]) = bound.attention {
            let qs = tape.matmul(x, q)?;
            let ks = tape.matmul(x, k)?;
            let vs = tape.matmul(x, v)?;
            let kt = tape.transpose(ks)?;
            let scores = tape.matmul(qs, kt)?;
            let scores = tape.scale(scores, 1.0 / (e as f64).sqrt());
            let attn = tape.softmax(scores);
            let mixed = tape.matmul(attn, vs)?;
            x = tape.add(x, mixed)?;
        }
        let len = tape.shape(x)[0];
        let pooled = tape.mean_rows(x)?;
        let mask = tape.slice_rows(x, len - 1, len)?;
        let a = tape.matmul(pooled, bound.pool_proj)?;
        let b = tape.matmul(mask, bound.mask_proj)?;
        let pre = tape.add(a, b)?;
        let pre = tape.add(pre, bound.hidden_bias)?;
        let hidden = tape.tanh(pre);
        let labels: Vec<usize> = self.config.label_word_ids.iter().map(|&i| i as usize).collect();
        let (head, bias) = if bound.head_gathered {
            (bound.head, bound.head_bias)
        } else {
            (tape.gather_cols(bound.head, &labels)?, tape.gather_cols(bound.head_bias, &labels)?)
        };
        let logits = tape.matmul(hidden, head)?;
        let logits = tape.add(logits, bias)?;
        tape.reshape(logits, &[labels.len()])
    }

    /// Class logits for one input, without gradient tracking.
    pub fn forward(&self, input: &ModelInput) -> Result<Vec<f64>> {
        self.validate_input(input)?;
        let frozen = self.frozen_view();
        let mut tape = Tape::new();
        let bound = frozen.bind(&mut tape);
        let prompt = tape.constant(&[input.prompt.len()], input.prompt.clone())?;
        let out = frozen.forward_on(&mut tape, &bound, prompt, &input.token_ids)?;
        Ok(tape.value(out).to_vec())
    }

    fn frozen_view(&self) -> std::borrow::Cow<'_, ModelParams> {
        if self.weights.named().iter().any(|(_, t)| t.requires_grad()) {
            let mut p = self.clone();
            p.set_trainable(false);
            std::borrow::Cow::Owned(p)
        } else {
            std::borrow::Cow::Borrowed(self)
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new("model");
        ck.push_u64("vocab_size", c.vocab_size as u64);
        ck.push_u64("embed_dim", c.embed_dim as u64);
        ck.push_u64("n_prompt_tokens", c.n_prompt_tokens as u64);
        ck.push_u64("hidden_dim", c.hidden_dim as u64);
        ck.push_str("encoder", c.encoder.as_str());
        let labels: Vec<f64> = c.label_word_ids.iter().map(|&i| f64::from(i)).collect();
        ck.push_tensor("label_word_ids", &[labels.len()], &labels);
        for (name, t) in self.weights.named() {
            ck.push_tensor(name, t.shape(), t.data());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("model")?;
        let label_word_ids = ck
            .get_tensor("label_word_ids")?
            .values
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) {
                    Ok(v as u32)
                } else {
                    Err(Error::Checkpoint(format!("invalid label word id {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let config = ModelConfig {
            vocab_size: ck.get_usize("vocab_size")?,
            embed_dim: ck.get_usize("embed_dim")?,
            n_prompt_tokens: ck.get_usize("n_prompt_tokens")?,
            hidden_dim: ck.get_usize("hidden_dim")?,
            encoder: EncoderKind::parse(ck.get_str("encoder")?)?,
            label_word_ids,
        };
        let attention = match config.encoder {
            EncoderKind::PoolMlp => None,
            EncoderKind::SingleAttention => Some(AttentionWeights {
                query: ck.tensor("attn.query")?,
                key: ck.tensor("attn.key")?,
                value: ck.tensor("attn.value")?,
            }),
        };
        let weights = Weights {
            embedding: ck.tensor("embedding")?,
            attention,
            pool_proj: ck.tensor("mlp.pool_proj")?,
            mask_proj: ck.tensor("mlp.mask_proj")?,
            hidden_bias: ck.tensor("mlp.hidden_bias")?,
            head: ck.tensor("head.weight")?,
            head_bias: ck.tensor("head.bias")?,
        };
        Self::from_parts(config, weights)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
