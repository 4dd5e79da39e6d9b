use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, ModelConfig, ModelInput, ModelParams};
use crate::diffcore::{Adam, Tape, Tensor};
use crate::error::{Error, Result};

/// One pre-training instance. `labels[k]` is the label under task `k`; the
/// example is presented with the steering prefix of `task`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub token_ids: Vec<u32>,
    pub labels: Vec<usize>,
    pub task: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainCorpus {
    /// Steering token ids per task, each of length `n_prompt_tokens`.
    pub steering_prefixes: Vec<Vec<u32>>,
    pub examples: Vec<PretrainExample>,
    /// `token_affinity[t][k]` is how strongly token `t` leans towards task `k`
    /// inside a random prefix. Empty weighs every task equally.
    #[serde(default)]
    pub token_affinity: Vec<Vec<f64>>,
    #[serde(default)]
    pub affinity_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of presentations that replace the steering prefix with random
    /// vocabulary tokens and train towards the task-averaged label distribution.
    pub random_prefix_rate: f64,
    /// Fraction of presentations that interpolate between a random prefix and
    /// the steering prefix, with the target interpolated the same way.
    pub blend_rate: f64,
    pub holdout_fraction: f64,
    pub accuracy_bar: f64,
    /// Stop early once held-out accuracy reaches this value.
    pub early_stop_accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub epochs_run: usize,
    pub heldout_accuracy: f64,
    pub heldout_size: usize,
}

#[derive(Debug, Clone)]
pub struct PretrainedTeacher {
    pub params: ModelParams,
    pub report: PretrainReport,
}

impl PretrainCorpus {
    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.examples.is_empty() || self.steering_prefixes.is_empty() {
            return Err(Error::Pretrain("empty corpus".into()));
        }
        let tasks = self.steering_prefixes.len();
        for p in &self.steering_prefixes {
            if p.len() != cfg.n_prompt_tokens {
                return Err(Error::dim(
                    "pretrain",
                    format!("steering prefix of length {}, prompt has {} tokens", p.len(), cfg.n_prompt_tokens),
                ));
            }
        }
        if !self.token_affinity.is_empty()
            && (self.token_affinity.len() != cfg.vocab_size || self.token_affinity.iter().any(|a| a.len() != tasks))
        {
            return Err(Error::Pretrain("token affinity must be vocab_size x num_tasks".into()));
        }
        for ex in &self.examples {
            if ex.labels.len() != tasks || ex.task >= tasks {
                return Err(Error::Pretrain("example labels do not match the task count".into()));
            }
            if ex.labels.iter().any(|&l| l >= cfg.num_classes()) {
                return Err(Error::Pretrain("label outside the label-word set".into()));
            }
        }
        Ok(())
    }

    /// Task weights for a random prefix: `softmax(scale * mean affinity)`.
    pub fn task_weights(&self, prefix: &[usize]) -> Vec<f64> {
        let tasks = self.steering_prefixes.len();
        if self.token_affinity.is_empty() || prefix.is_empty() {
            return vec![1.0 / tasks as f64; tasks];
        }
        let scores: Vec<f64> = (0..tasks)
            .map(|k| {
                let mean = prefix.iter().map(|&t| self.token_affinity[t][k]).sum::<f64>() / prefix.len() as f64;
                self.affinity_scale * mean
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.iter().map(|e| e / z).collect()
    }

    /// Label distribution of an example under a random prefix: the per-task
    /// one-hot labels weighted by [`Self::task_weights`].
    fn mixture_target(&self, ex: &PretrainExample, classes: usize, prefix: &[usize]) -> Vec<f64> {
        let mut t = vec![0.0; classes];
        for (&l, w) in ex.labels.iter().zip(self.task_weights(prefix)) {
            t[l] += w;
        }
        t
    }
}

/// Accuracy of `params` on `examples` when each is prefixed with its own task's
/// steering prefix (or with `prefix_override` for every example, if given).
pub fn steered_accuracy(
    params: &ModelParams,
    corpus: &PretrainCorpus,
    examples: &[PretrainExample],
    prefix_override: Option<&[u32]>,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(1.0);
    }
    let table = params.embedding_table();
    let mut correct = 0usize;
    for ex in examples {
        let prefix = prefix_override.unwrap_or(&corpus.steering_prefixes[ex.task]);
        let input = ModelInput { prompt: table.lookup(prefix)?, token_ids: ex.token_ids.clone() };
        if argmax(&params.forward(&input)?) == ex.labels[ex.task] {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Trains a teacher on a mixture of steering-prefixed tasks and freezes it.
///
/// Fails with [`Error::Pretrain`] when held-out accuracy under the true
/// steering prefix stays below `cfg.accuracy_bar`.
pub fn pretrain_teacher(corpus: &PretrainCorpus, cfg: &PretrainConfig) -> Result<PretrainedTeacher> {
    corpus.validate(&cfg.model)?;
    if !(0.0..=1.0).contains(&cfg.random_prefix_rate)
        || !(0.0..=1.0).contains(&cfg.blend_rate)
        || cfg.random_prefix_rate + cfg.blend_rate > 1.0
    {
        return Err(Error::Config("augmentation rates must be in [0, 1] and sum to at most 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(cfg.model.clone(), rng.random())?;
    params.set_trainable(true);

    let mut order: Vec<usize> = (0..corpus.examples.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((corpus.examples.len() as f64) * cfg.holdout_fraction).round() as usize;
    let n_hold = n_hold.min(corpus.examples.len().saturating_sub(1));
    let heldout: Vec<PretrainExample> = order[..n_hold].iter().map(|&i| corpus.examples[i].clone()).collect();
    let mut train: Vec<usize> = order[n_hold..].to_vec();

    let classes = cfg.model.num_classes();
    let n = cfg.model.n_prompt_tokens;
    let vocab = cfg.model.vocab_size as u32;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut accuracy = 0.0;
    let mut epochs_run = 0;
    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let table = bound.embedding.expect("teacher embeddings are trainable");
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let ex = &corpus.examples[i];
                let steer: Vec<usize> = corpus.steering_prefixes[ex.task].iter().map(|&t| t as usize).collect();
                let mut onehot = vec![0.0; classes];
                onehot[ex.labels[ex.task]] = 1.0;
                let u: f64 = rng.random();
                let (prompt, target) = if u < cfg.random_prefix_rate {
                    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab) as usize).collect();
                    let target = corpus.mixture_target(ex, classes, &ids);
                    (tape.gather_rows(table, &ids)?, target)
                } else if u < cfg.random_prefix_rate + cfg.blend_rate {
                    let beta: f64 = rng.random();
                    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab) as usize).collect();
                    let random = tape.gather_rows(table, &ids)?;
                    let steered = tape.gather_rows(table, &steer)?;
                    let a = tape.scale(steered, beta);
                    let b = tape.scale(random, 1.0 - beta);
                    let mix = corpus.mixture_target(ex, classes, &ids);
                    let target = onehot.iter().zip(&mix).map(|(o, m)| beta * o + (1.0 - beta) * m).collect();
                    (tape.add(a, b)?, target)
                } else {
                    (tape.gather_rows(table, &steer)?, onehot)
                };
                let logits = params.forward_on(&mut tape, &bound, prompt, &ex.token_ids)?;
                let logp = tape.log_softmax(logits);
                let t = tape.constant(&[classes], target)?;
                let weighted = tape.mul(logp, t)?;
                let s = tape.sum(weighted);
                losses.push(s);
            }
            let rows = losses.iter().map(|&v| tape.reshape(v, &[1])).collect::<Result<Vec<_>>>()?;
            let stacked = tape.concat(&rows)?;
            let mean = tape.mean(stacked)?;
            let loss = tape.scale(mean, -1.0);
            tape.backward(loss)?;
            let trainable = bound.trainable.clone();
            let mut tensors: Vec<&mut Tensor> = params.weights_mut().named_mut().into_iter().map(|(_, t)| t).collect();
            for (v, t) in trainable.iter().zip(tensors.iter_mut()) {
                tape.accumulate_into(*v, t)?;
            }
            adam.step(&mut tensors)?;
        }
        epochs_run += 1;
        accuracy = steered_accuracy(&params, corpus, &heldout, None)?;
        log::debug!("teacher epoch {epochs_run}: held-out accuracy {accuracy:.4}");
        if accuracy >= cfg.early_stop_accuracy {
            break;
        }
    }
    params.set_trainable(false);
    if accuracy < cfg.accuracy_bar {
        return Err(Error::Pretrain(format!(
            "held-out accuracy {accuracy:.4} below bar {:.2} after {epochs_run} epochs",
            cfg.accuracy_bar
        )));
    }
    Ok(PretrainedTeacher {
        params,
        report: PretrainReport { epochs_run, heldout_accuracy: accuracy, heldout_size: heldout.len() },
    })
}
