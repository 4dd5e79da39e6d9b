//! Joint prompt training: a generator trained by gradient descent through the
//! frozen student, CMA-ES over `z` against the black-box teacher, fused into
//! one prompt per instance.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::{BlackBox, QueryItem};
use crate::checkpoint::Checkpoint;
use crate::cmaes::CmaState;
use crate::data::Example;
use crate::diffcore::{sgd_step, Tape, Tensor, Var};
use crate::distill::{cross_entropy, cross_entropy_on};
use crate::error::{Error, Result};
use crate::models::{argmax, ModelParams};
use crate::promptspace::{check_alpha, combine, ProjectionMatrix, PromptRole, PromptVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Subspace dimension `d`.
    pub subspace_dim: usize,
    pub population_size: usize,
    /// API-call budget `N` for the joint loop.
    pub budget: u64,
    pub alpha: f64,
    pub sigma0: f64,
    /// Standard deviation of the entries of `A`; `1/sqrt(d)` when absent.
    pub projection_std: Option<f64>,
    pub generator_lr: f64,
    /// Instances per fitness evaluation; 0 means the whole training set.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            subspace_dim: 10,
            population_size: 8,
            budget: 2000,
            alpha: 0.5,
            sigma0: 1.0,
            projection_std: None,
            generator_lr: 1e-3,
            batch_size: 0,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.subspace_dim == 0 || self.population_size < 2 {
            return Err(Error::Config("need subspace_dim >= 1 and population_size >= 2".into()));
        }
        if !(self.generator_lr >= 0.0 && self.generator_lr.is_finite()) {
            return Err(Error::Config("generator_lr must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// `alpha = 1` leaves `z` without effect, so no teacher calls are made.
    pub fn uses_dfo(&self) -> bool {
        self.alpha < 1.0
    }
}

/// One fully connected layer from a pooled instance embedding `[e]` to a prompt `[D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGenerator {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl PromptGenerator {
    /// Zero weight; the bias starts at `p0` so the first generated prompt is `p0`.
    pub fn new(embed_dim: usize, p0: &PromptVector) -> Self {
        Self { weight: Tensor::zeros(&[embed_dim, p0.len()]), bias: Tensor::vector(p0.values()) }
    }

    pub fn zeros(embed_dim: usize, prompt_dim: usize) -> Self {
        Self { weight: Tensor::zeros(&[embed_dim, prompt_dim]), bias: Tensor::zeros(&[prompt_dim]) }
    }

    pub fn prompt_dim(&self) -> usize {
        self.bias.len()
    }

    /// `weight^T . mean(student embeddings of instance) + bias` on `tape`, shape `[1, D]`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        weight: Var,
        bias: Var,
        instance: &[u32],
        student: &ModelParams,
    ) -> Result<Var> {
        let e = student.config().embed_dim;
        if self.weight.shape() != [e, self.prompt_dim()] {
            return Err(Error::Contract(format!(
                "generator weight {:?} does not fit embedding width {e}",
                self.weight.shape()
            )));
        }
        let table = student.embedding_table();
        let rows = table.lookup(instance)?;
        let emb = tape.constant(&[instance.len(), e], rows)?;
        let pooled = tape.mean_rows(emb)?;
        let out = tape.matmul(pooled, weight)?;
        tape.add(out, bias)
    }
}

/// `p_GD` for one instance.
pub fn generate_prompt(gen: &PromptGenerator, instance: &[u32], student: &ModelParams) -> Result<PromptVector> {
    if instance.is_empty() {
        return Err(Error::Contract("instance must be nonempty".into()));
    }
    let mut tape = Tape::new();
    let w = tape.leaf(&gen.weight);
    let b = tape.leaf(&gen.bias);
    let out = gen.forward_on(&mut tape, w, b, instance, student)?;
    PromptVector::new(tape.value(out).to_vec(), PromptRole::Generated)
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub cma: CmaState,
    pub generator: PromptGenerator,
    pub best_z: Vec<f64>,
    pub best_loss: f64,
    pub api_calls_used: u64,
    pub step: u64,
    pub config: EpisodeConfig,
    p0: PromptVector,
    projection: ProjectionMatrix,
    fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub api_calls_used: u64,
    pub best_teacher_ce: f64,
    pub population_mean_ce: f64,
    pub population_min_ce: f64,
    pub student_ce: f64,
    /// Teacher accuracy on the batch under this step's best candidate.
    pub train_accuracy: f64,
}

fn fingerprint(p0: &PromptVector, a: &ProjectionMatrix) -> String {
    format!("{}:{}", p0.checksum(), a.checksum())
}

impl TrainState {
    pub fn new(config: EpisodeConfig, p0: PromptVector, projection: ProjectionMatrix, embed_dim: usize) -> Result<Self> {
        config.validate()?;
        if projection.subspace_dim() != config.subspace_dim || projection.prompt_dim() != p0.len() {
            return Err(Error::Config(format!(
                "projection is {}x{}, expected {}x{}",
                projection.prompt_dim(),
                projection.subspace_dim(),
                p0.len(),
                config.subspace_dim
            )));
        }
        let cma = CmaState::new(config.subspace_dim, config.sigma0, config.population_size, config.seed)?;
        let generator = PromptGenerator::new(embed_dim, &p0);
        let fingerprint = fingerprint(&p0, &projection);
        Ok(Self {
            best_z: cma.mean().to_vec(),
            best_loss: f64::INFINITY,
            cma,
            generator,
            api_calls_used: 0,
            step: 0,
            config,
            p0,
            projection,
            fingerprint,
        })
    }

    pub fn p0(&self) -> &PromptVector {
        &self.p0
    }

    pub fn projection(&self) -> &ProjectionMatrix {
        &self.projection
    }

    /// Confirms that `p0` and `A` are unchanged since the episode started.
    pub fn verify_frozen(&self) -> Result<()> {
        if fingerprint(&self.p0, &self.projection) != self.fingerprint {
            return Err(Error::Integrity("p0 or the projection changed during the episode".into()));
        }
        Ok(())
    }

    /// Teacher calls one step costs for `batches` fitness batches.
    pub fn calls_per_step(&self, batches: usize) -> u64 {
        if self.config.uses_dfo() {
            (self.config.population_size * batches) as u64
        } else {
            0
        }
    }

    /// Fused prompt for `instance` at subspace point `z`.
    pub fn prompt_for(&self, instance: &[u32], z: &[f64], student: &ModelParams) -> Result<PromptVector> {
        let p_gd = if self.config.alpha == 0.0 {
            PromptVector::new(vec![0.0; self.p0.len()], PromptRole::Generated)?
        } else {
            generate_prompt(&self.generator, instance, student)?
        };
        combine(&p_gd, &self.p0, &self.projection, z, self.config.alpha)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("train_state");
        ck.push_u64("step", self.step);
        ck.push_u64("api_calls_used", self.api_calls_used);
        ck.push_f64("best_loss", self.best_loss);
        ck.push_u64("subspace_dim", self.config.subspace_dim as u64);
        ck.push_u64("population_size", self.config.population_size as u64);
        ck.push_u64("budget", self.config.budget);
        ck.push_f64("alpha", self.config.alpha);
        ck.push_f64("sigma0", self.config.sigma0);
        ck.push_f64("projection_std", self.config.projection_std.unwrap_or(f64::NAN));
        ck.push_f64("generator_lr", self.config.generator_lr);
        ck.push_u64("batch_size", self.config.batch_size as u64);
        ck.push_u64("seed", self.config.seed);
        ck.push_tensor("best_z", &[self.best_z.len()], &self.best_z);
        ck.push_tensor("generator.weight", self.generator.weight.shape(), self.generator.weight.data());
        ck.push_tensor("generator.bias", self.generator.bias.shape(), self.generator.bias.data());
        ck.push_nested("p0", &self.p0.to_checkpoint());
        ck.push_nested("projection", &self.projection.to_checkpoint());
        ck.push_nested("cma", &self.cma.to_checkpoint());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("train_state")?;
        let std = ck.get_f64("projection_std")?;
        let config = EpisodeConfig {
            subspace_dim: ck.get_usize("subspace_dim")?,
            population_size: ck.get_usize("population_size")?,
            budget: ck.get_u64("budget")?,
            alpha: ck.get_f64("alpha")?,
            sigma0: ck.get_f64("sigma0")?,
            projection_std: (!std.is_nan()).then_some(std),
            generator_lr: ck.get_f64("generator_lr")?,
            batch_size: ck.get_usize("batch_size")?,
            seed: ck.get_u64("seed")?,
        };
        let p0 = PromptVector::from_checkpoint(&ck.nested("p0")?)?;
        let projection = ProjectionMatrix::from_checkpoint(&ck.nested("projection")?)?;
        let generator = PromptGenerator { weight: ck.tensor("generator.weight")?, bias: ck.tensor("generator.bias")? };
        if generator.prompt_dim() != p0.len() || generator.weight.dims2().map(|d| d.1) != Some(p0.len()) {
            return Err(Error::Checkpoint("generator shape does not match p0".into()));
        }
        let fingerprint = fingerprint(&p0, &projection);
        Ok(Self {
            cma: CmaState::from_checkpoint(&ck.nested("cma")?)?,
            generator,
            best_z: ck.get_tensor("best_z")?.values.clone(),
            best_loss: ck.get_f64("best_loss")?,
            api_calls_used: ck.get_u64("api_calls_used")?,
            step: ck.get_u64("step")?,
            config,
            p0,
            projection,
            fingerprint,
        })
    }
}

fn batches(data: &[Example], batch_size: usize) -> Vec<&[Example]> {
    let size = if batch_size == 0 { data.len().max(1) } else { batch_size };
    data.chunks(size).collect()
}

/// Mean teacher cross-entropy and accuracy of one candidate on a batch, from
/// precomputed generator prompts. One metered call.
fn evaluate_candidate(
    state: &TrainState,
    z: &[f64],
    p_gd: &[PromptVector],
    batch: &[Example],
    template: &[u32],
    teacher: &BlackBox,
) -> Result<(f64, f64)> {
    let items = batch
        .iter()
        .zip(p_gd)
        .map(|(ex, g)| {
            let p = combine(g, &state.p0, &state.projection, z, state.config.alpha)?;
            Ok(QueryItem { prompt: p.into_values(), token_ids: ex.with_template(template) })
        })
        .collect::<Result<Vec<_>>>()?;
    let logits = teacher.query(items)?;
    let mut ce = 0.0;
    let mut hits = 0usize;
    for (ex, l) in batch.iter().zip(&logits) {
        ce += cross_entropy(l, ex.label)?;
        hits += usize::from(argmax(l) == ex.label);
    }
    let n = batch.len() as f64;
    Ok((ce / n, hits as f64 / n))
}

/// Generator prompts for a batch, with `alpha = 0` short-circuited to zeros.
fn batch_prompts(state: &TrainState, batch: &[Example], student: &ModelParams) -> Result<Vec<PromptVector>> {
    batch
        .iter()
        .map(|ex| {
            if state.config.alpha == 0.0 {
                PromptVector::new(vec![0.0; state.p0.len()], PromptRole::Generated)
            } else {
                generate_prompt(&state.generator, &ex.instance, student)
            }
        })
        .collect()
}

/// Mean teacher CE of each candidate on `batch`, evaluated in parallel.
pub fn evaluate_population(
    state: &TrainState,
    candidates: &[Vec<f64>],
    batch: &[Example],
    template: &[u32],
    teacher: &BlackBox,
    student: &ModelParams,
) -> Result<Vec<(f64, f64)>> {
    let p_gd = batch_prompts(state, batch, student)?;
    candidates.par_iter().map(|z| evaluate_candidate(state, z, &p_gd, batch, template, teacher)).collect()
}

/// Mean student CE over `batch` at subspace point `z`, with gradients written
/// into the generator. The teacher plays no part.
pub fn generator_gradient(
    state: &mut TrainState,
    batch: &[Example],
    template: &[u32],
    student: &ModelParams,
    z: &[f64],
) -> Result<f64> {
    if student.is_trainable() {
        return Err(Error::Contract("student must be frozen while training the generator".into()));
    }
    let alpha = state.config.alpha;
    let dfo = crate::promptspace::projected_prompt(&state.p0, &state.projection, z)?;
    let dfo: Vec<f64> = dfo.iter().map(|v| (1.0 - alpha) * v).collect();
    let d = dfo.len();
    let mut tape = Tape::new();
    let w = tape.leaf(&state.generator.weight.clone().requiring_grad());
    let b = tape.leaf(&state.generator.bias.clone().requiring_grad());
    let bound = student.bind(&mut tape);
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let g = state.generator.forward_on(&mut tape, w, b, &ex.instance, student)?;
        let g = tape.scale(g, alpha);
        let rest = tape.constant(&[1, d], dfo.clone())?;
        let p = tape.add(g, rest)?;
        let logits = student.forward_on(&mut tape, &bound, p, &ex.with_template(template))?;
        let ce = cross_entropy_on(&mut tape, logits, ex.label)?;
        losses.push(tape.reshape(ce, &[1])?);
    }
    let stacked = tape.concat(&losses)?;
    let loss = tape.mean(stacked)?;
    tape.backward(loss)?;
    state.generator.weight.set_requires_grad(true);
    state.generator.bias.set_requires_grad(true);
    tape.accumulate_into(w, &mut state.generator.weight)?;
    tape.accumulate_into(b, &mut state.generator.bias)?;
    Ok(tape.scalar_value(loss))
}

/// One generation of the joint loop on `train`. On error the state is left unchanged.
pub fn joint_train_step(
    state: &mut TrainState,
    train: &[Example],
    template: &[u32],
    teacher: &BlackBox,
    student: &ModelParams,
) -> Result<StepMetrics> {
    state.verify_frozen()?;
    if train.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let parts = batches(train, state.config.batch_size);
    let cost = state.calls_per_step(parts.len());
    if state.api_calls_used + cost > state.config.budget {
        return Err(Error::Budget { used: state.api_calls_used, budget: state.config.budget, requested: cost });
    }
    let mut next = state.clone();
    // the generator update uses the best point known before this step
    let z_gen = next.best_z.clone();
    let (mut mean_ce, mut min_ce, mut accuracy) = (f64::NAN, f64::NAN, f64::NAN);
    if next.config.uses_dfo() {
        let candidates = next.cma.ask()?;
        let mut fitness = vec![0.0; candidates.len()];
        let mut acc = vec![0.0; candidates.len()];
        for part in &parts {
            let scores = evaluate_population(&next, &candidates, part, template, teacher, student)?;
            let w = part.len() as f64 / train.len() as f64;
            for (i, (ce, a)) in scores.into_iter().enumerate() {
                fitness[i] += w * ce;
                acc[i] += w * a;
            }
        }
        next.api_calls_used += cost;
        next.cma.tell(&candidates, &fitness)?;
        let best = (0..fitness.len()).min_by(|&a, &b| fitness[a].total_cmp(&fitness[b])).unwrap_or(0);
        mean_ce = fitness.iter().sum::<f64>() / fitness.len() as f64;
        min_ce = fitness[best];
        accuracy = acc[best];
        if min_ce < next.best_loss {
            next.best_z = candidates[best].clone();
            next.best_loss = min_ce;
        }
    }
    let student_ce = update_generator(&mut next, train, template, student, &z_gen)?;
    next.step += 1;
    *state = next;
    Ok(StepMetrics {
        step: state.step,
        api_calls_used: state.api_calls_used,
        best_teacher_ce: state.best_loss,
        population_mean_ce: mean_ce,
        population_min_ce: min_ce,
        student_ce,
        train_accuracy: accuracy,
    })
}

fn update_generator(
    state: &mut TrainState,
    train: &[Example],
    template: &[u32],
    student: &ModelParams,
    z: &[f64],
) -> Result<f64> {
    if state.config.alpha == 0.0 {
        return Ok(f64::NAN);
    }
    let lr = state.config.generator_lr;
    let mut total = 0.0;
    for part in batches(train, state.config.batch_size) {
        let ce = generator_gradient(state, part, template, student, z)?;
        total += ce * part.len() as f64;
        let g = &mut state.generator;
        sgd_step(&mut [&mut g.weight, &mut g.bias], lr)?;
        g.weight.set_requires_grad(false);
        g.bias.set_requires_grad(false);
    }
    Ok(total / train.len() as f64)
}

/// Number of joint steps the budget affords. With `alpha = 1` the loop costs
/// no calls and runs as many steps as the DFO variant would.
pub fn planned_steps(config: &EpisodeConfig, train_len: usize) -> u64 {
    let parts = if config.batch_size == 0 { 1 } else { train_len.div_ceil(config.batch_size).max(1) };
    config.budget / (config.population_size * parts) as u64
}

/// Runs joint steps until the budget is spent.
pub fn train(
    state: &mut TrainState,
    train: &[Example],
    template: &[u32],
    teacher: &BlackBox,
    student: &ModelParams,
) -> Result<Vec<StepMetrics>> {
    let steps = planned_steps(&state.config, train.len());
    let mut history = Vec::with_capacity(steps as usize);
    while state.step < steps {
        let m = joint_train_step(state, train, template, teacher, student)?;
        log::debug!("step {}: calls {} best CE {:.4}", m.step, m.api_calls_used, m.best_teacher_ce);
        history.push(m);
    }
    Ok(history)
}

/// Predicted class for one instance under the trained prompt. One metered call.
pub fn infer(
    state: &TrainState,
    instance: &[u32],
    template: &[u32],
    teacher: &BlackBox,
    student: &ModelParams,
) -> Result<usize> {
    state.verify_frozen()?;
    let p = state.prompt_for(instance, &state.best_z, student)?;
    let mut ids = instance.to_vec();
    ids.extend_from_slice(template);
    Ok(argmax(&teacher.query_one(p.values(), &ids)?))
}

/// [`infer`] over many instances, one call each, in parallel.
pub fn infer_all(
    state: &TrainState,
    examples: &[Example],
    template: &[u32],
    teacher: &BlackBox,
    student: &ModelParams,
) -> Result<Vec<usize>> {
    examples.par_iter().map(|e| infer(state, &e.instance, template, teacher, student)).collect()
}

pub fn write_steps_csv(history: &[StepMetrics], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
