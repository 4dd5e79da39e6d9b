use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::task::{generate_task, GeneratedTask};
use crate::blackbox::{BlackBox, TeacherService};
use crate::data::accuracy;
use crate::distill::{prediction_agreement, run_distillation, EpochMetrics};
use crate::error::{Error, Result};
use crate::models::{pretrain_teacher, EmbeddingTable, ModelConfig, ModelParams, PretrainConfig, PretrainReport};
use crate::promptspace::{sample_initial_prompt, ProjectionMatrix, PromptVector};
use crate::trainer::{infer_all, train, EpisodeConfig, StepMetrics, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Gdfo,
    GdfoWithoutKd,
    GdfoWithoutDfo,
    BbtOnly,
    ManualPrompt,
}

impl Preset {
    pub const ALL: [Preset; 5] =
        [Preset::Gdfo, Preset::GdfoWithoutKd, Preset::GdfoWithoutDfo, Preset::BbtOnly, Preset::ManualPrompt];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Gdfo => "gdfo",
            Preset::GdfoWithoutKd => "gdfo-wo-kd",
            Preset::GdfoWithoutDfo => "gdfo-wo-dfo",
            Preset::BbtOnly => "bbt-only",
            Preset::ManualPrompt => "manual-prompt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset '{s}'")))
    }

    /// Effective `alpha`, given the configured one.
    pub fn alpha(self, configured: f64) -> f64 {
        match self {
            Preset::Gdfo | Preset::GdfoWithoutKd => configured,
            Preset::GdfoWithoutDfo => 1.0,
            Preset::BbtOnly | Preset::ManualPrompt => 0.0,
        }
    }

    fn uses_kd(self) -> bool {
        !matches!(self, Preset::GdfoWithoutKd)
    }
}

/// Derived seed for one component of a run.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag.wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

pub const TAG_TEACHER: u64 = 1;
pub const TAG_STUDENT: u64 = 2;
pub const TAG_DISTILL: u64 = 3;
pub const TAG_P0: u64 = 4;
pub const TAG_PROJECTION: u64 = 5;
pub const TAG_EPISODE: u64 = 6;
pub const TAG_AGREEMENT: u64 = 7;

/// Everything shared by the presets of one seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub task: GeneratedTask,
    pub teacher: ModelParams,
    pub teacher_report: PretrainReport,
    pub student_init: ModelParams,
    pub student_kd: ModelParams,
    pub kd_history: Vec<EpochMetrics>,
    pub kd_calls: u64,
    pub agreement_before: f64,
    pub agreement_after: f64,
    pub p0: PromptVector,
    pub projection: ProjectionMatrix,
}

pub fn teacher_config(cfg: &ExperimentConfig, task: &GeneratedTask) -> ModelConfig {
    ModelConfig {
        vocab_size: cfg.task.vocab_size,
        embed_dim: cfg.teacher.embed_dim,
        n_prompt_tokens: cfg.task.n_prompt_tokens,
        hidden_dim: cfg.teacher.hidden_dim,
        encoder: cfg.teacher.encoder,
        label_word_ids: task.layout.label_word_ids.clone(),
    }
}

pub fn student_config(cfg: &ExperimentConfig, task: &GeneratedTask) -> ModelConfig {
    ModelConfig { hidden_dim: cfg.student.hidden_dim, encoder: cfg.student.encoder, ..teacher_config(cfg, task) }
}

/// Randomly initialized student, optionally reading the public embedding table.
pub fn init_student(cfg: &ExperimentConfig, task: &GeneratedTask, table: &EmbeddingTable, seed: u64) -> Result<ModelParams> {
    let config = student_config(cfg, task);
    let student = ModelParams::init(config.clone(), sub_seed(seed, TAG_STUDENT))?;
    if !cfg.student.public_embeddings {
        return Ok(student);
    }
    let mut weights = student.weights().clone();
    weights.embedding = table.as_tensor().clone();
    ModelParams::from_parts(config, weights)
}

pub fn pretrain_config(cfg: &ExperimentConfig, task: &GeneratedTask, seed: u64) -> PretrainConfig {
    let t = &cfg.teacher;
    PretrainConfig {
        model: teacher_config(cfg, task),
        epochs: t.epochs,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        random_prefix_rate: t.random_prefix_rate,
        blend_rate: t.blend_rate,
        holdout_fraction: t.holdout_fraction,
        accuracy_bar: t.accuracy_bar,
        early_stop_accuracy: t.early_stop_accuracy,
        seed: sub_seed(seed, TAG_TEACHER),
    }
}

/// Number of held-out instances used for the agreement measurement.
const AGREEMENT_SAMPLE: usize = 500;

/// Builds the task, pre-trains the teacher and distills the student for `seed`.
pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let spec = super::task::TaskSpec { seed, ..cfg.task.clone() };
    let task = generate_task(&spec)?;
    let pre = pretrain_teacher(&task.corpus, &pretrain_config(cfg, &task, seed))?;
    let teacher = pre.params;
    let table = teacher.embedding_table();
    let student_init = init_student(cfg, &task, &table, seed)?;

    let train_len = task.split.train.len() as u64;
    let budget = cfg.distill.epochs as u64 * train_len + 2;
    let bb = BlackBox::local(Arc::new(TeacherService::new(teacher.clone(), budget)));
    let held_out = &task.split.test[..task.split.test.len().min(AGREEMENT_SAMPLE)];
    let template = &task.layout.template;
    let agreement_seed = sub_seed(seed, TAG_AGREEMENT);
    let agreement_before = prediction_agreement(&bb, &student_init, &table, held_out, template, agreement_seed)?;
    let distill_cfg = crate::distill::DistillConfig { seed: sub_seed(seed, TAG_DISTILL), ..cfg.distill.clone() };
    let kd = run_distillation(&bb, student_init.clone(), &table, &task.split.train, template, &distill_cfg)?;
    let agreement_after = prediction_agreement(&bb, &kd.student, &table, held_out, template, agreement_seed)?;

    let p0 = sample_initial_prompt(&table, cfg.task.n_prompt_tokens, sub_seed(seed, TAG_P0))?;
    let projection = ProjectionMatrix::new(
        p0.len(),
        cfg.episode.subspace_dim,
        cfg.episode.projection_std,
        sub_seed(seed, TAG_PROJECTION),
    )?;
    log::info!(
        "seed {seed}: teacher held-out {:.3} after {} epochs, KD agreement {:.3} -> {:.3}",
        pre.report.heldout_accuracy,
        pre.report.epochs_run,
        agreement_before,
        agreement_after
    );
    Ok(SeedContext {
        seed,
        task,
        teacher,
        teacher_report: pre.report,
        student_init,
        student_kd: kd.student,
        kd_history: kd.history,
        kd_calls: kd.teacher_calls,
        agreement_before,
        agreement_after,
        p0,
        projection,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub preset: String,
    pub seed: u64,
    pub alpha: f64,
    pub test_accuracy: f64,
    pub steps: u64,
    pub best_train_ce: f64,
    pub kd_calls: u64,
    pub tuning_calls: u64,
    pub inference_calls: u64,
    /// Calls counted by the service, which must equal tuning plus inference.
    pub service_calls: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: RunResult,
    pub state: TrainState,
    pub history: Vec<StepMetrics>,
}

/// Runs one preset on a prepared seed. `alpha` overrides the configured value.
pub fn run_preset(cfg: &ExperimentConfig, ctx: &SeedContext, preset: Preset, alpha: Option<f64>) -> Result<RunOutput> {
    let alpha = preset.alpha(alpha.unwrap_or(cfg.episode.alpha));
    let episode = EpisodeConfig { alpha, seed: sub_seed(ctx.seed, TAG_EPISODE), ..cfg.episode.clone() };
    let student = if preset.uses_kd() { &ctx.student_kd } else { &ctx.student_init };
    let split = &ctx.task.split;
    let template = &ctx.task.layout.template;
    let service = Arc::new(TeacherService::new(ctx.teacher.clone(), episode.budget + split.test.len() as u64));
    let bb = BlackBox::local(service.clone());
    let mut state =
        TrainState::new(episode, ctx.p0.clone(), ctx.projection.clone(), student.config().embed_dim)?;
    let history = match preset {
        Preset::ManualPrompt => Vec::new(),
        _ => train(&mut state, &split.train, template, &bb, student)?,
    };
    let tuning_calls = state.api_calls_used;
    let predictions = infer_all(&state, &split.test, template, &bb, student)?;
    let result = RunResult {
        preset: preset.name().to_string(),
        seed: ctx.seed,
        alpha,
        test_accuracy: accuracy(&split.test, &predictions),
        steps: state.step,
        best_train_ce: state.best_loss,
        kd_calls: if preset.uses_kd() { ctx.kd_calls } else { 0 },
        tuning_calls,
        inference_calls: predictions.len() as u64,
        service_calls: service.status().calls_used,
    };
    log::info!("seed {} {} alpha {alpha}: test accuracy {:.4}", ctx.seed, preset.name(), result.test_accuracy);
    Ok(RunOutput { result, state, history })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub name: String,
    pub alpha: f64,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Mean and sample standard deviation of test accuracy, grouped by
/// (preset, alpha) in first-seen order.
pub fn summarize(results: &[RunResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in results {
        if !keys.iter().any(|(n, a)| *n == r.preset && *a == r.alpha) {
            keys.push((r.preset.clone(), r.alpha));
        }
    }
    keys.into_iter()
        .map(|(name, alpha)| {
            let xs: Vec<f64> =
                results.iter().filter(|r| r.preset == name && r.alpha == alpha).map(|r| r.test_accuracy).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            SummaryRow { name, alpha, runs: xs.len(), mean_accuracy: mean, std_accuracy: var.sqrt() }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub results: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
    pub contexts: Vec<SeedContext>,
}

/// What to run for each seed.
#[derive(Debug, Clone)]
pub enum Plan {
    Presets(Vec<Preset>),
    AlphaSweep(Vec<f64>),
}

/// Runs `plan` for every seed in parallel; results are ordered by seed, then plan entry.
pub fn run_plan(cfg: &ExperimentConfig, seeds: &[u64], plan: &Plan) -> Result<ExperimentReport> {
    if let Plan::AlphaSweep(alphas) = plan {
        for &a in alphas {
            crate::promptspace::check_alpha(a)?;
        }
    }
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let ctx = prepare_seed(cfg, seed)?;
            let results = match plan {
                Plan::Presets(presets) => {
                    presets.iter().map(|&p| run_preset(cfg, &ctx, p, None).map(|o| o.result)).collect::<Result<Vec<_>>>()?
                }
                Plan::AlphaSweep(alphas) => alphas
                    .iter()
                    .map(|&a| run_preset(cfg, &ctx, Preset::Gdfo, Some(a)).map(|o| o.result))
                    .collect::<Result<Vec<_>>>()?,
            };
            Ok((ctx, results))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut results = Vec::new();
    let mut contexts = Vec::new();
    for (ctx, r) in per_seed {
        contexts.push(ctx);
        results.extend(r);
    }
    let summary = summarize(&results);
    Ok(ExperimentReport { results, summary, contexts })
}

pub fn run_experiment(cfg: &ExperimentConfig, presets: &[Preset], seeds: &[u64]) -> Result<ExperimentReport> {
    run_plan(cfg, seeds, &Plan::Presets(presets.to_vec()))
}

pub fn alpha_sweep(cfg: &ExperimentConfig, alphas: &[f64], seeds: &[u64]) -> Result<ExperimentReport> {
    run_plan(cfg, seeds, &Plan::AlphaSweep(alphas.to_vec()))
}

pub fn write_csv<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `results.csv`, `summary.csv` and `<stem>.svg` under `dir`.
pub fn write_report(report: &ExperimentReport, dir: impl AsRef<Path>, plan: &Plan) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_csv(&report.results, dir.join("results.csv"))?;
    write_csv(&report.summary, dir.join("summary.csv"))?;
    let (stem, svg) = match plan {
        Plan::Presets(_) => ("presets", super::plot::bar_chart(&report.summary, "Test accuracy by preset")),
        Plan::AlphaSweep(_) => ("alpha_sweep", super::plot::alpha_curve(&report.summary, "Effect of alpha")),
    };
    std::fs::write(dir.join(format!("{stem}.svg")), svg)?;
    Ok(())
}
