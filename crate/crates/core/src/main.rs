use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use gdfo::bench::experiment::{self, Plan, Preset};
use gdfo::bench::{generate_task, ExperimentConfig, GeneratedTask, TaskSpec};
use gdfo::blackbox::{serve, BlackBox, TeacherService};
use gdfo::checkpoint::Checkpoint;
use gdfo::data::accuracy;
use gdfo::distill::{run_distillation, write_history_csv, DistillConfig};
use gdfo::models::{pretrain_teacher, ModelParams};
use gdfo::promptspace::{sample_initial_prompt, ProjectionMatrix};
use gdfo::trainer::{infer_all, train, write_steps_csv, EpisodeConfig, TrainState};
use gdfo::{Error, Result};

#[derive(Parser)]
#[command(name = "gdfo", version, about = "Hybrid black-box prompt tuning on synthetic few-shot tasks")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task corpus and few-shot split as JSON.
    GenTask {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train and freeze a teacher checkpoint.
    PretrainTeacher {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a teacher checkpoint over TCP.
    Serve {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long)]
        budget: u64,
    },
    /// Distill a student from the teacher on the k-shot training split.
    Distill {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Teacher checkpoint; its embedding table supplies random prompts.
        #[arg(long)]
        teacher: PathBuf,
        /// Query a running service instead of the checkpoint.
        #[arg(long, env = "GDFO_ENDPOINT")]
        endpoint: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the joint prompt-training loop.
    Train {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, env = "GDFO_ENDPOINT")]
        endpoint: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Predict the test split with a trained state.
    Infer {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long, env = "GDFO_ENDPOINT")]
        endpoint: Option<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run presets over seeds and write CSVs plus a comparison plot.
    Experiment {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        presets: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Grid over one config field, e.g. `episode.alpha=0.25,0.5`.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Sweep alpha over seeds and write CSVs plus the accuracy curve.
    AlphaSweep {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn task_for(cfg: &ExperimentConfig, seed: u64) -> Result<GeneratedTask> {
    generate_task(&TaskSpec { seed, ..cfg.task.clone() })
}

fn load_model(path: &Path) -> Result<ModelParams> {
    ModelParams::from_checkpoint(&Checkpoint::load(path)?)
}

fn handle(teacher: &ModelParams, endpoint: Option<&str>, budget: u64) -> Result<BlackBox> {
    match endpoint {
        Some(e) => BlackBox::connect(e),
        None => Ok(BlackBox::local(Arc::new(TeacherService::new(teacher.clone(), budget)))),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenTask { seed, out } => {
            let task = task_for(&cfg, seed)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("split.json"), to_json(&task.split)?)?;
            std::fs::write(out.join("corpus.json"), to_json(&task.corpus)?)?;
            println!(
                "train {} dev {} test {} corpus {} oracle accuracy {:.4}",
                task.split.train.len(),
                task.split.dev.len(),
                task.split.test.len(),
                task.corpus.examples.len(),
                task.oracle_accuracy
            );
        }
        Command::PretrainTeacher { seed, out } => {
            let task = task_for(&cfg, seed)?;
            let pre = pretrain_teacher(&task.corpus, &experiment::pretrain_config(&cfg, &task, seed))?;
            let ck = pre.params.to_checkpoint();
            ck.save(&out)?;
            println!(
                "held-out accuracy {:.4} after {} epochs; checksum {}",
                pre.report.heldout_accuracy,
                pre.report.epochs_run,
                ck.checksum()
            );
        }
        Command::Serve { teacher, bind, budget } => {
            let ck = Checkpoint::load(&teacher)?;
            let service = Arc::new(TeacherService::new(ModelParams::from_checkpoint(&ck)?, budget));
            let server = serve(service, &bind)?;
            println!("listening on {} (budget {budget}, checksum {})", server.local_addr(), ck.checksum());
            server.wait();
        }
        Command::Distill { seed, teacher, endpoint, out, csv } => {
            let task = task_for(&cfg, seed)?;
            let t = load_model(&teacher)?;
            let dcfg = DistillConfig { seed: experiment::sub_seed(seed, experiment::TAG_DISTILL), ..cfg.distill.clone() };
            let budget = dcfg.epochs as u64 * task.split.train.len() as u64;
            let bb = handle(&t, endpoint.as_deref(), budget)?;
            let student = ModelParams::init(experiment::student_config(&cfg, &task), experiment::sub_seed(seed, experiment::TAG_STUDENT))?;
            let kd = run_distillation(&bb, student, &t.embedding_table(), &task.split.train, &task.layout.template, &dcfg)?;
            kd.student.to_checkpoint().save(&out)?;
            if let Some(p) = csv {
                write_history_csv(&kd.history, p)?;
            }
            let last = kd.history.last();
            println!(
                "{} teacher calls; final agreement {:.3}",
                kd.teacher_calls,
                last.map_or(f64::NAN, |m| m.agreement)
            );
        }
        Command::Train { seed, teacher, student, endpoint, alpha, out, csv } => {
            let task = task_for(&cfg, seed)?;
            let t = load_model(&teacher)?;
            let s = load_model(&student)?;
            let episode = EpisodeConfig {
                alpha: alpha.unwrap_or(cfg.episode.alpha),
                seed: experiment::sub_seed(seed, experiment::TAG_EPISODE),
                ..cfg.episode.clone()
            };
            let bb = handle(&t, endpoint.as_deref(), episode.budget)?;
            let table = t.embedding_table();
            let p0 = sample_initial_prompt(&table, cfg.task.n_prompt_tokens, experiment::sub_seed(seed, experiment::TAG_P0))?;
            let a = ProjectionMatrix::new(p0.len(), episode.subspace_dim, episode.projection_std, experiment::sub_seed(seed, experiment::TAG_PROJECTION))?;
            let mut state = TrainState::new(episode, p0, a, s.config().embed_dim)?;
            let history = train(&mut state, &task.split.train, &task.layout.template, &bb, &s)?;
            state.to_checkpoint().save(&out)?;
            if let Some(p) = csv {
                write_steps_csv(&history, p)?;
            }
            println!("{} steps, {} API calls, best train CE {:.4}", state.step, state.api_calls_used, state.best_loss);
        }
        Command::Infer { seed, teacher, student, state, endpoint, csv } => {
            let task = task_for(&cfg, seed)?;
            let t = load_model(&teacher)?;
            let s = load_model(&student)?;
            let st = TrainState::from_checkpoint(&Checkpoint::load(&state)?)?;
            let bb = handle(&t, endpoint.as_deref(), task.split.test.len() as u64)?;
            let preds = infer_all(&st, &task.split.test, &task.layout.template, &bb, &s)?;
            if let Some(p) = csv {
                let mut w = csv::Writer::from_path(p)?;
                w.write_record(["index", "label", "prediction"])?;
                for (i, (e, p)) in task.split.test.iter().zip(&preds).enumerate() {
                    w.write_record([i.to_string(), e.label.to_string(), p.to_string()])?;
                }
                w.flush()?;
            }
            println!("test accuracy {:.4} over {} instances", accuracy(&task.split.test, &preds), preds.len());
        }
        Command::Experiment { out, presets, seeds, grid } => {
            let presets = presets
                .unwrap_or_else(|| cfg.experiment.presets.clone())
                .iter()
                .map(|p| Preset::parse(p))
                .collect::<Result<Vec<_>>>()?;
            let seeds = seeds.unwrap_or_else(|| cfg.experiment.seeds.clone());
            let plan = Plan::Presets(presets);
            let variants = match grid {
                Some(g) => grid_variants(&cfg, &g)?,
                None => vec![(String::new(), cfg.clone())],
            };
            for (label, c) in variants {
                let dir = if label.is_empty() { out.clone() } else { out.join(&label) };
                let report = experiment::run_plan(&c, &seeds, &plan)?;
                experiment::write_report(&report, &dir, &plan)?;
                print_summary(&label, &report.summary);
            }
        }
        Command::AlphaSweep { out, alphas, seeds } => {
            let alphas = alphas.unwrap_or_else(|| cfg.experiment.alphas.clone());
            let seeds = seeds.unwrap_or_else(|| cfg.experiment.seeds.clone());
            let plan = Plan::AlphaSweep(alphas);
            let report = experiment::run_plan(&cfg, &seeds, &plan)?;
            experiment::write_report(&report, &out, &plan)?;
            print_summary("", &report.summary);
        }
    }
    Ok(())
}

/// Expands `section.field=v1,v2,...` into one config per value.
fn grid_variants(cfg: &ExperimentConfig, spec: &str) -> Result<Vec<(String, ExperimentConfig)>> {
    let (key, values) = spec.split_once('=').ok_or_else(|| Error::Usage(format!("grid '{spec}' needs key=v1,v2")))?;
    let (section, field) =
        key.split_once('.').ok_or_else(|| Error::Usage(format!("grid key '{key}' needs section.field")))?;
    values
        .split(',')
        .map(|v| {
            let mut doc: toml::Table = toml::from_str(&cfg.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
            let table = doc
                .get_mut(section)
                .and_then(|t| t.as_table_mut())
                .ok_or_else(|| Error::Usage(format!("unknown config section '{section}'")))?;
            let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {v}"))
                .map_err(|e| Error::Usage(format!("bad grid value '{v}': {e}")))?
                .remove("v")
                .expect("parsed key");
            table.insert(field.to_string(), value);
            let variant = ExperimentConfig::from_toml(&toml::to_string(&doc).expect("serializable"))?;
            Ok((format!("{section}.{field}={v}"), variant))
        })
        .collect()
}

fn print_summary(label: &str, rows: &[experiment::SummaryRow]) {
    if !label.is_empty() {
        println!("[{label}]");
    }
    for r in rows {
        println!("{:<14} alpha {:<5} acc {:.4} ± {:.4} (n={})", r.name, r.alpha, r.mean_accuracy, r.std_accuracy, r.runs);
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
