//! Knowledge distillation of the black-box teacher into the student.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blackbox::{BlackBox, QueryItem};
use crate::data::Example;
use crate::diffcore::{sgd_step, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{argmax, EmbeddingTable, ModelInput, ModelParams};
use crate::promptspace::random_prompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub tau: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { tau: 1.0, lambda: 0.5, epochs: 200, learning_rate: 0.05, seed: 0 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdLosses {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

fn check_logits(student: &[f64], teacher: &[f64], label: usize) -> Result<()> {
    if student.len() != teacher.len() {
        return Err(Error::dim("kd_losses", format!("student has {} logits, teacher {}", student.len(), teacher.len())));
    }
    if label >= student.len() {
        return Err(Error::Contract(format!("label {label} outside {} classes", student.len())));
    }
    if student.iter().chain(teacher).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(())
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_logits(logits, logits, label)?;
    Ok(-log_softmax(logits)[label])
}

/// `(L_CE, L_KL, L)` with `L_KL = KL(softmax(S/tau) || softmax(T/tau))`.
pub fn kd_losses(student: &[f64], teacher: &[f64], label: usize, tau: f64, lambda: f64) -> Result<KdLosses> {
    check_logits(student, teacher, label)?;
    let ls = log_softmax(&student.iter().map(|v| v / tau).collect::<Vec<_>>());
    let lt = log_softmax(&teacher.iter().map(|v| v / tau).collect::<Vec<_>>());
    let kl = ls.iter().zip(&lt).map(|(s, t)| s.exp() * (s - t)).sum::<f64>();
    let ce = -log_softmax(student)[label];
    Ok(KdLosses { ce, kl, total: (1.0 - lambda) * ce + lambda * kl })
}

/// Tape version of [`kd_losses`]. The teacher logits enter as constants, so
/// no gradient can reach them. Returns `(ce, kl, total)` scalars.
pub fn kd_losses_on(
    tape: &mut Tape,
    student: Var,
    teacher: &[f64],
    label: usize,
    tau: f64,
    lambda: f64,
) -> Result<(Var, Var, Var)> {
    check_logits(tape.value(student), teacher, label)?;
    let c = teacher.len();
    let ce = cross_entropy_on(tape, student, label)?;
    let scaled = tape.scale(student, 1.0 / tau);
    let ls = tape.log_softmax(scaled);
    let ps = tape.exp(ls);
    let lt = log_softmax(&teacher.iter().map(|v| v / tau).collect::<Vec<_>>());
    let lt = tape.constant(&[c], lt)?;
    let diff = tape.sub(ls, lt)?;
    let terms = tape.mul(ps, diff)?;
    let kl = tape.sum(terms);
    let a = tape.scale(ce, 1.0 - lambda);
    let b = tape.scale(kl, lambda);
    let total = tape.add(a, b)?;
    Ok((ce, kl, total))
}

/// `-log softmax(logits)[label]` as a scalar on the tape.
pub fn cross_entropy_on(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let c = tape.value(logits).len();
    if label >= c {
        return Err(Error::Contract(format!("label {label} outside {c} classes")));
    }
    let lp = tape.log_softmax(logits);
    let mut onehot = vec![0.0; c];
    onehot[label] = -1.0;
    let sel = tape.constant(&[c], onehot)?;
    let prod = tape.mul(lp, sel)?;
    Ok(tape.sum(prod))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    /// Student accuracy on the training instances, measured before each update.
    pub accuracy: f64,
    /// Fraction of instances where student and teacher argmax agree.
    pub agreement: f64,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: ModelParams,
    pub history: Vec<EpochMetrics>,
    pub teacher_calls: u64,
}

/// Trains `student` to mimic `teacher` on `data`, drawing a fresh random
/// prompt from `table` for every instance in every epoch. One teacher call
/// per instance per epoch.
pub fn run_distillation(
    teacher: &BlackBox,
    mut student: ModelParams,
    table: &EmbeddingTable,
    data: &[Example],
    template: &[u32],
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    let calls_before = teacher.calls_made();
    let n = student.config().n_prompt_tokens;
    if table.embed_dim() != student.config().embed_dim {
        return Err(Error::dim("distill", "teacher embedding width differs from the student's"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    student.set_trainable(true);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let (mut hits, mut agree) = (0usize, 0usize);
        for &i in &order {
            let ex = &data[i];
            let prompt = random_prompt(table, n, &mut rng).into_values();
            let token_ids = ex.with_template(template);
            let t_logits = teacher.query_one(&prompt, &token_ids)?;

            let mut tape = Tape::new();
            let bound = student.bind(&mut tape);
            let p = tape.constant(&[prompt.len()], prompt)?;
            let s_logits = student.forward_on(&mut tape, &bound, p, &token_ids)?;
            let s_pred = argmax(tape.value(s_logits));
            hits += usize::from(s_pred == ex.label);
            agree += usize::from(s_pred == argmax(&t_logits));
            let (ce, kl, total) = kd_losses_on(&mut tape, s_logits, &t_logits, ex.label, cfg.tau, cfg.lambda)?;
            sums[0] += tape.scalar_value(total);
            sums[1] += tape.scalar_value(ce);
            sums[2] += tape.scalar_value(kl);
            tape.backward(total)?;
            let mut tensors: Vec<&mut Tensor> = student.weights_mut().named_mut().into_iter().map(|(_, t)| t).collect();
            for (v, t) in bound.trainable.iter().zip(tensors.iter_mut()) {
                tape.accumulate_into(*v, t)?;
            }
            sgd_step(&mut tensors, cfg.learning_rate)?;
        }
        let m = data.len().max(1) as f64;
        let metrics = EpochMetrics {
            epoch,
            loss: sums[0] / m,
            ce: sums[1] / m,
            kl: sums[2] / m,
            accuracy: hits as f64 / m,
            agreement: agree as f64 / m,
        };
        log::debug!("kd epoch {epoch}: loss {:.4} kl {:.4} agreement {:.3}", metrics.loss, metrics.kl, metrics.agreement);
        history.push(metrics);
    }
    student.set_trainable(false);
    Ok(DistillOutcome { student, history, teacher_calls: teacher.calls_made() - calls_before })
}

/// Student/teacher argmax agreement on `examples` under per-instance random
/// prompts drawn with `seed`. Issues one batched teacher query.
pub fn prediction_agreement(
    teacher: &BlackBox,
    student: &ModelParams,
    table: &EmbeddingTable,
    examples: &[Example],
    template: &[u32],
    seed: u64,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = student.config().n_prompt_tokens;
    let items: Vec<QueryItem> = examples
        .iter()
        .map(|e| QueryItem { prompt: random_prompt(table, n, &mut rng).into_values(), token_ids: e.with_template(template) })
        .collect();
    let teacher_logits = teacher.query(items.clone())?;
    let mut agree = 0usize;
    for (item, t) in items.into_iter().zip(&teacher_logits) {
        let s = student.forward(&ModelInput { prompt: item.prompt, token_ids: item.token_ids })?;
        agree += usize::from(argmax(&s) == argmax(t));
    }
    Ok(agree as f64 / examples.len() as f64)
}

pub fn write_history_csv(history: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_logits_have_zero_kl() {
        let l = kd_losses(&[0.3, -1.2, 2.0], &[0.3, -1.2, 2.0], 1, 1.0, 0.5).unwrap();
        assert_eq!(l.kl, 0.0);
    }

    #[test]
    fn lambda_endpoints() {
        let (s, t) = ([0.1, 0.7], [1.0, -0.4]);
        let l0 = kd_losses(&s, &t, 0, 1.0, 0.0).unwrap();
        assert_eq!(l0.total, l0.ce);
        let l1 = kd_losses(&s, &t, 0, 1.0, 1.0).unwrap();
        assert_eq!(l1.total, l1.kl);
    }

    #[test]
    fn two_class_kl_matches_direct_sum() {
        // direct sum over classes: p_s = [1/2, 1/2], p_t = [2/3, 1/3]
        let oracle = 0.5 * (0.5f64 / (2.0 / 3.0)).ln() + 0.5 * (0.5f64 / (1.0 / 3.0)).ln();
        let l = kd_losses(&[0.0, 0.0], &[2f64.ln(), 0.0], 0, 1.0, 0.5).unwrap();
        assert!((l.kl - oracle).abs() < 1e-15);
        assert!((l.kl - 0.0589).abs() < 5e-5);
    }

    #[test]
    fn errors() {
        assert!(matches!(kd_losses(&[f64::NAN, 0.0], &[0.0, 0.0], 0, 1.0, 0.5), Err(Error::Numeric(_))));
        assert!(matches!(kd_losses(&[0.0, 0.0], &[0.0, 0.0], 2, 1.0, 0.5), Err(Error::Contract(_))));
        assert!(kd_losses(&[0.0], &[0.0, 0.0], 0, 1.0, 0.5).is_err());
        assert!(DistillConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { lambda: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn tape_losses_match_plain_and_skip_teacher() {
        let (s, t) = (vec![0.4, -0.3, 1.1], vec![-0.2, 0.9, 0.05]);
        let plain = kd_losses(&s, &t, 2, 2.0, 0.3).unwrap();
        let mut tape = Tape::new();
        let sv = tape.leaf(&Tensor::vector(&s).requiring_grad());
        let (ce, kl, total) = kd_losses_on(&mut tape, sv, &t, 2, 2.0, 0.3).unwrap();
        assert!((tape.scalar_value(ce) - plain.ce).abs() < 1e-14);
        assert!((tape.scalar_value(kl) - plain.kl).abs() < 1e-14);
        assert!((tape.scalar_value(total) - plain.total).abs() < 1e-14);
        tape.backward(total).unwrap();
        assert!(tape.grad(sv).is_some());
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_decomposes(s in proptest::collection::vec(-10.0f64..10.0, 4),
                                         t in proptest::collection::vec(-10.0f64..10.0, 4),
                                         tau in 0.2f64..5.0, lambda in 0.0f64..=1.0, label in 0usize..4) {
            let l = kd_losses(&s, &t, label, tau, lambda).unwrap();
            prop_assert!(l.kl >= 0.0);
            prop_assert!((l.total - ((1.0 - lambda) * l.ce + lambda * l.kl)).abs() <= 1e-12);
        }
    }
}
