//! Class-conditional unigram-mixture tasks with per-task steering prefixes.
//!
//! Vocabulary layout, in id order: template tokens (the last one is the mask
//! position), label words, steering tokens (`num_tasks * n_prompt_tokens`),
//! one content group per (task, class), then background tokens.
//!
//! An instance carries an independent latent label for every task. Each token
//! is, with probability `signal_rate`, drawn from a uniformly chosen task's
//! content groups (its own class's group with probability `purity`, otherwise
//! another class's group); otherwise it is background. Task 0 is the
//! downstream task whose steering prefix is withheld from clients.
//!
//! Every token also carries a Gaussian affinity per task. Under a random prefix
//! the pre-training target mixes the tasks' labels with weights
//! `softmax(affinity_scale * mean affinity of the prefix tokens)`, so prompts
//! away from any steering prefix still move the teacher smoothly between tasks.

use std::collections::HashSet;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::models::{PretrainCorpus, PretrainExample};

pub const TEMPLATE_LEN: usize = 2;
pub const MIN_ORACLE_ACCURACY: f64 = 0.9;
pub const STEERING_AFFINITY: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub num_tasks: usize,
    pub vocab_size: usize,
    pub n_prompt_tokens: usize,
    pub group_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub signal_rate: f64,
    pub purity: f64,
    /// When set, all tasks read the same content groups and task `k` labels an
    /// instance `(y + k) mod C`, so the steering prefix selects a label mapping.
    pub shared_content: bool,
    /// Sharpness of the task preference a random prompt induces through its
    /// tokens' affinities; 0 makes random prompts weigh all tasks equally.
    pub affinity_scale: f64,
    /// Examples per class in each of the train and dev splits.
    pub shots: usize,
    pub test_size: usize,
    pub pretrain_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            num_tasks: 2,
            vocab_size: 256,
            n_prompt_tokens: 5,
            group_size: 12,
            min_len: 10,
            max_len: 16,
            signal_rate: 0.9,
            purity: 0.85,
            shared_content: false,
            affinity_scale: 3.0,
            shots: 16,
            test_size: 1000,
            pretrain_size: 6000,
            seed: 0,
        }
    }
}

/// Token-id layout derived from a [`TaskSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLayout {
    pub template: Vec<u32>,
    pub label_word_ids: Vec<u32>,
    pub steering_prefixes: Vec<Vec<u32>>,
    /// `groups[task][class]`.
    pub groups: Vec<Vec<Range<u32>>>,
    pub background: Range<u32>,
    pub shared_content: bool,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.num_tasks < 1 || self.n_prompt_tokens < 1 || self.group_size < 1 {
            return bad("num_tasks, n_prompt_tokens and group_size must be positive");
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if !(0.0..=1.0).contains(&self.signal_rate) || !(0.0..=1.0).contains(&self.purity) {
            return bad("signal_rate and purity must lie in [0, 1]");
        }
        if !(self.affinity_scale >= 0.0 && self.affinity_scale.is_finite()) {
            return bad("affinity_scale must be finite and non-negative");
        }
        if self.shots < 1 {
            return bad("shots must be positive");
        }
        let used = self.reserved_ids();
        if used > self.vocab_size || (self.signal_rate < 1.0 && used == self.vocab_size) {
            return Err(Error::Spec(format!(
                "vocabulary of {} cannot hold {used} reserved ids plus background tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn content_tasks(&self) -> usize {
        if self.shared_content {
            1
        } else {
            self.num_tasks
        }
    }

    fn reserved_ids(&self) -> usize {
        TEMPLATE_LEN
            + self.num_classes
            + self.num_tasks * self.n_prompt_tokens
            + self.content_tasks() * self.num_classes * self.group_size
    }

    /// Per-task labels for an instance whose task-0 label is drawn from `rng`
    /// (or fixed to `first`).
    fn draw_labels(&self, first: Option<usize>, rng: &mut impl Rng) -> Vec<usize> {
        let c = self.num_classes;
        if self.shared_content {
            let y = first.unwrap_or_else(|| rng.random_range(0..c));
            (0..self.num_tasks).map(|k| (y + k) % c).collect()
        } else {
            let mut labels: Vec<usize> = (0..self.num_tasks).map(|_| rng.random_range(0..c)).collect();
            if let Some(y) = first {
                labels[0] = y;
            }
            labels
        }
    }

    pub fn layout(&self) -> Result<TaskLayout> {
        self.validate()?;
        let mut next = 0u32;
        let mut take = |n: usize| {
            let r = next..next + n as u32;
            next += n as u32;
            r
        };
        let template: Vec<u32> = take(TEMPLATE_LEN).collect();
        let label_word_ids: Vec<u32> = take(self.num_classes).collect();
        let steering_prefixes = (0..self.num_tasks).map(|_| take(self.n_prompt_tokens).collect()).collect();
        let own: Vec<Vec<Range<u32>>> = (0..self.content_tasks())
            .map(|_| (0..self.num_classes).map(|_| take(self.group_size)).collect())
            .collect();
        let groups = (0..self.num_tasks).map(|k| own[k % own.len()].clone()).collect();
        let background = next..self.vocab_size as u32;
        Ok(TaskLayout { template, label_word_ids, steering_prefixes, groups, background, shared_content: self.shared_content })
    }
}

impl TaskLayout {
    /// Bayes-optimal label of `instance` under `task`: the class whose content
    /// group occurs most often (ties to the lowest class), shifted by `task`
    /// when content is shared.
    pub fn bayes_predict(&self, instance: &[u32], task: usize) -> usize {
        let c = self.label_word_ids.len();
        if self.shared_content {
            return (self.majority_group(instance, 0) + task) % c;
        }
        self.majority_group(instance, task)
    }

    fn majority_group(&self, instance: &[u32], task: usize) -> usize {
        let counts: Vec<usize> =
            self.groups[task].iter().map(|g| instance.iter().filter(|t| g.contains(t)).count()).collect();
        let mut best = 0;
        for (c, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = c;
            }
        }
        best
    }

    fn sample_instance(&self, spec: &TaskSpec, labels: &[usize], rng: &mut impl Rng) -> Vec<u32> {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        (0..len)
            .map(|_| {
                if rng.random::<f64>() < spec.signal_rate {
                    let task = if spec.shared_content { 0 } else { rng.random_range(0..spec.num_tasks) };
                    let mut class = labels[task];
                    if rng.random::<f64>() >= spec.purity {
                        class = (class + rng.random_range(1..spec.num_classes)) % spec.num_classes;
                    }
                    rng.random_range(self.groups[task][class].clone())
                } else {
                    rng.random_range(self.background.clone())
                }
            })
            .collect()
    }
}

/// `|train| == |dev| == k * C`, disjoint from each other and from the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug, Clone)]
pub struct GeneratedTask {
    pub spec: TaskSpec,
    pub layout: TaskLayout,
    pub corpus: PretrainCorpus,
    pub split: FewShotSplit,
    /// Bayes-oracle accuracy, the minimum over the test split and the corpus.
    pub oracle_accuracy: f64,
}

/// Deterministic corpus and few-shot split for `spec`.
pub fn generate_task(spec: &TaskSpec) -> Result<GeneratedTask> {
    let layout = spec.layout()?;
    let (t, c) = (spec.num_tasks, spec.num_classes);
    let mut seen = HashSet::new();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut examples = Vec::with_capacity(spec.pretrain_size);
    for i in 0..spec.pretrain_size {
        let labels = spec.draw_labels(None, &mut rng);
        let instance = layout.sample_instance(spec, &labels, &mut rng);
        seen.insert(instance.clone());
        let mut token_ids = instance;
        token_ids.extend_from_slice(&layout.template);
        examples.push(PretrainExample { token_ids, labels, task: i % t });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let mut draw = |n_per_class: usize, seen: &mut HashSet<Vec<u32>>| -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(n_per_class * c);
        for i in 0..n_per_class * c {
            let label = i % c;
            let mut attempts = 0;
            loop {
                let labels = spec.draw_labels(Some(label), &mut rng);
                let instance = layout.sample_instance(spec, &labels, &mut rng);
                if seen.insert(instance.clone()) {
                    out.push(Example { instance, label });
                    break;
                }
                attempts += 1;
                if attempts > 1000 {
                    return Err(Error::Spec("cannot draw enough distinct instances".into()));
                }
            }
        }
        Ok(out)
    };
    let train = draw(spec.shots, &mut seen)?;
    let dev = draw(spec.shots, &mut seen)?;
    let test = draw(spec.test_size.div_ceil(c), &mut seen)?;
    let split = FewShotSplit { train, dev, test };

    let test_acc = oracle_accuracy(&layout, &split.test);
    let corpus_hits = examples
        .iter()
        .filter(|e| layout.bayes_predict(&e.token_ids[..e.token_ids.len() - TEMPLATE_LEN], e.task) == e.labels[e.task])
        .count();
    let corpus_acc = if examples.is_empty() { 1.0 } else { corpus_hits as f64 / examples.len() as f64 };
    let oracle = test_acc.min(corpus_acc);
    if oracle < MIN_ORACLE_ACCURACY {
        return Err(Error::Spec(format!(
            "Bayes-oracle accuracy {oracle:.3} below {MIN_ORACLE_ACCURACY}; the task is not learnable"
        )));
    }
    let corpus = PretrainCorpus {
        steering_prefixes: layout.steering_prefixes.clone(),
        examples,
        token_affinity: token_affinity(spec, &layout),
        affinity_scale: spec.affinity_scale,
    };
    Ok(GeneratedTask { spec: spec.clone(), layout, corpus, split, oracle_accuracy: oracle })
}

/// Standard-normal affinity per token and task, plus [`STEERING_AFFINITY`]
/// towards its own task for every steering token.
fn token_affinity(spec: &TaskSpec, layout: &TaskLayout) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(3);
    let mut affinity: Vec<Vec<f64>> =
        (0..spec.vocab_size).map(|_| (0..spec.num_tasks).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    for (k, prefix) in layout.steering_prefixes.iter().enumerate() {
        for &t in prefix {
            affinity[t as usize][k] += STEERING_AFFINITY;
        }
    }
    affinity
}

pub fn oracle_accuracy(layout: &TaskLayout, examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 1.0;
    }
    let hits = examples.iter().filter(|e| layout.bayes_predict(&e.instance, 0) == e.label).count();
    hits as f64 / examples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> TaskSpec {
        TaskSpec { test_size: 200, pretrain_size: 300, seed, ..TaskSpec::default() }
    }

    #[test]
    fn split_sizes_follow_shots() {
        let g = generate_task(&small(0)).unwrap();
        assert_eq!(g.split.train.len(), 32);
        assert_eq!(g.split.dev.len(), 32);
        let spec = TaskSpec { num_classes: 14, num_tasks: 1, group_size: 6, ..small(1) };
        let g = generate_task(&spec).unwrap();
        assert_eq!(g.split.train.len(), 224);
        assert_eq!(g.split.dev.len(), 224);
    }

    #[test]
    fn splits_are_disjoint_and_balanced() {
        let g = generate_task(&small(3)).unwrap();
        let train: HashSet<_> = g.split.train.iter().map(|e| &e.instance).collect();
        let dev: HashSet<_> = g.split.dev.iter().map(|e| &e.instance).collect();
        let test: HashSet<_> = g.split.test.iter().map(|e| &e.instance).collect();
        assert!(train.is_disjoint(&dev) && train.is_disjoint(&test) && dev.is_disjoint(&test));
        for c in 0..2 {
            assert_eq!(g.split.train.iter().filter(|e| e.label == c).count(), 16);
        }
        assert!(g.split.test.len() > 5 * g.split.train.len());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_task(&small(9)).unwrap();
        let b = generate_task(&small(9)).unwrap();
        assert_eq!(serde_json::to_vec(&a.split).unwrap(), serde_json::to_vec(&b.split).unwrap());
        assert_eq!(serde_json::to_vec(&a.corpus).unwrap(), serde_json::to_vec(&b.corpus).unwrap());
        let c = generate_task(&small(10)).unwrap();
        assert_ne!(a.split, c.split);
    }

    #[test]
    fn default_task_is_learnable() {
        let g = generate_task(&small(0)).unwrap();
        assert!(g.oracle_accuracy >= MIN_ORACLE_ACCURACY, "{}", g.oracle_accuracy);
    }

    #[test]
    fn noise_only_task_is_rejected() {
        let spec = TaskSpec { signal_rate: 0.0, ..small(0) };
        assert!(matches!(generate_task(&spec), Err(Error::Spec(_))));
        let spec = TaskSpec { purity: 0.5, ..small(0) };
        assert!(matches!(generate_task(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn shared_content_permutes_labels() {
        let spec = TaskSpec { shared_content: true, num_tasks: 3, num_classes: 3, ..small(4) };
        let g = generate_task(&spec).unwrap();
        assert!(g.layout.groups.iter().all(|gs| *gs == g.layout.groups[0]));
        for ex in &g.corpus.examples {
            assert_eq!(ex.labels, (0..3).map(|k| (ex.labels[0] + k) % 3).collect::<Vec<_>>());
        }
        assert!(g.oracle_accuracy >= MIN_ORACLE_ACCURACY);
        let d = TaskSpec::default();
        assert!(TaskSpec { shared_content: true, ..d.clone() }.reserved_ids() < d.reserved_ids());
    }

    #[test]
    fn invalid_specs() {
        assert!(TaskSpec { vocab_size: 20, ..small(0) }.validate().is_err());
        assert!(TaskSpec { min_len: 5, max_len: 4, ..small(0) }.validate().is_err());
        assert!(TaskSpec { num_classes: 1, ..small(0) }.validate().is_err());
    }

    #[test]
    fn layout_ids_are_distinct() {
        let l = small(0).layout().unwrap();
        let mut all: Vec<u32> = l.template.clone();
        all.extend(&l.label_word_ids);
        all.extend(l.steering_prefixes.concat());
        for g in l.groups.iter().flatten() {
            all.extend(g.clone());
        }
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(l.background.start as usize, n);
    }
}
