use serde::{Deserialize, Serialize};

/// A labeled instance `x`. The template is appended at model-input time.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub instance: Vec<u32>,
    pub label: usize,
}

impl Example {
    /// Token ids `[x; t]`.
    pub fn with_template(&self, template: &[u32]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(self.instance.len() + template.len());
        ids.extend_from_slice(&self.instance);
        ids.extend_from_slice(template);
        ids
    }
}

/// Fraction of `predictions` equal to the labels of `examples`.
pub fn accuracy(examples: &[Example], predictions: &[usize]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = examples.iter().zip(predictions).filter(|(e, p)| e.label == **p).count();
    hits as f64 / examples.len() as f64
}
