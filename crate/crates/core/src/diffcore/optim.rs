use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Plain gradient descent: `param -= lr * grad`, then clears the gradients.
///
/// Every parameter must carry a gradient; none is modified if one is missing.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::Contract(format!("parameter {i} has no gradient")));
    }
    for p in params.iter_mut() {
        let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_default();
        p.data_mut().iter_mut().zip(&grad).for_each(|(w, g)| *w -= lr * g);
        p.zero_grad();
    }
    Ok(())
}

/// Adam with bias correction. Used for teacher pre-training only.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    /// Updates `params` from their gradients and clears them. The parameter list
    /// must be passed in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::Contract(format!("parameter {i} has no gradient")));
        }
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::Contract("Adam parameter list changed between steps".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_default();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
