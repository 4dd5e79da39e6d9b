//! Prompt algebra: the initial prompt `p0`, the random projection `A` that lifts
//! a low-dimensional `z` into prompt space, and the fused prompt
//! `alpha * p_gd + (1 - alpha) * (p0 + A z)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{digest_f64, Checkpoint};
use crate::error::{Error, Result};
use crate::models::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptRole {
    Initial,
    Generated,
    Projected,
    Combined,
    Random,
}

impl PromptRole {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptRole::Initial => "p0",
            PromptRole::Generated => "p_gd",
            PromptRole::Projected => "az",
            PromptRole::Combined => "combined",
            PromptRole::Random => "random_pr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "p0" => PromptRole::Initial,
            "p_gd" => PromptRole::Generated,
            "az" => PromptRole::Projected,
            "combined" => PromptRole::Combined,
            "random_pr" => PromptRole::Random,
            other => return Err(Error::Checkpoint(format!("unknown prompt role '{other}'"))),
        })
    }
}

/// Flattened continuous prompt of width `D = n * e`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptVector {
    values: Vec<f64>,
    role: PromptRole,
}

impl PromptVector {
    pub fn new(values: Vec<f64>, role: PromptRole) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("prompt entry {i} is not finite")));
        }
        Ok(Self { values, role })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn role(&self) -> PromptRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn checksum(&self) -> String {
        digest_f64(&self.values)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("prompt");
        ck.push_str("role", self.role.as_str());
        ck.push_tensor("values", &[self.values.len()], &self.values);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("prompt")?;
        Self::new(ck.get_tensor("values")?.values.clone(), PromptRole::parse(ck.get_str("role")?)?)
    }
}

/// Concatenated embeddings of `n` uniformly drawn vocabulary tokens.
pub fn sample_initial_prompt(table: &EmbeddingTable, n: usize, seed: u64) -> Result<PromptVector> {
    if n == 0 {
        return Err(Error::Config("initial prompt needs at least one token".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PromptVector::new(table.random_prompt(n, &mut rng), PromptRole::Initial)
}

/// Random prompt `p_r` from an existing generator.
pub fn random_prompt(table: &EmbeddingTable, n: usize, rng: &mut impl Rng) -> PromptVector {
    PromptVector { values: table.random_prompt(n, rng), role: PromptRole::Random }
}

/// Fixed `D x d` Gaussian projection matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    std: f64,
    seed: u64,
}

impl ProjectionMatrix {
    /// Entries i.i.d. `N(0, std^2)`; `std = None` uses `1 / sqrt(d)`.
    pub fn new(prompt_dim: usize, subspace_dim: usize, std: Option<f64>, seed: u64) -> Result<Self> {
        if subspace_dim == 0 {
            return Err(Error::Config("subspace dimension must be at least 1".into()));
        }
        if subspace_dim > prompt_dim {
            return Err(Error::Config(format!(
                "subspace dimension {subspace_dim} exceeds prompt dimension {prompt_dim}"
            )));
        }
        let std = std.unwrap_or(1.0 / (subspace_dim as f64).sqrt());
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(format!("projection std {std}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..prompt_dim * subspace_dim).map(|_| dist.sample(&mut rng)).collect();
        Ok(Self { rows: prompt_dim, cols: subspace_dim, values, std, seed })
    }

    pub fn prompt_dim(&self) -> usize {
        self.rows
    }

    pub fn subspace_dim(&self) -> usize {
        self.cols
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.values[i * self.cols + j]).collect()
    }

    pub fn checksum(&self) -> String {
        digest_f64(&self.values)
    }

    /// `A z`.
    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.cols {
            return Err(Error::Contract(format!("z has length {}, projection expects {}", z.len(), self.cols)));
        }
        Ok(self.values.chunks(self.cols).map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum()).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("projection");
        ck.push_f64("std", self.std);
        ck.push_u64("seed", self.seed);
        ck.push_tensor("values", &[self.rows, self.cols], &self.values);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("projection")?;
        let t = ck.get_tensor("values")?;
        let [rows, cols] = t.shape[..] else {
            return Err(Error::Checkpoint("projection values must be rank 2".into()));
        };
        Ok(Self { rows, cols, values: t.values.clone(), std: ck.get_f64("std")?, seed: ck.get_u64("seed")? })
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

/// Derivative-free half of the prompt, `p0 + A z`.
pub fn projected_prompt(p0: &PromptVector, projection: &ProjectionMatrix, z: &[f64]) -> Result<Vec<f64>> {
    if p0.len() != projection.prompt_dim() {
        return Err(Error::Contract(format!(
            "p0 has width {}, projection has {} rows",
            p0.len(),
            projection.prompt_dim()
        )));
    }
    let az = projection.project(z)?;
    Ok(p0.values.iter().zip(&az).map(|(a, b)| a + b).collect())
}

/// `alpha * p_gd + (1 - alpha) * (p0 + A z)`. The endpoints `alpha = 1` and
/// `alpha = 0` return `p_gd` and `p0 + A z` exactly.
pub fn combine(
    p_gd: &PromptVector,
    p0: &PromptVector,
    projection: &ProjectionMatrix,
    z: &[f64],
    alpha: f64,
) -> Result<PromptVector> {
    check_alpha(alpha)?;
    if p_gd.len() != p0.len() {
        return Err(Error::Contract(format!("p_gd has width {}, p0 has {}", p_gd.len(), p0.len())));
    }
    let dfo = projected_prompt(p0, projection, z)?;
    let values = if alpha == 1.0 {
        p_gd.values.clone()
    } else if alpha == 0.0 {
        dfo
    } else {
        p_gd.values.iter().zip(&dfo).map(|(g, d)| alpha * g + (1.0 - alpha) * d).collect()
    };
    PromptVector::new(values, PromptRole::Combined)
}
