//! (μ/μ_w, λ)-CMA-ES with an ask/tell interface. Minimizes.
//!
//! Strategy constants follow Hansen's reference settings; the eigendecomposition
//! of `C` is refreshed after every `tell`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// Fixed strategy parameters derived from dimension and population size.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyParams {
    /// Recombination weights for all λ ranks; zero beyond μ.
    pub weights: Vec<f64>,
    pub mu: usize,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    /// E‖N(0, I)‖.
    pub chi_n: f64,
}

impl StrategyParams {
    pub fn new(dim: usize, lambda: usize) -> Self {
        let n = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (0..lambda)
            .map(|i| if i < mu { (lambda as f64 / 2.0 + 0.5).ln() - ((i + 1) as f64).ln() } else { 0.0 })
            .collect();
        let total: f64 = raw[..mu].iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = weights[..mu].iter().sum::<f64>().powi(2) / weights[..mu].iter().map(|w| w * w).sum::<f64>();
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let d_sigma = 2.0 * mu_eff / lambda as f64 + 0.3 + c_sigma;
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Self { weights, mu, mu_eff, c_sigma, d_sigma, c_c, c_1, c_mu, chi_n }
    }
}

#[derive(Debug, Clone)]
pub struct CmaState {
    dim: usize,
    population_size: usize,
    params: StrategyParams,
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    /// Eigenvectors of `cov`, as columns.
    basis: DMatrix<f64>,
    /// Square roots of the eigenvalues of `cov`.
    scales: DVector<f64>,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    generation: u64,
    rng: ChaCha8Rng,
    pending: Option<Vec<DVector<f64>>>,
    eigen_repairs: u64,
    nonfinite_fitnesses: u64,
}

impl CmaState {
    pub fn new(dim: usize, sigma0: f64, population_size: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("CMA-ES dimension must be at least 1".into()));
        }
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::Config(format!("sigma0 must be positive, got {sigma0}")));
        }
        if population_size < 2 {
            return Err(Error::Config(format!("population size must be at least 2, got {population_size}")));
        }
        Ok(Self {
            dim,
            population_size,
            params: StrategyParams::new(dim, population_size),
            mean: DVector::zeros(dim),
            sigma: sigma0,
            cov: DMatrix::identity(dim, dim),
            basis: DMatrix::identity(dim, dim),
            scales: DVector::from_element(dim, 1.0),
            p_sigma: DVector::zeros(dim),
            p_c: DVector::zeros(dim),
            generation: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: None,
            eigen_repairs: 0,
            nonfinite_fitnesses: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn population_size(&self) -> usize {
        self.population_size
    }

    pub fn params(&self) -> &StrategyParams {
        &self.params
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn awaiting_tell(&self) -> bool {
        self.pending.is_some()
    }

    /// Candidates handed out so far, including an outstanding generation.
    pub fn candidates_asked(&self) -> u64 {
        let outstanding = if self.pending.is_some() { 1 } else { 0 };
        (self.generation + outstanding) * self.population_size as u64
    }

    pub fn eigen_repairs(&self) -> u64 {
        self.eigen_repairs
    }

    pub fn nonfinite_fitnesses(&self) -> u64 {
        self.nonfinite_fitnesses
    }

    /// Places the search distribution at `mean` (e.g. to warm-start).
    pub fn set_mean(&mut self, mean: &[f64]) -> Result<()> {
        if mean.len() != self.dim {
            return Err(Error::dim("cma.set_mean", format!("length {} for dimension {}", mean.len(), self.dim)));
        }
        self.mean = DVector::from_column_slice(mean);
        Ok(())
    }

    pub(crate) fn sample(&mut self) -> Vec<DVector<f64>> {
        (0..self.population_size)
            .map(|_| {
                let z = DVector::from_fn(self.dim, |_, _| StandardNormal.sample(&mut self.rng));
                let y = &self.basis * z.component_mul(&self.scales);
                &self.mean + y * self.sigma
            })
            .collect()
    }

    /// Samples λ candidates from `N(mean, sigma² C)`.
    pub fn ask(&mut self) -> Result<Vec<Vec<f64>>> {
        if self.pending.is_some() {
            return Err(Error::Protocol(format!(
                "ask called twice in generation {} without tell",
                self.generation
            )));
        }
        let candidates = self.sample();
        let out = candidates.iter().map(|c| c.as_slice().to_vec()).collect();
        self.pending = Some(candidates);
        Ok(out)
    }

    /// Updates the distribution from the fitnesses (lower is better) of the
    /// candidates returned by the last [`ask`](Self::ask).
    ///
    /// Non-finite fitnesses rank last; ties keep the given order.
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitnesses: &[f64]) -> Result<()> {
        if self.pending.is_none() {
            return Err(Error::Protocol("tell without an outstanding ask".into()));
        }
        if candidates.len() != fitnesses.len() || candidates.len() != self.population_size {
            return Err(Error::Contract(format!(
                "tell needs {} candidates and fitnesses, got {} and {}",
                self.population_size,
                candidates.len(),
                fitnesses.len()
            )));
        }
        if let Some(c) = candidates.iter().find(|c| c.len() != self.dim) {
            return Err(Error::dim("cma.tell", format!("candidate of length {} for dimension {}", c.len(), self.dim)));
        }
        let bad = fitnesses.iter().filter(|f| !f.is_finite()).count();
        if bad > 0 {
            log::warn!("CMA-ES generation {}: {bad} non-finite fitness value(s) ranked worst", self.generation);
            self.nonfinite_fitnesses += bad as u64;
        }
        let keyed: Vec<f64> = fitnesses.iter().map(|&f| if f.is_finite() { f } else { f64::INFINITY }).collect();
        let mut order: Vec<usize> = (0..keyed.len()).collect();
        order.sort_by(|&a, &b| keyed[a].total_cmp(&keyed[b]));

        let p = &self.params;
        let n = self.dim as f64;
        let xs: Vec<DVector<f64>> = order.iter().map(|&i| DVector::from_column_slice(&candidates[i])).collect();
        let old_mean = self.mean.clone();
        let mut new_mean = DVector::zeros(self.dim);
        for (x, w) in xs.iter().zip(&p.weights).take(p.mu) {
            new_mean += x * *w;
        }
        let y_w = (&new_mean - &old_mean) / self.sigma;

        let inv_sqrt = &self.basis * DMatrix::from_diagonal(&self.scales.map(|s| 1.0 / s)) * self.basis.transpose();
        self.p_sigma = &self.p_sigma * (1.0 - p.c_sigma) + (&inv_sqrt * &y_w) * (p.c_sigma * (2.0 - p.c_sigma) * p.mu_eff).sqrt();
        let ps_norm = self.p_sigma.norm();
        let g = (self.generation + 1) as f64;
        let h_sigma = ps_norm / (1.0 - (1.0 - p.c_sigma).powf(2.0 * g)).sqrt() < (1.4 + 2.0 / (n + 1.0)) * p.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };
        self.p_c = &self.p_c * (1.0 - p.c_c) + &y_w * (h * (p.c_c * (2.0 - p.c_c) * p.mu_eff).sqrt());

        let delta_h = (1.0 - h) * p.c_c * (2.0 - p.c_c);
        let weight_sum: f64 = p.weights.iter().sum();
        let mut cov = &self.cov * (1.0 + p.c_1 * delta_h - p.c_1 - p.c_mu * weight_sum);
        cov += &self.p_c * self.p_c.transpose() * p.c_1;
        for (x, w) in xs.iter().zip(&p.weights).take(p.mu) {
            let y = (x - &old_mean) / self.sigma;
            cov += &y * y.transpose() * (p.c_mu * w);
        }
        self.sigma *= ((p.c_sigma / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();
        self.mean = new_mean;
        self.set_covariance(cov);
        self.generation += 1;
        self.pending = None;
        Ok(())
    }

    /// Symmetrizes `cov`, refreshes the eigensystem and floors eigenvalues at
    /// `1e-14 * max` when positive-definiteness is lost.
    fn set_covariance(&mut self, cov: DMatrix<f64>) {
        let sym = (&cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let max = eig.eigenvalues.max().max(f64::MIN_POSITIVE);
        let floor = 1e-14 * max;
        let mut values = eig.eigenvalues.clone();
        let mut repaired = false;
        for v in values.iter_mut() {
            if *v <= floor || !v.is_finite() {
                *v = floor;
                repaired = true;
            }
        }
        self.basis = eig.eigenvectors;
        self.scales = values.map(f64::sqrt);
        if repaired {
            self.eigen_repairs += 1;
            let rebuilt = &self.basis * DMatrix::from_diagonal(&values) * self.basis.transpose();
            self.cov = (&rebuilt + rebuilt.transpose()) * 0.5;
        } else {
            self.cov = sym;
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("cma");
        ck.push_u64("dim", self.dim as u64);
        ck.push_u64("population_size", self.population_size as u64);
        ck.push_f64("sigma", self.sigma);
        ck.push_u64("generation", self.generation);
        ck.push_u64("eigen_repairs", self.eigen_repairs);
        ck.push_u64("nonfinite_fitnesses", self.nonfinite_fitnesses);
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        ck.push_str("rng_seed", &seed);
        ck.push_str("rng_word_pos", &self.rng.get_word_pos().to_string());
        ck.push_u64("rng_stream", self.rng.get_stream());
        let d = self.dim;
        ck.push_tensor("mean", &[d], self.mean.as_slice());
        ck.push_tensor("covariance", &[d, d], &row_major(&self.cov));
        ck.push_tensor("eigen_basis", &[d, d], &row_major(&self.basis));
        ck.push_tensor("eigen_scales", &[d], self.scales.as_slice());
        ck.push_tensor("p_sigma", &[d], self.p_sigma.as_slice());
        ck.push_tensor("p_c", &[d], self.p_c.as_slice());
        if let Some(pending) = &self.pending {
            let flat: Vec<f64> = pending.iter().flat_map(|c| c.iter().copied()).collect();
            ck.push_tensor("pending", &[pending.len(), d], &flat);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("cma")?;
        let dim = ck.get_usize("dim")?;
        let population_size = ck.get_usize("population_size")?;
        let mut state = Self::new(dim, ck.get_f64("sigma")?, population_size, 0)?;
        state.generation = ck.get_u64("generation")?;
        state.eigen_repairs = ck.get_u64("eigen_repairs")?;
        state.nonfinite_fitnesses = ck.get_u64("nonfinite_fitnesses")?;
        let seed_hex = ck.get_str("rng_seed")?;
        let mut seed = [0u8; 32];
        if seed_hex.len() != 64 {
            return Err(Error::Checkpoint("rng_seed must be 64 hex digits".into()));
        }
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Checkpoint("rng_seed is not hex".into()))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(ck.get_u64("rng_stream")?);
        let pos: u128 = ck
            .get_str("rng_word_pos")?
            .parse()
            .map_err(|_| Error::Checkpoint("rng_word_pos is not an integer".into()))?;
        rng.set_word_pos(pos);
        state.rng = rng;
        let vector = |name: &str| -> Result<DVector<f64>> {
            let t = ck.get_tensor(name)?;
            if t.shape != [dim] {
                return Err(Error::Checkpoint(format!("'{name}' has shape {:?}", t.shape)));
            }
            Ok(DVector::from_column_slice(&t.values))
        };
        let matrix = |name: &str| -> Result<DMatrix<f64>> {
            let t = ck.get_tensor(name)?;
            if t.shape != [dim, dim] {
                return Err(Error::Checkpoint(format!("'{name}' has shape {:?}", t.shape)));
            }
            Ok(DMatrix::from_row_slice(dim, dim, &t.values))
        };
        state.mean = vector("mean")?;
        state.cov = matrix("covariance")?;
        state.basis = matrix("eigen_basis")?;
        state.scales = vector("eigen_scales")?;
        state.p_sigma = vector("p_sigma")?;
        state.p_c = vector("p_c")?;
        state.pending = match ck.get_tensor("pending") {
            Ok(t) => Some(t.values.chunks(dim).map(DVector::from_column_slice).collect()),
            Err(_) => None,
        };
        Ok(state)
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}
