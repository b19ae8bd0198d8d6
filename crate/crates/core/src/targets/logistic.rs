//! Bayesian logistic regression with a `N(0, v·I)` prior on the coefficients.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{TargetDensity, TargetError, LN_2PI};
use crate::autodiff::{sigmoid, Tensor};

/// Number of feature columns in the UCI waveform layout.
const WAVEFORM_FEATURES: usize = 21;

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticData {
    /// `N × p` design matrix, intercept column included when present.
    pub x: Tensor,
    pub y: Vec<f64>,
    pub prior_var: f64,
}

impl LogisticData {
    pub fn new(x: Tensor, y: Vec<f64>, prior_var: f64) -> Result<Self, TargetError> {
        if x.rows() != y.len() {
            return Err(TargetError::Parse {
                line: 0,
                message: format!("{} rows but {} labels", x.rows(), y.len()),
            });
        }
        if let Some((row, &value)) = y
            .iter()
            .enumerate()
            .find(|(_, &v)| v != 0.0 && v != 1.0)
        {
            return Err(TargetError::NonBinaryLabel { row, value });
        }
        Ok(Self { x, y, prior_var })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Synthetic data set: an intercept plus `dim − 1` equicorrelated
    /// standard normal features, labels drawn from a logistic model with
    /// coefficients `N(0, 1)`. Deterministic per seed.
    pub fn synthetic(n: usize, dim: usize, seed: u64) -> Self {
        assert!(dim >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let rho: f64 = 0.5;
        let mut data = Vec::with_capacity(n * dim);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let shared: f64 = StandardNormal.sample(&mut rng);
            let mut row = vec![1.0];
            for _ in 1..dim {
                let own: f64 = StandardNormal.sample(&mut rng);
                row.push(rho.sqrt() * shared + (1.0 - rho).sqrt() * own);
            }
            let s: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            y.push(if rng.random::<f64>() < sigmoid(s) { 1.0 } else { 0.0 });
            data.extend(row);
        }
        Self {
            x: Tensor::new(n, dim, data),
            y,
            prior_var: 100.0,
        }
    }

    /// Reads the UCI waveform layout (21 features then a class in
    /// `{0, 1, 2}`), labels class 0 as 1 and the others as 0, subsamples
    /// `rows` rows with a seeded shuffle, and prepends an intercept.
    pub fn from_waveform_csv(path: &Path, rows: usize, seed: u64) -> Result<Self, TargetError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_waveform(&text, rows, seed)
    }

    pub fn parse_waveform(text: &str, rows: usize, seed: u64) -> Result<Self, TargetError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Result<Vec<f64>, _> =
                line.split(',').map(|f| f.trim().parse::<f64>()).collect();
            let fields = fields.map_err(|e| TargetError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if fields.len() != WAVEFORM_FEATURES + 1 {
                return Err(TargetError::Parse {
                    line: i + 1,
                    message: format!(
                        "expected {} columns, found {}",
                        WAVEFORM_FEATURES + 1,
                        fields.len()
                    ),
                });
            }
            let class = fields[WAVEFORM_FEATURES];
            if ![0.0, 1.0, 2.0].contains(&class) {
                return Err(TargetError::Parse {
                    line: i + 1,
                    message: format!("class {class} not in {{0, 1, 2}}"),
                });
            }
            records.push(fields);
        }
        if records.len() < rows {
            return Err(TargetError::TooFewRows {
                available: records.len(),
                requested: rows,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        records.shuffle(&mut rng);
        records.truncate(rows);

        let dim = WAVEFORM_FEATURES + 1;
        let mut data = Vec::with_capacity(rows * dim);
        let mut y = Vec::with_capacity(rows);
        for r in &records {
            data.push(1.0);
            data.extend_from_slice(&r[..WAVEFORM_FEATURES]);
            y.push(if r[WAVEFORM_FEATURES] == 0.0 { 1.0 } else { 0.0 });
        }
        Self::new(Tensor::new(rows, dim, data), y, 100.0)
    }
}

/// Posterior `p(β | X, y)` of the Bernoulli-logit model.
#[derive(Clone, Debug)]
pub struct LogisticPosterior {
    data: LogisticData,
}

#[inline]
fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

impl LogisticPosterior {
    pub fn new(data: LogisticData) -> Self {
        Self { data }
    }

    pub fn data(&self) -> &LogisticData {
        &self.data
    }

    /// `Σᵢ yᵢ log σ(xᵢᵀβ) + (1 − yᵢ) log(1 − σ(xᵢᵀβ))`.
    pub fn log_likelihood(&self, beta: &[f64]) -> f64 {
        self.data
            .x
            .iter_rows()
            .zip(&self.data.y)
            .map(|(row, &y)| {
                let s: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
                y * s - softplus(s)
            })
            .sum()
    }

    pub fn log_prior(&self, beta: &[f64]) -> f64 {
        let v = self.data.prior_var;
        beta.iter()
            .map(|b| -0.5 * (LN_2PI + v.ln()) - b * b / (2.0 * v))
            .sum()
    }
}

impl TargetDensity for LogisticPosterior {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn log_density(&self, beta: &[f64]) -> f64 {
        self.log_likelihood(beta) + self.log_prior(beta)
    }

    fn score(&self, beta: &[f64]) -> Vec<f64> {
        let mut s: Vec<f64> = beta.iter().map(|b| -b / self.data.prior_var).collect();
        for (row, &y) in self.data.x.iter_rows().zip(&self.data.y) {
            let eta: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
            let resid = y - sigmoid(eta);
            for (si, xi) in s.iter_mut().zip(row) {
                *si += resid * xi;
            }
        }
        s
    }
}
