//! Unnormalized target densities `p_z` and their scores `∇_z log p_z`.

mod diffusion;
mod logistic;
mod toys;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub use diffusion::{
    generate_diffusion_data, simulate_path, DiffusionObservation, DiffusionPosterior,
    DiffusionSetup,
};
pub use logistic::{LogisticData, LogisticPosterior};
pub use toys::{Banana, Multimodal, XShaped};

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("labels must be 0 or 1, found {value} at row {row}")]
    NonBinaryLabel { row: usize, value: f64 },
    #[error("data error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset has {available} rows, {requested} requested")]
    TooFewRows { available: usize, requested: usize },
    #[error("inconsistent observation: {0}")]
    Observation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A log-density known up to an additive constant, with its score.
pub trait TargetDensity: Send + Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, z: &[f64]) -> f64;

    fn score(&self, z: &[f64]) -> Vec<f64>;

    /// Scores of every row of `z`.
    fn score_batch(&self, z: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(z.rows(), z.cols());
        for i in 0..z.rows() {
            let s = self.score(z.row_slice(i));
            out.row_slice_mut(i).copy_from_slice(&s);
        }
        out
    }
}

impl<T: TargetDensity + ?Sized> TargetDensity for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, z: &[f64]) -> f64 {
        (**self).log_density(z)
    }
    fn score(&self, z: &[f64]) -> Vec<f64> {
        (**self).score(z)
    }
}

impl<T: TargetDensity + ?Sized> TargetDensity for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, z: &[f64]) -> f64 {
        (**self).log_density(z)
    }
    fn score(&self, z: &[f64]) -> Vec<f64> {
        (**self).score(z)
    }
}

/// `p(z)^T`: log-density and score scaled by the temperature `T ∈ (0, 1]`.
pub struct Tempered<'a> {
    inner: &'a dyn TargetDensity,
    temperature: f64,
}

impl<'a> Tempered<'a> {
    pub fn new(inner: &'a dyn TargetDensity, temperature: f64) -> Self {
        assert!(
            temperature > 0.0 && temperature <= 1.0,
            "temperature must lie in (0, 1], got {temperature}"
        );
        Self { inner, temperature }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

impl TargetDensity for Tempered<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let lp = self.inner.log_density(z);
        if self.temperature == 1.0 {
            lp
        } else {
            self.temperature * lp
        }
    }

    fn score(&self, z: &[f64]) -> Vec<f64> {
        let mut s = self.inner.score(z);
        if self.temperature != 1.0 {
            s.iter_mut().for_each(|v| *v *= self.temperature);
        }
        s
    }
}

/// Linear temperature ramp from `start` to 1 over the first `fraction` of
/// the iteration budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealingSchedule {
    pub start: f64,
    pub fraction: f64,
}

impl Default for AnnealingSchedule {
    fn default() -> Self {
        Self {
            start: 0.2,
            fraction: 0.5,
        }
    }
}

impl AnnealingSchedule {
    pub fn temperature(&self, iteration: usize, total: usize) -> f64 {
        let ramp = self.fraction * total as f64;
        if ramp <= 0.0 || iteration as f64 >= ramp {
            return 1.0;
        }
        self.start + (1.0 - self.start) * iteration as f64 / ramp
    }
}

/// Targets that can also be sampled exactly (the synthetic benchmarks).
pub trait DataGenerating: TargetDensity {
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    /// Ground-truth negative log-likelihood of the data-generating process
    /// on a large sample, as a reference for trained models.
    fn reference_nll(&self) -> Option<f64> {
        None
    }

    fn sample_n(&self, n: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Independent Gaussian with per-coordinate mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn entropy(&self) -> f64 {
        self.std
            .iter()
            .map(|s| 0.5 * (1.0 + LN_2PI) + s.ln())
            .sum()
    }
}

impl TargetDensity for DiagonalGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| {
                let u = (x - m) / s;
                -0.5 * u * u - s.ln() - 0.5 * LN_2PI
            })
            .sum()
    }

    fn score(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| -(x - m) / (s * s))
            .collect()
    }
}

impl DataGenerating for DiagonalGaussian {
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| {
                let u: f64 = StandardNormal.sample(rng);
                m + s * u
            })
            .collect()
    }

    fn reference_nll(&self) -> Option<f64> {
        Some(self.entropy())
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tempered_score_is_scaled_exactly() {
        let g = DiagonalGaussian {
            mean: vec![1.0, -2.0],
            std: vec![0.5, 3.0],
        };
        let t = Tempered::new(&g, 0.3);
        let z = [0.7, 1.9];
        let base = g.score(&z);
        let tempered = t.score(&z);
        for (a, b) in base.iter().zip(&tempered) {
            assert_eq!(a * 0.3, *b);
        }
        let one = Tempered::new(&g, 1.0);
        assert_eq!(one.log_density(&z), g.log_density(&z));
        assert_eq!(one.score(&z), g.score(&z));
    }

    #[test]
    fn annealing_ramp() {
        let s = AnnealingSchedule::default();
        assert_eq!(s.temperature(0, 100), 0.2);
        assert!((s.temperature(25, 100) - 0.6).abs() < 1e-12);
        assert_eq!(s.temperature(50, 100), 1.0);
        assert_eq!(s.temperature(99, 100), 1.0);
    }

    #[test]
    fn gaussian_score_matches_fd() {
        let g = DiagonalGaussian {
            mean: vec![1.0, -2.0, 0.0],
            std: vec![0.5, 3.0, 1.2],
        };
        assert!(testing::score_fd_error(&g, &[0.1, 0.2, -0.3], 1e-5) < 1e-6);
    }
}
