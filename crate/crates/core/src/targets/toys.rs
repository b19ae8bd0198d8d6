//! Two-dimensional synthetic benchmarks: banana, multimodal and x-shaped.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use super::{DataGenerating, TargetDensity, LN_2PI};
use crate::autodiff::log_add_exp as log_add_exp_pair;

/// A bivariate Gaussian with a fixed covariance.
#[derive(Clone, Copy, Debug)]
struct Gauss2 {
    mean: [f64; 2],
    precision: [[f64; 2]; 2],
    chol: [[f64; 2]; 2],
    log_norm: f64,
}

impl Gauss2 {
    fn new(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Self {
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        assert!(det > 0.0 && cov[0][0] > 0.0, "covariance must be positive definite");
        let precision = [
            [cov[1][1] / det, -cov[0][1] / det],
            [-cov[1][0] / det, cov[0][0] / det],
        ];
        let l11 = cov[0][0].sqrt();
        let l21 = cov[1][0] / l11;
        let l22 = (cov[1][1] - l21 * l21).sqrt();
        Self {
            mean,
            precision,
            chol: [[l11, 0.0], [l21, l22]],
            log_norm: -LN_2PI - 0.5 * det.ln(),
        }
    }

    fn centered(&self, z: &[f64]) -> [f64; 2] {
        [z[0] - self.mean[0], z[1] - self.mean[1]]
    }

    fn log_pdf(&self, z: &[f64]) -> f64 {
        let d = self.centered(z);
        let p = &self.precision;
        let quad = d[0] * (p[0][0] * d[0] + p[0][1] * d[1]) + d[1] * (p[1][0] * d[0] + p[1][1] * d[1]);
        self.log_norm - 0.5 * quad
    }

    fn grad_log_pdf(&self, z: &[f64]) -> [f64; 2] {
        let d = self.centered(z);
        let p = &self.precision;
        [
            -(p[0][0] * d[0] + p[0][1] * d[1]),
            -(p[1][0] * d[0] + p[1][1] * d[1]),
        ]
    }

    fn sample(&self, rng: &mut dyn RngCore) -> [f64; 2] {
        let u0: f64 = StandardNormal.sample(rng);
        let u1: f64 = StandardNormal.sample(rng);
        let l = &self.chol;
        [
            self.mean[0] + l[0][0] * u0,
            self.mean[1] + l[1][0] * u0 + l[1][1] * u1,
        ]
    }
}

/// Equal-weight mixture of two bivariate Gaussians.
#[derive(Clone, Copy, Debug)]
struct Mixture2 {
    a: Gauss2,
    b: Gauss2,
}

impl Mixture2 {
    fn log_density(&self, z: &[f64]) -> f64 {
        log_add_exp_pair(self.a.log_pdf(z), self.b.log_pdf(z)) - std::f64::consts::LN_2
    }

    fn score(&self, z: &[f64]) -> Vec<f64> {
        let la = self.a.log_pdf(z);
        let lb = self.b.log_pdf(z);
        // responsibility of component a
        let ra = 1.0 / (1.0 + (lb - la).exp());
        let ga = self.a.grad_log_pdf(z);
        let gb = self.b.grad_log_pdf(z);
        vec![
            ra * ga[0] + (1.0 - ra) * gb[0],
            ra * ga[1] + (1.0 - ra) * gb[1],
        ]
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let pick_a = rng.next_u32() & 1 == 0;
        let s = if pick_a {
            self.a.sample(rng)
        } else {
            self.b.sample(rng)
        };
        s.to_vec()
    }
}

/// `z = (ν₁, ν₁² + ν₂ + 1)` with `ν ~ N(0, [[1, 0.9], [0.9, 1]])`.
///
/// The map is triangular with unit Jacobian, so the density is
/// `N(ν(z); 0, Σ)`.
#[derive(Clone, Copy, Debug)]
pub struct Banana {
    base: Gauss2,
}

impl Default for Banana {
    fn default() -> Self {
        Self {
            base: Gauss2::new([0.0, 0.0], [[1.0, 0.9], [0.9, 1.0]]),
        }
    }
}

impl Banana {
    pub fn new() -> Self {
        Self::default()
    }

    /// Maps a banana sample back to the Gaussian base variable `ν`.
    pub fn inverse(z: &[f64]) -> [f64; 2] {
        [z[0], z[1] - z[0] * z[0] - 1.0]
    }

    pub fn forward(nu: &[f64]) -> [f64; 2] {
        [nu[0], nu[0] * nu[0] + nu[1] + 1.0]
    }

    pub fn base_covariance() -> [[f64; 2]; 2] {
        [[1.0, 0.9], [0.9, 1.0]]
    }
}

impl TargetDensity for Banana {
    fn dim(&self) -> usize {
        2
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        self.base.log_pdf(&Self::inverse(z))
    }

    fn score(&self, z: &[f64]) -> Vec<f64> {
        let g = self.base.grad_log_pdf(&Self::inverse(z));
        // ∂ν₂/∂z₁ = −2 z₁
        vec![g[0] - 2.0 * z[0] * g[1], g[1]]
    }
}

impl DataGenerating for Banana {
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        Self::forward(&self.base.sample(rng)).to_vec()
    }

    fn reference_nll(&self) -> Option<f64> {
        Some(2.0024)
    }
}

/// `½ N((−2, 0), I) + ½ N((2, 0), I)`.
#[derive(Clone, Copy, Debug)]
pub struct Multimodal {
    mix: Mixture2,
}

impl Default for Multimodal {
    fn default() -> Self {
        let eye = [[1.0, 0.0], [0.0, 1.0]];
        Self {
            mix: Mixture2 {
                a: Gauss2::new([-2.0, 0.0], eye),
                b: Gauss2::new([2.0, 0.0], eye),
            },
        }
    }
}

impl Multimodal {
    pub fn new() -> Self {
        Self::default()
    }
}

impl TargetDensity for Multimodal {
    fn dim(&self) -> usize {
        2
    }
    fn log_density(&self, z: &[f64]) -> f64 {
        self.mix.log_density(z)
    }
    fn score(&self, z: &[f64]) -> Vec<f64> {
        self.mix.score(z)
    }
}

impl DataGenerating for Multimodal {
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.mix.sample(rng)
    }

    fn reference_nll(&self) -> Option<f64> {
        Some(3.4663)
    }
}

/// `½ N(0, [[2, 1.8], [1.8, 2]]) + ½ N(0, [[2, −1.8], [−1.8, 2]])`.
#[derive(Clone, Copy, Debug)]
pub struct XShaped {
    mix: Mixture2,
}

impl Default for XShaped {
    fn default() -> Self {
        Self {
            mix: Mixture2 {
                a: Gauss2::new([0.0, 0.0], [[2.0, 1.8], [1.8, 2.0]]),
                b: Gauss2::new([0.0, 0.0], [[2.0, -1.8], [-1.8, 2.0]]),
            },
        }
    }
}

impl XShaped {
    pub fn new() -> Self {
        Self::default()
    }
}

impl TargetDensity for XShaped {
    fn dim(&self) -> usize {
        2
    }
    fn log_density(&self, z: &[f64]) -> f64 {
        self.mix.log_density(z)
    }
    fn score(&self, z: &[f64]) -> Vec<f64> {
        self.mix.score(z)
    }
}

impl DataGenerating for XShaped {
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.mix.sample(rng)
    }

    fn reference_nll(&self) -> Option<f64> {
        Some(3.1219)
    }
}
