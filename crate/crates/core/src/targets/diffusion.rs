//! Posterior over an Euler–Maruyama discretized double-well diffusion
//! `dx = c·x(1 − x²)dt + dw`, `x₀ = 0`, observed with Gaussian noise at a
//! subset of time steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{TargetDensity, TargetError, LN_2PI};

/// Sizes of a diffusion benchmark instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSetup {
    /// Number of Euler steps on `[0, horizon]`; also the latent dimension.
    pub steps: usize,
    pub horizon: f64,
    pub observations: usize,
    pub noise_var: f64,
    pub drift: f64,
}

impl DiffusionSetup {
    /// 100 steps on `[0, 1]`, 20 observations, noise variance 0.1.
    pub fn full() -> Self {
        Self {
            steps: 100,
            horizon: 1.0,
            observations: 20,
            noise_var: 0.1,
            drift: 10.0,
        }
    }

    /// 20 steps of the full problem's step size (so on `[0, 0.2]`), 5
    /// observations. Coarser steps on `[0, 1]` make the Euler map
    /// `x ↦ x + f(x)Δt` non-monotone and the posterior multimodal.
    pub fn desk() -> Self {
        Self {
            steps: 20,
            horizon: 0.2,
            observations: 5,
            ..Self::full()
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Evenly spaced 1-based observation times, ending at the last step.
    pub fn observation_indices(&self) -> Vec<usize> {
        (1..=self.observations)
            .map(|k| k * self.steps / self.observations)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionObservation {
    pub dim: usize,
    pub dt: f64,
    pub drift: f64,
    pub noise_var: f64,
    /// 1-based time indices into `x₁..x_dim`, strictly increasing.
    pub indices: Vec<usize>,
    pub y: Vec<f64>,
}

impl DiffusionObservation {
    pub fn validate(&self) -> Result<(), TargetError> {
        if self.indices.len() != self.y.len() {
            return Err(TargetError::Observation(format!(
                "{} indices but {} values",
                self.indices.len(),
                self.y.len()
            )));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TargetError::Observation(
                "indices must be strictly increasing".into(),
            ));
        }
        if let Some(&bad) = self
            .indices
            .iter()
            .find(|&&t| t == 0 || t > self.dim)
        {
            return Err(TargetError::Observation(format!(
                "index {bad} outside [1, {}]",
                self.dim
            )));
        }
        if !(self.dt > 0.0 && self.noise_var > 0.0) {
            return Err(TargetError::Observation(
                "dt and noise variance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Simulates `x₁..x_steps` by Euler–Maruyama from `x₀ = 0`.
pub fn simulate_path<R: rand::Rng + ?Sized>(setup: &DiffusionSetup, rng: &mut R) -> Vec<f64> {
    let dt = setup.dt();
    let sd = dt.sqrt();
    let mut x = 0.0;
    (0..setup.steps)
        .map(|_| {
            let xi: f64 = StandardNormal.sample(rng);
            x = x + setup.drift * x * (1.0 - x * x) * dt + sd * xi;
            x
        })
        .collect()
}

/// One simulated path observed at the setup's indices with `N(0, σ²)` noise.
/// Deterministic per seed.
pub fn generate_diffusion_data(setup: &DiffusionSetup, seed: u64) -> DiffusionObservation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path = simulate_path(setup, &mut rng);
    let indices = setup.observation_indices();
    let noise_sd = setup.noise_var.sqrt();
    let y = indices
        .iter()
        .map(|&t| {
            let e: f64 = StandardNormal.sample(&mut rng);
            path[t - 1] + noise_sd * e
        })
        .collect();
    DiffusionObservation {
        dim: setup.steps,
        dt: setup.dt(),
        drift: setup.drift,
        noise_var: setup.noise_var,
        indices,
        y,
    }
}

/// `log p(x) + log p(y | x)` for the discretized diffusion.
#[derive(Clone, Debug)]
pub struct DiffusionPosterior {
    obs: DiffusionObservation,
}

impl DiffusionPosterior {
    pub fn new(obs: DiffusionObservation) -> Result<Self, TargetError> {
        obs.validate()?;
        Ok(Self { obs })
    }

    pub fn observation(&self) -> &DiffusionObservation {
        &self.obs
    }

    fn drift(&self, x: f64) -> f64 {
        self.obs.drift * x * (1.0 - x * x)
    }

    fn drift_slope(&self, x: f64) -> f64 {
        self.obs.drift * (1.0 - 3.0 * x * x)
    }

    /// Euler residuals `r_t = x_t − x_{t−1} − f(x_{t−1})Δt`.
    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let dt = self.obs.dt;
        let mut prev = 0.0;
        x.iter()
            .map(|&xt| {
                let r = xt - prev - self.drift(prev) * dt;
                prev = xt;
                r
            })
            .collect()
    }

    pub fn log_prior(&self, x: &[f64]) -> f64 {
        let dt = self.obs.dt;
        let norm = -0.5 * (LN_2PI + dt.ln());
        self.residuals(x)
            .iter()
            .map(|r| norm - r * r / (2.0 * dt))
            .sum()
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let v = self.obs.noise_var;
        let norm = -0.5 * (LN_2PI + v.ln());
        self.obs
            .indices
            .iter()
            .zip(&self.obs.y)
            .map(|(&t, &y)| {
                let d = y - x[t - 1];
                norm - d * d / (2.0 * v)
            })
            .sum()
    }
}

impl TargetDensity for DiffusionPosterior {
    fn dim(&self) -> usize {
        self.obs.dim
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_prior(x) + self.log_likelihood(x)
    }

    fn score(&self, x: &[f64]) -> Vec<f64> {
        let dt = self.obs.dt;
        let r = self.residuals(x);
        let n = x.len();
        let mut s = vec![0.0; n];
        for t in 0..n {
            s[t] -= r[t] / dt;
            if t + 1 < n {
                s[t] += r[t + 1] / dt * (1.0 + self.drift_slope(x[t]) * dt);
            }
        }
        for (&t, &y) in self.obs.indices.iter().zip(&self.obs.y) {
            s[t - 1] += (y - x[t - 1]) / self.obs.noise_var;
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::testing::score_fd_error;
    use rand::Rng;

    fn empty_obs(dim: usize) -> DiffusionObservation {
        DiffusionObservation {
            dim,
            dt: 1.0 / dim as f64,
            drift: 10.0,
            noise_var: 0.1,
            indices: vec![],
            y: vec![],
        }
    }

    #[test]
    fn origin_is_a_fixed_point_of_the_prior() {
        let p = DiffusionPosterior::new(empty_obs(100)).unwrap();
        let x = vec![0.0; 100];
        assert!(p.score(&x).iter().all(|&s| s == 0.0));
        let dt: f64 = 0.01;
        let expected = 100.0 * (-0.5 * (2.0 * std::f64::consts::PI * dt).ln());
        assert!((p.log_density(&x) - expected).abs() < 1e-9);
    }

    #[test]
    fn score_matches_fd_on_ten_dims() {
        let setup = DiffusionSetup {
            steps: 10,
            observations: 3,
            ..DiffusionSetup::full()
        };
        let p = DiffusionPosterior::new(generate_diffusion_data(&setup, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.5..1.5)).collect();
            assert!(score_fd_error(&p, &x, 1e-6) < 1e-5);
        }
    }

    #[test]
    fn generation_is_deterministic_and_well_formed() {
        let setup = DiffusionSetup::full();
        let a = generate_diffusion_data(&setup, 17);
        let b = generate_diffusion_data(&setup, 17);
        assert_eq!(a, b);
        assert_eq!(a.indices, (1..=20).map(|k| 5 * k).collect::<Vec<_>>());
        assert!((a.dt - 0.01).abs() < 1e-15);
        a.validate().unwrap();
        assert_ne!(a, generate_diffusion_data(&setup, 18));
    }

    #[test]
    fn noiseless_observations_equal_the_path() {
        let setup = DiffusionSetup {
            noise_var: 0.0,
            ..DiffusionSetup::full()
        };
        let obs = generate_diffusion_data(&setup, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let path = simulate_path(&setup, &mut rng);
        for (&t, &y) in obs.indices.iter().zip(&obs.y) {
            assert_eq!(y, path[t - 1]);
        }
    }

    #[test]
    fn euler_increments_have_variance_dt() {
        let setup = DiffusionSetup::full();
        let dt = setup.dt();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (mut sum, mut sum_sq, mut n) = (0.0, 0.0, 0usize);
        for _ in 0..10_000 {
            let path = simulate_path(&setup, &mut rng);
            let mut prev = 0.0;
            for &x in &path {
                let inc = x - prev - setup.drift * prev * (1.0 - prev * prev) * dt;
                sum += inc;
                sum_sq += inc * inc;
                n += 1;
                prev = x;
            }
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((var / dt - 1.0).abs() < 0.05, "variance ratio {}", var / dt);
        // The first step starts at the fixed point, so its raw increment is pure noise.
        let mut first = Vec::with_capacity(10_000);
        for _ in 0..10_000 {
            first.push(simulate_path(&setup, &mut rng)[0]);
        }
        let v1 = first.iter().map(|x| x * x).sum::<f64>() / first.len() as f64;
        assert!((v1 / dt - 1.0).abs() < 0.05);
    }

    #[test]
    fn invalid_observations_are_rejected() {
        let mut o = empty_obs(10);
        o.indices = vec![3, 3];
        o.y = vec![0.0, 0.0];
        assert!(DiffusionPosterior::new(o.clone()).is_err());
        o.indices = vec![0];
        o.y = vec![0.0];
        assert!(DiffusionPosterior::new(o.clone()).is_err());
        o.indices = vec![11];
        assert!(DiffusionPosterior::new(o).is_err());
    }
}
