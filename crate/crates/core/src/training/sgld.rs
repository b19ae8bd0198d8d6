//! Unadjusted Langevin dynamics with full gradients, used to produce
//! reference posterior samples.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::TrainError;
use crate::autodiff::Tensor;
use crate::targets::TargetDensity;

#[derive(Clone, Debug, PartialEq)]
pub struct SgldState {
    /// `n × d`, one particle per row.
    pub particles: Tensor,
    pub step: f64,
    pub iteration: usize,
    /// Particles restarted after a non-finite score or position.
    pub reinitialized: usize,
}

/// Particle `i` draws from its own stream of a seeded ChaCha8 generator, so
/// results do not depend on the order in which particles are advanced.
fn particle_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

fn fresh(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
}

/// `n` particles started from `N(0, I)` and advanced `iterations` steps.
pub fn sgld_run(
    target: &dyn TargetDensity,
    n: usize,
    iterations: usize,
    step: f64,
    seed: u64,
) -> Result<SgldState, TrainError> {
    let d = target.dim();
    let mut init = Tensor::zeros(n, d);
    for i in 0..n {
        fresh(&mut particle_rng(seed, i), init.row_slice_mut(i));
    }
    // The initial draw uses a separate seed so the dynamics stream starts clean.
    sgld_from(target, init, iterations, step, seed.wrapping_add(1))
}

/// Advances the given particles with `z ← z + (η/2)∇log p(z) + √η ξ`.
pub fn sgld_from(
    target: &dyn TargetDensity,
    particles: Tensor,
    iterations: usize,
    step: f64,
    seed: u64,
) -> Result<SgldState, TrainError> {
    if !(step >= 0.0 && step.is_finite()) {
        return Err(TrainError::InvalidSetting(format!(
            "SGLD step size must be non-negative, got {step}"
        )));
    }
    let mut state = SgldState {
        particles,
        step,
        iteration: 0,
        reinitialized: 0,
    };
    let half = 0.5 * step;
    let noise = step.sqrt();
    for i in 0..state.particles.rows() {
        let mut rng = particle_rng(seed, i);
        let z = state.particles.row_slice_mut(i);
        for t in 0..iterations {
            let s = target.score(z);
            if !s.iter().all(|v| v.is_finite()) {
                warn!("SGLD particle {i}: non-finite score at iteration {t}, reinitializing");
                fresh(&mut rng, z);
                state.reinitialized += 1;
                continue;
            }
            for (zv, sv) in z.iter_mut().zip(&s) {
                let xi: f64 = StandardNormal.sample(&mut rng);
                *zv += half * sv + noise * xi;
            }
            if !z.iter().all(|v| v.is_finite()) {
                warn!("SGLD particle {i}: diverged at iteration {t}, reinitializing");
                fresh(&mut rng, z);
                state.reinitialized += 1;
            }
        }
    }
    state.iteration = iterations;
    Ok(state)
}
