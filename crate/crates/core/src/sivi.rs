//! The semi-implicit variational family.
//!
//! A latent `ε ~ N(0, I)` is pushed through a ReLU network `f_φ` to give the
//! mean of a diagonal Gaussian with a learnable, ε-independent scale:
//! `z = f_φ(ε) + exp(log σ) ⊙ η`, `η ~ N(0, I)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    log_sum_exp, sq_dist, AutodiffError, BoundMlp, Gradients, MlpParams, Tape, Tensor, Var,
};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Bandwidth used when every pairwise distance is zero.
pub const FALLBACK_BANDWIDTH: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] AutodiffError),
    #[error("kernel bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
    #[error("the median heuristic needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("at least one latent sample is required")]
    NoLatentSamples,
}

/// `log N(0, I)` at `eps`.
pub fn latent_log_density(eps: &[f64]) -> f64 {
    eps.iter().map(|e| -0.5 * e * e).sum::<f64>() - 0.5 * LN_2PI * eps.len() as f64
}

/// `m × d` matrix of independent standard normal draws.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, m: usize, d: usize) -> Tensor {
    Tensor::new(m, d, (0..m * d).map(|_| StandardNormal.sample(rng)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiviModel {
    pub net: MlpParams,
    /// `1 × d_Z`
    pub log_sigma: Tensor,
}

impl SiviModel {
    /// `depth` hidden layers of `hidden` units between `latent_dim` and
    /// `dim`; the scale starts at one.
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        hidden: usize,
        depth: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![latent_dim];
        sizes.extend(std::iter::repeat_n(hidden, depth));
        sizes.push(dim);
        Self {
            net: MlpParams::init(&sizes, rng),
            log_sigma: Tensor::zeros(1, dim),
        }
    }

    pub fn from_parts(net: MlpParams, log_sigma: Vec<f64>) -> Result<Self, ModelError> {
        if net.output_dim() != log_sigma.len() {
            return Err(ModelError::Shape(AutodiffError::Shape {
                context: "log sigma",
                expected: (1, net.output_dim()),
                actual: (1, log_sigma.len()),
            }));
        }
        Ok(Self {
            net,
            log_sigma: Tensor::row(&log_sigma),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.data().iter().map(|s| s.exp()).collect()
    }

    pub fn attach(&self, tape: &Tape) -> BoundSivi {
        BoundSivi {
            net: self.net.attach(tape),
            log_sigma: tape.leaf(self.log_sigma.clone()),
        }
    }

    /// `f_φ(ε)` for each row of `eps`.
    pub fn means(&self, eps: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.net.eval(eps)?)
    }

    /// Detached samples `f_φ(ε) + σ ⊙ η`.
    pub fn sample_values(&self, eps: &Tensor, eta: &Tensor) -> Result<Tensor, ModelError> {
        let mut z = self.means(eps)?;
        self.check_noise(eta, z.rows())?;
        let sigma = self.sigma();
        for i in 0..z.rows() {
            for ((zv, e), s) in z.row_slice_mut(i).iter_mut().zip(eta.row_slice(i)).zip(&sigma) {
                *zv += e * s;
            }
        }
        Ok(z)
    }

    fn check_noise(&self, eta: &Tensor, rows: usize) -> Result<(), ModelError> {
        if eta.shape() != (rows, self.dim()) {
            return Err(ModelError::Shape(AutodiffError::Shape {
                context: "conditional noise",
                expected: (rows, self.dim()),
                actual: eta.shape(),
            }));
        }
        Ok(())
    }

    /// `Σᵢ log N(zᵢ; μ_ε,ᵢ, σᵢ²)`.
    pub fn conditional_log_density(&self, z: &[f64], eps: &[f64]) -> Result<f64, ModelError> {
        let mu = self.means(&Tensor::row(eps))?;
        Ok(gaussian_log_pdf(z, mu.data(), self.log_sigma.data()))
    }

    /// `−(z − μ_ε) ⊘ σ²`.
    pub fn conditional_score(&self, z: &[f64], eps: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mu = self.means(&Tensor::row(eps))?;
        Ok(z.iter()
            .zip(mu.data())
            .zip(self.log_sigma.data())
            .map(|((z, m), ls)| -(z - m) * (-2.0 * ls).exp())
            .collect())
    }

    /// The mixture `(1/M) Σⱼ q(z | εⱼ)` over the rows of `eps`.
    pub fn mixture(&self, eps: &Tensor) -> Result<MixtureDensity, ModelError> {
        if eps.rows() == 0 {
            return Err(ModelError::NoLatentSamples);
        }
        Ok(MixtureDensity::new(self.means(eps)?, self.log_sigma.data()))
    }

    /// `log (1/M) Σⱼ exp(log q(z | εⱼ))`, max-shifted.
    pub fn marginal_log_density(&self, z: &[f64], eps: &Tensor) -> Result<f64, ModelError> {
        Ok(self.mixture(eps)?.log_density(z))
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.net.tensors();
        t.push(&self.log_sigma);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.net.tensors_mut();
        t.push(&mut self.log_sigma);
        t
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut n = self.net.tensor_names("sivi.net");
        n.push("sivi.log_sigma".into());
        n
    }
}

/// A [`SiviModel`] bound to a tape.
#[derive(Clone, Debug)]
pub struct BoundSivi {
    net: BoundMlp,
    log_sigma: Var,
}

impl BoundSivi {
    /// `h_φ(ε, η)` for each row, attached to the tape.
    pub fn sample(&self, tape: &Tape, eps: &Tensor, eta: &Tensor) -> Result<Var, ModelError> {
        let mu = self.net.forward(tape, &Var::constant(eps.clone()))?;
        if eta.shape() != mu.shape() {
            return Err(ModelError::Shape(AutodiffError::Shape {
                context: "conditional noise",
                expected: mu.shape(),
                actual: eta.shape(),
            }));
        }
        let sigma = tape.exp(&self.log_sigma);
        let spread = tape.mul_row(&Var::constant(eta.clone()), &sigma);
        Ok(tape.add(&mu, &spread))
    }

    /// Gradients in the order of [`SiviModel::tensors`].
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        let mut g = self.net.gradients(grads);
        g.push(grads.wrt(&self.log_sigma));
        g
    }
}

/// Free-function form of [`BoundSivi::sample`].
pub fn sample(tape: &Tape, model: &BoundSivi, eps: &Tensor, eta: &Tensor) -> Result<Var, ModelError> {
    model.sample(tape, eps, eta)
}

pub(crate) fn gaussian_log_pdf(z: &[f64], mean: &[f64], log_sigma: &[f64]) -> f64 {
    z.iter()
        .zip(mean)
        .zip(log_sigma)
        .map(|((z, m), ls)| {
            let u = (z - m) * (-ls).exp();
            -0.5 * u * u - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// Equal-weight mixture of diagonal Gaussians sharing one scale vector.
#[derive(Clone, Debug)]
pub struct MixtureDensity {
    means: Tensor,
    inv_var: Vec<f64>,
    log_norm: f64,
}

impl MixtureDensity {
    pub fn new(means: Tensor, log_sigma: &[f64]) -> Self {
        let inv_var = log_sigma.iter().map(|ls| (-2.0 * ls).exp()).collect();
        let log_norm = -log_sigma.iter().sum::<f64>() - 0.5 * LN_2PI * log_sigma.len() as f64;
        Self {
            means,
            inv_var,
            log_norm,
        }
    }

    pub fn components(&self) -> usize {
        self.means.rows()
    }

    fn component_log_pdfs(&self, z: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.means.iter_rows().map(|mu| {
            let quad: f64 = z
                .iter()
                .zip(mu)
                .zip(&self.inv_var)
                .map(|((z, m), iv)| (z - m) * (z - m) * iv)
                .sum();
            self.log_norm - 0.5 * quad
        }));
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let mut buf = Vec::with_capacity(self.components());
        self.log_density_with(z, &mut buf)
    }

    /// Like [`log_density`](Self::log_density), reusing `buf` as scratch.
    pub fn log_density_with(&self, z: &[f64], buf: &mut Vec<f64>) -> f64 {
        self.component_log_pdfs(z, buf);
        log_sum_exp(buf) - (self.components() as f64).ln()
    }

    /// `∇_z log q_z(z)` of the mixture.
    pub fn score(&self, z: &[f64]) -> Vec<f64> {
        let mut lp = Vec::with_capacity(self.components());
        self.component_log_pdfs(z, &mut lp);
        let total = log_sum_exp(&lp);
        let mut s = vec![0.0; z.len()];
        for (mu, l) in self.means.iter_rows().zip(&lp) {
            let w = (l - total).exp();
            for (((si, zi), mi), iv) in s.iter_mut().zip(z).zip(mu).zip(&self.inv_var) {
                *si -= w * (zi - mi) * iv;
            }
        }
        s
    }
}

/// How the kernel bandwidth is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median heuristic on the current batch.
    Median,
}

/// The normalized Gaussian density kernel
/// `k(z, z′) = (2πσ_k²)^{−d/2} exp(−‖z − z′‖² / 2σ_k²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianKernel {
    bandwidth: f64,
    dim: usize,
    log_norm: f64,
}

impl GaussianKernel {
    pub fn new(bandwidth: f64, dim: usize) -> Result<Self, ModelError> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(ModelError::Bandwidth(bandwidth));
        }
        let log_norm = -0.5 * dim as f64 * (LN_2PI + 2.0 * bandwidth.ln());
        Ok(Self {
            bandwidth,
            dim,
            log_norm,
        })
    }

    /// `exp(−‖z − z′‖² / 2σ_k²)` without the normalizing constant, which
    /// underflows in high dimension.
    pub fn unnormalized(bandwidth: f64, dim: usize) -> Result<Self, ModelError> {
        Ok(Self {
            log_norm: 0.0,
            ..Self::new(bandwidth, dim)?
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `log k` as a function of the squared distance.
    #[inline]
    pub fn log_value_sq(&self, sq_dist: f64) -> f64 {
        self.log_norm - sq_dist / (2.0 * self.bandwidth * self.bandwidth)
    }

    pub fn log_value(&self, z: &[f64], zp: &[f64]) -> f64 {
        self.log_value_sq(sq_dist(z, zp))
    }

    pub fn value(&self, z: &[f64], zp: &[f64]) -> f64 {
        self.log_value(z, zp).exp()
    }

    /// `∇_{z′} k(z, z′) = k(z, z′)(z − z′)/σ_k²`.
    pub fn grad_second(&self, z: &[f64], zp: &[f64]) -> Vec<f64> {
        let k = self.value(z, zp);
        let inv = 1.0 / (self.bandwidth * self.bandwidth);
        z.iter().zip(zp).map(|(a, b)| k * (a - b) * inv).collect()
    }
}

/// Kernel value with a fixed bandwidth.
pub fn gaussian_kernel(bandwidth: f64, z: &[f64], zp: &[f64]) -> Result<f64, ModelError> {
    Ok(GaussianKernel::new(bandwidth, z.len())?.value(z, zp))
}

/// `∇_{z′} k(z, z′)` with a fixed bandwidth.
pub fn gaussian_kernel_grad(bandwidth: f64, z: &[f64], zp: &[f64]) -> Result<Vec<f64>, ModelError> {
    Ok(GaussianKernel::new(bandwidth, z.len())?.grad_second(z, zp))
}

/// Median heuristic bandwidth: `σ_k² = med² / (2·max(log n, 1))` with `med`
/// the median pairwise Euclidean distance among the `n` rows. Returns
/// [`FALLBACK_BANDWIDTH`] when the median distance is zero.
pub fn median_heuristic(samples: &Tensor) -> Result<f64, ModelError> {
    let n = samples.rows();
    if n < 2 {
        return Err(ModelError::TooFewSamples(n));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let a = samples.row_slice(i);
        for j in (i + 1)..n {
            d.push(sq_dist(a, samples.row_slice(j)));
        }
    }
    // Squared distances preserve order, so take roots only at the median.
    let len = d.len();
    let cmp = |a: &f64, b: &f64| a.total_cmp(b);
    let med = if len % 2 == 1 {
        let (_, m, _) = d.select_nth_unstable_by(len / 2, cmp);
        m.sqrt()
    } else {
        let (lower, hi, _) = d.select_nth_unstable_by(len / 2, cmp);
        let hi = hi.sqrt();
        let lo = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max).sqrt();
        0.5 * (lo + hi)
    };
    if !(med > 0.0) || !med.is_finite() {
        return Ok(FALLBACK_BANDWIDTH);
    }
    let denom = 2.0 * (n as f64).ln().max(1.0);
    Ok((med * med / denom).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Dense;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine_model(bias: &[f64], log_sigma: &[f64], latent: usize) -> SiviModel {
        let d = bias.len();
        let net = MlpParams::from_layers(vec![Dense {
            weight: Tensor::zeros(d, latent),
            bias: Tensor::row(bias),
        }])
        .unwrap();
        SiviModel::from_parts(net, log_sigma.to_vec()).unwrap()
    }

    #[test]
    fn sample_mean_path_and_affine_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = SiviModel::new(3, 8, 2, 2, &mut rng);
        let eps = standard_normal(&mut rng, 4, 3);
        let tape = Tape::new();
        let z = model
            .attach(&tape)
            .sample(&tape, &eps, &Tensor::zeros(4, 2))
            .unwrap();
        assert_eq!(z.value(), &model.means(&eps).unwrap());

        let affine = affine_model(&[0.5, -1.0], &[0.0, 0.0], 3);
        let eta = Tensor::new(1, 2, vec![0.3, 0.7]);
        let z = affine
            .sample_values(&Tensor::row(&[9.0, 9.0, 9.0]), &eta)
            .unwrap();
        assert!((z.get(0, 0) - 0.8).abs() < 1e-15 && (z.get(0, 1) + 0.3).abs() < 1e-15);
    }

    #[test]
    fn sample_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = SiviModel::new(3, 4, 1, 2, &mut rng);
        let tape = Tape::new();
        let b = model.attach(&tape);
        assert!(b.sample(&tape, &Tensor::zeros(2, 2), &Tensor::zeros(2, 2)).is_err());
        assert!(b.sample(&tape, &Tensor::zeros(2, 3), &Tensor::zeros(2, 3)).is_err());
    }

    #[test]
    fn conditional_density_and_score() {
        let model = affine_model(&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0], 2);
        let lp = model.conditional_log_density(&[0.0; 3], &[0.4, 0.1]).unwrap();
        assert!((lp + 1.5 * LN_2PI).abs() < 1e-14);
        let s = model.conditional_score(&[0.3, -1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(s, vec![-0.3, 1.0, -2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = SiviModel::new(2, 6, 1, 3, &mut rng);
        m.log_sigma = Tensor::row(&[0.3, -0.5, 0.1]);
        let eps = [0.2, -0.7];
        let mu = m.means(&Tensor::row(&eps)).unwrap();
        assert!(m
            .conditional_score(mu.data(), &eps)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        // reference log-pdf, coordinate by coordinate
        let z = [0.9, -0.4, 1.3];
        let sig = m.sigma();
        let reference: f64 = (0..3)
            .map(|i| {
                let u = (z[i] - mu.data()[i]) / sig[i];
                (-0.5 * u * u).exp() / (sig[i] * (2.0 * std::f64::consts::PI).sqrt())
            })
            .map(f64::ln)
            .sum();
        assert!((m.conditional_log_density(&z, &eps).unwrap() - reference).abs() < 1e-12);
        let s = m.conditional_score(&z, &eps).unwrap();
        for i in 0..3 {
            let h = 1e-6;
            let mut zp = z;
            let mut zm = z;
            zp[i] += h;
            zm[i] -= h;
            let fd = (m.conditional_log_density(&zp, &eps).unwrap()
                - m.conditional_log_density(&zm, &eps).unwrap())
                / (2.0 * h);
            assert!((fd - s[i]).abs() / s[i].abs().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn one_dimensional_conditional_integrates_to_one() {
        let m = affine_model(&[0.4], &[-0.3], 1);
        let (lo, hi, n) = (-10.0, 10.0, 200_000);
        let h = (hi - lo) / n as f64;
        let mass: f64 = (0..n)
            .map(|i| {
                m.conditional_log_density(&[lo + (i as f64 + 0.5) * h], &[0.0])
                    .unwrap()
                    .exp()
            })
            .sum::<f64>()
            * h;
        assert!((mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn marginal_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = SiviModel::new(2, 5, 1, 2, &mut rng);
        let eps = standard_normal(&mut rng, 1, 2);
        let z = [0.3, -0.2];
        let single = m.marginal_log_density(&z, &eps).unwrap();
        let cond = m.conditional_log_density(&z, eps.row_slice(0)).unwrap();
        assert!((single - cond).abs() < 1e-12);

        let constant = affine_model(&[1.0, -1.0], &[0.2, -0.1], 2);
        let many = standard_normal(&mut rng, 57, 2);
        let lq = constant.marginal_log_density(&z, &many).unwrap();
        let exact = constant.conditional_log_density(&z, &[0.0, 0.0]).unwrap();
        assert!((lq - exact).abs() < 1e-12);
        assert!(matches!(
            constant.marginal_log_density(&z, &Tensor::zeros(0, 2)),
            Err(ModelError::NoLatentSamples)
        ));
    }

    #[test]
    fn sample_mean_at_fixed_latent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut m = SiviModel::new(2, 6, 2, 2, &mut rng);
        m.log_sigma = Tensor::row(&[0.4, -0.6]);
        let n = 100_000;
        let eps = Tensor::from_rows(&vec![[0.5, -1.2]; n]);
        let z = m.sample_values(&eps, &standard_normal(&mut rng, n, 2)).unwrap();
        let mu = m.means(&Tensor::row(&[0.5, -1.2])).unwrap();
        for (c, s) in m.sigma().iter().enumerate() {
            let mean = (0..n).map(|i| z.get(i, c)).sum::<f64>() / n as f64;
            assert!((mean - mu.get(0, c)).abs() < 3.0 * s / (n as f64).sqrt());
        }
    }

    #[test]
    fn one_dimensional_marginal_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = SiviModel::new(1, 8, 2, 1, &mut rng);
        m.log_sigma = Tensor::row(&[-0.2]);
        let eps = standard_normal(&mut rng, 10_000, 1);
        // midpoint rule over the latent
        let (lo, hi, k) = (-9.0, 9.0, 6000);
        let h = (hi - lo) / k as f64;
        let grid: Vec<f64> = (0..k).map(|i| lo + (i as f64 + 0.5) * h).collect();
        let mus = m.means(&Tensor::new(k, 1, grid.clone())).unwrap();
        let sigma = m.sigma()[0];
        for z in [-1.0, -0.3, 0.0, 0.4, 1.1] {
            let q: f64 = grid
                .iter()
                .zip(mus.data())
                .map(|(e, mu)| {
                    let pe = (-0.5 * e * e).exp() / (2.0 * std::f64::consts::PI).sqrt();
                    let u = (z - mu) / sigma;
                    pe * (-0.5 * u * u).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
                })
                .sum::<f64>()
                * h;
            let mc = m.marginal_log_density(&[z], &eps).unwrap();
            assert!((mc - q.ln()).abs() < 1e-2, "z={z}: {mc} vs {}", q.ln());
        }
    }

    #[test]
    fn mixture_score_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = SiviModel::new(2, 6, 1, 2, &mut rng);
        let mix = m.mixture(&standard_normal(&mut rng, 40, 2)).unwrap();
        let z = [0.2, 0.1];
        let s = mix.score(&z);
        for i in 0..2 {
            let h = 1e-6;
            let mut zp = z;
            let mut zm = z;
            zp[i] += h;
            zm[i] -= h;
            let fd = (mix.log_density(&zp) - mix.log_density(&zm)) / (2.0 * h);
            assert!((fd - s[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn kernel_basics() {
        let k = gaussian_kernel(1.0, &[0.3, 0.4], &[0.3, 0.4]).unwrap();
        assert!((k - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-12);
        assert!((k - 0.159155).abs() < 1e-6);
        let g = gaussian_kernel_grad(0.7, &[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(gaussian_kernel(0.0, &[0.0], &[0.0]).is_err());

        let kern = GaussianKernel::new(0.8, 3).unwrap();
        let (z, zp) = ([0.1, -0.5, 0.9], [0.4, 0.2, 0.3]);
        assert_eq!(kern.value(&z, &zp), kern.value(&zp, &z));
        let g = kern.grad_second(&z, &zp);
        for i in 0..3 {
            let h = 1e-6;
            let mut p = zp;
            let mut m = zp;
            p[i] += h;
            m[i] -= h;
            let fd = (kern.value(&z, &p) - kern.value(&z, &m)) / (2.0 * h);
            assert!((fd - g[i]).abs() / g[i].abs().max(1e-3) < 1e-6);
        }

        let flat = GaussianKernel::unnormalized(0.8, 3).unwrap();
        assert_eq!(flat.value(&z, &z), 1.0);
        let ratio = kern.value(&z, &zp) / flat.value(&z, &zp);
        let c = (2.0 * std::f64::consts::PI * 0.64f64).powf(-1.5);
        assert!((ratio / c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn median_heuristic_cases() {
        let two = Tensor::from_rows(&[[0.0, 0.0], [2.0, 0.0]]);
        let bw = median_heuristic(&two).unwrap();
        assert!((bw * bw - 2.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = standard_normal(&mut rng, 30, 3);
        let scaled = s.map(|v| 3.5 * v);
        let (a, b) = (median_heuristic(&s).unwrap(), median_heuristic(&scaled).unwrap());
        assert!((b / a - 3.5).abs() < 1e-12);

        let same = Tensor::filled(6, 2, 1.25);
        assert_eq!(median_heuristic(&same).unwrap(), FALLBACK_BANDWIDTH);
        assert!(median_heuristic(&Tensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn median_heuristic_even_count_averages() {
        // distances: 1, 3, 2 → odd count, median 2; four points give 6 pairs
        let pts = Tensor::from_rows(&[[0.0], [1.0], [3.0], [7.0]]);
        // pairwise: 1,3,7,2,6,4 → sorted 1,2,3,4,6,7 → median 3.5
        let bw = median_heuristic(&pts).unwrap();
        let expected = (3.5f64 * 3.5 / (2.0 * 4f64.ln())).sqrt();
        assert!((bw - expected).abs() < 1e-12);
    }
}
