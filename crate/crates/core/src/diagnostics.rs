//! Numerical checks of the variance comparison between the kernelized
//! semi-implicit score estimator `ŝ_SI` and the Stein estimator `ŝ_STEIN`.
//!
//! Only the score parts are compared (the target term is shared):
//! `ŝ_SI(z) = (1/n) Σᵢ k(z, zᵢ′) ∇log q(zᵢ′ | εᵢ′)` and
//! `ŝ_STEIN(z) = −(1/n) Σᵢ ∇_{z′}k(z, zᵢ′)`. For a Gaussian density kernel and
//! Gaussian conditionals their second moments differ by
//! `ΔV = (1/n) E[k(z, z′)² β]`, `β = ‖z′ − z‖²/σ_k⁴ − ‖η′ ⊘ σ‖²`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::sivi::{standard_normal, GaussianKernel, MixtureDensity, ModelError, SiviModel};

/// Bootstrap resamples used for every interval in a report.
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("the noise vector is zero, so the condition is undefined")]
    ZeroNoise,
    #[error("need at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A semi-implicit model with Gaussian conditionals `N(μ_ε, diag σ_ε²)`.
pub trait ConditionalGaussian {
    fn dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    /// Means and standard deviations, one row per row of `eps`.
    fn conditionals(&self, eps: &Tensor) -> (Tensor, Tensor);
}

impl ConditionalGaussian for SiviModel {
    fn dim(&self) -> usize {
        SiviModel::dim(self)
    }

    fn latent_dim(&self) -> usize {
        SiviModel::latent_dim(self)
    }

    fn conditionals(&self, eps: &Tensor) -> (Tensor, Tensor) {
        let mu = self.means(eps).expect("latent batch width matches the model");
        let sigma = self.sigma();
        let mut s = Tensor::zeros(eps.rows(), sigma.len());
        for i in 0..eps.rows() {
            s.row_slice_mut(i).copy_from_slice(&sigma);
        }
        (mu, s)
    }
}

/// Joint draws `(ε′, η′)` pushed through the model.
struct Draws {
    z: Tensor,
    eta: Tensor,
    mu: Tensor,
    sigma: Tensor,
}

fn draw<C: ConditionalGaussian + ?Sized, R: Rng + ?Sized>(model: &C, m: usize, rng: &mut R) -> Draws {
    let eps = standard_normal(rng, m, model.latent_dim());
    let eta = standard_normal(rng, m, model.dim());
    let (mu, sigma) = model.conditionals(&eps);
    let mut z = mu.clone();
    for ((zv, e), s) in z.data_mut().iter_mut().zip(eta.data()).zip(sigma.data()) {
        *zv += s * e;
    }
    Draws { z, eta, mu, sigma }
}

/// A closed interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

/// Percentile bootstrap interval at `level` for a statistic of `n` indexed
/// observations.
pub fn bootstrap_ci<R: Rng + ?Sized>(
    n: usize,
    statistic: impl Fn(&[usize]) -> f64,
    resamples: usize,
    level: f64,
    rng: &mut R,
) -> Interval {
    let mut idx = vec![0usize; n];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
            statistic(&idx)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    let pick = |q: f64| {
        let pos = (q * (resamples - 1) as f64).round() as usize;
        stats[pos.min(resamples - 1)]
    };
    Interval {
        lo: pick(tail),
        hi: pick(1.0 - tail),
    }
}

/// Sum over coordinates of the sample variance of the selected rows.
fn trace_variance(rows: &Tensor, idx: &[usize]) -> f64 {
    let d = rows.cols();
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for &i in idx {
        for ((s, q), v) in sum.iter_mut().zip(&mut sq).zip(rows.row_slice(i)) {
            *s += v;
            *q += v * v;
        }
    }
    let n = idx.len() as f64;
    sum.iter()
        .zip(&sq)
        .map(|(s, q)| (q - s * s / n) / (n - 1.0))
        .sum()
}

fn mean_of(values: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64
}

/// One realization of `(ŝ_STEIN(z), ŝ_SI(z))` from `n` draws.
pub fn score_estimates<C: ConditionalGaussian + ?Sized, R: Rng + ?Sized>(
    model: &C,
    z: &[f64],
    kernel: &GaussianKernel,
    n: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let dr = draw(model, n, rng);
    let inv = 1.0 / (kernel.bandwidth() * kernel.bandwidth());
    let mut stein = vec![0.0; z.len()];
    let mut si = vec![0.0; z.len()];
    for i in 0..n {
        let zp = dr.z.row_slice(i);
        let k = kernel.value(z, zp);
        for c in 0..z.len() {
            stein[c] += k * (zp[c] - z[c]) * inv;
            si[c] -= k * dr.eta.get(i, c) / dr.sigma.get(i, c);
        }
    }
    stein.iter_mut().chain(si.iter_mut()).for_each(|v| *v /= n as f64);
    (stein, si)
}

/// Monte Carlo evaluation of `ΔV = (1/n) E[k² β]` and related quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapFormula {
    pub gap: f64,
    pub ci: Interval,
    /// Pearson correlation between `k²` and `β` over the draws.
    pub k2_beta_correlation: f64,
    /// Fraction of draws on which the sufficient condition for `ΔV ≥ 0` holds.
    pub condition_fraction: f64,
    /// `E[k²]` estimated from the same draws.
    pub expected_k2: f64,
}

pub fn gap_formula_mc<C: ConditionalGaussian + ?Sized, R: Rng + ?Sized>(
    model: &C,
    z: &[f64],
    kernel: &GaussianKernel,
    n: usize,
    samples: usize,
    rng: &mut R,
) -> Result<GapFormula, DiagnosticsError> {
    if samples < 2 {
        return Err(DiagnosticsError::TooFew {
            what: "Monte Carlo samples",
            needed: 2,
            got: samples,
        });
    }
    let dr = draw(model, samples, rng);
    let bw4 = kernel.bandwidth().powi(4);
    let mut terms = Vec::with_capacity(samples);
    let mut k2s = Vec::with_capacity(samples);
    let mut betas = Vec::with_capacity(samples);
    let mut holds = 0usize;
    for i in 0..samples {
        let zp = dr.z.row_slice(i);
        let k = kernel.value(z, zp);
        let dist: f64 = zp.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        let scaled: f64 = dr
            .eta
            .row_slice(i)
            .iter()
            .zip(dr.sigma.row_slice(i))
            .map(|(e, s)| (e / s) * (e / s))
            .sum();
        let beta = dist / bw4 - scaled;
        terms.push(k * k * beta / n as f64);
        k2s.push(k * k);
        betas.push(beta);
        if prop2_condition(
            dr.sigma.row_slice(i),
            dr.mu.row_slice(i),
            z,
            dr.eta.row_slice(i),
            kernel.bandwidth(),
        )
        .unwrap_or(false)
        {
            holds += 1;
        }
    }
    let all: Vec<usize> = (0..samples).collect();
    let gap = mean_of(&terms, &all);
    let ci = bootstrap_ci(samples, |idx| mean_of(&terms, idx), BOOTSTRAP_RESAMPLES, 0.95, rng);
    Ok(GapFormula {
        gap,
        ci,
        k2_beta_correlation: pearson(&k2s, &betas).unwrap_or(f64::NAN),
        condition_fraction: holds as f64 / samples as f64,
        expected_k2: k2s.iter().sum::<f64>() / samples as f64,
    })
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// The sufficient condition
/// `min σ⁴ − 2 min σ² max σ ‖μ − z‖/‖η‖ + min σ² ‖μ − z‖²/‖η‖² ≥ σ_k⁴`.
pub fn prop2_condition(
    sigma: &[f64],
    mu: &[f64],
    z: &[f64],
    eta: &[f64],
    bandwidth: f64,
) -> Result<bool, DiagnosticsError> {
    let eta_norm = eta.iter().map(|e| e * e).sum::<f64>().sqrt();
    if eta_norm == 0.0 {
        return Err(DiagnosticsError::ZeroNoise);
    }
    let min = sigma.iter().copied().fold(f64::INFINITY, f64::min);
    let max = sigma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let r = mu.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / eta_norm;
    let min2 = min * min;
    let lhs = min2 * min2 - 2.0 * min2 * max * r + min2 * r * r;
    Ok(lhs >= bandwidth.powi(4))
}

/// `γ = E[‖σ_ε‖² + ‖μ_ε − z‖²]/σ_k⁴ − E‖σ_ε^{−1}‖²` from `samples` latent draws.
pub fn gamma<C: ConditionalGaussian + ?Sized, R: Rng + ?Sized>(
    model: &C,
    z: &[f64],
    bandwidth: f64,
    samples: usize,
    rng: &mut R,
) -> f64 {
    let eps = standard_normal(rng, samples, model.latent_dim());
    let (mu, sigma) = model.conditionals(&eps);
    let (mut spread, mut inv) = (0.0, 0.0);
    for i in 0..samples {
        for ((m, s), zc) in mu.row_slice(i).iter().zip(sigma.row_slice(i)).zip(z) {
            spread += s * s + (m - zc) * (m - zc);
            inv += 1.0 / (s * s);
        }
    }
    let n = samples as f64;
    spread / n / bandwidth.powi(4) - inv / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop3Bound {
    pub gamma: f64,
    pub expected_k2: f64,
    /// `(1/n) E[k²] γ` with `E[k²]` by Monte Carlo.
    pub bound: f64,
    /// Marginal density at the anchor used in the approximation.
    pub density: f64,
    /// `q_z(z) γ / (n (2√π σ_k)^d)`.
    pub approximation: f64,
}

/// Upper bound on the gap valid when `k²` and `β` are negatively correlated,
/// and its small-bandwidth approximation. `density` is `q_z(z)`; when absent
/// it is estimated from a mixture over `samples` latent draws.
pub fn prop3_upper_bound<C: ConditionalGaussian + ?Sized, R: Rng + ?Sized>(
    model: &C,
    z: &[f64],
    bandwidth: f64,
    n: usize,
    samples: usize,
    density: Option<f64>,
    rng: &mut R,
) -> Result<Prop3Bound, DiagnosticsError> {
    let kernel = GaussianKernel::new(bandwidth, model.dim())?;
    let g = gamma(model, z, bandwidth, samples, rng);
    let dr = draw(model, samples, rng);
    let expected_k2 = dr
        .z
        .iter_rows()
        .map(|zp| kernel.value(z, zp).powi(2))
        .sum::<f64>()
        / samples as f64;
    let density = match density {
        Some(d) => d,
        None => mixture_density(model, z, samples, rng),
    };
    let d = model.dim() as i32;
    let norm = (2.0 * std::f64::consts::PI.sqrt() * bandwidth).powi(d);
    Ok(Prop3Bound {
        gamma: g,
        expected_k2,
        bound: expected_k2 * g / n as f64,
        density,
        approximation: density * g / (n as f64 * norm),
    })
}

/// `q_z(z)` as a mixture over latent draws. Exact in form for a global
/// scale; per-draw scales are averaged component by component.
fn mixture_density<C: ConditionalGaussian + ?Sized, R: Rng + ?Sized>(
    model: &C,
    z: &[f64],
    samples: usize,
    rng: &mut R,
) -> f64 {
    let eps = standard_normal(rng, samples, model.latent_dim());
    let (mu, sigma) = model.conditionals(&eps);
    let mut lps = Vec::with_capacity(samples);
    for i in 0..samples {
        let log_sigma: Vec<f64> = sigma.row_slice(i).iter().map(|s| s.ln()).collect();
        let one = MixtureDensity::new(Tensor::row(mu.row_slice(i)), &log_sigma);
        lps.push(one.log_density(z));
    }
    (crate::autodiff::log_sum_exp(&lps) - (samples as f64).ln()).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceSettings {
    /// Draws per estimator realization.
    pub n: usize,
    pub replications: usize,
    /// Draws for the closed-form gap and the bound.
    pub mc_samples: usize,
    pub bandwidth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub anchor: Vec<f64>,
    pub n: usize,
    pub replications: usize,
    pub bandwidth: f64,
    pub trace_var_stein: f64,
    pub trace_var_si: f64,
    pub trace_var_stein_ci: Interval,
    pub trace_var_si_ci: Interval,
    /// `tr Cov(ŝ_STEIN) − tr Cov(ŝ_SI)` across replications.
    pub gap: f64,
    pub gap_ci: Interval,
    /// Norm of the difference of the two replication means.
    pub mean_difference: f64,
    pub formula: GapFormula,
    pub bound: Prop3Bound,
}

/// Simulates `replications` independent `n`-draw realizations of both
/// estimators at `z`, and evaluates the closed-form gap and the bound.
pub fn variance_gap_empirical<C: ConditionalGaussian + ?Sized, R: Rng + ?Sized>(
    model: &C,
    z: &[f64],
    settings: &VarianceSettings,
    rng: &mut R,
) -> Result<VarianceReport, DiagnosticsError> {
    if settings.replications < 2 {
        return Err(DiagnosticsError::TooFew {
            what: "replications",
            needed: 2,
            got: settings.replications,
        });
    }
    if settings.n < 1 {
        return Err(DiagnosticsError::TooFew {
            what: "draws per estimate",
            needed: 1,
            got: settings.n,
        });
    }
    let kernel = GaussianKernel::new(settings.bandwidth, model.dim())?;
    let d = model.dim();
    let r = settings.replications;
    let mut stein = Tensor::zeros(r, d);
    let mut si = Tensor::zeros(r, d);
    for k in 0..r {
        let (a, b) = score_estimates(model, z, &kernel, settings.n, rng);
        stein.row_slice_mut(k).copy_from_slice(&a);
        si.row_slice_mut(k).copy_from_slice(&b);
    }
    let all: Vec<usize> = (0..r).collect();
    let tv_stein = trace_variance(&stein, &all);
    let tv_si = trace_variance(&si, &all);
    let gap_ci = bootstrap_ci(
        r,
        |idx| trace_variance(&stein, idx) - trace_variance(&si, idx),
        BOOTSTRAP_RESAMPLES,
        0.95,
        rng,
    );
    let stein_ci = bootstrap_ci(r, |idx| trace_variance(&stein, idx), BOOTSTRAP_RESAMPLES, 0.95, rng);
    let si_ci = bootstrap_ci(r, |idx| trace_variance(&si, idx), BOOTSTRAP_RESAMPLES, 0.95, rng);
    let mean_difference = (0..d)
        .map(|c| {
            let ms = (0..r).map(|k| stein.get(k, c)).sum::<f64>() / r as f64;
            let mi = (0..r).map(|k| si.get(k, c)).sum::<f64>() / r as f64;
            (ms - mi).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    let formula = gap_formula_mc(model, z, &kernel, settings.n, settings.mc_samples, rng)?;
    let bound = prop3_upper_bound(
        model,
        z,
        settings.bandwidth,
        settings.n,
        settings.mc_samples,
        None,
        rng,
    )?;
    Ok(VarianceReport {
        anchor: z.to_vec(),
        n: settings.n,
        replications: r,
        bandwidth: settings.bandwidth,
        trace_var_stein: tv_stein,
        trace_var_si: tv_si,
        trace_var_stein_ci: stein_ci,
        trace_var_si_ci: si_ci,
        gap: tv_stein - tv_si,
        gap_ci,
        mean_difference,
        formula,
        bound,
    })
}
