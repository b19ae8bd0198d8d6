//! Kernel-smoothed score-difference estimators and the surrogate losses whose
//! parameter gradients are the KPG, KPG-IS and amortized-SVGD updates.
//!
//! Every surrogate has the form `loss = Σⱼ Cⱼᵀ zⱼ` where `zⱼ = h_φ(εⱼ, ηⱼ)` is
//! attached to the tape and the coefficients `Cⱼ` are detached, so
//! `∇_φ loss = Σⱼ (∂zⱼ/∂φ)ᵀ Cⱼ`.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::proposal::{ProposalError, ProposalModel};
use crate::sivi::{
    median_heuristic, standard_normal, Bandwidth, BoundSivi, GaussianKernel, ModelError,
    SiviModel,
};
use crate::targets::TargetDensity;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("batch size {got} is below the minimum of {needed}")]
    BatchTooSmall { needed: usize, got: usize },
    #[error("non-finite target score at sample {index}: z = {z:?}")]
    NonFiniteScore { index: usize, z: Vec<f64> },
    #[error("non-finite importance weight for eps = {eps:?}, z = {z:?}")]
    NonFiniteWeight { eps: Vec<f64>, z: Vec<f64> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Reparameterization draws `(ε, η)`, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PathDraws {
    pub eps: Tensor,
    pub eta: Tensor,
}

impl PathDraws {
    /// All of `ε` first, then all of `η`.
    pub fn sample<R: Rng + ?Sized>(model: &SiviModel, m: usize, rng: &mut R) -> Self {
        let eps = standard_normal(rng, m, model.latent_dim());
        let eta = standard_normal(rng, m, model.dim());
        Self { eps, eta }
    }

    pub fn len(&self) -> usize {
        self.eps.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.rows() == 0
    }
}

/// Importance-sampling draws for the smoothing samples of each anchor.
///
/// The pool rows are pushed through the model and the target once each;
/// anchor `i` uses the pool rows listed in `assignments[i]`, each paired with
/// `log p_ε(ε) − log τ(ε | zᵢ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IsDraws {
    pub eps: Tensor,
    pub eta: Tensor,
    pub assignments: Vec<Vec<(usize, f64)>>,
}

/// A surrogate loss together with the detached pieces that produced it.
#[derive(Debug)]
pub struct GradEstimate {
    pub loss: Var,
    pub params: BoundSivi,
    /// Detached anchor values `z̃ⱼ`.
    pub anchors: Tensor,
    /// `Cⱼ`, so that `loss = Σⱼ Cⱼᵀ zⱼ`.
    pub coefficients: Tensor,
    pub bandwidth: f64,
    pub mean_kernel_weight: f64,
    /// Mean over anchors of `(Σw)² / Σw²`; importance-sampled variants only.
    pub ess: Option<f64>,
    /// Largest `log p_ε(ε) − log τ(ε | z)` among the draws.
    pub max_log_ratio: Option<f64>,
    /// Number of target score evaluations spent on smoothing samples.
    pub target_evaluations: usize,
}

impl GradEstimate {
    /// `∇` of the surrogate with respect to the model tensors, in the order
    /// of [`SiviModel::tensors`].
    pub fn gradients(&self, tape: &Tape) -> Result<Vec<Tensor>, EstimatorError> {
        let grads = tape.backward(&self.loss)?;
        Ok(self.params.gradients(&grads))
    }
}

/// `Δ̃ᵢ = ∇log q(zᵢ | εᵢ) − ∇log p(zᵢ)` for `zᵢ = μ(εᵢ) + σ ⊙ ηᵢ`, where the
/// conditional score reduces to `−ηᵢ ⊘ σ`.
pub fn score_differences(eta: &Tensor, sigma: &[f64], scores: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(eta.rows(), eta.cols());
    for i in 0..eta.rows() {
        for (((o, e), s), sc) in out
            .row_slice_mut(i)
            .iter_mut()
            .zip(eta.row_slice(i))
            .zip(sigma)
            .zip(scores.row_slice(i))
        {
            *o = -e / s - sc;
        }
    }
    out
}

/// `Δ_SI(aⱼ) = (1/n) Σᵢ k(aⱼ, zᵢ) Δ̃ᵢ` at each anchor row, plus the mean kernel
/// value over all pairs.
pub fn delta_si(
    kernel: &GaussianKernel,
    anchors: &Tensor,
    samples: &Tensor,
    diffs: &Tensor,
) -> (Tensor, f64) {
    let n = samples.rows();
    let mut out = Tensor::zeros(anchors.rows(), anchors.cols());
    let mut ksum = 0.0;
    for j in 0..anchors.rows() {
        let a = anchors.row_slice(j);
        let row = out.row_slice_mut(j);
        for i in 0..n {
            let k = kernel.value(a, samples.row_slice(i));
            ksum += k;
            for (o, d) in row.iter_mut().zip(diffs.row_slice(i)) {
                *o += k * d;
            }
        }
        row.iter_mut().for_each(|o| *o /= n as f64);
    }
    (out, ksum / (n * anchors.rows()) as f64)
}

/// `Δ_STEIN(aⱼ) = (1/n) Σᵢ [−∇_{z′}k(aⱼ, zᵢ) − k(aⱼ, zᵢ) ∇log p(zᵢ)]`.
pub fn delta_stein(
    kernel: &GaussianKernel,
    anchors: &Tensor,
    samples: &Tensor,
    scores: &Tensor,
) -> (Tensor, f64) {
    let n = samples.rows();
    let inv = 1.0 / (kernel.bandwidth() * kernel.bandwidth());
    let mut out = Tensor::zeros(anchors.rows(), anchors.cols());
    let mut ksum = 0.0;
    for j in 0..anchors.rows() {
        let a = anchors.row_slice(j);
        let row = out.row_slice_mut(j);
        for i in 0..n {
            let zi = samples.row_slice(i);
            let k = kernel.value(a, zi);
            ksum += k;
            for (((o, z), av), s) in row.iter_mut().zip(zi).zip(a).zip(scores.row_slice(i)) {
                *o += k * ((z - av) * inv - s);
            }
        }
        row.iter_mut().for_each(|o| *o /= n as f64);
    }
    (out, ksum / (n * anchors.rows()) as f64)
}

/// `Δ_SI-IS(a) = (1/l) Σⱼ wⱼ Δ̃ⱼ` with `log wⱼ = log k(a, ζⱼ) + log_ratioⱼ`.
/// Returns the estimate and the weights.
pub fn delta_si_is(
    kernel: &GaussianKernel,
    anchor: &[f64],
    samples: &Tensor,
    diffs: &Tensor,
    log_ratios: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let l = samples.rows();
    let mut out = vec![0.0; anchor.len()];
    let mut w = Vec::with_capacity(l);
    for j in 0..l {
        let wj = (kernel.log_value(anchor, samples.row_slice(j)) + log_ratios[j]).exp();
        for (o, d) in out.iter_mut().zip(diffs.row_slice(j)) {
            *o += wj * d;
        }
        w.push(wj);
    }
    out.iter_mut().for_each(|o| *o /= l as f64);
    (out, w)
}

/// Resolves a bandwidth choice against the detached anchor batch.
pub fn resolve_bandwidth(bandwidth: Bandwidth, anchors: &Tensor) -> Result<f64, ModelError> {
    match bandwidth {
        Bandwidth::Fixed(b) => Ok(b),
        Bandwidth::Median => median_heuristic(anchors),
    }
}

fn checked_scores(target: &dyn TargetDensity, z: &Tensor) -> Result<Tensor, EstimatorError> {
    let s = target.score_batch(z);
    for i in 0..z.rows() {
        if !s.row_slice(i).iter().all(|v| v.is_finite()) {
            return Err(EstimatorError::NonFiniteScore {
                index: i,
                z: z.row_slice(i).to_vec(),
            });
        }
    }
    Ok(s)
}

struct Anchored {
    params: BoundSivi,
    z: Var,
    values: Tensor,
    kernel: GaussianKernel,
}

fn anchor(
    tape: &Tape,
    model: &SiviModel,
    draws: &PathDraws,
    bandwidth: Bandwidth,
) -> Result<Anchored, EstimatorError> {
    let params = model.attach(tape);
    let z = params.sample(tape, &draws.eps, &draws.eta)?;
    let values = z.value().clone();
    let bw = resolve_bandwidth(bandwidth, &values)?;
    // A constant factor only rescales the gradient.
    let kernel = GaussianKernel::unnormalized(bw, model.dim())?;
    Ok(Anchored {
        params,
        z,
        values,
        kernel,
    })
}

fn finish(
    tape: &Tape,
    a: Anchored,
    coefficients: Tensor,
    mean_kernel_weight: f64,
    ess: Option<f64>,
    max_log_ratio: Option<f64>,
    target_evaluations: usize,
) -> GradEstimate {
    let loss = tape.dot(&a.z, &Var::constant(coefficients.clone()));
    GradEstimate {
        loss,
        params: a.params,
        anchors: a.values,
        coefficients,
        bandwidth: a.kernel.bandwidth(),
        mean_kernel_weight,
        ess,
        max_log_ratio,
        target_evaluations,
    }
}

/// KPG surrogate from given anchor and smoothing draws:
/// `loss = (1/m²) Σⱼ (Σᵢ k(z̃ⱼ₁, z̃ᵢ₂) Δ̃ᵢ)ᵀ zⱼ₁`.
pub fn kpg_from_draws(
    tape: &Tape,
    model: &SiviModel,
    target: &dyn TargetDensity,
    anchors: &PathDraws,
    smoothing: &PathDraws,
    bandwidth: Bandwidth,
) -> Result<GradEstimate, EstimatorError> {
    let a = anchor(tape, model, anchors, bandwidth)?;
    let z2 = model.sample_values(&smoothing.eps, &smoothing.eta)?;
    let scores = checked_scores(target, &z2)?;
    let diffs = score_differences(&smoothing.eta, &model.sigma(), &scores);
    let (delta, mean_k) = delta_si(&a.kernel, &a.values, &z2, &diffs);
    let m = anchors.len() as f64;
    let coef = delta.map(|v| v / m);
    Ok(finish(tape, a, coef, mean_k, None, None, smoothing.len()))
}

/// Amortized-SVGD surrogate from given draws, with the Stein form of the
/// score difference averaged over the smoothing batch.
pub fn stein_from_draws(
    tape: &Tape,
    model: &SiviModel,
    target: &dyn TargetDensity,
    anchors: &PathDraws,
    smoothing: &PathDraws,
    bandwidth: Bandwidth,
) -> Result<GradEstimate, EstimatorError> {
    let a = anchor(tape, model, anchors, bandwidth)?;
    let z2 = model.sample_values(&smoothing.eps, &smoothing.eta)?;
    let scores = checked_scores(target, &z2)?;
    let (delta, mean_k) = delta_stein(&a.kernel, &a.values, &z2, &scores);
    let m = anchors.len() as f64;
    let coef = delta.map(|v| v / m);
    Ok(finish(tape, a, coef, mean_k, None, None, smoothing.len()))
}

fn check_batch(m: usize, needed: usize) -> Result<(), EstimatorError> {
    if m < needed {
        Err(EstimatorError::BatchTooSmall { needed, got: m })
    } else {
        Ok(())
    }
}

/// KPG with two fresh batches of size `m`.
pub fn kpg_surrogate<R: Rng + ?Sized>(
    tape: &Tape,
    model: &SiviModel,
    target: &dyn TargetDensity,
    m: usize,
    bandwidth: Bandwidth,
    rng: &mut R,
) -> Result<GradEstimate, EstimatorError> {
    check_batch(m, 2)?;
    let first = PathDraws::sample(model, m, rng);
    let second = PathDraws::sample(model, m, rng);
    kpg_from_draws(tape, model, target, &first, &second, bandwidth)
}

/// Amortized-SVGD baseline with two fresh batches of size `m`.
pub fn stein_surrogate<R: Rng + ?Sized>(
    tape: &Tape,
    model: &SiviModel,
    target: &dyn TargetDensity,
    m: usize,
    bandwidth: Bandwidth,
    rng: &mut R,
) -> Result<GradEstimate, EstimatorError> {
    check_batch(m, 2)?;
    let first = PathDraws::sample(model, m, rng);
    let second = PathDraws::sample(model, m, rng);
    stein_from_draws(tape, model, target, &first, &second, bandwidth)
}

/// KPG-IS surrogate from given draws:
/// `loss = (1/(m·l)) Σᵢ (Σⱼ wᵢⱼ Δ̃ᵢⱼ)ᵀ zᵢ` with unnormalized weights
/// `wᵢⱼ = k(z̃ᵢ, ζ̃ᵢⱼ) p_ε(εᵢⱼ) / τ(εᵢⱼ | z̃ᵢ)`.
pub fn kpg_is_from_draws(
    tape: &Tape,
    model: &SiviModel,
    target: &dyn TargetDensity,
    anchors: &PathDraws,
    draws: &IsDraws,
    bandwidth: Bandwidth,
) -> Result<GradEstimate, EstimatorError> {
    let a = anchor(tape, model, anchors, bandwidth)?;
    let m = anchors.len();
    let zeta = model.sample_values(&draws.eps, &draws.eta)?;
    let scores = checked_scores(target, &zeta)?;
    let diffs = score_differences(&draws.eta, &model.sigma(), &scores);

    let mut coef = Tensor::zeros(m, model.dim());
    let (mut ksum, mut kcount, mut ess_sum) = (0.0, 0usize, 0.0);
    let mut max_ratio = f64::NEG_INFINITY;
    for i in 0..m {
        let zi = a.values.row_slice(i);
        let assigned = &draws.assignments[i];
        let l = assigned.len();
        let row = coef.row_slice_mut(i);
        let (mut sw, mut sw2) = (0.0, 0.0);
        for &(p, log_ratio) in assigned {
            let log_k = a.kernel.log_value(zi, zeta.row_slice(p));
            let w = (log_k + log_ratio).exp();
            if !w.is_finite() {
                return Err(EstimatorError::NonFiniteWeight {
                    eps: draws.eps.row_slice(p).to_vec(),
                    z: zi.to_vec(),
                });
            }
            max_ratio = max_ratio.max(log_ratio);
            ksum += log_k.exp();
            kcount += 1;
            sw += w;
            sw2 += w * w;
            for (o, d) in row.iter_mut().zip(diffs.row_slice(p)) {
                *o += w * d;
            }
        }
        let scale = 1.0 / (m * l) as f64;
        row.iter_mut().for_each(|o| *o *= scale);
        ess_sum += if sw2 > 0.0 { sw * sw / sw2 } else { 0.0 };
    }
    let mean_k = ksum / kcount.max(1) as f64;
    Ok(finish(
        tape,
        a,
        coef,
        mean_k,
        Some(ess_sum / m as f64),
        Some(max_ratio),
        draws.eps.rows(),
    ))
}

/// `l` fresh draws `εᵢⱼ ~ τ(· | z̃ᵢ)` and `ηᵢⱼ ~ N(0, I)` per anchor.
pub fn draw_is<R: Rng + ?Sized>(
    model: &SiviModel,
    proposal: &ProposalModel,
    anchors: &PathDraws,
    l: usize,
    rng: &mut R,
) -> Result<IsDraws, EstimatorError> {
    let zt = model.sample_values(&anchors.eps, &anchors.eta)?;
    let cond = proposal.conditionals(&zt)?;
    let m = anchors.len();
    let (de, dz) = (model.latent_dim(), model.dim());
    let mut eps = Vec::with_capacity(m * l * de);
    let mut eta = Vec::with_capacity(m * l * dz);
    let mut assignments = Vec::with_capacity(m);
    for i in 0..m {
        let mut row = Vec::with_capacity(l);
        for _ in 0..l {
            let (e, _) = cond.sample(i, rng);
            let n = standard_normal(rng, 1, dz);
            row.push((eps.len() / de, cond.log_ratio(i, &e)));
            eps.extend(e);
            eta.extend(n.into_data());
        }
        assignments.push(row);
    }
    Ok(IsDraws {
        eps: Tensor::new(m * l, de, eps),
        eta: Tensor::new(m * l, dz, eta),
        assignments,
    })
}

/// Shared-ε draws: one set of `l` prior pairs `(εⱼ, ηⱼ)` is shared by all
/// anchors. For anchor `i` and slot `j`, the prior component (probability
/// `α(z̃ᵢ)`) reuses pair `j`; otherwise a fresh `τ̃(· | z̃ᵢ)` draw with fresh
/// noise is added to the pool. Weights use the full mixture density.
pub fn draw_shared_is<R: Rng + ?Sized>(
    model: &SiviModel,
    proposal: &ProposalModel,
    anchors: &PathDraws,
    l: usize,
    rng: &mut R,
) -> Result<IsDraws, EstimatorError> {
    let zt = model.sample_values(&anchors.eps, &anchors.eta)?;
    let cond = proposal.conditionals(&zt)?;
    let m = anchors.len();
    let (de, dz) = (model.latent_dim(), model.dim());
    let shared = PathDraws::sample(model, l, rng);
    let mut eps = shared.eps.into_data();
    let mut eta = shared.eta.into_data();
    let mut assignments = Vec::with_capacity(m);
    for i in 0..m {
        let alpha = cond.log_alpha[i].exp();
        let mut row = Vec::with_capacity(l);
        for j in 0..l {
            let u: f64 = rng.random();
            if u < alpha {
                row.push((j, cond.log_ratio(i, &eps[j * de..(j + 1) * de])));
            } else {
                let e = cond.sample_tilde(i, rng);
                let n = standard_normal(rng, 1, dz);
                row.push((eps.len() / de, cond.log_ratio(i, &e)));
                eps.extend(e);
                eta.extend(n.into_data());
            }
        }
        assignments.push(row);
    }
    let pool = eps.len() / de;
    Ok(IsDraws {
        eps: Tensor::new(pool, de, eps),
        eta: Tensor::new(pool, dz, eta),
        assignments,
    })
}

/// KPG-IS with `l` proposal draws per anchor. The anchors are supplied by
/// the caller so the same batch can train the proposal.
pub fn kpg_is_surrogate<R: Rng + ?Sized>(
    tape: &Tape,
    model: &SiviModel,
    proposal: &ProposalModel,
    target: &dyn TargetDensity,
    anchors: &PathDraws,
    l: usize,
    bandwidth: Bandwidth,
    rng: &mut R,
) -> Result<GradEstimate, EstimatorError> {
    check_batch(anchors.len(), 1)?;
    check_batch(l, 1)?;
    let draws = draw_is(model, proposal, anchors, l, rng)?;
    kpg_is_from_draws(tape, model, target, anchors, &draws, bandwidth)
}

/// KPG-IS where prior-component draws are shared across anchors.
pub fn shared_eps_kpg_is_surrogate<R: Rng + ?Sized>(
    tape: &Tape,
    model: &SiviModel,
    proposal: &ProposalModel,
    target: &dyn TargetDensity,
    anchors: &PathDraws,
    l: usize,
    bandwidth: Bandwidth,
    rng: &mut R,
) -> Result<GradEstimate, EstimatorError> {
    check_batch(anchors.len(), 1)?;
    check_batch(l, 1)?;
    let draws = draw_shared_is(model, proposal, anchors, l, rng)?;
    kpg_is_from_draws(tape, model, target, anchors, &draws, bandwidth)
}
