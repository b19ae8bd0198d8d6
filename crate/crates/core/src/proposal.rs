//! Learnable conditional proposal over the latent,
//! `τ(ε | z) = α(z)·p_ε(ε) + (1 − α(z))·τ̃(ε | z)`, with
//! `α(z) = α̲ + (1 − α̲)·ς(α̃(z))` and `τ̃` a diagonal Gaussian whose mean and
//! log-std come from a network of `z`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    log_add_exp, log_sigmoid, sigmoid, AutodiffError, BoundMlp, Gradients, MlpParams, Tape,
    Tensor, Var,
};
use crate::sivi::{latent_log_density, LN_2PI};

#[derive(Debug, Error, PartialEq)]
pub enum ProposalError {
    #[error("alpha_min must lie in (0, 1], got {0}")]
    AlphaMin(f64),
    #[error(transparent)]
    Shape(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalModel {
    /// `z → (mean, log-std)` of `τ̃`, output width `2·d_E`.
    pub tau_net: MlpParams,
    /// `z → α̃(z)`.
    pub alpha_net: MlpParams,
    pub alpha_min: f64,
}

fn check_alpha_min(a: f64) -> Result<(), ProposalError> {
    if a > 0.0 && a <= 1.0 {
        Ok(())
    } else {
        Err(ProposalError::AlphaMin(a))
    }
}

impl ProposalModel {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        latent_dim: usize,
        hidden: usize,
        depth: usize,
        alpha_min: f64,
        rng: &mut R,
    ) -> Result<Self, ProposalError> {
        check_alpha_min(alpha_min)?;
        let mut sizes = vec![dim];
        sizes.extend(std::iter::repeat_n(hidden, depth));
        let mut tau = sizes.clone();
        tau.push(2 * latent_dim);
        sizes.push(1);
        Ok(Self {
            tau_net: MlpParams::init(&tau, rng),
            alpha_net: MlpParams::init(&sizes, rng),
            alpha_min,
        })
    }

    pub fn from_parts(
        tau_net: MlpParams,
        alpha_net: MlpParams,
        alpha_min: f64,
    ) -> Result<Self, ProposalError> {
        check_alpha_min(alpha_min)?;
        if tau_net.output_dim() % 2 != 0
            || alpha_net.output_dim() != 1
            || tau_net.input_dim() != alpha_net.input_dim()
        {
            return Err(ProposalError::Shape(AutodiffError::Shape {
                context: "proposal networks",
                expected: (tau_net.input_dim(), 1),
                actual: (alpha_net.input_dim(), alpha_net.output_dim()),
            }));
        }
        Ok(Self {
            tau_net,
            alpha_net,
            alpha_min,
        })
    }

    pub fn dim(&self) -> usize {
        self.tau_net.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.tau_net.output_dim() / 2
    }

    /// `(log α, log(1 − α))` for a raw network output `a`.
    pub fn log_alpha_pair(&self, a: f64) -> (f64, f64) {
        let am = self.alpha_min;
        let log_alpha = (am + (1.0 - am) * sigmoid(a)).ln();
        let log_one_minus = (1.0 - am).ln() + log_sigmoid(-a);
        (log_alpha, log_one_minus)
    }

    /// Network outputs for a batch of conditioning points.
    pub fn conditionals(&self, z: &Tensor) -> Result<ProposalBatch, ProposalError> {
        let tau = self.tau_net.eval(z)?;
        let raw = self.alpha_net.eval(z)?;
        let de = self.latent_dim();
        let (log_alpha, log_one_minus) = raw.data().iter().map(|&a| self.log_alpha_pair(a)).unzip();
        Ok(ProposalBatch {
            mean: tau.slice_cols(0, de),
            log_std: tau.slice_cols(de, 2 * de),
            log_alpha,
            log_one_minus,
        })
    }

    pub fn alpha(&self, z: &[f64]) -> Result<f64, ProposalError> {
        Ok(self.conditionals(&Tensor::row(z))?.log_alpha[0].exp())
    }

    /// `log τ(ε | z)`.
    pub fn log_density(&self, eps: &[f64], z: &[f64]) -> Result<f64, ProposalError> {
        Ok(self.conditionals(&Tensor::row(z))?.log_density(0, eps))
    }

    /// One draw from `τ(· | z)`.
    pub fn sample<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> Result<Vec<f64>, ProposalError> {
        Ok(self.conditionals(&Tensor::row(z))?.sample(0, rng).0)
    }

    pub fn attach(&self, tape: &Tape) -> BoundProposal {
        BoundProposal {
            tau: self.tau_net.attach(tape),
            alpha: self.alpha_net.attach(tape),
            alpha_min: self.alpha_min,
            latent_dim: self.latent_dim(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.tau_net.tensors();
        t.extend(self.alpha_net.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.tau_net.tensors_mut();
        t.extend(self.alpha_net.tensors_mut());
        t
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut n = self.tau_net.tensor_names("proposal.tau");
        n.extend(self.alpha_net.tensor_names("proposal.alpha"));
        n
    }
}

/// Proposal parameters evaluated at a batch of conditioning points.
#[derive(Clone, Debug)]
pub struct ProposalBatch {
    pub mean: Tensor,
    pub log_std: Tensor,
    pub log_alpha: Vec<f64>,
    pub log_one_minus: Vec<f64>,
}

impl ProposalBatch {
    pub fn len(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_alpha.is_empty()
    }

    /// `log τ̃(ε | zᵢ)`.
    pub fn log_tilde(&self, i: usize, eps: &[f64]) -> f64 {
        eps.iter()
            .zip(self.mean.row_slice(i))
            .zip(self.log_std.row_slice(i))
            .map(|((e, m), ls)| {
                let u = (e - m) * (-ls).exp();
                -0.5 * u * u - ls - 0.5 * LN_2PI
            })
            .sum()
    }

    pub fn log_density(&self, i: usize, eps: &[f64]) -> f64 {
        log_add_exp(
            self.log_alpha[i] + latent_log_density(eps),
            self.log_one_minus[i] + self.log_tilde(i, eps),
        )
    }

    /// `log p_ε(ε) − log τ(ε | zᵢ)`, formed without subtracting two large
    /// numbers; never exceeds `−log α(zᵢ)`.
    pub fn log_ratio(&self, i: usize, eps: &[f64]) -> f64 {
        let rel = self.log_tilde(i, eps) - latent_log_density(eps);
        -log_add_exp(self.log_alpha[i], self.log_one_minus[i] + rel)
    }

    /// Draws from `τ(· | zᵢ)`; the flag is true when the prior component was
    /// chosen. Always consumes one uniform and `d_E` normals.
    pub fn sample<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> (Vec<f64>, bool) {
        let u: f64 = rng.random();
        let xi: Vec<f64> = (0..self.mean.cols())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        if u < self.log_alpha[i].exp() {
            (xi, true)
        } else {
            let eps = xi
                .iter()
                .zip(self.mean.row_slice(i))
                .zip(self.log_std.row_slice(i))
                .map(|((x, m), ls)| m + ls.exp() * x)
                .collect();
            (eps, false)
        }
    }

    /// A draw from `τ̃(· | zᵢ)` alone.
    pub fn sample_tilde<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Vec<f64> {
        self.mean
            .row_slice(i)
            .iter()
            .zip(self.log_std.row_slice(i))
            .map(|(m, ls)| {
                let x: f64 = StandardNormal.sample(rng);
                m + ls.exp() * x
            })
            .collect()
    }
}

/// A [`ProposalModel`] bound to a tape.
#[derive(Clone, Debug)]
pub struct BoundProposal {
    tau: BoundMlp,
    alpha: BoundMlp,
    alpha_min: f64,
    latent_dim: usize,
}

impl BoundProposal {
    /// `log τ(εᵢ | zᵢ)` for each row, `m × 1`.
    pub fn log_density(&self, tape: &Tape, eps: &Tensor, z: &Tensor) -> Result<Var, ProposalError> {
        let de = self.latent_dim;
        if eps.shape() != (z.rows(), de) {
            return Err(ProposalError::Shape(AutodiffError::Shape {
                context: "proposal latent batch",
                expected: (z.rows(), de),
                actual: eps.shape(),
            }));
        }
        let zc = Var::constant(z.clone());
        let out = self.tau.forward(tape, &zc)?;
        let mean = tape.slice_cols(&out, 0, de);
        let log_std = tape.slice_cols(&out, de, 2 * de);
        let diff = tape.sub(&Var::constant(eps.clone()), &mean);
        let u = tape.mul(&diff, &tape.exp(&tape.neg(&log_std)));
        let quad = tape.scale(&tape.square(&u), -0.5);
        let log_tilde = tape.shift(
            &tape.sum_rows(&tape.sub(&quad, &log_std)),
            -0.5 * LN_2PI * de as f64,
        );

        let raw = self.alpha.forward(tape, &zc)?;
        let am = self.alpha_min;
        let alpha = tape.shift(&tape.scale(&tape.sigmoid(&raw), 1.0 - am), am);
        let log_alpha = tape.log(&alpha);
        let log_one_minus = tape.shift(&tape.log_sigmoid(&tape.neg(&raw)), (1.0 - am).ln());

        let prior = Tensor::new(
            eps.rows(),
            1,
            eps.iter_rows().map(latent_log_density).collect(),
        );
        let a = tape.add(&log_alpha, &Var::constant(prior));
        let b = tape.add(&log_one_minus, &log_tilde);
        Ok(tape.log_add_exp(&a, &b))
    }

    /// Gradients in the order of [`ProposalModel::tensors`].
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        let mut g = self.tau.gradients(grads);
        g.extend(self.alpha.gradients(grads));
        g
    }
}

/// `−(1/m) Σᵢ log τ(εᵢ | zᵢ)` over joint draws `(zᵢ, εᵢ) ~ q(z, ε)`; `z`
/// enters as a constant so only the proposal parameters receive gradient.
pub fn proposal_loss(
    tape: &Tape,
    proposal: &BoundProposal,
    z: &Tensor,
    eps: &Tensor,
) -> Result<Var, ProposalError> {
    let lp = proposal.log_density(tape, eps, z)?;
    Ok(tape.neg(&tape.mean(&lp)))
}
