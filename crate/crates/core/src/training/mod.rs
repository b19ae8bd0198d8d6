//! Optimization: Adam with step decay, the training loop for every method,
//! Langevin reference sampling and checkpoints.

mod checkpoint;
mod sgld;

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::estimators::{
    kpg_is_surrogate, kpg_surrogate, shared_eps_kpg_is_surrogate, stein_surrogate, EstimatorError,
    GradEstimate, PathDraws,
};
use crate::proposal::{proposal_loss, ProposalError, ProposalModel};
use crate::sivi::{Bandwidth, SiviModel};
use crate::targets::{AnnealingSchedule, TargetDensity, Tempered};

pub use checkpoint::{Checkpoint, CheckpointError, MAGIC, VERSION};
pub use sgld::{sgld_from, sgld_run, SgldState};

/// Fraction of skipped iterations above which a run fails.
pub const MAX_SKIP_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in {0}; parameters left unchanged")]
    NonFiniteGradient(&'static str),
    #[error("{skipped} of {iterations} iterations skipped; last cause: {last}")]
    TooManySkips {
        skipped: usize,
        iterations: usize,
        last: String,
    },
    #[error("method {0} needs a proposal model")]
    MissingProposal(Method),
    #[error("invalid setting: {0}")]
    InvalidSetting(String),
    #[error("iteration {iteration}: {source}")]
    Estimator {
        iteration: usize,
        source: EstimatorError,
    },
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl TrainError {
    fn skippable(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGradient(_)
                | TrainError::Estimator {
                    source: EstimatorError::NonFiniteScore { .. }
                        | EstimatorError::NonFiniteWeight { .. },
                    ..
                }
        )
    }
}

/// `lr₀ · decay^⌊s / every⌋` after `s` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub decay: f64,
    pub every: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr,
            decay: 1.0,
            every: 1,
        }
    }

    pub fn at(&self, steps: u64) -> f64 {
        let k = steps / self.every.max(1) as u64;
        self.lr * self.decay.powi(k as i32)
    }
}

/// Bias-corrected Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ϵ = 1e-8`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(schedule: LrSchedule, params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Learning rate the next step will use.
    pub fn learning_rate(&self) -> f64 {
        self.schedule.at(self.steps)
    }

    /// One update. Non-finite gradients leave parameters and state untouched.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<(), TrainError> {
        if !grads.iter().all(Tensor::all_finite) {
            return Err(TrainError::NonFiniteGradient("adam step"));
        }
        assert_eq!(params.len(), grads.len(), "parameter and gradient counts differ");
        let lr = self.learning_rate();
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step_size = lr / c1;
        let c2_sqrt = c2.sqrt();
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let denom = vv.sqrt() / c2_sqrt + self.eps;
                *pv -= step_size * *mv / denom;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Kpg,
    KpgIs,
    KpgIsShared,
    Stein,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Kpg, Method::KpgIs, Method::KpgIsShared, Method::Stein];

    pub fn name(self) -> &'static str {
        match self {
            Method::Kpg => "kpg",
            Method::KpgIs => "kpg-is",
            Method::KpgIsShared => "kpg-is-shared",
            Method::Stein => "stein",
        }
    }

    pub fn uses_proposal(self) -> bool {
        matches!(self, Method::KpgIs | Method::KpgIsShared)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub method: Method,
    pub iterations: usize,
    /// Anchor batch size `m`.
    pub batch: usize,
    /// Proposal draws per anchor `l` (importance-sampled methods).
    pub inner: usize,
    pub bandwidth: Bandwidth,
    pub schedule: LrSchedule,
    pub proposal_schedule: LrSchedule,
    /// Iterations at the start that train only the proposal.
    pub warmup: usize,
    pub annealing: Option<AnnealingSchedule>,
    /// Checkpoint period in iterations; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl TrainSettings {
    pub fn new(method: Method, iterations: usize, batch: usize, seed: u64) -> Self {
        Self {
            method,
            iterations,
            batch,
            inner: 16,
            bandwidth: Bandwidth::Median,
            schedule: LrSchedule::constant(1e-3),
            proposal_schedule: LrSchedule::constant(1e-3),
            warmup: if method.uses_proposal() { 500 } else { 0 },
            annealing: None,
            checkpoint_every: 0,
            seed,
        }
    }
}

/// One row of the iteration trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Surrogate loss of the model step, absent during proposal warm-up.
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub bandwidth: Option<f64>,
    pub ess: Option<f64>,
    pub proposal_loss: Option<f64>,
    pub temperature: f64,
    pub max_log_ratio: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: SiviModel,
    pub proposal: Option<ProposalModel>,
    pub trace: Vec<TraceRecord>,
    pub skipped: usize,
    /// Largest `log p_ε/τ` seen over the whole run.
    pub max_log_ratio: Option<f64>,
    /// Draws whose ratio exceeded `1/α̲`; zero by construction.
    pub ratio_violations: usize,
}

fn norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

struct Loop<'a> {
    settings: &'a TrainSettings,
    model: SiviModel,
    proposal: Option<ProposalModel>,
    adam: Adam,
    adam_prop: Option<Adam>,
    rng: ChaCha8Rng,
}

impl Loop<'_> {
    fn model_step(&mut self, t: usize, est: &GradEstimate, tape: &Tape) -> Result<f64, TrainError> {
        let grads = est.gradients(tape).map_err(|source| TrainError::Estimator {
            iteration: t,
            source,
        })?;
        let g = norm(&grads);
        self.adam.step(self.model.tensors_mut(), &grads)?;
        Ok(g)
    }

    fn iterate(&mut self, t: usize, target: &dyn TargetDensity) -> Result<TraceRecord, TrainError> {
        let s = self.settings;
        let wrap = |source| TrainError::Estimator {
            iteration: t,
            source,
        };
        let mut rec = TraceRecord {
            iteration: t,
            loss: None,
            grad_norm: None,
            bandwidth: None,
            ess: None,
            proposal_loss: None,
            temperature: 1.0,
            max_log_ratio: None,
        };
        let tape = Tape::new();
        let est = match s.method {
            Method::Kpg => kpg_surrogate(&tape, &self.model, target, s.batch, s.bandwidth, &mut self.rng),
            Method::Stein => {
                stein_surrogate(&tape, &self.model, target, s.batch, s.bandwidth, &mut self.rng)
            }
            Method::KpgIs | Method::KpgIsShared => {
                let anchors = PathDraws::sample(&self.model, s.batch, &mut self.rng);
                let z = self
                    .model
                    .sample_values(&anchors.eps, &anchors.eta)
                    .map_err(|e| wrap(e.into()))?;
                let proposal = self.proposal.as_mut().expect("checked at start");
                let ptape = Tape::new();
                let bound = proposal.attach(&ptape);
                let loss = proposal_loss(&ptape, &bound, &z, &anchors.eps)?;
                let grads = bound.gradients(
                    &ptape
                        .backward(&loss)
                        .map_err(|e| wrap(EstimatorError::Autodiff(e)))?,
                );
                if !loss.item().is_finite() {
                    return Err(TrainError::NonFiniteGradient("proposal loss"));
                }
                self.adam_prop
                    .as_mut()
                    .expect("checked at start")
                    .step(proposal.tensors_mut(), &grads)?;
                rec.proposal_loss = Some(loss.item());
                if t < s.warmup {
                    return Ok(rec);
                }
                let proposal = self.proposal.as_ref().expect("checked at start");
                if s.method == Method::KpgIs {
                    kpg_is_surrogate(
                        &tape, &self.model, proposal, target, &anchors, s.inner, s.bandwidth,
                        &mut self.rng,
                    )
                } else {
                    shared_eps_kpg_is_surrogate(
                        &tape, &self.model, proposal, target, &anchors, s.inner, s.bandwidth,
                        &mut self.rng,
                    )
                }
            }
        }
        .map_err(wrap)?;
        let loss = est.loss.item();
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteGradient("surrogate loss"));
        }
        let g = self.model_step(t, &est, &tape)?;
        rec.loss = Some(loss);
        rec.grad_norm = Some(g);
        rec.bandwidth = Some(est.bandwidth);
        rec.ess = est.ess;
        rec.max_log_ratio = est.max_log_ratio;
        Ok(rec)
    }
}

/// Runs `settings.iterations` iterations of the selected method.
///
/// Importance-sampled methods alternate a proposal step and a model step on
/// the same anchor batch; during the warm-up only the proposal moves.
/// `on_checkpoint` receives a snapshot every `checkpoint_every` iterations.
pub fn train(
    model: SiviModel,
    proposal: Option<ProposalModel>,
    target: &dyn TargetDensity,
    settings: &TrainSettings,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<(), TrainError>,
) -> Result<TrainedRun, TrainError> {
    if settings.method.uses_proposal() && proposal.is_none() {
        return Err(TrainError::MissingProposal(settings.method));
    }
    if settings.batch < 2 && !settings.method.uses_proposal() {
        return Err(TrainError::InvalidSetting("batch must be at least 2".into()));
    }
    if settings.batch < 1 || (settings.method.uses_proposal() && settings.inner < 1) {
        return Err(TrainError::InvalidSetting("batch and inner must be at least 1".into()));
    }
    let proposal = if settings.method.uses_proposal() { proposal } else { None };
    let adam = Adam::new(settings.schedule, &model.tensors());
    let adam_prop = proposal
        .as_ref()
        .map(|p| Adam::new(settings.proposal_schedule, &p.tensors()));
    let bound = proposal.as_ref().map(|p| -(p.alpha_min.ln()));
    let mut lp = Loop {
        settings,
        model,
        proposal,
        adam,
        adam_prop,
        rng: ChaCha8Rng::seed_from_u64(settings.seed),
    };

    let mut trace = Vec::with_capacity(settings.iterations);
    let mut skipped = 0;
    let mut max_log_ratio: Option<f64> = None;
    let mut violations = 0;
    for t in 0..settings.iterations {
        // The schedule runs over the model updates, which start after warm-up.
        let warmup = if settings.method.uses_proposal() { settings.warmup } else { 0 };
        let temperature = settings.annealing.map_or(1.0, |a| {
            a.temperature(t.saturating_sub(warmup), settings.iterations.saturating_sub(warmup))
        });
        let tempered = Tempered::new(target, temperature);
        match lp.iterate(t, &tempered) {
            Ok(mut rec) => {
                rec.temperature = temperature;
                if let (Some(r), Some(b)) = (rec.max_log_ratio, bound) {
                    if r > b {
                        violations += 1;
                    }
                    max_log_ratio = Some(max_log_ratio.map_or(r, |m: f64| m.max(r)));
                }
                trace.push(rec);
            }
            Err(e) if e.skippable() => {
                skipped += 1;
                warn!("iteration {t} skipped: {e}");
                if skipped as f64 > MAX_SKIP_FRACTION * settings.iterations as f64 {
                    return Err(TrainError::TooManySkips {
                        skipped,
                        iterations: settings.iterations,
                        last: e.to_string(),
                    });
                }
            }
            Err(e) => return Err(e),
        }
        if settings.checkpoint_every > 0 && (t + 1) % settings.checkpoint_every == 0 {
            debug!("checkpoint at iteration {}", t + 1);
            on_checkpoint(&Checkpoint::capture(
                (t + 1) as u64,
                &lp.model,
                lp.proposal.as_ref(),
            ))?;
        }
    }
    Ok(TrainedRun {
        model: lp.model,
        proposal: lp.proposal,
        trace,
        skipped,
        max_log_ratio,
        ratio_violations: violations,
    })
}
