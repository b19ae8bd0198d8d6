//! Run configuration: a sectioned TOML file layered over a per-benchmark
//! preset. Unknown keys are rejected at every level.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sivi::sivi::Bandwidth;
use sivi::targets::AnnealingSchedule;
use sivi::training::{LrSchedule, Method, TrainSettings};

use crate::benchmarks::BenchmarkId;
use crate::CliError;

/// Training methods plus the SGLD reference sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMethod {
    Kpg,
    KpgIs,
    KpgIsShared,
    Stein,
    Sgld,
}

impl RunMethod {
    pub fn name(self) -> &'static str {
        match self {
            RunMethod::Sgld => "sgld",
            m => m.training().expect("not sgld").name(),
        }
    }

    /// The variational method, or `None` for SGLD.
    pub fn training(self) -> Option<Method> {
        match self {
            RunMethod::Kpg => Some(Method::Kpg),
            RunMethod::KpgIs => Some(Method::KpgIs),
            RunMethod::KpgIsShared => Some(Method::KpgIsShared),
            RunMethod::Stein => Some(Method::Stein),
            RunMethod::Sgld => None,
        }
    }
}

impl fmt::Display for RunMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "sgld" {
            return Ok(RunMethod::Sgld);
        }
        let m: Method = s.parse()?;
        Ok(match m {
            Method::Kpg => RunMethod::Kpg,
            Method::KpgIs => RunMethod::KpgIs,
            Method::KpgIsShared => RunMethod::KpgIsShared,
            Method::Stein => RunMethod::Stein,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedBandwidth {
    Median,
}

/// `"median"` or a fixed positive width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BandwidthSetting {
    Named(NamedBandwidth),
    Fixed(f64),
}

impl BandwidthSetting {
    pub fn resolve(self) -> Bandwidth {
        match self {
            BandwidthSetting::Named(NamedBandwidth::Median) => Bandwidth::Median,
            BandwidthSetting::Fixed(b) => Bandwidth::Fixed(b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub benchmark: BenchmarkId,
    pub method: RunMethod,
    pub seed: u64,
    /// Seed for generated observations (diffusion path, synthetic regression data).
    pub data_seed: u64,
    pub output_dir: PathBuf,
    /// Waveform CSV for `logistic-waveform`; defaults to `$SIVI_DATA_DIR/waveform.csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub hidden: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub iterations: usize,
    /// Anchor batch size `m`.
    pub batch: usize,
    /// Proposal draws per anchor `l`.
    pub inner: usize,
    pub alpha_min: f64,
    pub lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub proposal_lr: f64,
    pub warmup: usize,
    pub annealing: bool,
    pub anneal_start: f64,
    pub anneal_fraction: f64,
    pub bandwidth: BandwidthSetting,
    /// 0 disables periodic checkpoints; the final parameters are always saved.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
    /// Defaults to the run's final checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Reference samples (CSV) for the moment and correlation comparison.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    /// `N`, data-generating samples for the NLL.
    pub data_samples: usize,
    /// `M`, shared latent draws for marginal densities.
    pub eps_samples: usize,
    /// `S`, model samples for the ELBO-style score.
    pub elbo_samples: usize,
    /// Model samples written to `samples.csv` and used for the comparison.
    pub export_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgldSection {
    pub particles: usize,
    pub iterations: usize,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub bandwidths: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub ns: Vec<usize>,
    pub replications: usize,
    pub mc_samples: usize,
    /// Evaluation point; a model sample when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
    pub sgld: SgldSection,
    pub diagnostics: DiagnosticsSection,
}

impl RunConfig {
    /// Defaults for a benchmark, following the published settings for each
    /// problem family.
    pub fn preset(benchmark: BenchmarkId, method: RunMethod) -> Self {
        use BenchmarkId as B;
        let (latent_dim, hidden, batch, lr, decay_every, iterations) = match benchmark {
            B::Gaussian | B::Banana | B::Multimodal | B::XShaped => (3, 50, 500, 1e-3, 1000, 50_000),
            B::Diffusion => (100, 128, 128, 2e-4, 10_000, 100_000),
            B::DiffusionDesk => (20, 128, 128, 1e-3, 2_000, 10_000),
            B::Logistic | B::LogisticWaveform => (10, 100, 100, 1e-3, 3_000, 200_000),
        };
        let toy = matches!(benchmark, B::Gaussian | B::Banana | B::Multimodal | B::XShaped);
        let (sgld_iterations, sgld_step) = match benchmark {
            B::Logistic | B::LogisticWaveform => (400_000, 1e-4),
            _ => (100_000, 1e-4),
        };
        Self {
            run: RunSection {
                benchmark,
                method,
                seed: 0,
                data_seed: 0,
                output_dir: PathBuf::from("runs"),
                dataset: None,
            },
            model: ModelSection {
                latent_dim,
                hidden,
                depth: 2,
            },
            training: TrainingSection {
                iterations,
                batch,
                inner: 16,
                alpha_min: if toy { 0.5 } else { 0.99 },
                lr,
                decay: 0.9,
                decay_every,
                proposal_lr: lr,
                warmup: 500,
                annealing: benchmark == B::Multimodal,
                anneal_start: AnnealingSchedule::default().start,
                anneal_fraction: AnnealingSchedule::default().fraction,
                bandwidth: BandwidthSetting::Named(NamedBandwidth::Median),
                checkpoint_every: 1000,
            },
            eval: EvalSection {
                run_dir: None,
                checkpoint: None,
                reference: None,
                data_samples: 10_000,
                eps_samples: 10_000,
                elbo_samples: 1_000,
                export_samples: 1_000,
            },
            sgld: SgldSection {
                particles: 1000,
                iterations: sgld_iterations,
                step: sgld_step,
            },
            diagnostics: DiagnosticsSection {
                dim: 1,
                latent_dim: 1,
                hidden: 8,
                depth: 1,
                bandwidths: vec![0.05],
                sigmas: vec![0.1],
                ns: vec![10],
                replications: 1000,
                mc_samples: 20_000,
                anchor: None,
            },
        }
    }

    /// Parses a config, filling absent keys from the benchmark's preset.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config {
            field: "<file>".into(),
            message: e.message().to_string(),
        })?;
        let run = user.get("run").and_then(|v| v.as_table());
        let field = |name: &str| -> Result<&toml::Value, CliError> {
            run.and_then(|r| r.get(name)).ok_or_else(|| CliError::Config {
                field: format!("run.{name}"),
                message: "missing required field".into(),
            })
        };
        let parse_str = |name: &str| -> Result<String, CliError> {
            field(name)?
                .as_str()
                .map(str::to_owned)
                .ok_or_else(|| CliError::Config {
                    field: format!("run.{name}"),
                    message: "expected a string".into(),
                })
        };
        let benchmark: BenchmarkId = parse_str("benchmark")?.parse().map_err(|m| CliError::Config {
            field: "run.benchmark".into(),
            message: m,
        })?;
        let method: RunMethod = parse_str("method")?.parse().map_err(|m| CliError::Config {
            field: "run.method".into(),
            message: m,
        })?;
        let mut merged = toml::Table::try_from(Self::preset(benchmark, method))
            .expect("presets serialize to a table");
        overlay(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| {
            CliError::Config {
                field: "<file>".into(),
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_owned(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the serialized config.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, message: &str| {
            Err(CliError::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        let positive = [
            ("model.latent_dim", self.model.latent_dim),
            ("model.hidden", self.model.hidden),
            ("model.depth", self.model.depth),
            ("training.batch", self.training.batch),
            ("training.inner", self.training.inner),
            ("training.decay_every", self.training.decay_every),
            ("eval.data_samples", self.eval.data_samples),
            ("eval.eps_samples", self.eval.eps_samples),
            ("eval.elbo_samples", self.eval.elbo_samples),
            ("eval.export_samples", self.eval.export_samples),
            ("sgld.particles", self.sgld.particles),
            ("diagnostics.dim", self.diagnostics.dim),
            ("diagnostics.latent_dim", self.diagnostics.latent_dim),
            ("diagnostics.hidden", self.diagnostics.hidden),
            ("diagnostics.depth", self.diagnostics.depth),
            ("diagnostics.replications", self.diagnostics.replications),
            ("diagnostics.mc_samples", self.diagnostics.mc_samples),
        ];
        for (name, v) in positive {
            if v < 1 {
                return bad(name, "must be at least 1");
            }
        }
        let t = &self.training;
        if self.run.method.training().is_some_and(|m| !m.uses_proposal()) && t.batch < 2 {
            return bad("training.batch", "must be at least 2 for this method");
        }
        if !(t.alpha_min > 0.0 && t.alpha_min < 1.0) {
            return bad("training.alpha_min", "must lie in (0, 1)");
        }
        for (name, v) in [("training.lr", t.lr), ("training.proposal_lr", t.proposal_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, "must be positive");
            }
        }
        if !(t.decay > 0.0 && t.decay <= 1.0) {
            return bad("training.decay", "must lie in (0, 1]");
        }
        if !(t.anneal_start > 0.0 && t.anneal_start <= 1.0) {
            return bad("training.anneal_start", "must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&t.anneal_fraction) {
            return bad("training.anneal_fraction", "must lie in [0, 1]");
        }
        if let BandwidthSetting::Fixed(b) = t.bandwidth {
            if !(b > 0.0 && b.is_finite()) {
                return bad("training.bandwidth", "must be \"median\" or a positive number");
            }
        }
        if !(self.sgld.step >= 0.0 && self.sgld.step.is_finite()) {
            return bad("sgld.step", "must be non-negative");
        }
        let d = &self.diagnostics;
        if d.bandwidths.is_empty() || d.bandwidths.iter().any(|b| !(*b > 0.0)) {
            return bad("diagnostics.bandwidths", "need at least one positive value");
        }
        if d.sigmas.is_empty() || d.sigmas.iter().any(|s| !(*s > 0.0)) {
            return bad("diagnostics.sigmas", "need at least one positive value");
        }
        if d.ns.is_empty() || d.ns.contains(&0) {
            return bad("diagnostics.ns", "need at least one value of at least 1");
        }
        if d.replications < 2 {
            return bad("diagnostics.replications", "must be at least 2");
        }
        if d.anchor.as_ref().is_some_and(|a| a.len() != d.dim) {
            return bad("diagnostics.anchor", "length must equal diagnostics.dim");
        }
        Ok(())
    }

    pub fn train_settings(&self) -> Option<TrainSettings> {
        let method = self.run.method.training()?;
        let t = &self.training;
        let mut s = TrainSettings::new(method, t.iterations, t.batch, self.run.seed);
        s.inner = t.inner;
        s.bandwidth = t.bandwidth.resolve();
        s.schedule = LrSchedule {
            lr: t.lr,
            decay: t.decay,
            every: t.decay_every,
        };
        s.proposal_schedule = LrSchedule {
            lr: t.proposal_lr,
            ..s.schedule
        };
        s.warmup = if method.uses_proposal() { t.warmup } else { 0 };
        s.annealing = t.annealing.then_some(AnnealingSchedule {
            start: t.anneal_start,
            fraction: t.anneal_fraction,
        });
        s.checkpoint_every = t.checkpoint_every;
        Some(s)
    }
}

/// Recursively replaces entries of `base` with those of `over`.
fn overlay(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => overlay(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
