//! Benchmark registry.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sivi::targets::{
    generate_diffusion_data, Banana, DataGenerating, DiagonalGaussian, DiffusionPosterior,
    DiffusionSetup, LogisticData, LogisticPosterior, Multimodal, TargetDensity, XShaped,
};

use crate::CliError;

/// Rows sampled from the waveform file.
pub const WAVEFORM_ROWS: usize = 400;

/// Synthetic regression problem size.
pub const SYNTHETIC_ROWS: usize = 400;
pub const SYNTHETIC_DIM: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkId {
    /// Standard normal in two dimensions.
    Gaussian,
    Banana,
    Multimodal,
    #[serde(rename = "xshaped")]
    XShaped,
    /// 100-step diffusion with 20 observations.
    Diffusion,
    /// 20-step diffusion with 5 observations.
    DiffusionDesk,
    /// Synthetic data, intercept plus four features.
    Logistic,
    LogisticWaveform,
}

impl BenchmarkId {
    pub const ALL: [BenchmarkId; 8] = [
        BenchmarkId::Gaussian,
        BenchmarkId::Banana,
        BenchmarkId::Multimodal,
        BenchmarkId::XShaped,
        BenchmarkId::Diffusion,
        BenchmarkId::DiffusionDesk,
        BenchmarkId::Logistic,
        BenchmarkId::LogisticWaveform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkId::Gaussian => "gaussian",
            BenchmarkId::Banana => "banana",
            BenchmarkId::Multimodal => "multimodal",
            BenchmarkId::XShaped => "xshaped",
            BenchmarkId::Diffusion => "diffusion",
            BenchmarkId::DiffusionDesk => "diffusion-desk",
            BenchmarkId::Logistic => "logistic",
            BenchmarkId::LogisticWaveform => "logistic-waveform",
        }
    }
}

impl fmt::Display for BenchmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchmarkId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BenchmarkId::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = BenchmarkId::ALL.iter().map(|b| b.name()).collect();
                format!("unknown benchmark `{s}` (known: {})", known.join(", "))
            })
    }
}

/// A posterior, or a synthetic target that can also generate data.
pub enum Benchmark {
    Synthetic(Box<dyn DataGenerating>),
    Posterior(Box<dyn TargetDensity>),
}

impl Benchmark {
    /// Builds the target. `data_seed` fixes the generated observations;
    /// `dataset` overrides the waveform location.
    pub fn load(id: BenchmarkId, data_seed: u64, dataset: Option<&Path>) -> Result<Self, CliError> {
        Ok(match id {
            BenchmarkId::Gaussian => Benchmark::Synthetic(Box::new(DiagonalGaussian::standard(2))),
            BenchmarkId::Banana => Benchmark::Synthetic(Box::new(Banana::new())),
            BenchmarkId::Multimodal => Benchmark::Synthetic(Box::new(Multimodal::new())),
            BenchmarkId::XShaped => Benchmark::Synthetic(Box::new(XShaped::new())),
            BenchmarkId::Diffusion | BenchmarkId::DiffusionDesk => {
                let setup = if id == BenchmarkId::Diffusion {
                    DiffusionSetup::full()
                } else {
                    DiffusionSetup::desk()
                };
                let obs = generate_diffusion_data(&setup, data_seed);
                Benchmark::Posterior(Box::new(DiffusionPosterior::new(obs)?))
            }
            BenchmarkId::Logistic => Benchmark::Posterior(Box::new(LogisticPosterior::new(
                LogisticData::synthetic(SYNTHETIC_ROWS, SYNTHETIC_DIM, data_seed),
            ))),
            BenchmarkId::LogisticWaveform => {
                let path = waveform_path(dataset)?;
                let data = LogisticData::from_waveform_csv(&path, WAVEFORM_ROWS, data_seed)?;
                Benchmark::Posterior(Box::new(LogisticPosterior::new(data)))
            }
        })
    }

    pub fn target(&self) -> &dyn TargetDensity {
        match self {
            Benchmark::Synthetic(t) => t.as_ref(),
            Benchmark::Posterior(t) => t.as_ref(),
        }
    }

    pub fn generator(&self) -> Option<&dyn DataGenerating> {
        match self {
            Benchmark::Synthetic(t) => Some(t.as_ref()),
            Benchmark::Posterior(_) => None,
        }
    }
}

fn waveform_path(dataset: Option<&Path>) -> Result<PathBuf, CliError> {
    if let Some(p) = dataset {
        return Ok(p.to_owned());
    }
    match std::env::var_os("SIVI_DATA_DIR") {
        Some(dir) => Ok(PathBuf::from(dir).join("waveform.csv")),
        None => Err(CliError::Config {
            field: "run.dataset".into(),
            message: "logistic-waveform needs run.dataset or SIVI_DATA_DIR".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for b in BenchmarkId::ALL {
            assert_eq!(b.name().parse::<BenchmarkId>().unwrap(), b);
            let v = toml::Value::try_from(b).unwrap();
            assert_eq!(v.as_str(), Some(b.name()));
        }
        assert!("nope".parse::<BenchmarkId>().is_err());
    }

    #[test]
    fn dimensions() {
        let dims = [2, 2, 2, 2, 100, 20, SYNTHETIC_DIM];
        for (b, d) in BenchmarkId::ALL.into_iter().zip(dims) {
            let loaded = Benchmark::load(b, 0, None).unwrap();
            assert_eq!(loaded.target().dim(), d, "{b}");
            assert_eq!(loaded.generator().is_some(), d == 2, "{b}");
        }
    }

    #[test]
    fn waveform_from_explicit_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let mut text = String::new();
        for i in 0..450 {
            let row: Vec<String> = (0..21).map(|j| format!("{:.2}", (i * j) as f64 * 0.01)).collect();
            text.push_str(&format!("{},{}\n", row.join(","), i % 3));
        }
        std::fs::write(&path, text).unwrap();
        let b = Benchmark::load(BenchmarkId::LogisticWaveform, 0, Some(&path)).unwrap();
        assert_eq!(b.target().dim(), 22);
        let missing = Benchmark::load(BenchmarkId::LogisticWaveform, 0, Some(Path::new("/nonexistent/w.csv")));
        assert!(missing.is_err());
    }
}
