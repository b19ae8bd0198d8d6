//! Post-training evaluation: held-out NLL on data-generating samples, an
//! ELBO-style score, moment and correlation comparison against reference
//! samples, and sample CSV files.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::sivi::{gaussian_log_pdf, standard_normal, ModelError, SiviModel};
use crate::targets::TargetDensity;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least one {0}")]
    Empty(&'static str),
    #[error("dimension mismatch: model has {model}, samples have {samples}")]
    Dimension { model: usize, samples: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("bad sample file: {0}")]
    BadSamples(String),
}

/// `−(1/N) Σᵢ log q̂(zᵢ)`, where every `q̂` is the mixture over the same
/// latent draws `eps`.
pub fn evaluate_nll(model: &SiviModel, data: &Tensor, eps: &Tensor) -> Result<f64, EvalError> {
    if data.rows() == 0 {
        return Err(EvalError::Empty("data sample"));
    }
    if data.cols() != model.dim() {
        return Err(EvalError::Dimension {
            model: model.dim(),
            samples: data.cols(),
        });
    }
    let mix = model.mixture(eps)?;
    let mut buf = Vec::with_capacity(eps.rows());
    let total: f64 = data.iter_rows().map(|z| mix.log_density_with(z, &mut buf)).sum();
    Ok(-total / data.rows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// `(1/S) Σₛ [log p̃(zₛ) − log q̂(zₛ)]` for `zₛ ∼ q_z`.
///
/// `q̂(zₛ)` averages `q(zₛ | ·)` over the draw's own latent `εₛ` and a pool of
/// `m` shared latent draws, which makes the estimate a lower bound on the
/// log normalizer that tightens as `m` grows.
pub fn evaluate_elbo<R: Rng + ?Sized>(
    model: &SiviModel,
    target: &dyn TargetDensity,
    samples: usize,
    m: usize,
    rng: &mut R,
) -> Result<ElboEstimate, EvalError> {
    if samples == 0 || m == 0 {
        return Err(EvalError::Empty("sample"));
    }
    let pool = standard_normal(rng, m, model.latent_dim());
    let mix = model.mixture(&pool)?;
    let eps = standard_normal(rng, samples, model.latent_dim());
    let eta = standard_normal(rng, samples, model.dim());
    let own = model.means(&eps)?;
    let z = model.sample_values(&eps, &eta)?;
    let log_sigma: Vec<f64> = model.sigma().iter().map(|s| s.ln()).collect();
    let mut buf = Vec::with_capacity(m);
    let terms: Vec<f64> = (0..samples)
        .map(|s| {
            let zs = z.row_slice(s);
            let shared = mix.log_density_with(zs, &mut buf) + (m as f64).ln();
            let mine = gaussian_log_pdf(zs, own.row_slice(s), &log_sigma);
            let log_q = crate::autodiff::log_add_exp(shared, mine) - ((m + 1) as f64).ln();
            target.log_density(zs) - log_q
        })
        .collect();
    let (mean, var) = mean_var(&terms);
    Ok(ElboEstimate {
        value: mean,
        std_error: (var / samples as f64).sqrt(),
    })
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Per-dimension moments and Pearson correlations of one sample set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Symmetric with unit diagonal; `None` where a dimension has zero variance.
    pub correlation: Vec<Vec<Option<f64>>>,
}

impl Moments {
    pub fn of(samples: &Tensor) -> Self {
        let n = samples.rows() as f64;
        let d = samples.cols();
        let mut mean = vec![0.0; d];
        for row in samples.iter_rows() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
        }
        let mut cov = vec![vec![0.0; d]; d];
        for row in samples.iter_rows() {
            for i in 0..d {
                for j in i..d {
                    cov[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]);
                }
            }
        }
        let denom = (n - 1.0).max(1.0);
        let std: Vec<f64> = (0..d).map(|i| (cov[i][i] / denom).sqrt()).collect();
        let mut correlation = vec![vec![None; d]; d];
        for i in 0..d {
            correlation[i][i] = Some(1.0);
            for j in i + 1..d {
                let r = if cov[i][i] > 0.0 && cov[j][j] > 0.0 {
                    Some((cov[i][j] / (cov[i][i] * cov[j][j]).sqrt()).clamp(-1.0, 1.0))
                } else {
                    None
                };
                correlation[i][j] = r;
                correlation[j][i] = r;
            }
        }
        Self {
            mean,
            std,
            correlation,
        }
    }
}

/// One off-diagonal pair `(i, j)`, `i < j`, of the correlation scatter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPair {
    pub i: usize,
    pub j: usize,
    pub model: Option<f64>,
    pub reference: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model: Moments,
    pub reference: Moments,
    pub scatter: Vec<ScatterPair>,
    /// Mean of `|ρ_model − ρ_ref|` over pairs where both are defined.
    pub mean_abs_rho_difference: Option<f64>,
    /// `std_model / std_ref` per dimension.
    pub std_ratio: Vec<f64>,
    /// `√(mean (mean_model − mean_ref)²)`.
    pub mean_rmse: f64,
}

pub fn compare_to_reference(model: &Tensor, reference: &Tensor) -> Result<Comparison, EvalError> {
    if model.cols() != reference.cols() {
        return Err(EvalError::Dimension {
            model: model.cols(),
            samples: reference.cols(),
        });
    }
    if model.rows() == 0 || reference.rows() == 0 {
        return Err(EvalError::Empty("sample"));
    }
    let a = Moments::of(model);
    let b = Moments::of(reference);
    let d = model.cols();
    let mut scatter = Vec::new();
    for i in 0..d {
        for j in i + 1..d {
            scatter.push(ScatterPair {
                i,
                j,
                model: a.correlation[i][j],
                reference: b.correlation[i][j],
            });
        }
    }
    let diffs: Vec<f64> = scatter
        .iter()
        .filter_map(|p| Some((p.model? - p.reference?).abs()))
        .collect();
    let mean_abs_rho_difference =
        (!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64);
    let std_ratio = a.std.iter().zip(&b.std).map(|(x, y)| x / y).collect();
    let mean_rmse = (a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / d as f64)
        .sqrt();
    Ok(Comparison {
        model: a,
        reference: b,
        scatter,
        mean_abs_rho_difference,
        std_ratio,
        mean_rmse,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll: Option<f64>,
    /// The ELBO-style surrogate, not an exact log marginal likelihood.
    pub elbo_surrogate: Option<ElboEstimate>,
    pub moments: Moments,
    pub comparison: Option<Comparison>,
    pub sample_file: Option<String>,
}

/// `n` detached samples from `q_z`.
pub fn draw_samples<R: Rng + ?Sized>(model: &SiviModel, n: usize, rng: &mut R) -> Result<Tensor, EvalError> {
    let eps = standard_normal(rng, n, model.latent_dim());
    let eta = standard_normal(rng, n, model.dim());
    Ok(model.sample_values(&eps, &eta)?)
}

/// One row per sample, header `dim_0,…,dim_{d−1}`.
pub fn write_samples_csv<W: std::io::Write>(out: W, samples: &Tensor) -> Result<(), EvalError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record((0..samples.cols()).map(|i| format!("dim_{i}")))?;
    for row in samples.iter_rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn save_samples(path: &Path, samples: &Tensor) -> Result<(), EvalError> {
    let f = std::fs::File::create(path).map_err(csv::Error::from)?;
    write_samples_csv(std::io::BufWriter::new(f), samples)
}

pub fn read_samples_csv<R: std::io::Read>(input: R) -> Result<Tensor, EvalError> {
    let mut r = csv::Reader::from_reader(input);
    let d = r.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for field in rec.iter() {
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| EvalError::BadSamples(format!("row {}: {e}", rows + 1)))?,
            );
        }
        rows += 1;
    }
    if d == 0 {
        return Err(EvalError::BadSamples("no columns".into()));
    }
    Ok(Tensor::new(rows, d, data))
}

pub fn load_samples(path: &Path) -> Result<Tensor, EvalError> {
    let f = std::fs::File::open(path).map_err(csv::Error::from)?;
    read_samples_csv(std::io::BufReader::new(f))
}
