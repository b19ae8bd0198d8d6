//! Subcommand implementations. Each returns the directory it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sivi::autodiff::Tensor;
use sivi::diagnostics::{variance_gap_empirical, VarianceSettings};
use sivi::eval::{
    compare_to_reference, draw_samples, evaluate_elbo, evaluate_nll, load_samples, save_samples,
    EvalReport, Moments,
};
use sivi::proposal::ProposalModel;
use sivi::sivi::{standard_normal, SiviModel};
use sivi::training::{sgld_run, train, Checkpoint, TrainError, TraceRecord};

use crate::benchmarks::Benchmark;
use crate::config::{RunConfig, RunMethod};
use crate::CliError;

pub const VERSION: &str = concat!("sivi ", env!("CARGO_PKG_VERSION"));

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    let file = fs::File::create(path).map_err(CliError::io(path))?;
    Ok(csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(CliError::io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Creates `<parent>/<stem>_<timestamp>`, adding a counter on collision.
fn fresh_dir(parent: &Path, stem: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ");
    let base = parent.join(format!("{stem}_{stamp}"));
    let mut dir = base.clone();
    for k in 1.. {
        match fs::create_dir(&dir) {
            Ok(()) => break,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                dir = PathBuf::from(format!("{}-{k}", base.display()));
            }
            Err(e) => return Err(CliError::io(&dir)(e)),
        }
    }
    Ok(dir)
}

/// Config snapshot, version string and seed.
fn write_metadata(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    write_text(&dir.join("version.txt"), &format!("{VERSION}\n"))?;
    write_text(&dir.join("seed.txt"), &format!("{}\n", cfg.run.seed))
}

const TRACE_HEADER: [&str; 8] = [
    "iteration",
    "loss",
    "grad_norm",
    "bandwidth",
    "ess",
    "proposal_loss",
    "temperature",
    "max_log_ratio",
];

fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(TRACE_HEADER)?;
    for r in trace {
        w.serialize(r)?;
    }
    w.flush().map_err(CliError::io(path))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    benchmark: &'a str,
    method: &'a str,
    seed: u64,
    iterations: usize,
    status: &'a str,
    error: Option<String>,
    skipped: Option<usize>,
    max_log_ratio: Option<f64>,
    /// `log(1/α̲)`, the largest admissible log importance ratio.
    log_ratio_bound: Option<f64>,
    ratio_violations: Option<usize>,
    wall_seconds: f64,
}

/// Trains the configured method and writes
/// `<output_dir>/<benchmark>_<method>_<seed>_<timestamp>/`.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let settings = cfg.train_settings().ok_or_else(|| CliError::Config {
        field: "run.method".into(),
        message: "sgld runs through the `sgld` command".into(),
    })?;
    let bench = Benchmark::load(cfg.run.benchmark, cfg.run.data_seed, cfg.run.dataset.as_deref())?;
    let target = bench.target();
    let dim = target.dim();
    let m = &cfg.model;

    let mut init = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let model = SiviModel::new(m.latent_dim, m.hidden, m.depth, dim, &mut init);
    let proposal = if settings.method.uses_proposal() {
        Some(ProposalModel::new(
            dim,
            m.latent_dim,
            m.hidden,
            m.depth,
            cfg.training.alpha_min,
            &mut init,
        )?)
    } else {
        None
    };

    let stem = format!("{}_{}_{}", cfg.run.benchmark, cfg.run.method, cfg.run.seed);
    let dir = fresh_dir(&cfg.run.output_dir, &stem)?;
    write_metadata(&dir, cfg)?;
    let ck_dir = dir.join("checkpoints");
    fs::create_dir(&ck_dir).map_err(CliError::io(&ck_dir))?;
    log::info!("training {stem} into {}", dir.display());

    let start = Instant::now();
    let result = train(model, proposal, target, &settings, |ck| {
        let path = ck_dir.join(format!("iter_{:08}.ckpt", ck.iteration));
        log::info!("checkpoint {}", path.display());
        ck.write(&path).map_err(TrainError::from)
    });
    let log_ratio_bound = settings
        .method
        .uses_proposal()
        .then(|| -cfg.training.alpha_min.ln());
    let mut summary = TrainSummary {
        benchmark: cfg.run.benchmark.name(),
        method: cfg.run.method.name(),
        seed: cfg.run.seed,
        iterations: settings.iterations,
        status: "completed",
        error: None,
        skipped: None,
        max_log_ratio: None,
        log_ratio_bound,
        ratio_violations: None,
        wall_seconds: 0.0,
    };
    match result {
        Ok(run) => {
            summary.wall_seconds = start.elapsed().as_secs_f64();
            summary.skipped = Some(run.skipped);
            summary.max_log_ratio = run.max_log_ratio;
            summary.ratio_violations = settings.method.uses_proposal().then_some(run.ratio_violations);
            write_trace(&dir.join("trace.csv"), &run.trace)?;
            let last = Checkpoint::capture(settings.iterations as u64, &run.model, run.proposal.as_ref());
            let path = dir.join("final.ckpt");
            last.write(&path).map_err(|source| CliError::Checkpoint { path, source })?;
            write_json(&dir.join("summary.json"), &summary)?;
            Ok(dir)
        }
        Err(e) => {
            let diverged = matches!(
                e,
                TrainError::TooManySkips { .. } | TrainError::NonFiniteGradient(_) | TrainError::Estimator { .. }
            );
            summary.wall_seconds = start.elapsed().as_secs_f64();
            summary.status = if diverged { "diverged" } else { "failed" };
            summary.error = Some(e.to_string());
            write_json(&dir.join("summary.json"), &summary)?;
            if diverged {
                log::warn!("{stem} diverged: {e}");
                Err(CliError::Diverged {
                    run_dir: dir,
                    message: e.to_string(),
                })
            } else {
                Err(e.into())
            }
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::read(path).map_err(|source| CliError::Checkpoint {
        path: path.to_owned(),
        source,
    })
}

#[derive(Serialize)]
struct MomentRow {
    dim: usize,
    model_mean: f64,
    model_std: f64,
    reference_mean: f64,
    reference_std: f64,
    std_ratio: f64,
}

/// Evaluates a trained run. The benchmark comes from the run's config
/// snapshot; `cfg` supplies the `[eval]` sizes and the seed. Reports go to
/// `out`, or to the run directory.
pub fn cmd_evaluate(cfg: &RunConfig, run_dir: Option<&Path>, out: Option<&Path>) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let run_dir = run_dir
        .or(cfg.eval.run_dir.as_deref())
        .ok_or_else(|| CliError::Config {
            field: "eval.run_dir".into(),
            message: "no run directory given (use --run or eval.run_dir)".into(),
        })?;
    let run_cfg = RunConfig::load(&run_dir.join("config.toml"))?;
    let ck_path = cfg
        .eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| run_dir.join("final.ckpt"));
    let model = load_checkpoint(&ck_path)?
        .model()
        .map_err(|source| CliError::Checkpoint {
            path: ck_path.clone(),
            source,
        })?;
    let bench = Benchmark::load(run_cfg.run.benchmark, run_cfg.run.data_seed, run_cfg.run.dataset.as_deref())?;
    let target = bench.target();
    if target.dim() != model.dim() {
        return Err(CliError::Config {
            field: "eval.checkpoint".into(),
            message: format!("checkpoint has dimension {}, benchmark {}", model.dim(), target.dim()),
        });
    }
    let out = out.unwrap_or(run_dir);
    fs::create_dir_all(out).map_err(CliError::io(out))?;
    let e = &cfg.eval;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);

    let nll = match bench.generator() {
        Some(g) => {
            let data = Tensor::from_rows(&g.sample_n(e.data_samples, &mut rng));
            let eps = standard_normal(&mut rng, e.eps_samples, model.latent_dim());
            Some(evaluate_nll(&model, &data, &eps)?)
        }
        None => None,
    };
    let elbo = evaluate_elbo(&model, target, e.elbo_samples, e.eps_samples, &mut rng)?;
    let samples = draw_samples(&model, e.export_samples, &mut rng)?;
    let sample_path = out.join("samples.csv");
    save_samples(&sample_path, &samples)?;

    let comparison = match &e.reference {
        Some(path) => {
            let reference = load_samples(path)?;
            let c = compare_to_reference(&samples, &reference)?;
            let mut w = csv_writer(&out.join("scatter.csv"))?;
            w.write_record(["i", "j", "model", "reference"])?;
            for p in &c.scatter {
                w.serialize(p)?;
            }
            w.flush().map_err(CliError::io(out))?;
            let mut w = csv_writer(&out.join("moments.csv"))?;
            w.write_record(["dim", "model_mean", "model_std", "reference_mean", "reference_std", "std_ratio"])?;
            for k in 0..samples.cols() {
                w.serialize(MomentRow {
                    dim: k,
                    model_mean: c.model.mean[k],
                    model_std: c.model.std[k],
                    reference_mean: c.reference.mean[k],
                    reference_std: c.reference.std[k],
                    std_ratio: c.std_ratio[k],
                })?;
            }
            w.flush().map_err(CliError::io(out))?;
            Some(c)
        }
        None => None,
    };
    let report = EvalReport {
        nll,
        elbo_surrogate: Some(elbo),
        moments: Moments::of(&samples),
        comparison,
        sample_file: Some("samples.csv".into()),
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(out.to_owned())
}

#[derive(Serialize)]
struct SgldSummary<'a> {
    benchmark: &'a str,
    seed: u64,
    particles: usize,
    iterations: usize,
    step: f64,
    reinitialized: usize,
    wall_seconds: f64,
}

/// Runs SGLD on the benchmark target and writes the final particles.
pub fn cmd_sgld(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let bench = Benchmark::load(cfg.run.benchmark, cfg.run.data_seed, cfg.run.dataset.as_deref())?;
    let s = &cfg.sgld;
    let stem = format!("{}_{}_{}", cfg.run.benchmark, RunMethod::Sgld, cfg.run.seed);
    let dir = fresh_dir(&cfg.run.output_dir, &stem)?;
    write_metadata(&dir, cfg)?;
    let start = Instant::now();
    let state = sgld_run(bench.target(), s.particles, s.iterations, s.step, cfg.run.seed)?;
    save_samples(&dir.join("samples.csv"), &state.particles)?;
    if state.reinitialized > 0 {
        log::warn!("{} particles restarted after non-finite values", state.reinitialized);
    }
    write_json(
        &dir.join("summary.json"),
        &SgldSummary {
            benchmark: cfg.run.benchmark.name(),
            seed: cfg.run.seed,
            particles: s.particles,
            iterations: state.iteration,
            step: s.step,
            reinitialized: state.reinitialized,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(dir)
}

#[derive(Serialize)]
struct VarianceRow<'a> {
    config_hash: &'a str,
    sigma: f64,
    bandwidth: f64,
    n: usize,
    replications: usize,
    trace_var_stein: f64,
    trace_var_si: f64,
    gap: f64,
    gap_lo: f64,
    gap_hi: f64,
    formula_gap: f64,
    formula_lo: f64,
    formula_hi: f64,
    k2_beta_correlation: f64,
    condition_fraction: f64,
    bound: f64,
    approximation: f64,
    mean_difference: f64,
}

/// Sweeps the conditional scale, kernel bandwidth and draw count on a
/// randomly initialized model and writes one row per cell to `variance.csv`.
pub fn cmd_diagnose_variance(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let d = &cfg.diagnostics;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let base = SiviModel::new(d.latent_dim, d.hidden, d.depth, d.dim, &mut rng);
    let anchor = match &d.anchor {
        Some(a) => a.clone(),
        None => draw_samples(&base, 1, &mut rng)?.row_slice(0).to_vec(),
    };
    let dir = fresh_dir(&cfg.run.output_dir, &format!("variance_{}", cfg.run.seed))?;
    write_metadata(&dir, cfg)?;
    let hash = cfg.hash();
    let path = dir.join("variance.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "config_hash",
        "sigma",
        "bandwidth",
        "n",
        "replications",
        "trace_var_stein",
        "trace_var_si",
        "gap",
        "gap_lo",
        "gap_hi",
        "formula_gap",
        "formula_lo",
        "formula_hi",
        "k2_beta_correlation",
        "condition_fraction",
        "bound",
        "approximation",
        "mean_difference",
    ])?;
    for &sigma in &d.sigmas {
        let mut model = base.clone();
        model.log_sigma = Tensor::row(&vec![sigma.ln(); d.dim]);
        for &bandwidth in &d.bandwidths {
            for &n in &d.ns {
                let settings = VarianceSettings {
                    n,
                    replications: d.replications,
                    mc_samples: d.mc_samples,
                    bandwidth,
                };
                let r = variance_gap_empirical(&model, &anchor, &settings, &mut rng)?;
                log::info!("sigma {sigma} bandwidth {bandwidth} n {n}: gap {:.4e}", r.gap);
                w.serialize(VarianceRow {
                    config_hash: &hash,
                    sigma,
                    bandwidth,
                    n,
                    replications: r.replications,
                    trace_var_stein: r.trace_var_stein,
                    trace_var_si: r.trace_var_si,
                    gap: r.gap,
                    gap_lo: r.gap_ci.lo,
                    gap_hi: r.gap_ci.hi,
                    formula_gap: r.formula.gap,
                    formula_lo: r.formula.ci.lo,
                    formula_hi: r.formula.ci.hi,
                    k2_beta_correlation: r.formula.k2_beta_correlation,
                    condition_fraction: r.formula.condition_fraction,
                    bound: r.bound.bound,
                    approximation: r.bound.approximation,
                    mean_difference: r.mean_difference,
                })?;
            }
        }
    }
    w.flush().map_err(CliError::io(&path))?;
    Ok(dir)
}
