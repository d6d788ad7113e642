//! `train`, `eval`, `eigvals` and `gradcheck`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use sphgp_core::data_io::{
    load_csv, project_to_sphere, split, Dataset, Scaler, Schema, SphereData, Standardizer,
    DEFAULT_MAX_MALFORMED_FRACTION,
};
use sphgp_core::harmonics::{points_matrix, PhaseTruncation, SpherePoint};
use sphgp_core::kernels::{
    compose_shape, default_quad_order, export_spectrum, funk_hecke_spectrum_with, ntk_relu_shape,
    poly_decay_spectrum, ShapeFunction, Spectrum,
};
use sphgp_core::vargp::{
    evaluate, fit, gradient_check, random_state, ExpectationEngine, GradCheckEntry,
    GradCheckTolerance, InducingModel, Likelihood, Link, Metrics, ParamLayout, PointPrediction,
    TrainingTrace, VariationalState,
};
use sphgp_core::{Error, Result};

use crate::checkpoint::Checkpoint;
use crate::config::{resolve_path, DataSource, KernelSpec, RunConfig, SplitMode};
use crate::synthetic::{self, SyntheticSpec};

/// Length of the config-hash prefix naming a run directory.
pub const RUN_DIR_HASH_LEN: usize = 16;

/// Declared process environment.
#[derive(Debug, Clone, Default)]
pub struct Env {
    /// Root for relative data paths (`SPHGP_DATA_DIR`).
    pub data_dir: Option<PathBuf>,
    pub parallel: bool,
}

impl Env {
    pub fn from_process(parallel: bool) -> Self {
        Self {
            data_dir: std::env::var_os("SPHGP_DATA_DIR").map(PathBuf::from),
            parallel,
        }
    }
}

/// Errors surfaced by commands, with a stable `kind` for error records.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("gradient check failed for {}", .0.join(", "))]
    GradCheckFailed(Vec<String>),
    #[error("run directory {0} already exists; pass --overwrite to replace it")]
    RunExists(PathBuf),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::GradCheckFailed(_) => "gradcheck_failed",
            CliError::RunExists(_) => "run_exists",
            CliError::Usage(_) => "usage",
        }
    }

    /// One-line JSON error record.
    pub fn record(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
            .to_string()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Spectrum of `kernel` on `S^{dimension-1}` up to `max_frequency`.
pub fn kernel_spectrum(
    kernel: KernelSpec,
    dimension: usize,
    max_frequency: usize,
    parallel: bool,
) -> Result<Spectrum> {
    let shape = match kernel {
        KernelSpec::Poly { beta } => return poly_decay_spectrum(beta, dimension, max_frequency),
        KernelSpec::Relu { depth } => compose_shape(ShapeFunction::ReluArccos, depth)?,
        KernelSpec::Ntk { depth } => ntk_relu_shape(depth)?,
    };
    funk_hecke_spectrum_with(
        &shape,
        dimension,
        max_frequency,
        default_quad_order(max_frequency),
        parallel,
    )
}

/// Write one relative-eigenvalue CSV per kernel into `out_dir`.
pub fn eigvals(
    kernels: &[KernelSpec],
    dimension: usize,
    max_frequency: usize,
    out_dir: &Path,
    env: &Env,
) -> CliResult<Vec<PathBuf>> {
    if kernels.is_empty() {
        return Err(CliError::Usage(
            "eigvals needs at least one --kernel".into(),
        ));
    }
    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(kernels.len());
    for &k in kernels {
        let spec = kernel_spectrum(k, dimension, max_frequency, env.parallel)?;
        let path = out_dir.join(format!("eigvals_{}_d{dimension}.csv", k.label()));
        export_spectrum(&spec, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Summary of a finished `train` run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub iterations: usize,
    pub final_elbo: f64,
    pub train: Metrics,
    pub test: Metrics,
}

/// Hyper-parameters in natural units, for reporting.
#[derive(Debug, Clone, Serialize)]
struct HyperReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    variance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise: Option<f64>,
}

/// Load or generate the full dataset for `config` and its schema.
///
/// Synthetic data is also written to `run_dir` so `eval` can read it back.
pub fn load_dataset(
    config: &RunConfig,
    config_dir: &Path,
    env: &Env,
    run_dir: Option<&Path>,
) -> Result<(Dataset, Schema)> {
    let (data, schema) = match &config.data {
        DataSource::Synthetic => {
            let data = synthetic::generate(&SyntheticSpec {
                task: config.synthetic_task,
                rows: config.synthetic_rows,
                features: config.synthetic_features,
                beta: config.synthetic_beta,
                max_frequency: config.synthetic_max_frequency,
                noise_std: config.synthetic_noise_std,
                bias: config.bias,
                seed: config.synthetic_seed(),
            })?;
            let schema = Schema {
                target: "y".into(),
                features: data.feature_names.clone(),
                task: data.task,
                columns: None,
            };
            if let Some(dir) = run_dir {
                synthetic::write_csv(&data, &dir.join("data.csv"))?;
                fs::write(dir.join("data.schema"), schema.to_text())?;
            }
            (data, schema)
        }
        DataSource::Csv(path) => {
            let schema_path = config
                .schema
                .as_ref()
                .ok_or_else(|| Error::Config("CSV data needs a schema file".into()))?;
            let schema = Schema::load(&resolve_path(schema_path, None, config_dir))?;
            let data = load_csv(
                &resolve_path(path, env.data_dir.as_deref(), config_dir),
                &schema,
                config.max_malformed_fraction,
            )?;
            (data, schema)
        }
    };
    if config.max_rows > 0 && data.len() > config.max_rows {
        let mut rng = ChaCha8Rng::seed_from_u64(config.subsample_seed());
        let mut keep = rand::seq::index::sample(&mut rng, data.len(), config.max_rows).into_vec();
        keep.sort_unstable();
        return Ok((data.subset(&keep), schema));
    }
    Ok((data, schema))
}

/// Train on the leading rows, test on the final `test_fraction` of them.
pub fn split_last(data: &Dataset, test_fraction: f64) -> Result<(Dataset, Dataset)> {
    let n = data.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::Data(format!(
            "test fraction {test_fraction} of {n} rows leaves an empty split"
        )));
    }
    let train: Vec<usize> = (0..n - n_test).collect();
    let test: Vec<usize> = (n - n_test..n).collect();
    Ok((data.subset(&train), data.subset(&test)))
}

fn write_predictions(path: &Path, predictions: &[PointPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in predictions {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Directory holding every artifact of the run described by `config`.
pub fn run_dir(config: &RunConfig) -> PathBuf {
    config.output_dir.join(&config.hash()[..RUN_DIR_HASH_LEN])
}

/// Train a model and write its artifacts.
///
/// `config_dir` anchors relative schema paths (and data paths when
/// `SPHGP_DATA_DIR` is unset).
pub fn train(
    config: &RunConfig,
    config_dir: &Path,
    env: &Env,
    overwrite: bool,
) -> CliResult<TrainSummary> {
    config.validate()?;
    let hash = config.hash();
    let dir = run_dir(config);
    if dir.exists() {
        if !overwrite {
            return Err(CliError::RunExists(dir));
        }
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.effective"), config.to_text())?;

    let (data, schema) = load_dataset(config, config_dir, env, Some(&dir))?;
    let likelihood = config.likelihood_for(data.task)?;
    let (train_raw, test_raw) = match config.split {
        SplitMode::Random => split(&data, config.test_fraction, config.split_seed())?,
        SplitMode::Last => split_last(&data, config.test_fraction)?,
    };
    let mut standardizer = Standardizer::fit(&train_raw)?;
    if !config.standardize_inputs {
        standardizer.inputs = Scaler::identity(train_raw.raw_dimension());
    }
    let train_set = project_to_sphere(&standardizer.apply(&train_raw)?, config.bias)?;
    let test_set = project_to_sphere(&standardizer.apply(&test_raw)?, config.bias)?;

    let spectrum = kernel_spectrum(
        config.kernel,
        train_set.dimension(),
        config.max_frequency,
        env.parallel,
    )?
    .with_radial_variance(config.initial_variance)?;
    let mut model = InducingModel::for_spectrum(spectrum, config.phases, config.basis_seed())?;
    let noise = likelihood.has_noise().then_some(config.initial_noise);
    let state = VariationalState::prior(&model, model.initial_hyper(noise))?;
    let engine = ExpectationEngine::new(likelihood);
    let outcome = fit(&mut model, state, &engine, &train_set, &config.fit_config())?;

    let mut trace_file = fs::File::create(dir.join("trace.csv"))?;
    outcome.trace.write_csv(&mut trace_file)?;

    let target_scaler = standardizer.target_scaler();
    let (train_metrics, _) = evaluate(&model, &outcome.state, &engine, &train_set, target_scaler)?;
    let (test_metrics, predictions) =
        evaluate(&model, &outcome.state, &engine, &test_set, target_scaler)?;
    write_predictions(&dir.join("predictions.csv"), &predictions)?;

    let final_elbo = final_elbo(&outcome.trace);
    let hyper = &outcome.state.hyper;
    let report = serde_json::json!({
        "config_hash": hash,
        "iterations": outcome.iterations,
        "final_elbo": final_elbo,
        "hyper": HyperReport {
            beta: hyper.beta(),
            variance: hyper.variance(),
            noise: hyper.noise(),
        },
        "num_features": model.num_features(),
        "train": train_metrics,
        "test": test_metrics,
    });
    write_json(&dir.join("metrics.json"), &report)?;

    Checkpoint::new(
        hash.clone(),
        config.to_text(),
        &model,
        outcome.state,
        likelihood,
        outcome.optimizer,
        outcome.iterations,
        standardizer,
        config.bias,
        schema,
    )
    .save(&dir.join("checkpoint.json"))?;

    Ok(TrainSummary {
        run_dir: dir,
        config_hash: hash,
        iterations: outcome.iterations,
        final_elbo,
        train: train_metrics,
        test: test_metrics,
    })
}

fn final_elbo(trace: &TrainingTrace) -> f64 {
    trace.rows.last().map_or(f64::NAN, |r| r.elbo)
}

/// Map raw rows through a checkpoint's preprocessing.
pub fn prepare_for_checkpoint(
    ck: &Checkpoint,
    data: &Dataset,
    model_dimension: usize,
) -> Result<SphereData> {
    if data.raw_dimension() + 1 != model_dimension {
        return Err(Error::DimensionMismatch {
            expected: model_dimension,
            actual: data.raw_dimension() + 1,
        });
    }
    project_to_sphere(&ck.standardizer.apply(data)?, ck.bias)
}

/// Evaluate a checkpoint on a CSV file, writing `metrics.json` and
/// `predictions.csv` into `out_dir`.
pub fn eval(
    checkpoint: &Path,
    data_path: &Path,
    schema_path: Option<&Path>,
    out_dir: &Path,
    env: &Env,
) -> CliResult<Metrics> {
    let ck = Checkpoint::load(checkpoint)?;
    let schema = match schema_path {
        Some(p) => Schema::load(p)?,
        None => ck.schema.clone(),
    };
    let cwd = PathBuf::from(".");
    let data = load_csv(
        &resolve_path(data_path, env.data_dir.as_deref(), &cwd),
        &schema,
        DEFAULT_MAX_MALFORMED_FRACTION,
    )?;
    let model = ck.model()?;
    let engine = ExpectationEngine::new(ck.likelihood()?);
    let sphere = prepare_for_checkpoint(&ck, &data, model.dimension())?;
    let (metrics, predictions) = evaluate(
        &model,
        &ck.state,
        &engine,
        &sphere,
        ck.standardizer.target_scaler(),
    )?;
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    write_predictions(&out_dir.join("predictions.csv"), &predictions)?;
    Ok(metrics)
}

/// Sphere dimension, frequency cap, phase cap and sizes of the internal
/// gradient-check problem.
const GRADCHECK_DIMENSION: usize = 4;
const GRADCHECK_MAX_FREQUENCY: usize = 3;
const GRADCHECK_PHASES: usize = 3;
const GRADCHECK_ROWS: usize = 20;
const GRADCHECK_TOTAL_ROWS: usize = 40;
const GRADCHECK_STATES: u64 = 3;

/// One checked component.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckRow {
    pub likelihood: &'static str,
    pub state: u64,
    #[serde(flatten)]
    pub entry: GradCheckEntry,
}

fn gradcheck_problem(likelihood: Likelihood, seed: u64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<SpherePoint> = (0..GRADCHECK_ROWS)
        .map(|_| SpherePoint::random(GRADCHECK_DIMENSION, &mut rng))
        .collect();
    let y = points
        .iter()
        .map(|p| {
            let f = (3.0 * p.coords()[0]).sin() + p.coords()[1];
            let eps: f64 = StandardNormal.sample(&mut rng);
            match likelihood {
                Likelihood::Gaussian => f + 0.1 * eps,
                Likelihood::Bernoulli(_) => f64::from(f + 0.3 * eps > 0.0),
            }
        })
        .collect();
    Ok((points_matrix(&points, GRADCHECK_DIMENSION)?, y))
}

/// Likelihoods exercised by `gradcheck` for a config.
pub fn gradcheck_likelihoods(config: &RunConfig) -> Vec<Likelihood> {
    match config.likelihood {
        Some(l) => vec![l],
        None => vec![
            Likelihood::Gaussian,
            Likelihood::Bernoulli(Link::Probit),
            Likelihood::Bernoulli(Link::Logit),
        ],
    }
}

/// Finite-difference check of every ELBO gradient component on a small
/// internal problem using the config's kernel, at three random states per
/// likelihood. `corrupt` names a parameter whose analytic value is perturbed.
pub fn gradcheck(config: &RunConfig, corrupt: Option<&str>) -> CliResult<Vec<GradCheckRow>> {
    let max_frequency = config.max_frequency.clamp(1, GRADCHECK_MAX_FREQUENCY);
    let spectrum = kernel_spectrum(config.kernel, GRADCHECK_DIMENSION, max_frequency, false)?
        .with_radial_variance(config.initial_variance)?;
    let model = InducingModel::for_spectrum(
        spectrum,
        PhaseTruncation::AtMost(GRADCHECK_PHASES),
        config.basis_seed(),
    )?;
    let mut rows = Vec::new();
    let mut corrupt_found = corrupt.is_none();
    for likelihood in gradcheck_likelihoods(config) {
        let (x, y) = gradcheck_problem(likelihood, config.synthetic_seed())?;
        let engine = ExpectationEngine::new(likelihood);
        let hyper = model.initial_hyper(likelihood.has_noise().then_some(config.initial_noise));
        for k in 0..GRADCHECK_STATES {
            let state = random_state(&model, hyper.clone(), config.seed.wrapping_add(k))?;
            let target = corrupt.and_then(|name| {
                ParamLayout::new(&model, &state)
                    .ids()
                    .iter()
                    .find(|id| id.name() == name)
                    .cloned()
            });
            corrupt_found |= target.is_some();
            let entries = gradient_check(
                &model,
                &state,
                &engine,
                &x,
                &y,
                GRADCHECK_TOTAL_ROWS,
                GradCheckTolerance::default(),
                target.map(|id| (id, 1.0)),
            )?;
            rows.extend(entries.into_iter().map(|entry| GradCheckRow {
                likelihood: likelihood.name(),
                state: k,
                entry,
            }));
        }
    }
    if !corrupt_found {
        return Err(CliError::Usage(format!(
            "--corrupt-gradient: no parameter named '{}'",
            corrupt.unwrap_or_default()
        )));
    }
    Ok(rows)
}

/// Fixed-width text table of a gradient-check report.
pub fn format_gradcheck(rows: &[GradCheckRow]) -> String {
    let mut s = format!(
        "{:<17} {:>5} {:<24} {:>16} {:>16} {:>10} {:>4}\n",
        "likelihood", "state", "parameter", "analytic", "finite_diff", "rel_err", "ok"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<17} {:>5} {:<24} {:>16.8e} {:>16.8e} {:>10.2e} {:>4}\n",
            r.likelihood,
            r.state,
            r.entry.parameter,
            r.entry.analytic,
            r.entry.numeric,
            r.entry.rel_error,
            if r.entry.pass { "ok" } else { "FAIL" }
        ));
    }
    s
}

/// Names of failing parameters, in report order without repeats.
pub fn gradcheck_failures(rows: &[GradCheckRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows.iter().filter(|r| !r.entry.pass) {
        let name = format!("{} ({})", r.entry.parameter, r.likelihood);
        if !out.contains(&name) {
            out.push(name);
        }
    }
    out
}
