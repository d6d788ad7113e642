//! Flat `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use sphgp_core::data_io::{to_hex, Task, DEFAULT_BIAS, DEFAULT_MAX_MALFORMED_FRACTION};
use sphgp_core::harmonics::PhaseTruncation;
use sphgp_core::vargp::fit::BETA_BOUNDS;
use sphgp_core::vargp::{FitConfig, Likelihood, Link};
use sphgp_core::{Error, Result};

/// Kernel family and its structural parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    /// `λ_ℓ = ℓ^{-β}`, `β` the initial value.
    Poly { beta: f64 },
    /// Arc-cosine ReLU kernel composed `depth` times.
    Relu { depth: usize },
    /// ReLU neural tangent kernel of `depth` layers.
    Ntk { depth: usize },
}

impl KernelSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, arg) = s.trim().split_once(':').ok_or_else(|| {
            Error::Config(format!(
                "kernel '{s}': expected poly:<β>, relu:<L> or ntk:<L>"
            ))
        })?;
        let depth = || {
            arg.trim()
                .parse::<usize>()
                .ok()
                .filter(|&l| l >= 1)
                .ok_or_else(|| Error::Config(format!("kernel '{s}': depth must be an integer ≥ 1")))
        };
        match kind.trim() {
            "poly" => {
                let beta: f64 = arg
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("kernel '{s}': β is not a number")))?;
                if !(beta > 0.0) || !beta.is_finite() {
                    return Err(Error::Config(format!("kernel '{s}': β must be positive")));
                }
                if beta < BETA_BOUNDS.0 || beta > BETA_BOUNDS.1 {
                    return Err(Error::Config(format!(
                        "kernel '{s}': β must lie in [{}, {}]",
                        BETA_BOUNDS.0, BETA_BOUNDS.1
                    )));
                }
                Ok(KernelSpec::Poly { beta })
            }
            "relu" => Ok(KernelSpec::Relu { depth: depth()? }),
            "ntk" => Ok(KernelSpec::Ntk { depth: depth()? }),
            other => Err(Error::Config(format!("unknown kernel family '{other}'"))),
        }
    }

    /// File-name friendly label, e.g. `poly_2` or `ntk_3`.
    pub fn label(&self) -> String {
        match self {
            KernelSpec::Poly { beta } => format!("poly_{beta}"),
            KernelSpec::Relu { depth } => format!("relu_{depth}"),
            KernelSpec::Ntk { depth } => format!("ntk_{depth}"),
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Poly { beta } => write!(f, "poly:{beta}"),
            KernelSpec::Relu { depth } => write!(f, "relu:{depth}"),
            KernelSpec::Ntk { depth } => write!(f, "ntk:{depth}"),
        }
    }
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generated from a power-law prior; see the `synthetic_*` keys.
    Synthetic,
    /// A CSV file, resolved against `SPHGP_DATA_DIR` when relative.
    Csv(PathBuf),
}

/// How the test split is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Seeded random permutation.
    Random,
    /// The final `test_fraction` of rows, in file order.
    Last,
}

/// Everything that determines a run, given the input data bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kernel: KernelSpec,
    pub max_frequency: usize,
    pub phases: PhaseTruncation,
    /// `None` picks Gaussian for regression and probit for binary data.
    pub likelihood: Option<Likelihood>,
    pub initial_variance: f64,
    /// Initial Gaussian noise variance (in standardized target units).
    pub initial_noise: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_variational: f64,
    pub lr_hyper: f64,
    pub lr_phase: f64,
    pub log_every: usize,
    pub full_data_trace: bool,
    /// Master seed; basis, split, minibatch and synthetic seeds derive from it.
    pub seed: u64,
    pub data: DataSource,
    /// Schema file for CSV data, relative to the config file.
    pub schema: Option<PathBuf>,
    pub test_fraction: f64,
    pub split: SplitMode,
    /// Standardize input columns on the training split before projection.
    pub standardize_inputs: bool,
    pub bias: f64,
    /// Keep at most this many rows (seeded subsample); 0 keeps all.
    pub max_rows: usize,
    pub max_malformed_fraction: f64,
    pub synthetic_task: Task,
    pub synthetic_rows: usize,
    /// Raw input columns; the sphere dimension is one more.
    pub synthetic_features: usize,
    pub synthetic_beta: f64,
    pub synthetic_max_frequency: usize,
    /// Standard deviation of the additive noise (regression) or the latent
    /// noise before thresholding (binary).
    pub synthetic_noise_std: f64,
    /// Parent of the per-run directory. Not part of the run hash.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fit = FitConfig::default();
        Self {
            kernel: KernelSpec::Poly { beta: 1.0 },
            max_frequency: 6,
            phases: PhaseTruncation::AtMost(100),
            likelihood: None,
            initial_variance: 1.0,
            initial_noise: 0.1,
            iterations: fit.iterations,
            batch_size: fit.batch_size,
            lr_variational: fit.lr_variational,
            lr_hyper: fit.lr_hyper,
            lr_phase: fit.lr_phase,
            log_every: fit.log_every,
            full_data_trace: fit.full_data_trace,
            seed: 0,
            data: DataSource::Synthetic,
            schema: None,
            test_fraction: 0.2,
            split: SplitMode::Random,
            standardize_inputs: true,
            bias: DEFAULT_BIAS,
            max_rows: 0,
            max_malformed_fraction: DEFAULT_MAX_MALFORMED_FRACTION,
            synthetic_task: Task::Regression,
            synthetic_rows: 1000,
            synthetic_features: 3,
            synthetic_beta: 2.0,
            synthetic_max_frequency: 6,
            synthetic_noise_std: 0.1,
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn likelihood_name(l: Option<Likelihood>) -> &'static str {
    match l {
        None => "auto",
        Some(l) => l.name(),
    }
}

fn parse_likelihood(s: &str) -> Result<Option<Likelihood>> {
    Ok(match s {
        "auto" => None,
        "gaussian" => Some(Likelihood::Gaussian),
        "bernoulli-probit" | "bernoulli" => Some(Likelihood::Bernoulli(Link::Probit)),
        "bernoulli-logit" => Some(Likelihood::Bernoulli(Link::Logit)),
        other => {
            return Err(Error::Config(format!(
                "unknown likelihood '{other}' (auto, gaussian, bernoulli-probit, bernoulli-logit)"
            )))
        }
    })
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got '{v}'"
        ))),
    }
}

impl RunConfig {
    /// Parse configuration text. Missing keys keep their defaults; unknown
    /// or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("key '{k}' set twice")));
            }
            match k {
                "kernel" => c.kernel = KernelSpec::parse(v)?,
                "max_frequency" => c.max_frequency = parse_num(k, v)?,
                "phases" => {
                    c.phases = if v == "full" {
                        PhaseTruncation::Full
                    } else {
                        PhaseTruncation::AtMost(parse_num(k, v)?)
                    }
                }
                "likelihood" => c.likelihood = parse_likelihood(v)?,
                "initial_variance" => c.initial_variance = parse_num(k, v)?,
                "initial_noise" => c.initial_noise = parse_num(k, v)?,
                "iterations" => c.iterations = parse_num(k, v)?,
                "batch_size" => c.batch_size = parse_num(k, v)?,
                "lr_variational" => c.lr_variational = parse_num(k, v)?,
                "lr_hyper" => c.lr_hyper = parse_num(k, v)?,
                "lr_phase" => c.lr_phase = parse_num(k, v)?,
                "log_every" => c.log_every = parse_num(k, v)?,
                "full_data_trace" => c.full_data_trace = parse_bool(k, v)?,
                "seed" => c.seed = parse_num(k, v)?,
                "data" => {
                    c.data = if v == "synthetic" {
                        DataSource::Synthetic
                    } else {
                        DataSource::Csv(PathBuf::from(v))
                    }
                }
                "schema" => {
                    c.schema = if v == "none" {
                        None
                    } else {
                        Some(PathBuf::from(v))
                    }
                }
                "test_fraction" => c.test_fraction = parse_num(k, v)?,
                "split" => {
                    c.split = match v {
                        "random" => SplitMode::Random,
                        "last" => SplitMode::Last,
                        _ => {
                            return Err(Error::Config(format!(
                                "split: expected random or last, got '{v}'"
                            )))
                        }
                    }
                }
                "standardize_inputs" => c.standardize_inputs = parse_bool(k, v)?,
                "bias" => c.bias = parse_num(k, v)?,
                "max_rows" => c.max_rows = parse_num(k, v)?,
                "max_malformed_fraction" => c.max_malformed_fraction = parse_num(k, v)?,
                "synthetic_task" => c.synthetic_task = Task::parse(v)?,
                "synthetic_rows" => c.synthetic_rows = parse_num(k, v)?,
                "synthetic_features" => c.synthetic_features = parse_num(k, v)?,
                "synthetic_beta" => c.synthetic_beta = parse_num(k, v)?,
                "synthetic_max_frequency" => c.synthetic_max_frequency = parse_num(k, v)?,
                "synthetic_noise_std" => c.synthetic_noise_std = parse_num(k, v)?,
                "output_dir" => c.output_dir = PathBuf::from(v),
                other => return Err(Error::Config(format!("unknown key '{other}'"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its effective value, in a fixed order.
    pub fn to_text(&self) -> String {
        format!(
            "{}output_dir = {}\n",
            self.run_text(),
            self.output_dir.display()
        )
    }

    /// As [`RunConfig::to_text`] without `output_dir`.
    fn run_text(&self) -> String {
        let phases = match self.phases {
            PhaseTruncation::Full => "full".to_string(),
            PhaseTruncation::AtMost(m) => m.to_string(),
        };
        let data = match &self.data {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Csv(p) => p.display().to_string(),
        };
        let schema = self
            .schema
            .as_ref()
            .map_or("none".to_string(), |p| p.display().to_string());
        let lines = [
            ("kernel", self.kernel.to_string()),
            ("max_frequency", self.max_frequency.to_string()),
            ("phases", phases),
            ("likelihood", likelihood_name(self.likelihood).to_string()),
            ("initial_variance", self.initial_variance.to_string()),
            ("initial_noise", self.initial_noise.to_string()),
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_variational", self.lr_variational.to_string()),
            ("lr_hyper", self.lr_hyper.to_string()),
            ("lr_phase", self.lr_phase.to_string()),
            ("log_every", self.log_every.to_string()),
            ("full_data_trace", self.full_data_trace.to_string()),
            ("seed", self.seed.to_string()),
            ("data", data),
            ("schema", schema),
            ("test_fraction", self.test_fraction.to_string()),
            (
                "split",
                match self.split {
                    SplitMode::Random => "random",
                    SplitMode::Last => "last",
                }
                .to_string(),
            ),
            ("standardize_inputs", self.standardize_inputs.to_string()),
            ("bias", self.bias.to_string()),
            ("max_rows", self.max_rows.to_string()),
            (
                "max_malformed_fraction",
                self.max_malformed_fraction.to_string(),
            ),
            ("synthetic_task", self.synthetic_task.name().to_string()),
            ("synthetic_rows", self.synthetic_rows.to_string()),
            ("synthetic_features", self.synthetic_features.to_string()),
            ("synthetic_beta", self.synthetic_beta.to_string()),
            (
                "synthetic_max_frequency",
                self.synthetic_max_frequency.to_string(),
            ),
            ("synthetic_noise_std", self.synthetic_noise_std.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the effective configuration text, `output_dir` excluded.
    pub fn hash(&self) -> String {
        to_hex(&Sha256::digest(self.run_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("initial_variance", self.initial_variance)?;
        positive("initial_noise", self.initial_noise)?;
        positive("bias", self.bias)?;
        if let PhaseTruncation::AtMost(0) = self.phases {
            return Err(Error::Config("phases must be 'full' or at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.max_malformed_fraction) {
            return Err(Error::Config(
                "max_malformed_fraction must lie in [0, 1]".into(),
            ));
        }
        if let DataSource::Csv(_) = self.data {
            if self.schema.is_none() {
                return Err(Error::Config("CSV data needs a schema file".into()));
            }
        } else {
            positive("synthetic_beta", self.synthetic_beta)?;
            if !(self.synthetic_noise_std >= 0.0) {
                return Err(Error::Config(
                    "synthetic_noise_std must be non-negative".into(),
                ));
            }
            if self.synthetic_features < 2 {
                return Err(Error::Config(
                    "synthetic_features must be at least 2".into(),
                ));
            }
            if self.synthetic_rows < 4 {
                return Err(Error::Config("synthetic_rows must be at least 4".into()));
            }
        }
        self.fit_config().validate()
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            lr_variational: self.lr_variational,
            lr_hyper: self.lr_hyper,
            lr_phase: self.lr_phase,
            seed: self.minibatch_seed(),
            log_every: self.log_every,
            full_data_trace: self.full_data_trace,
        }
    }

    pub fn basis_seed(&self) -> u64 {
        self.seed
    }

    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn minibatch_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn synthetic_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn subsample_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }

    /// Likelihood for `task`, checking an explicit choice against it.
    pub fn likelihood_for(&self, task: Task) -> Result<Likelihood> {
        match (self.likelihood, task) {
            (None, Task::Regression) => Ok(Likelihood::Gaussian),
            (None, Task::Binary) => Ok(Likelihood::Bernoulli(Link::Probit)),
            (Some(Likelihood::Gaussian), Task::Regression) => Ok(Likelihood::Gaussian),
            (Some(l @ Likelihood::Bernoulli(_)), Task::Binary) => Ok(l),
            (Some(l), t) => Err(Error::Config(format!(
                "likelihood {} does not fit {} data",
                l.name(),
                t.name()
            ))),
        }
    }
}

/// Resolve a data path: absolute paths as given, relative ones under
/// `data_dir` when set, else relative to `base` (the config's directory).
pub fn resolve_path(path: &Path, data_dir: Option<&Path>, base: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else if let Some(root) = data_dir {
        root.join(path)
    } else {
        base.join(path)
    }
}
