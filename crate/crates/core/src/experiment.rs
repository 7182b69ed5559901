//! End-to-end runs: ingest, split, train, evaluate, prune, optionally
//! fine-tune, and write one JSON report per replication plus an aggregate.
//!
//! Configs are flat TOML with an explicit `version`. Every replication uses
//! seed `seed + r`, and within it every stage draws from its own named
//! substream, so reports are reproducible byte for byte. Wall-clock numbers
//! live only in the `timing` field.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{read_table, split_indices, toy_sine, Dataset, SplitProtocol, Standardizer, TableFormat, Teacher};
use crate::error::{Error, Result};
use crate::eval::{mean_predictive_std, metrics_from, predictive, Metrics};
use crate::model::{Likelihood, NetworkSpec, Nonlinearity, PriorKind};
use crate::pruning::{apply_prune, fine_tune, prune_report, PruneConfig, PruneReport};
use crate::rng::{substream, Stream};
use crate::trainer::{train, TrainConfig};
use crate::variational::{Family, Posterior};

/// Version of the config format and of the report schema.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// `y = sin(x) + ε` on `[toy_min, toy_max]`.
    ToySine,
    /// A random tanh teacher network with `teacher_units` units.
    Teacher,
    /// A delimiter-separated table at `data_path`, last column the target.
    File,
}

/// Flat experiment description. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub replications: usize,

    pub data: DataSource,
    pub data_path: Option<PathBuf>,
    pub header: bool,
    /// Training fraction for file data.
    pub train_fraction: f64,
    /// Fixed test rows for file data; overrides `train_fraction`.
    pub test_indices: Option<Vec<usize>>,
    /// Training and test sizes for generated data.
    pub n_train: usize,
    pub n_test: usize,
    pub noise_std: f64,
    pub toy_min: f64,
    pub toy_max: f64,
    pub teacher_input_dim: usize,
    pub teacher_units: usize,

    pub hidden_widths: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    pub prior: PriorKind,
    pub b0: f64,
    pub bg: f64,
    pub b_kappa: f64,
    pub c_a: f64,
    pub c_b: f64,
    pub precision_shape: f64,
    pub precision_rate: f64,

    pub family: Family,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub mc_samples: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub unit_norm_projection: bool,

    pub eval_samples: usize,

    pub prune: bool,
    pub delta: f64,
    pub p0: f64,
    pub norm_samples: usize,
    /// Means-only steps after pruning; 0 skips fine-tuning.
    pub fine_tune_iterations: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let net = NetworkSpec::new(vec![1, 50, 1]);
        let train = TrainConfig::default();
        let prune = PruneConfig::default();
        let Likelihood::GaussianGammaPrecision { shape, rate } = net.likelihood;
        Self {
            version: FORMAT_VERSION,
            name: "run".into(),
            seed: 0,
            replications: 1,
            data: DataSource::ToySine,
            data_path: None,
            header: false,
            train_fraction: 0.9,
            test_indices: None,
            n_train: 100,
            n_test: 500,
            noise_std: 0.1,
            toy_min: -4.0,
            toy_max: 4.0,
            teacher_input_dim: 2,
            teacher_units: 3,
            hidden_widths: vec![50],
            nonlinearity: net.nonlinearity,
            prior: net.prior,
            b0: net.b0,
            bg: net.bg,
            b_kappa: net.b_kappa,
            c_a: net.c_a,
            c_b: net.c_b,
            precision_shape: shape,
            precision_rate: rate,
            family: train.family,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            iterations: train.iterations,
            mc_samples: train.mc_samples,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            unit_norm_projection: train.unit_norm_projection,
            eval_samples: 100,
            prune: true,
            delta: prune.delta,
            p0: prune.p0,
            norm_samples: 100,
            fine_tune_iterations: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("a flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden_widths needs at least one positive width".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be positive".into()));
        }
        match self.data {
            DataSource::File if self.data_path.is_none() => {
                return Err(Error::Config("data = \"file\" needs data_path".into()));
            }
            DataSource::ToySine | DataSource::Teacher if self.n_train == 0 || self.n_test == 0 => {
                return Err(Error::Config("n_train and n_test must be positive".into()));
            }
            DataSource::ToySine if !(self.toy_max > self.toy_min) => {
                return Err(Error::Config("toy interval is empty".into()));
            }
            DataSource::Teacher if self.teacher_input_dim == 0 || self.teacher_units == 0 => {
                return Err(Error::Config("teacher needs a positive input size and unit count".into()));
            }
            _ => {}
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        self.train_config(self.seed).validate()?;
        self.prune_config().validate()?;
        self.network_spec(1, 1).validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Network for data with `input_dim` columns (after constant columns are
    /// dropped) and `output_dim` targets.
    pub fn network_spec(&self, input_dim: usize, output_dim: usize) -> NetworkSpec {
        let mut widths = vec![input_dim];
        widths.extend(&self.hidden_widths);
        widths.push(output_dim);
        NetworkSpec {
            layer_widths: widths,
            nonlinearity: self.nonlinearity,
            b0: self.b0,
            bg: self.bg,
            b_kappa: self.b_kappa,
            c_a: self.c_a,
            c_b: self.c_b,
            prior: self.prior,
            likelihood: Likelihood::GaussianGammaPrecision {
                shape: self.precision_shape,
                rate: self.precision_rate,
            },
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            family: self.family,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            iterations: self.iterations,
            mc_samples: self.mc_samples,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            unit_norm_projection: self.unit_norm_projection,
            seed,
        }
    }

    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            delta: self.delta,
            p0: self.p0,
        }
    }

    pub fn replication_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }
}

/// A trained model with everything needed to predict in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub version: u32,
    pub spec: NetworkSpec,
    pub posterior: Posterior,
    pub standardizer: Standardizer,
}

impl SavedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.version != FORMAT_VERSION {
            return Err(Error::Config(format!("model file version {} is not supported", m.version)));
        }
        m.posterior.validate(&m.spec)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Split,
    Train,
    Evaluate,
    Prune,
    FineTune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Config,
    Data,
    Numerical,
    Io,
}

impl FailureKind {
    pub fn of(e: &Error) -> Self {
        match e {
            Error::Config(_) => FailureKind::Config,
            Error::Numerical(_) => FailureKind::Numerical,
            Error::Data { .. } | Error::InvalidInput(_) | Error::Shape(_) => FailureKind::Data,
            Error::Io(_) | Error::Json(_) => FailureKind::Io,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: Stage,
    pub kind: FailureKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub dropped_columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboSummary {
    pub iterations: usize,
    pub first: f64,
    pub last: f64,
    pub max: f64,
    /// Mean over the final tenth of the trace.
    pub tail_mean: f64,
}

impl ElboSummary {
    pub fn of(trace: &[f64]) -> Option<Self> {
        let last = *trace.last()?;
        let tail = &trace[trace.len() - (trace.len() / 10).max(1)..];
        Some(Self {
            iterations: trace.len(),
            first: trace[0],
            last,
            max: trace.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            tail_mean: tail.iter().sum::<f64>() / tail.len() as f64,
        })
    }
}

/// Test metrics in original target units, with the mean predictive std.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub rmse: f64,
    pub log_likelihood: f64,
    pub predictive_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub report: PruneReport,
    pub max_prediction_shift: f64,
    pub pruned_widths: Vec<usize>,
    pub pruned_test: TestSummary,
    pub fine_tuned_test: Option<TestSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub name: String,
    pub replication: usize,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub data: Option<DataSummary>,
    pub elbo: Option<ElboSummary>,
    pub test: Option<TestSummary>,
    pub prune: Option<PruneSummary>,
    pub failure: Option<FailureRecord>,
    /// The only nondeterministic part of a report.
    pub timing: Timing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub schema_version: u32,
    pub name: String,
    pub replications: usize,
    pub succeeded: usize,
    pub rmse: Option<Spread>,
    pub log_likelihood: Option<Spread>,
    pub predictive_std: Option<Spread>,
    pub compression_rate: Option<Spread>,
    pub failures: Vec<ReplicationFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    #[serde(flatten)]
    pub failure: FailureRecord,
}

impl AggregateReport {
    pub fn of(name: &str, reports: &[RunReport]) -> Self {
        let tests: Vec<&TestSummary> = reports.iter().filter_map(|r| r.test.as_ref()).collect();
        let pick = |f: fn(&TestSummary) -> f64| Spread::of(&tests.iter().map(|t| f(t)).collect::<Vec<_>>());
        let rates: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.prune.as_ref().map(|p| p.report.compression_rate))
            .collect();
        Self {
            schema_version: FORMAT_VERSION,
            name: name.to_string(),
            replications: reports.len(),
            succeeded: reports.iter().filter(|r| r.failure.is_none()).count(),
            rmse: pick(|t| t.rmse),
            log_likelihood: pick(|t| t.log_likelihood),
            predictive_std: pick(|t| t.predictive_std),
            compression_rate: Spread::of(&rates),
            failures: reports
                .iter()
                .filter_map(|r| {
                    r.failure.clone().map(|failure| ReplicationFailure {
                        replication: r.replication,
                        failure,
                    })
                })
                .collect(),
        }
    }
}

/// Train and test splits in standardized units.
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub standardizer: Standardizer,
    pub raw_input_dim: usize,
}

/// Generates or reads the data for replication seed `seed` and standardizes
/// it with training statistics only.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> std::result::Result<PreparedData, (Stage, Error)> {
    let mut rng = substream(seed, Stream::Data);
    let (train_raw, test_raw) = match cfg.data {
        DataSource::ToySine => {
            let i = (cfg.toy_min, cfg.toy_max);
            let tr = toy_sine(cfg.n_train, i, cfg.noise_std, &mut rng);
            (tr, toy_sine(cfg.n_test, i, cfg.noise_std, &mut rng))
        }
        DataSource::Teacher => {
            let t = Teacher::random(cfg.teacher_input_dim, cfg.teacher_units, cfg.noise_std, &mut rng);
            let tr = t.sample(cfg.n_train, &mut rng);
            (tr, t.sample(cfg.n_test, &mut rng))
        }
        DataSource::File => {
            let path = cfg.data_path.as_ref().expect("validated");
            let all = read_table(path, &TableFormat { header: cfg.header }).map_err(|e| (Stage::Ingest, e))?;
            let protocol = match &cfg.test_indices {
                Some(test) => SplitProtocol::FixedIndices { test: test.clone() },
                None => SplitProtocol::RandomFraction {
                    train: cfg.train_fraction,
                },
            };
            let (tr, te) = split_indices(all.len(), &protocol, &mut rng).map_err(|e| (Stage::Split, e))?;
            if tr.is_empty() || te.is_empty() {
                return Err((Stage::Split, Error::Config("split leaves an empty train or test set".into())));
            }
            (all.select(&tr), all.select(&te))
        }
    };
    let standardizer = Standardizer::fit(&train_raw).map_err(|e| (Stage::Ingest, e))?;
    Ok(PreparedData {
        train: standardizer.transform(&train_raw),
        test: standardizer.transform(&test_raw),
        raw_input_dim: train_raw.input_dim(),
        standardizer,
    })
}

/// Predictive metrics of `posterior` on `test`, in original units.
pub fn test_summary(
    spec: &NetworkSpec,
    posterior: &Posterior,
    test: &Dataset,
    standardizer: &Standardizer,
    samples: usize,
    rng: &mut impl rand::Rng,
) -> Result<TestSummary> {
    let pred = predictive(spec, posterior, &test.x, samples, rng)?;
    let Metrics { rmse, log_likelihood } = metrics_from(&pred, &test.y, Some(standardizer));
    if !(rmse.is_finite() && log_likelihood.is_finite()) {
        return Err(Error::Numerical("non-finite test metrics".into()));
    }
    Ok(TestSummary {
        rmse,
        log_likelihood,
        predictive_std: mean_predictive_std(&pred) * standardizer.y_std[0],
    })
}

/// Result of one replication; the model is present when training finished.
pub struct Replication {
    pub report: RunReport,
    pub model: Option<SavedModel>,
}

/// Runs replication `r` without touching the filesystem (except to read
/// file data).
pub fn run_replication(cfg: &ExperimentConfig, r: usize) -> Replication {
    let start = Instant::now();
    let seed = cfg.replication_seed(r);
    let mut report = RunReport {
        schema_version: FORMAT_VERSION,
        name: cfg.name.clone(),
        replication: r,
        seed,
        config: cfg.clone(),
        data: None,
        elbo: None,
        test: None,
        prune: None,
        failure: None,
        timing: Timing { wall_clock_seconds: 0.0 },
    };
    let mut model = None;
    if let Err((stage, e)) = replication_stages(cfg, seed, &mut report, &mut model) {
        report.failure = Some(FailureRecord {
            stage,
            kind: FailureKind::of(&e),
            message: e.to_string(),
        });
    }
    report.timing.wall_clock_seconds = start.elapsed().as_secs_f64();
    Replication { report, model }
}

fn replication_stages(
    cfg: &ExperimentConfig,
    seed: u64,
    report: &mut RunReport,
    model: &mut Option<SavedModel>,
) -> std::result::Result<(), (Stage, Error)> {
    let data = prepare_data(cfg, seed)?;
    report.data = Some(DataSummary {
        n_train: data.train.len(),
        n_test: data.test.len(),
        input_dim: data.train.input_dim(),
        dropped_columns: data.standardizer.dropped_columns(data.raw_input_dim),
    });
    let spec = cfg.network_spec(data.train.input_dim(), data.train.y.ncols());
    let train_cfg = cfg.train_config(seed);
    let state = train(&spec, &train_cfg, &data.train).map_err(|e| (Stage::Train, e))?;
    report.elbo = ElboSummary::of(&state.elbo_trace);
    let posterior = state.posterior;

    let mut erng = substream(seed, Stream::Eval);
    report.test = Some(
        test_summary(&spec, &posterior, &data.test, &data.standardizer, cfg.eval_samples, &mut erng)
            .map_err(|e| (Stage::Evaluate, e))?,
    );
    *model = Some(SavedModel {
        version: FORMAT_VERSION,
        spec: spec.clone(),
        posterior: posterior.clone(),
        standardizer: data.standardizer.clone(),
    });

    if cfg.prune && spec.prior.has_scales() {
        let mut prng = substream(seed, Stream::Prune);
        let pr = prune_report(&spec, &posterior, &cfg.prune_config(), cfg.norm_samples, &mut prng)
            .map_err(|e| (Stage::Prune, e))?;
        let pruned = apply_prune(&spec, &posterior, &pr, &mut prng).map_err(|e| (Stage::Prune, e))?;
        let pruned_test = test_summary(
            &pruned.spec,
            &pruned.posterior,
            &data.test,
            &data.standardizer,
            cfg.eval_samples,
            &mut erng,
        )
        .map_err(|e| (Stage::Prune, e))?;
        let mut summary = PruneSummary {
            pruned_widths: pruned.spec.layer_widths[1..pruned.spec.layer_widths.len() - 1].to_vec(),
            report: pr,
            max_prediction_shift: pruned.max_prediction_shift,
            pruned_test,
            fine_tuned_test: None,
        };
        if cfg.fine_tune_iterations > 0 {
            let ft_cfg = TrainConfig {
                iterations: cfg.fine_tune_iterations,
                ..train_cfg
            };
            let tuned = fine_tune(&pruned.spec, &pruned.posterior, &ft_cfg, &data.train)
                .map_err(|e| (Stage::FineTune, e))?;
            summary.fine_tuned_test = Some(
                test_summary(&pruned.spec, &tuned, &data.test, &data.standardizer, cfg.eval_samples, &mut erng)
                    .map_err(|e| (Stage::FineTune, e))?,
            );
        }
        report.prune = Some(summary);
    }
    Ok(())
}

/// Every replication's report plus the aggregate.
pub struct ExperimentOutcome {
    pub replications: Vec<Replication>,
    pub aggregate: AggregateReport,
}

impl ExperimentOutcome {
    pub fn first_failure(&self) -> Option<&FailureRecord> {
        self.replications.iter().find_map(|r| r.report.failure.as_ref())
    }
}

/// Runs all replications, one thread each.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let replications: Vec<Replication> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.replications)
            .map(|r| s.spawn(move || run_replication(cfg, r)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("replication panicked")).collect()
    });
    let reports: Vec<RunReport> = replications.iter().map(|r| r.report.clone()).collect();
    Ok(ExperimentOutcome {
        aggregate: AggregateReport::of(&cfg.name, &reports),
        replications,
    })
}

pub fn replication_report_path(dir: &Path, name: &str, r: usize) -> PathBuf {
    dir.join(format!("{name}_rep{r:03}.json"))
}

pub fn aggregate_report_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}_aggregate.json"))
}

/// Writes one pretty-printed JSON file per replication and the aggregate.
/// Returns the paths written.
pub fn write_reports(dir: &Path, outcome: &ExperimentOutcome) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for rep in &outcome.replications {
        let path = replication_report_path(dir, &rep.report.name, rep.report.replication);
        std::fs::write(&path, serde_json::to_string_pretty(&rep.report)?)?;
        written.push(path);
    }
    let path = aggregate_report_path(dir, &outcome.aggregate.name);
    std::fs::write(&path, serde_json::to_string_pretty(&outcome.aggregate)?)?;
    written.push(path);
    Ok(written)
}
