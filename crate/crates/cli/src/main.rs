use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::Serialize;

use hsbnn::data::{read_table, toy_sine, TableFormat};
use hsbnn::eval::{band_table, predictive};
use hsbnn::experiment::{
    aggregate_report_path, run_experiment, test_summary, write_reports, ExperimentConfig, FailureKind, SavedModel,
    FORMAT_VERSION,
};
use hsbnn::gradient::{finite_diff_check, Tolerances};
use hsbnn::model::{NetworkSpec, Nonlinearity, PriorKind};
use hsbnn::prior_samples::{prior_sample_functions, PriorSampleConfig};
use hsbnn::pruning::{apply_prune, fine_tune, prune_report, PruneConfig};
use hsbnn::rng::{substream, Stream};
use hsbnn::trainer::TrainConfig;
use hsbnn::variational::{ElboInput, ElboNoise, Family, Posterior};
use hsbnn::Error;

/// Directory for reports when `--report-dir` is not given.
const REPORT_DIR_ENV: &str = "HSBNN_REPORT_DIR";

#[derive(Parser)]
#[command(name = "hsbnn", version, about = "Horseshoe Bayesian neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config: train, evaluate, prune and write reports.
    Train(TrainArgs),
    /// Score a saved model on a data table.
    Evaluate(EvaluateArgs),
    /// Apply the pruning rule to a saved model.
    Prune(PruneArgs),
    /// Write matched horseshoe / regularized horseshoe prior function draws.
    PriorSamples(PriorSamplesArgs),
    /// Write a noisy sin(x) data table.
    ToyGen(ToyGenArgs),
    /// Compare the ELBO gradient against finite differences.
    CheckGradients(CheckGradientsArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Where reports go. Falls back to $HSBNN_REPORT_DIR, then ./reports.
    #[arg(long)]
    report_dir: Option<PathBuf>,
    /// Also write each replication's trained model next to its report.
    #[arg(long)]
    save_model: bool,
    #[arg(long)]
    family: Option<Family>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    unit_norm_projection: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    p0: Option<f64>,
    #[arg(long)]
    fine_tune_iterations: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Table in original units, last column the target.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    header: bool,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write `x, mean, mean-2std, mean+2std` rows on a grid (1-D inputs only).
    #[arg(long)]
    bands: Option<PathBuf>,
    #[arg(long, default_value_t = -4.0, allow_negative_numbers = true)]
    grid_min: f64,
    #[arg(long, default_value_t = 4.0, allow_negative_numbers = true)]
    grid_max: f64,
    #[arg(long, default_value_t = 200)]
    grid_points: usize,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = PruneConfig::default().delta)]
    delta: f64,
    #[arg(long, default_value_t = PruneConfig::default().p0)]
    p0: f64,
    #[arg(long, default_value_t = 100)]
    norm_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the pruned model.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Means-only steps after pruning; needs `--data`.
    #[arg(long, default_value_t = 0)]
    fine_tune_iterations: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    header: bool,
}

#[derive(Args)]
struct PriorSamplesArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [50, 500, 5000])]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
    grid_min: f64,
    #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
    grid_max: f64,
    #[arg(long, default_value_t = 200)]
    grid_points: usize,
    #[arg(long, default_value_t = 1.0)]
    b0: f64,
    #[arg(long, default_value_t = 1.0)]
    bg: f64,
    #[arg(long, default_value_t = 1.0)]
    b_kappa: f64,
    #[arg(long, default_value_t = 2.0)]
    c_a: f64,
    #[arg(long, default_value_t = 6.0)]
    c_b: f64,
    /// Fix the slab width instead of drawing it.
    #[arg(long)]
    c2: Option<f64>,
    #[arg(long, default_value = "tanh", value_parser = parse_nonlinearity)]
    nonlinearity: Nonlinearity,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ToyGenArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    #[arg(long, default_value_t = -4.0, allow_negative_numbers = true)]
    min: f64,
    #[arg(long, default_value_t = 4.0, allow_negative_numbers = true)]
    max: f64,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckGradientsArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 1])]
    widths: Vec<usize>,
    /// One family; all four when absent.
    #[arg(long)]
    family: Option<Family>,
    #[arg(long, default_value = "regularized_horseshoe", value_parser = parse_prior)]
    prior: PriorKind,
    #[arg(long, default_value_t = 5)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    mc_samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_named<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_nonlinearity(s: &str) -> Result<Nonlinearity, String> {
    parse_named(s)
}

fn parse_prior(s: &str) -> Result<PriorKind, String> {
    parse_named(s)
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match FailureKind::of(&e) {
            FailureKind::Config | FailureKind::Data => 2,
            FailureKind::Numerical => 3,
            FailureKind::Io => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Error::Config(msg.into()).into()
}

fn print_json(v: &impl Serialize) -> Result<(), Failure> {
    let s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    println!("{s}");
    Ok(())
}

fn write_text(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn report_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(REPORT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("reports"))
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    macro_rules! apply {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    apply!(
        family,
        learning_rate,
        batch_size,
        iterations,
        mc_samples,
        adam_beta1,
        adam_beta2,
        adam_eps,
        unit_norm_projection,
        seed,
        replications,
        delta,
        p0,
        fine_tune_iterations
    );
    cfg.validate()?;
    let outcome = run_experiment(&cfg)?;
    let dir = report_dir(a.report_dir);
    for path in write_reports(&dir, &outcome)? {
        eprintln!("wrote {}", path.display());
    }
    if a.save_model {
        for rep in &outcome.replications {
            if let Some(m) = &rep.model {
                let path = dir.join(format!("{}_rep{:03}_model.json", cfg.name, rep.report.replication));
                m.save(&path)?;
                eprintln!("wrote {}", path.display());
            }
        }
    }
    if let Some(f) = outcome.first_failure() {
        let e = match f.kind {
            FailureKind::Config => Error::Config(f.message.clone()),
            FailureKind::Numerical => Error::Numerical(f.message.clone()),
            FailureKind::Data => Error::InvalidInput(f.message.clone()),
            FailureKind::Io => Error::Io(std::io::Error::other(f.message.clone())),
        };
        let mut failure = Failure::from(e);
        failure.message = format!(
            "{:?} stage failed: {} (see {})",
            f.stage,
            f.message,
            aggregate_report_path(&dir, &cfg.name).display()
        );
        return Err(failure);
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let model = SavedModel::load(&a.model)?;
    let raw = read_table(&a.data, &TableFormat { header: a.header })?;
    let st = &model.standardizer;
    if st.kept_columns.iter().any(|&c| c >= raw.input_dim()) {
        return Err(Error::InvalidInput("data columns do not match the model".into()).into());
    }
    let test = st.transform(&raw);
    let mut rng = substream(a.seed, Stream::Eval);
    let summary = test_summary(&model.spec, &model.posterior, &test, st, a.samples, &mut rng)?;
    print_json(&summary)?;
    if let Some(path) = a.bands {
        if model.spec.input_dim() != 1 || st.kept_columns.len() != 1 {
            return Err(config_error("bands need a model with one input"));
        }
        if a.grid_points < 2 || a.grid_max <= a.grid_min {
            return Err(config_error("grid needs at least two points on a nonempty interval"));
        }
        let step = (a.grid_max - a.grid_min) / (a.grid_points - 1) as f64;
        let grid = Array2::from_shape_fn((a.grid_points, 1), |(i, _)| a.grid_min + step * i as f64);
        let pred = predictive(&model.spec, &model.posterior, &st.transform_x(&grid), a.samples, &mut rng)?;
        let d = a.delimiter;
        let mut text = format!("x{d}mean{d}lower{d}upper\n");
        for r in band_table(&st.transform_x(&grid), &pred, Some(st)) {
            text.push_str(&format!("{}{d}{}{d}{}{d}{}\n", r[0], r[1], r[2], r[3]));
        }
        std::fs::write(&path, text)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct PruneOutput {
    report: hsbnn::pruning::PruneReport,
    max_prediction_shift: f64,
    pruned_widths: Vec<usize>,
}

fn cmd_prune(a: PruneArgs) -> Result<(), Failure> {
    let model = SavedModel::load(&a.model)?;
    if !model.spec.prior.has_scales() {
        return Err(config_error("the model has no unit scales to prune on"));
    }
    let cfg = PruneConfig { delta: a.delta, p0: a.p0 };
    let mut rng = substream(a.seed, Stream::Prune);
    let report = prune_report(&model.spec, &model.posterior, &cfg, a.norm_samples, &mut rng)?;
    let pruned = apply_prune(&model.spec, &model.posterior, &report, &mut rng)?;
    let mut posterior = pruned.posterior;
    if a.fine_tune_iterations > 0 {
        let data = a
            .data
            .as_ref()
            .ok_or_else(|| config_error("--fine-tune-iterations needs --data"))?;
        let raw = read_table(data, &TableFormat { header: a.header })?;
        let train = model.standardizer.transform(&raw);
        let tc = TrainConfig {
            iterations: a.fine_tune_iterations,
            learning_rate: a.learning_rate,
            seed: a.seed,
            ..TrainConfig::default()
        };
        posterior = fine_tune(&pruned.spec, &posterior, &tc, &train)?;
    }
    let widths = &pruned.spec.layer_widths;
    print_json(&PruneOutput {
        pruned_widths: widths[1..widths.len() - 1].to_vec(),
        report,
        max_prediction_shift: pruned.max_prediction_shift,
    })?;
    if let Some(out) = a.out {
        SavedModel {
            version: FORMAT_VERSION,
            spec: pruned.spec,
            posterior,
            standardizer: model.standardizer,
        }
        .save(&out)?;
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_prior_samples(a: PriorSamplesArgs) -> Result<(), Failure> {
    let cfg = PriorSampleConfig {
        widths: a.widths,
        count: a.count,
        grid_min: a.grid_min,
        grid_max: a.grid_max,
        grid_points: a.grid_points,
        b0: a.b0,
        bg: a.bg,
        b_kappa: a.b_kappa,
        c_a: a.c_a,
        c_b: a.c_b,
        c2: a.c2,
        nonlinearity: a.nonlinearity,
        seed: a.seed,
    };
    let samples = prior_sample_functions(&cfg)?;
    write_text(a.out.as_deref(), &samples.to_table(a.delimiter))
}

fn cmd_toy_gen(a: ToyGenArgs) -> Result<(), Failure> {
    if a.n == 0 || a.max <= a.min || !(a.noise_std >= 0.0) {
        return Err(config_error("need n >= 1, min < max and a non-negative noise std"));
    }
    let mut rng = substream(a.seed, Stream::Data);
    let d = toy_sine(a.n, (a.min, a.max), a.noise_std, &mut rng);
    let sep = a.delimiter;
    let mut text = format!("x{sep}y\n");
    for i in 0..d.len() {
        text.push_str(&format!("{}{sep}{}\n", d.x[[i, 0]], d.y[[i, 0]]));
    }
    write_text(a.out.as_deref(), &text)
}

#[derive(Serialize)]
struct GradientLine {
    family: Family,
    passed: bool,
    report: hsbnn::gradient::FiniteDiffReport,
}

fn cmd_check_gradients(a: CheckGradientsArgs) -> Result<(), Failure> {
    let mut spec = NetworkSpec::new(a.widths);
    spec.prior = a.prior;
    spec.validate().map_err(|e| config_error(e.to_string()))?;
    if a.batch == 0 || a.mc_samples == 0 {
        return Err(config_error("batch and mc_samples must be positive"));
    }
    let families: Vec<Family> = match a.family {
        Some(f) => vec![f],
        None => Family::ALL
            .into_iter()
            .filter(|f| *f != Family::Structured || a.prior.has_scales())
            .collect(),
    };
    let mut all_passed = true;
    for family in families {
        let mut rng = substream(a.seed, Stream::Init);
        let posterior = Posterior::init(&spec, family, &mut rng)?;
        let mut drng = substream(a.seed, Stream::Data);
        let teacher = hsbnn::data::Teacher::random(spec.input_dim(), 2, 0.1, &mut drng);
        let mut batch = teacher.sample(a.batch, &mut drng);
        if spec.output_dim() > 1 {
            batch.y = Array2::from_shape_fn((a.batch, spec.output_dim()), |(i, _)| batch.y[[i, 0]]);
        }
        let mut trng = substream(a.seed, Stream::Train);
        let noise = ElboNoise::draw(&spec, a.batch, a.mc_samples, &mut trng);
        let input = ElboInput {
            spec: &spec,
            posterior: &posterior,
            batch: &batch,
            n_total: a.batch,
            noise: &noise,
        };
        let report = finite_diff_check(&input, a.step, Tolerances::default(), |_| true)?;
        all_passed &= report.passed();
        print_json(&GradientLine {
            family,
            passed: report.passed(),
            report,
        })?;
    }
    if all_passed {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: "analytic and finite-difference gradients disagree".into(),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Prune(a) => cmd_prune(a),
        Command::PriorSamples(a) => cmd_prior_samples(a),
        Command::ToyGen(a) => cmd_toy_gen(a),
        Command::CheckGradients(a) => cmd_check_gradients(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
