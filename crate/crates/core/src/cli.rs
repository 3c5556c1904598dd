//! Command-line front end.
//!
//! Each subcommand prints a short human-readable summary on stdout and, with
//! `--out`, writes an artifact holding the resolved configuration, seed,
//! toolkit version, wall-clock duration and the result. JSON is the full
//! record; CSV is a flat projection of the result.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::activations::{dropout_mean_check, serlu_f_min, ActivationKind, ActivationSpec, SERLU_ALPHA, SERLU_LAMBDA};
use crate::analysis::{grid_scan, jacobian_at, solve_serlu_params, DomainBox, Interval, JACOBIAN_STEP};
use crate::data::{default_data_dir, load_mnist, DATA_DIR_ENV};
use crate::error::{Error, Result};
use crate::moments::{moment_map_montecarlo, moment_map_quadrature, moment_map_serlu, MomentPair, WeightStats};
use crate::nn::{evaluate, train_with, Network, NetworkConfig, TrainConfig};
use crate::VERSION;

#[derive(Debug, Parser)]
#[command(name = "serlu", version, about = "SERLU activation analysis and MNIST training toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the SERLU (alpha, lambda) that fix a target mean and variance.
    SolveParams(SolveParamsArgs),
    /// Scan the moment map over a 4-D box and report its extremes.
    GridScan(GridScanArgs),
    /// Evaluate the mean/variance map at one point.
    MomentMap(MomentMapArgs),
    /// Jacobian of the moment map and its spectral norm.
    Jacobian(JacobianArgs),
    /// Train the dense MNIST classifier.
    TrainFnn(TrainFnnArgs),
    /// Monte Carlo check that shift-dropout preserves the mean.
    DropoutCheck(DropoutCheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    /// Write the artifact to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PointArgs {
    #[arg(long, default_value_t = 0.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub nu: f64,
    #[arg(long, default_value_t = 0.0)]
    pub omega: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
}

impl PointArgs {
    fn resolve(&self) -> Result<(MomentPair, WeightStats)> {
        Ok((MomentPair::new(self.mu, self.nu)?, WeightStats::new(self.omega, self.tau)?))
    }
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(allow_negative_numbers = true)]
pub struct SolveParamsArgs {
    #[arg(long, default_value_t = 0.0)]
    pub target_mu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub target_nu: f64,
    #[arg(long, default_value_t = 0.0)]
    pub omega: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Max-norm residual at which the solver stops.
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    #[command(flatten)]
    #[serde(skip)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(allow_negative_numbers = true)]
pub struct GridScanArgs {
    #[arg(long, default_value_t = -0.2)]
    pub mu_min: f64,
    #[arg(long, default_value_t = 0.2)]
    pub mu_max: f64,
    #[arg(long, default_value_t = 0.8)]
    pub nu_min: f64,
    #[arg(long, default_value_t = 1.5)]
    pub nu_max: f64,
    #[arg(long, default_value_t = -0.1)]
    pub omega_min: f64,
    #[arg(long, default_value_t = 0.1)]
    pub omega_max: f64,
    #[arg(long, default_value_t = 0.9)]
    pub tau_min: f64,
    #[arg(long, default_value_t = 1.2)]
    pub tau_max: f64,
    #[arg(long, default_value_t = 0.02)]
    pub step: f64,
    #[arg(long, default_value_t = ActivationKind::Serlu)]
    pub activation: ActivationKind,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Closed form (SERLU only).
    Closed,
    Quadrature,
    /// Monte Carlo with jackknife standard errors.
    Mc,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(allow_negative_numbers = true)]
pub struct MomentMapArgs {
    #[command(flatten)]
    pub point: PointArgs,
    #[arg(long, value_enum, default_value_t = Method::Closed)]
    pub method: Method,
    #[arg(long, default_value_t = ActivationKind::Serlu)]
    pub activation: ActivationKind,
    /// Monte Carlo sample count.
    #[arg(long, default_value_t = 1_000_000)]
    pub n: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(allow_negative_numbers = true)]
pub struct JacobianArgs {
    #[command(flatten)]
    pub point: PointArgs,
    #[arg(long, default_value_t = ActivationKind::Serlu)]
    pub activation: ActivationKind,
    /// Central-difference step.
    #[arg(long, default_value_t = JACOBIAN_STEP)]
    pub h: f64,
    #[command(flatten)]
    #[serde(skip)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(allow_negative_numbers = true)]
pub struct TrainFnnArgs {
    #[arg(long, default_value_t = ActivationKind::Serlu)]
    pub activation: ActivationKind,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Dropout rate on every hidden layer (0 disables dropout).
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub decay: f64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Units per hidden layer.
    #[arg(long, default_value_t = 200)]
    pub hidden: usize,
    /// Number of hidden layers.
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    /// Cap every split at this many samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// MNIST directory (defaults to `$SERLU_MNIST_DIR` or `data/mnist`).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Save trained parameters as JSON.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Save the per-epoch history as CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(allow_negative_numbers = true)]
pub struct DropoutCheckArgs {
    /// Keep probability.
    #[arg(long, default_value_t = 0.9)]
    pub q: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub n: u64,
    /// Value dropped units are shifted to (SERLU minimum by default).
    #[arg(long)]
    pub fmin: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub output: OutputArgs,
}

/// What a command produced.
struct Outcome {
    summary: String,
    seed: Option<u64>,
    config: Value,
    result: Value,
    csv: String,
    /// Non-error failure (e.g. a statistical check that did not pass).
    failure: Option<String>,
}

/// Run the CLI on `args` and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return e.exit_code();
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    match execute(&cli.command) {
        Ok(0) => 0,
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            if matches!(e, Error::Config(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn execute(cmd: &Command) -> Result<i32> {
    let start = Instant::now();
    let (name, output, outcome) = match cmd {
        Command::SolveParams(a) => ("solve-params", &a.output, solve_params(a)?),
        Command::GridScan(a) => ("grid-scan", &a.output, grid(a)?),
        Command::MomentMap(a) => ("moment-map", &a.output, moment_map(a)?),
        Command::Jacobian(a) => ("jacobian", &a.output, jacobian(a)?),
        Command::TrainFnn(a) => ("train-fnn", &a.output, train_fnn(a)?),
        Command::DropoutCheck(a) => ("dropout-check", &a.output, dropout_check(a)?),
    };
    let duration = start.elapsed().as_secs_f64();
    println!("{}", outcome.summary);
    if let Some(path) = &output.out {
        let body = match output.format {
            Format::Json => {
                let artifact = json!({
                    "command": name,
                    "version": VERSION,
                    "seed": outcome.seed,
                    "config": outcome.config,
                    "result": outcome.result,
                    "duration_seconds": duration,
                });
                let mut s = serde_json::to_string_pretty(&artifact)?;
                s.push('\n');
                s
            }
            Format::Csv => outcome.csv,
        };
        std::fs::write(path, body)?;
    }
    if let Some(msg) = outcome.failure {
        eprintln!("error: check: {msg}");
        return Ok(1);
    }
    Ok(0)
}

/// Format with six significant digits.
fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = 5 - x.abs().log10().floor() as i32;
    format!("{:.*}", digits.max(0) as usize, x)
}

/// Fixed six decimals without a negative zero.
fn fixed6(x: f64) -> String {
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

fn csv_of(fields: &[(&str, String)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(fields.iter().map(|(k, _)| *k))?;
    w.write_record(fields.iter().map(|(_, v)| v.as_str()))?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn solve_params(a: &SolveParamsArgs) -> Result<Outcome> {
    let target = MomentPair::new(a.target_mu, a.target_nu)?;
    let w = WeightStats::new(a.omega, a.tau)?;
    let r = solve_serlu_params(&target, &w, a.tol)?;
    Ok(Outcome {
        summary: format!("alpha = {}\nlambda = {}\nresidual = {:e}", sig6(r.alpha), sig6(r.lambda), r.residual),
        seed: None,
        config: serde_json::to_value(a)?,
        result: serde_json::to_value(r)?,
        csv: csv_of(&[
            ("alpha", format!("{:?}", r.alpha)),
            ("lambda", format!("{:?}", r.lambda)),
            ("residual", format!("{:?}", r.residual)),
            ("iterations", r.iterations.to_string()),
        ])?,
        failure: None,
    })
}

fn grid(a: &GridScanArgs) -> Result<Outcome> {
    let domain = DomainBox {
        mu: Interval::new(a.mu_min, a.mu_max),
        nu: Interval::new(a.nu_min, a.nu_max),
        omega: Interval::new(a.omega_min, a.omega_max),
        tau: Interval::new(a.tau_min, a.tau_max),
        step: a.step,
    };
    domain.validate()?;
    if a.workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    let spec = ActivationSpec::new(a.activation);
    let r = grid_scan(&spec, &domain, a.workers)?;
    let mut result = r.to_flat_json();
    result["extremes_on_boundary"] = json!(r.extremes_on_boundary(&domain));
    result["maps_into_domain"] = json!(r.maps_into(&domain));
    let summary = format!(
        "points: {}\nmax spectral norm: {:.6}\nmu~ range: [{:.6}, {:.6}]\nnu~ range: [{:.6}, {:.6}]",
        r.points_evaluated,
        r.max_spectral_norm.value,
        r.lower_bound_mu_tilde.value,
        r.upper_bound_mu_tilde.value,
        r.lower_bound_nu_tilde.value,
        r.upper_bound_nu_tilde.value
    );
    Ok(Outcome {
        summary,
        seed: None,
        config: serde_json::to_value(a)?,
        result,
        csv: r.to_csv()?,
        failure: None,
    })
}

fn moment_map(a: &MomentMapArgs) -> Result<Outcome> {
    let (p, w) = a.point.resolve()?;
    let spec = ActivationSpec::new(a.activation);
    let (out, result, seed) = match a.method {
        Method::Closed => {
            if a.activation != ActivationKind::Serlu {
                return Err(Error::Config(format!("closed form is only available for serlu, not {}", a.activation)));
            }
            let m = moment_map_serlu(&p, &w, &spec)?;
            (m, serde_json::to_value(m)?, None)
        }
        Method::Quadrature => {
            let m = moment_map_quadrature(&spec, &p, &w)?;
            (m, serde_json::to_value(m)?, None)
        }
        Method::Mc => {
            let m = moment_map_montecarlo(&spec, &p, &w, a.n, a.seed)?;
            (m.moments, serde_json::to_value(m)?, Some(a.seed))
        }
    };
    Ok(Outcome {
        summary: format!("{} {}", fixed6(out.mu), fixed6(out.nu)),
        seed,
        config: serde_json::to_value(a)?,
        result,
        csv: csv_of(&[("mu_tilde", format!("{:?}", out.mu)), ("nu_tilde", format!("{:?}", out.nu))])?,
        failure: None,
    })
}

fn jacobian(a: &JacobianArgs) -> Result<Outcome> {
    let (p, w) = a.point.resolve()?;
    let j = jacobian_at(&ActivationSpec::new(a.activation), &p, &w, a.h)?;
    let m = j.matrix();
    Ok(Outcome {
        summary: format!(
            "{:>10.6} {:>10.6}\n{:>10.6} {:>10.6}\nspectral norm: {:.6}",
            m[0][0], m[0][1], m[1][0], m[1][1], j.spectral_norm
        ),
        seed: None,
        config: serde_json::to_value(a)?,
        result: serde_json::to_value(j)?,
        csv: csv_of(&[
            ("d_mu_d_mu", format!("{:?}", j.d_mu_d_mu)),
            ("d_mu_d_nu", format!("{:?}", j.d_mu_d_nu)),
            ("d_nu_d_mu", format!("{:?}", j.d_nu_d_mu)),
            ("d_nu_d_nu", format!("{:?}", j.d_nu_d_nu)),
            ("spectral_norm", format!("{:?}", j.spectral_norm)),
        ])?,
        failure: None,
    })
}

fn train_fnn(a: &TrainFnnArgs) -> Result<Outcome> {
    if !(0.0..1.0).contains(&a.dropout) {
        return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {}", a.dropout)));
    }
    if a.depth == 0 || a.hidden == 0 {
        return Err(Error::Config("hidden width and depth must be positive".into()));
    }
    let dir = a.data_dir.clone().unwrap_or_else(default_data_dir);
    let mut splits = load_mnist(&dir).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{msg} (set --data-dir or {DATA_DIR_ENV})")),
        other => other,
    })?;
    if let Some(n) = a.limit {
        if n == 0 {
            return Err(Error::Config("limit must be at least 1".into()));
        }
        splits.train = splits.train.take(n);
        splits.validation = splits.validation.take(n);
        splits.test = splits.test.map(|t| t.take(n));
    }
    let mut sizes = vec![splits.train.features()];
    sizes.extend(std::iter::repeat_n(a.hidden, a.depth));
    sizes.push(crate::data::NUM_CLASSES);
    let net_cfg = NetworkConfig {
        sizes,
        activation: ActivationSpec::new(a.activation),
        keep_prob: (a.dropout > 0.0).then_some(1.0 - a.dropout),
        seed: a.seed,
    };
    let train_cfg = TrainConfig {
        learning_rate: a.lr,
        decay: a.decay,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        workers: a.workers,
        ..TrainConfig::default()
    };
    let mut net = Network::new(&net_cfg)?;
    let history = train_with(&mut net, &splits.train, &splits.validation, &train_cfg, |e| {
        eprintln!(
            "epoch {:>3}  train_loss {:.6}  val_loss {:.6}  val_acc {:.4}",
            e.epoch, e.train_loss, e.val_loss, e.val_acc
        );
    })?;
    let (train_loss, train_acc) = evaluate(&net, &splits.train)?;
    let test = match &splits.test {
        Some(t) if !t.is_empty() => Some(evaluate(&net, t)?),
        _ => None,
    };
    if let Some(p) = &a.model {
        net.save(p)?;
    }
    let history_csv = history.to_csv()?;
    if let Some(p) = &a.history {
        std::fs::write(p, &history_csv)?;
    }
    let last = history.last();
    let summary = match last {
        Some(e) => format!(
            "epochs: {}\nfinal val_loss: {:.6}\nfinal val_acc: {:.4}\ntrain_acc: {:.4}",
            e.epoch, e.val_loss, e.val_acc, train_acc
        ),
        None => format!("epochs: 0\ntrain_acc: {train_acc:.4}"),
    };
    let result = json!({
        "history": history.epochs,
        "final_val_loss": last.map(|e| e.val_loss),
        "final_val_acc": last.map(|e| e.val_acc),
        "train_loss": train_loss,
        "train_acc": train_acc,
        "test_loss": test.map(|t| t.0),
        "test_acc": test.map(|t| t.1),
        "network": net_cfg,
        "train_config": train_cfg,
    });
    let mut config = serde_json::to_value(a)?;
    config["data_dir"] = json!(dir);
    Ok(Outcome {
        summary,
        seed: Some(a.seed),
        config,
        result,
        csv: history_csv,
        failure: None,
    })
}

fn dropout_check(a: &DropoutCheckArgs) -> Result<Outcome> {
    let f_min = a.fmin.unwrap_or_else(|| serlu_f_min(SERLU_ALPHA, SERLU_LAMBDA));
    let r = dropout_mean_check(a.q, f_min, a.n, a.seed)?;
    let mut summary = format!(
        "q = {}  f_min = {}\ninput mean: {:.6}\noutput mean: {:.6}\nmean shift: {:e} (se {:e})\noutput variance: {:.6} (predicted {:.6})",
        r.q, r.f_min, r.input_mean, r.output_mean, r.mean_shift, r.standard_error, r.output_variance, r.predicted_output_variance
    );
    if let Some(gap) = r.inverted_max_abs_diff {
        summary.push_str(&format!("\nmax gap to inverted dropout: {gap:e}"));
    }
    summary.push_str(if r.passes { "\nPASS" } else { "\nFAIL" });
    let failure = (!r.passes).then(|| format!("mean shift {:e} exceeds 3 standard errors ({:e})", r.mean_shift, r.standard_error));
    let mut config = serde_json::to_value(a)?;
    config["fmin"] = json!(f_min);
    Ok(Outcome {
        summary,
        seed: Some(a.seed),
        config,
        result: serde_json::to_value(r)?,
        csv: csv_of(&[
            ("q", format!("{:?}", r.q)),
            ("f_min", format!("{:?}", r.f_min)),
            ("n", r.n.to_string()),
            ("input_mean", format!("{:?}", r.input_mean)),
            ("output_mean", format!("{:?}", r.output_mean)),
            ("mean_shift", format!("{:?}", r.mean_shift)),
            ("standard_error", format!("{:?}", r.standard_error)),
            ("passes", r.passes.to_string()),
        ])?,
        failure,
    })
}
