use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bellman_core::bellman::{filter_lg, FilterInit, UpdateMethod, UpdateOptions};
use bellman_core::dynamics::LinearGaussianDynamics;
use bellman_core::estimation::{FitOptions, FitResult, QmleModel, ScalarModel};
use bellman_core::harness::{
    child_seed, mode_oracle, run_study, simulate, ModeOptions, StudyConfig, StudyReport, TrueParams,
};
use bellman_core::kalman::{kalman_filter, qmle_transforms};
use bellman_core::obsmodels::{HybridWeight, ObsSeries, ObservationModel};
use bellman_core::particle::{csir_estimate, csir_filter, StateSpaceModel};
use bellman_core::svleverage::{sv_default_start, sv_filter, sv_fit, sv_simulate, SvLeverageParams};
use bellman_core::Error;
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "bellman", version, about = "Bellman filter toolkit")]
struct Cli {
    /// Master seed for every random draw (default 0); for `study` it overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterKind {
    Bellman,
    Kalman,
    Csir,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Newton,
    Fisher,
    Bhhh,
    Hybrid,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a series from a registered model.
    Simulate {
        #[arg(long)]
        model: String,
        /// TOML file with c, T, Q and shape parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Run a filter over a data CSV.
    Filter {
        #[arg(long)]
        model: String,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "bellman")]
        filter: FilterKind,
        /// Update method; the model default when absent.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Weight on the expected information for `--method hybrid`.
        #[arg(long)]
        weight: Option<f64>,
        #[arg(long, default_value_t = 1000)]
        particles: usize,
    },
    /// Estimate the static parameters.
    Estimate {
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        /// TOML starting values; a data-driven start when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "bellman")]
        filter: FilterKind,
        #[arg(long, default_value_t = 1000)]
        particles: usize,
    },
    /// Run a Monte Carlo study from a TOML config.
    Study {
        #[arg(long)]
        config: PathBuf,
    },
    /// Simulate returns from the leverage SV model.
    SvSimulate {
        /// TOML file with mu, c, phi, sigma_eta and rho = [ρ0, …, ρk].
        #[arg(long)]
        params: Option<PathBuf>,
        /// Built-in parameter set (1 or 2) used when no file is given.
        #[arg(long, default_value_t = 1)]
        set: u8,
        #[arg(long, default_value_t = 5000)]
        n: usize,
    },
    /// Fit the leverage SV model to a return series.
    SvFit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        lags: usize,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Full-path mode of a short window (at most 250 observations).
    ModeOracle {
        #[arg(long)]
        model: String,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
}

/// Failure split by exit code: bad input (2) or numerical trouble (3).
enum CliError {
    Config(String),
    Numerical(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(config_err)?;
    }
    let out = cli.out.as_deref();
    let seed = cli.seed.unwrap_or(0);
    match cli.cmd {
        Cmd::Simulate { model, params, n } => cmd_simulate(&model, params.as_deref(), n, seed, out),
        Cmd::Filter { model, params, data, filter, method, weight, particles } => {
            cmd_filter(&model, params.as_deref(), &data, filter, method, weight, particles, seed, out)
        }
        Cmd::Estimate { model, data, init, filter, particles } => {
            cmd_estimate(&model, &data, init.as_deref(), filter, particles, seed, out)
        }
        Cmd::Study { config } => cmd_study(&config, cli.seed, out),
        Cmd::SvSimulate { params, set, n } => cmd_sv_simulate(params.as_deref(), set, n, seed, out),
        Cmd::SvFit { data, lags, init } => cmd_sv_fit(&data, lags, init.as_deref(), out),
        Cmd::ModeOracle { model, params, data } => cmd_mode(&model, params.as_deref(), &data, out),
    }
}

// ---------------------------------------------------------------------------
// I/O helpers

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn read_params(path: Option<&Path>) -> CliResult<TrueParams> {
    path.map(read_toml).transpose().map(Option::unwrap_or_default)
}

/// Reads the columns whose header starts with `y`; empty or `NaN` cells are
/// missing observations.
fn read_data(path: &Path) -> CliResult<ObsSeries> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(config_err)?.clone();
    let cols: Vec<usize> =
        headers.iter().enumerate().filter(|(_, h)| h.trim().starts_with('y')).map(|(i, _)| i).collect();
    if cols.is_empty() {
        return Err(config_err(format!("{}: no column named y…", path.display())));
    }
    let mut values = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(config_err)?;
        for &c in &cols {
            let cell = rec.get(c).unwrap_or("").trim();
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| config_err(format!("row {}: `{cell}` is not a number", line + 1)))?
            };
            values.push(v);
        }
    }
    Ok(ObsSeries::new(cols.len(), values)?)
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, bytes).map_err(|e| config_err(format!("{}: {e}", p.display()))),
        None => io::stdout().write_all(bytes).map_err(config_err),
    }
}

struct Csv(csv::Writer<Vec<u8>>);

impl Csv {
    fn new(header: &[String]) -> CliResult<Self> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(config_err)?;
        Ok(Csv(w))
    }

    fn row(&mut self, fields: &[String]) -> CliResult<()> {
        self.0.write_record(fields).map_err(config_err)
    }

    fn finish(self, out: Option<&Path>) -> CliResult<()> {
        let bytes = self.0.into_inner().map_err(config_err)?;
        write_output(out, &bytes)
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![prefix.to_string()]
    } else {
        (1..=n).map(|i| format!("{prefix}{i}")).collect()
    }
}

fn write_json(out: Option<&Path>, v: &serde_json::Value) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(config_err)?;
    s.push('\n');
    write_output(out, s.as_bytes())
}

fn model_parts(model: &str, params: &TrueParams) -> CliResult<(ObservationModel, LinearGaussianDynamics)> {
    let (obs, c, t, q) = params.resolve(model)?;
    Ok((obs, LinearGaussianDynamics::scalar(c, t, q)?))
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_simulate(model: &str, params: Option<&Path>, n: usize, seed: u64, out: Option<&Path>) -> CliResult<()> {
    let (obs, dynamics) = model_parts(model, &read_params(params)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, 0));
    let sim = simulate(&obs, &dynamics, n, &mut rng)?;
    let mut header = vec!["t".to_string()];
    header.extend(names("y", sim.data.dim()));
    header.push("alpha".into());
    let mut w = Csv::new(&header)?;
    for t in 0..n {
        let mut row = vec![t.to_string()];
        row.extend(sim.data.row(t).iter().map(|&v| num(v)));
        row.push(num(sim.states[t][0]));
        w.row(&row)?;
    }
    w.finish(out)
}

fn update_options(obs: &ObservationModel, method: Option<MethodArg>, weight: Option<f64>) -> CliResult<UpdateOptions> {
    let mut opts = UpdateOptions::for_model(obs);
    opts.method = match method {
        None => opts.method,
        Some(MethodArg::Newton) => UpdateMethod::Newton,
        Some(MethodArg::Fisher) => UpdateMethod::Fisher,
        Some(MethodArg::Bhhh) => UpdateMethod::Bhhh,
        Some(MethodArg::Hybrid) => match weight {
            Some(w) => UpdateMethod::Hybrid(HybridWeight::new(w)?),
            None => UpdateMethod::Hybrid(obs.hybrid_weight()?),
        },
    };
    Ok(opts)
}

#[allow(clippy::too_many_arguments)]
fn cmd_filter(
    model: &str,
    params: Option<&Path>,
    data: &Path,
    filter: FilterKind,
    method: Option<MethodArg>,
    weight: Option<f64>,
    particles: usize,
    seed: u64,
    out: Option<&Path>,
) -> CliResult<()> {
    let (obs, dynamics) = model_parts(model, &read_params(params)?)?;
    let data = read_data(data)?;
    data.validate_for(&obs)?;
    let m = dynamics.dim();
    let mut header = vec!["t".to_string()];
    if let FilterKind::Csir = filter {
        let ssm = StateSpaceModel { obs, dynamics };
        let res = csir_filter(&ssm, &data, particles, child_seed(seed, 0))?;
        header.extend(["pred_mean", "pred_median", "filt_mean", "filt_median", "ess"].map(String::from));
        let mut w = Csv::new(&header)?;
        for t in 0..data.len() {
            w.row(&[
                t.to_string(),
                num(res.pred_mean[t]),
                num(res.pred_median[t]),
                num(res.filt_mean[t]),
                num(res.filt_median[t]),
                num(res.ess[t]),
            ])?;
        }
        eprintln!("loglik {}", res.loglik);
        return w.finish(out);
    }
    header.extend(names("a_pred", m));
    header.extend(names("a_upd", m));
    header.extend(names("i_pred", m));
    header.extend(names("i_upd", m));
    header.extend(["iterations", "converged", "loglik_term"].map(String::from));
    let mut w = Csv::new(&header)?;
    let mut emit = |t: usize,
                    pred: &bellman_core::bellman::StateBelief,
                    upd: &bellman_core::bellman::StateBelief,
                    iters: usize,
                    conv: bool,
                    term: f64|
     -> CliResult<()> {
        let mut row = vec![t.to_string()];
        row.extend(pred.mean.iter().map(|&v| num(v)));
        row.extend(upd.mean.iter().map(|&v| num(v)));
        row.extend((0..m).map(|i| num(pred.info[(i, i)])));
        row.extend((0..m).map(|i| num(upd.info[(i, i)])));
        row.extend([iters.to_string(), conv.to_string(), num(term)]);
        w.row(&row)
    };
    match filter {
        FilterKind::Bellman => {
            let opts = update_options(&obs, method, weight)?;
            let steps = filter_lg(&obs, &dynamics, &data, &opts, &FilterInit::Unconditional)?;
            for (t, s) in steps.iter().enumerate() {
                emit(t, &s.predicted, &s.updated, s.iterations, s.converged, s.terms.total())?;
            }
        }
        FilterKind::Kalman => {
            let ObservationModel::LinearGaussian(lgo) = &obs else {
                return Err(config_err("the Kalman filter needs the linear-gauss model"));
            };
            let kf = kalman_filter(lgo, &dynamics, &data, &FilterInit::Unconditional)?;
            for (t, s) in kf.steps.iter().enumerate() {
                emit(t, &s.predicted, &s.updated, 0, true, s.loglik)?;
            }
        }
        FilterKind::Csir => unreachable!(),
    }
    w.finish(out)
}

fn fit_json(names: &[String], res: &FitResult, method: &str) -> serde_json::Value {
    let params: serde_json::Map<String, serde_json::Value> =
        names.iter().cloned().zip(res.params.natural().iter().map(|&v| json!(v))).collect();
    let ses: serde_json::Value = match &res.standard_errors {
        Some(se) => names.iter().cloned().zip(se.iter().map(|&v| json!(v))).collect::<serde_json::Map<_, _>>().into(),
        None => serde_json::Value::Null,
    };
    json!({
        "method": method,
        "params": params,
        "standard_errors": ses,
        "hessian_error": res.hessian_error.as_ref().map(|e| e.to_string()),
        "objective": res.objective,
        "evaluations": res.evaluations,
        "nm_iterations": res.nm_iterations,
        "polish_iterations": res.polish_iterations,
    })
}

fn cmd_estimate(
    model: &str,
    data: &Path,
    init: Option<&Path>,
    filter: FilterKind,
    particles: usize,
    seed: u64,
    out: Option<&Path>,
) -> CliResult<()> {
    let tp = read_params(init)?;
    let (obs, c, t, q) = tp.resolve(model)?;
    let data = read_data(data)?;
    data.validate_for(&obs)?;
    let fit_opts = FitOptions::default();
    let start = |family| {
        let d = ScalarModel::default_start(family, &data);
        ScalarModel { family, c: tp.c.unwrap_or(d.c), t: tp.t.unwrap_or(d.t), q: tp.q.unwrap_or(d.q) }
    };
    let value = match (&obs, filter) {
        // Linear Gaussian data: the Bellman objective is the Kalman likelihood.
        (ObservationModel::LinearGaussian(lgo), FilterKind::Bellman | FilterKind::Kalman) => {
            let init = QmleModel { d: lgo.d()[0], c, t, q, h: lgo.h()[(0, 0)] };
            let (_, res) = init.fit(data.values(), &fit_opts)?;
            fit_json(res.params.names(), &res, "kalman")
        }
        (ObservationModel::Family(f), FilterKind::Bellman) => {
            let (_, res) = start(*f).fit(&data, &UpdateOptions::default(), &fit_opts)?;
            fit_json(res.params.names(), &res, "bellman")
        }
        (ObservationModel::Family(f), FilterKind::Kalman) => {
            let qi = qmle_transforms(f, &data, false)
                .map_err(|e| config_err(format!("kalman-qmle is not available for `{model}`: {e}")))?;
            if !qi.floored.is_empty() {
                eprintln!("warning: {} zero observations floored", qi.floored.len());
            }
            let s = start(*f);
            let init = QmleModel { d: qi.offset, c: s.c, t: s.t, q: s.q, h: qi.h_start };
            let (_, res) = init.fit(qi.data.values(), &fit_opts)?;
            fit_json(res.params.names(), &res, "kalman-qmle")
        }
        (ObservationModel::Family(f), FilterKind::Csir) => {
            let s = start(*f);
            let build = |x: &[f64]| StateSpaceModel::scalar(f.with_shape(&x[3..])?, x[0], x[1], x[2]);
            let res = csir_estimate(build, &s.parameter_vector()?, &data, particles, child_seed(seed, 0), &fit_opts)?;
            fit_json(res.params.names(), &res, "csir")
        }
        (ObservationModel::LinearGaussian(_), FilterKind::Csir) => {
            return Err(config_err("CSIR estimation supports the scalar families"));
        }
    };
    write_json(out, &value)
}

fn write_series_csv(path: &Path, report: &StudyReport) -> CliResult<()> {
    let mut w = Csv::new(&["series", "method", "mae", "rmse", "error"].map(String::from))?;
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    for s in &report.series {
        w.row(&[
            s.series.to_string(),
            s.method.name().into(),
            opt(s.mae),
            opt(s.rmse),
            s.error.clone().unwrap_or_default(),
        ])?;
    }
    w.finish(Some(path))
}

fn cmd_study(config: &Path, seed: Option<u64>, out: Option<&Path>) -> CliResult<()> {
    let mut cfg: StudyConfig = read_toml(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = run_study(&cfg)?;
    for t in &report.timings {
        eprintln!(
            "{:<12} estimation {:>9.2}s  filtering {:>9.2}s",
            t.method.name(),
            t.estimation_seconds,
            t.filtering_seconds
        );
    }
    if let Some(p) = &cfg.output.timings {
        let s = serde_json::to_string_pretty(&report.timings).map_err(config_err)?;
        fs::write(p, s).map_err(config_err)?;
    }
    if let Some(p) = &cfg.output.series_csv {
        write_series_csv(Path::new(p), &report)?;
    }
    let mut s = serde_json::to_string_pretty(&report).map_err(config_err)?;
    s.push('\n');
    let target = out.map(Path::to_path_buf).or_else(|| cfg.output.report.as_ref().map(PathBuf::from));
    write_output(target.as_deref(), s.as_bytes())
}

fn cmd_sv_simulate(params: Option<&Path>, set: u8, n: usize, seed: u64, out: Option<&Path>) -> CliResult<()> {
    let p: SvLeverageParams = match (params, set) {
        (Some(path), _) => read_toml(path)?,
        (None, 1) => SvLeverageParams::study_set1(),
        (None, 2) => SvLeverageParams::study_set2(),
        (None, s) => return Err(config_err(format!("unknown parameter set {s}"))),
    };
    let sample = sv_simulate(&p, n, child_seed(seed, 0))?;
    let mut w = Csv::new(&["t", "y", "h"].map(String::from))?;
    for t in 0..n {
        w.row(&[t.to_string(), num(sample.y[t]), num(sample.h[t])])?;
    }
    w.finish(out)
}

fn cmd_sv_fit(data: &Path, lags: usize, init: Option<&Path>, out: Option<&Path>) -> CliResult<()> {
    let data = read_data(data)?;
    if data.dim() != 1 {
        return Err(config_err("sv-fit needs a single return column"));
    }
    let y = data.values();
    let start = match init {
        Some(p) => read_toml::<SvLeverageParams>(p)?,
        None => sv_default_start(y, lags),
    };
    if start.k() != lags {
        return Err(config_err(format!("starting values have {} lags, --lags is {lags}", start.k())));
    }
    let opts = UpdateOptions::default();
    let f = sv_fit(y, &start, &opts, &FitOptions::default())?;
    let filtered = sv_filter(&f.params, y, &opts)?;
    let mut v = fit_json(f.fit.params.names(), &f.fit, "bellman");
    v["bic"] = json!(f.bic);
    v["lags"] = json!(lags);
    v["h_filtered_last"] = json!(filtered.h_filtered(y.len(), &f.params).last());
    write_json(out, &v)
}

fn cmd_mode(model: &str, params: Option<&Path>, data: &Path, out: Option<&Path>) -> CliResult<()> {
    let (obs, dynamics) = model_parts(model, &read_params(params)?)?;
    let data = read_data(data)?;
    let prior = FilterInit::Unconditional.belief(&dynamics)?;
    let mode = mode_oracle(&obs, &dynamics, &data, &prior, None, &ModeOptions::default())?;
    let mut header = vec!["t".to_string()];
    header.extend(names("mode", dynamics.dim()));
    let mut w = Csv::new(&header)?;
    for (t, a) in mode.path.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(a.iter().map(|&v| num(v)));
        w.row(&row)?;
    }
    w.finish(out)
}
