use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use robust_rnn::benchmark::{self, DatasetConfig};
use robust_rnn::certificates::{self, CertificateFile, LtiSystem};
use robust_rnn::evaluation::{self, AttackConfig, RobustnessReport, SummaryRow, SweepRow};
use robust_rnn::models::io::{load_model, save_model};
use robust_rnn::models::{init_feasible, Dims, Model, ModelKind, SeqBatch};
use robust_rnn::training::{self, EpochRecord, TrainConfig};
use robust_rnn::Error;

const THREADS_ENV: &str = "ROBUST_RNN_THREADS";
const SEED_ENV: &str = "ROBUST_RNN_SEED";

#[derive(Parser)]
#[command(name = "robust-rnn", version, about = "Train, certify and stress-test robust recurrent models")]
struct Cli {
    /// Suppress per-epoch progress on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the mass-spring-damper benchmark and write a dataset directory.
    Datagen(DatagenArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// NSE sweep over input amplitudes; writes one CSV row per model, sigma and realization.
    Eval(EvalArgs),
    /// Gradient-ascent lower bound on a model's incremental gain.
    Attack(AttackArgs),
    /// Check a model's certificate and bisect its tightest gain bound.
    Certify(CertifyArgs),
    /// Embed an LTI system or a ci-RNN as a robust-star model.
    Embed(EmbedArgs),
    /// Aggregate training histories and sweep results into plot-ready tables.
    ExportPlots(ExportArgs),
}

#[derive(Args)]
struct DatagenArgs {
    /// Dataset configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_batches: Option<usize>,
    #[arg(long)]
    train_len: Option<usize>,
    #[arg(long)]
    val_len: Option<usize>,
    #[arg(long)]
    test_len: Option<usize>,
    /// Comma-separated test input amplitudes.
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    #[arg(long)]
    realizations: Option<usize>,
}

/// `train` configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainRunConfig {
    model: ModelKind,
    n: usize,
    q: usize,
    gamma: Option<f64>,
    train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig { model: ModelKind::RobustStar, n: 10, q: 10, gamma: None, train: TrainConfig::default() }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `datagen`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.json, certificate.json, history.csv and run.json.
    #[arg(long)]
    out: PathBuf,
    /// Training configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// rnn, lstm, srnn, cirnn, robust-star or robust-gamma.
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    gamma: Option<f64>,
    /// State dimension.
    #[arg(long)]
    n: Option<usize>,
    /// Number of nonlinearity channels (robust kinds).
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Start from this model file instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model files; each is labelled by its file stem, or by its directory
    /// when the stem is `model`.
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    /// Dataset directory; its configuration and seed drive the test sets.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated input amplitudes; regenerates the test sets.
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    #[arg(long)]
    realizations: Option<usize>,
    #[arg(long)]
    test_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sweep CSV (model,sigma_u,realization,nse).
    #[arg(long)]
    out: PathBuf,
    /// Also attack every model and write (model,nse_median,gamma_hat,gamma_cert).
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Amplitude whose median NSE goes into the summary.
    #[arg(long, default_value_t = 3.0)]
    nominal_sigma: f64,
    /// Attack configuration (JSON) for the summary.
    #[arg(long)]
    attack_config: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    /// Attack configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    /// Sequence length.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// Relative bisection tolerance.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Certificate path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct EmbedSource {
    /// LTI system JSON with matrices A, B, C, D.
    #[arg(long)]
    lti: Option<PathBuf>,
    /// ci-RNN model file carrying its contraction certificate P.
    #[arg(long)]
    cirnn: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    source: EmbedSource,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Also write the certificate here.
    #[arg(long)]
    certificate: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Training histories (validation NSE against epochs).
    #[arg(long, num_args = 1..)]
    history: Vec<PathBuf>,
    /// Sweep CSVs from `eval` (boxplot statistics per model and sigma).
    #[arg(long, num_args = 1..)]
    sweep: Vec<PathBuf>,
    /// Summary CSVs from `eval --summary` (NSE against gain).
    #[arg(long, num_args = 1..)]
    summary: Vec<PathBuf>,
    /// Models to simulate on one test sequence.
    #[arg(long, num_args = 1.., requires = "data")]
    models: Vec<PathBuf>,
    /// Dataset directory for the trajectory table.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    trajectory_sigma: f64,
    #[arg(long, default_value_t = 0)]
    realization: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug)]
enum CliError {
    /// Bad arguments, configs or input files; exit code 1.
    Validation(String),
    /// Failure while running; exit code 2.
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::Dimension { .. } | Error::Format { .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(validation(format!("missing file: {}", path.display())))
    }
}

fn require_dir(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(validation(format!("missing directory: {}", path.display())))
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| validation(format!("{}: {e}", path.display())))
}

fn read_model(path: &Path) -> CliResult<Model> {
    require_file(path)?;
    load_model(path).map_err(|e| validation(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> CliResult<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
            Ok(())
        }
    }
}

/// Flag, then environment, then file value.
fn master_seed(flag: Option<u64>, file: u64) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| validation(format!("{SEED_ENV} must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(file),
    }
}

fn label_for(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if matches!(stem.as_str(), "model" | "history" | "sweep" | "summary") {
        if let Some(dir) = path.parent().and_then(|p| p.file_name()) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

fn datagen(a: DatagenArgs) -> CliResult<()> {
    let mut cfg: DatasetConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => DatasetConfig::default(),
    };
    cfg.seed = master_seed(a.seed, cfg.seed)?;
    if let Some(v) = a.train_batches {
        cfg.train_batches = v;
    }
    if let Some(v) = a.train_len {
        cfg.train_len = v;
    }
    if let Some(v) = a.val_len {
        cfg.val_len = v;
    }
    if let Some(v) = a.test_len {
        cfg.test_len = v;
    }
    if let Some(v) = a.sigmas {
        cfg.test_sigmas = v;
    }
    if let Some(v) = a.realizations {
        cfg.test_realizations = v;
    }
    cfg.validate()?;
    let ds = benchmark::make_dataset(&cfg)?;
    benchmark::write_dataset(&a.out, &cfg, &ds)?;
    Ok(())
}

fn progress_line(r: &EpochRecord) -> String {
    let margin = r.lmi_margin.map_or("-".to_string(), |m| format!("{m:.3e}"));
    format!(
        "epoch {:>4}  loss {:.4e}  val_nse {:.4}  alpha {:.1e}  lr {:.2e}  margin {margin}",
        r.epoch, r.mean_batch_loss, r.val_nse, r.alpha, r.lr
    )
}

fn write_certificate(path: &Path, model: &Model) -> CliResult<Option<f64>> {
    let Some(b) = model.certificate() else { return Ok(None) };
    let bound = match evaluation::certified_bound(model) {
        Ok(g) => g,
        Err(Error::Infeasible(_)) => None,
        Err(e) => return Err(e.into()),
    };
    write_json(path, &CertificateFile::from_bundle(&b, bound)?)?;
    Ok(bound)
}

fn train(a: TrainArgs, quiet: bool) -> CliResult<()> {
    let mut rc: TrainRunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainRunConfig::default(),
    };
    if let Some(v) = a.model {
        rc.model = v;
    }
    if let Some(v) = a.gamma {
        rc.gamma = Some(v);
    }
    if let Some(v) = a.n {
        rc.n = v;
    }
    if let Some(v) = a.q {
        rc.q = v;
    }
    if let Some(v) = a.lr {
        rc.train.lr0 = v;
    }
    if let Some(v) = a.patience {
        rc.train.patience = v;
    }
    if let Some(v) = a.max_epochs {
        rc.train.max_epochs = v;
    }
    rc.train.seed = master_seed(a.seed, rc.train.seed)?;
    rc.train.validate()?;
    if rc.model == ModelKind::RobustGamma && rc.gamma.is_none() {
        return Err(validation("robust-gamma needs --gamma or a 'gamma' field in the config"));
    }
    if rc.model != ModelKind::RobustGamma && rc.gamma.is_some() {
        return Err(validation(format!("gamma is only meaningful for robust-gamma, not {}", rc.model)));
    }

    require_dir(&a.data)?;
    let (_, ds) = benchmark::read_dataset(&a.data).map_err(|e| validation(e.to_string()))?;
    let (m, p) = (ds.val.u.ncols(), ds.val.y.ncols());
    let model0 = match &a.init {
        Some(path) => {
            let model = read_model(path)?;
            if model.kind() != rc.model {
                return Err(validation(format!(
                    "{}: model kind is {}, training asked for {}",
                    path.display(),
                    model.kind(),
                    rc.model
                )));
            }
            if !training::is_feasible(&model)? {
                return Err(CliError::Runtime(format!("{}: checkpoint is not strictly feasible", path.display())));
            }
            model
        }
        None => {
            let q = if matches!(rc.model, ModelKind::RobustStar | ModelKind::RobustGamma) { rc.q } else { rc.n };
            let seed = robust_rnn::seeds::derive_seed(rc.train.seed, "init", 0);
            init_feasible(rc.model, Dims { n: rc.n, q, m, p }, rc.gamma, seed)?
        }
    };

    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Runtime(format!("{}: {e}", a.out.display())))?;
    write_json(&a.out.join("run.json"), &rc)?;
    let (model, history) = training::train(&model0, &ds.train, &ds.val, &rc.train, |r| {
        if !quiet {
            println!("{}", progress_line(r));
        }
        if let Some(w) = &r.warning {
            eprintln!("warning: epoch {}: {w}", r.epoch);
        }
    })?;
    save_model(&a.out.join("model.json"), &model)?;
    history.write_csv(&a.out.join("history.csv"))?;
    let bound = write_certificate(&a.out.join("certificate.json"), &model)?;
    if !quiet {
        let b = bound.map_or(String::new(), |g| format!(", certified gain {g:.6}"));
        println!("best val_nse {:.4} after {} epochs{b}", history.best_val_nse(), history.records.len());
    }
    Ok(())
}

fn load_models(paths: &[PathBuf]) -> CliResult<Vec<(String, Model)>> {
    let mut out: Vec<(String, Model)> = Vec::new();
    for p in paths {
        let label = label_for(p);
        if out.iter().any(|(l, _)| *l == label) {
            return Err(validation(format!("two models share the label '{label}' ({})", p.display())));
        }
        out.push((label, read_model(p)?));
    }
    Ok(out)
}

fn test_sets(
    data: Option<&Path>,
    sigmas: Option<Vec<f64>>,
    realizations: Option<usize>,
    test_len: Option<usize>,
    seed: Option<u64>,
) -> CliResult<Vec<(f64, Vec<SeqBatch>)>> {
    let regenerate = sigmas.is_some() || realizations.is_some() || test_len.is_some() || seed.is_some();
    let mut cfg = match data {
        Some(dir) => {
            require_dir(dir)?;
            if !regenerate {
                let (_, ds) = benchmark::read_dataset(dir).map_err(|e| validation(e.to_string()))?;
                return Ok(ds.tests);
            }
            benchmark::read_manifest(dir).map_err(|e| validation(e.to_string()))?.config
        }
        None => DatasetConfig::default(),
    };
    cfg.seed = master_seed(seed, cfg.seed)?;
    if let Some(v) = sigmas {
        cfg.test_sigmas = v;
    }
    if let Some(v) = realizations {
        cfg.test_realizations = v;
    }
    if let Some(v) = test_len {
        cfg.test_len = v;
    }
    Ok(benchmark::make_test_sets(&cfg)?)
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let models = load_models(&a.models)?;
    let attack_cfg: AttackConfig = match &a.attack_config {
        Some(p) => read_json(p)?,
        None => AttackConfig::default(),
    };
    attack_cfg.validate()?;
    let tests = test_sets(a.data.as_deref(), a.sigmas, a.realizations, a.test_len, a.seed)?;
    let rows = evaluation::nse_sweep(&models, &tests)?;
    write_text(&a.out, &evaluation::sweep_csv(&rows))?;
    if let Some(path) = &a.summary {
        if !tests.iter().any(|(s, _)| *s == a.nominal_sigma) {
            return Err(validation(format!("nominal sigma {} is not in the sweep grid", a.nominal_sigma)));
        }
        let mut summary = Vec::new();
        for (name, model) in &models {
            let rep = evaluation::lipschitz_attack(model, &attack_cfg)?;
            summary.push(SummaryRow {
                model: name.clone(),
                nse_median: evaluation::median_nse(&rows, name, a.nominal_sigma),
                gamma_hat: rep.gamma_hat,
                gamma_cert: rep.gamma_cert,
            });
        }
        write_text(path, &evaluation::summary_csv(&summary))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AttackOutput {
    model: String,
    config: AttackConfig,
    #[serde(flatten)]
    report: RobustnessReport,
    consistent: bool,
}

fn attack(a: AttackArgs) -> CliResult<()> {
    let model = read_model(&a.model)?;
    let mut cfg: AttackConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => AttackConfig::default(),
    };
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.restarts {
        cfg.restarts = v;
    }
    if let Some(v) = a.step {
        cfg.step = v;
    }
    if let Some(v) = a.horizon {
        cfg.horizon = v;
    }
    cfg.seed = master_seed(a.seed, cfg.seed)?;
    cfg.validate()?;
    let report = evaluation::lipschitz_attack(&model, &cfg)?;
    if report.reinflations > 0 {
        eprintln!("warning: perturbation collapsed {} times and was redrawn", report.reinflations);
    }
    let consistent = report.is_consistent();
    emit_json(
        a.out.as_deref(),
        &AttackOutput { model: a.model.display().to_string(), config: cfg, report: report.clone(), consistent },
    )?;
    if !consistent {
        return Err(CliError::Runtime(format!(
            "attack found gain {} above the certified bound {:?}",
            report.gamma_hat, report.gamma_cert
        )));
    }
    Ok(())
}

fn certify(a: CertifyArgs) -> CliResult<()> {
    if a.tol.is_nan() || a.tol <= 0.0 {
        return Err(validation(format!("--tol must be positive, got {}", a.tol)));
    }
    let model = read_model(&a.model)?;
    let Some(b) = model.certificate() else {
        return Err(validation(format!("{}: {} models carry no certificate", a.model.display(), model.kind())));
    };
    let report = certificates::feasibility_margin(&b)?;
    if !report.feasible {
        let cert = CertificateFile::from_bundle(&b, None)?;
        emit_json(a.out.as_deref(), &cert)?;
        return Err(CliError::Runtime(format!(
            "{}: certificate does not hold (lmi margin {:e}, P margin {:e}, lambda min {:e})",
            a.model.display(),
            report.lmi_margin,
            report.p_margin,
            report.lambda_min
        )));
    }
    let bound = match certificates::certified_gamma(&b, a.tol) {
        Ok(g) => Some(b.gamma.map_or(g, |own| own.min(g))),
        Err(Error::Infeasible(_)) => b.gamma,
        Err(e) => return Err(e.into()),
    };
    emit_json(a.out.as_deref(), &CertificateFile::from_bundle(&b, bound)?)
}

fn embed(a: EmbedArgs) -> CliResult<()> {
    let bundle = if let Some(p) = &a.source.lti {
        let sys: LtiSystem = read_json(p)?;
        sys.validate()?;
        certificates::embed_lti(&sys)?
    } else {
        let p = a.source.cirnn.as_ref().expect("clap enforces one source");
        let Model::CiRnn(c) = read_model(p)? else {
            return Err(validation(format!("{}: expected a cirnn or srnn model", p.display())));
        };
        certificates::embed_cirnn(&c, &c.p)?
    };
    if !certificates::is_feasible(&bundle)? {
        return Err(CliError::Runtime("embedded model fails its certificate".into()));
    }
    let model = Model::Robust(bundle.clone());
    save_model(&a.out, &model)?;
    if let Some(p) = &a.certificate {
        write_json(p, &CertificateFile::from_bundle(&bundle, None)?)?;
    }
    Ok(())
}

fn read_csv(path: &Path, header: &str) -> CliResult<Vec<Vec<String>>> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(header) {
        return Err(validation(format!("{}: expected header '{header}'", path.display())));
    }
    Ok(lines.map(|l| l.split(',').map(|s| s.trim().to_string()).collect()).collect())
}

fn parse_f64(path: &Path, s: &str) -> CliResult<f64> {
    s.parse().map_err(|_| validation(format!("{}: '{s}' is not a number", path.display())))
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn boxplot_table(rows: &[SweepRow]) -> String {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(m, s)| *m == r.model && *s == r.sigma_u) {
            keys.push((r.model.clone(), r.sigma_u));
        }
    }
    let mut out = String::from("model,sigma_u,count,min,q1,median,q3,max\n");
    for (model, sigma) in keys {
        let mut v: Vec<f64> = rows.iter().filter(|r| r.model == model && r.sigma_u == sigma).map(|r| r.nse).collect();
        v.sort_by(f64::total_cmp);
        let _ = writeln!(
            out,
            "{model},{sigma},{},{:e},{:e},{:e},{:e},{:e}",
            v.len(),
            v[0],
            quantile(&v, 0.25),
            quantile(&v, 0.5),
            quantile(&v, 0.75),
            v[v.len() - 1]
        );
    }
    out
}

fn export_plots(a: ExportArgs) -> CliResult<()> {
    if a.history.is_empty() && a.sweep.is_empty() && a.summary.is_empty() && a.models.is_empty() {
        return Err(validation("nothing to export: pass --history, --sweep, --summary or --models"));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Runtime(format!("{}: {e}", a.out.display())))?;

    if !a.history.is_empty() {
        let mut out = String::from("model,epoch,val_nse,seconds\n");
        for p in &a.history {
            let label = label_for(p);
            for row in read_csv(p, training::HISTORY_HEADER)? {
                if row.len() != 7 {
                    return Err(validation(format!("{}: expected 7 columns", p.display())));
                }
                let _ = writeln!(out, "{label},{},{},{}", row[0], row[2], row[6]);
            }
        }
        write_text(&a.out.join("validation_curves.csv"), &out)?;
    }

    if !a.sweep.is_empty() {
        let mut rows = Vec::new();
        for p in &a.sweep {
            require_file(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| validation(format!("{}: {e}", p.display())))?;
            rows.extend(evaluation::parse_sweep_csv(p, &text).map_err(|e| validation(e.to_string()))?);
        }
        write_text(&a.out.join("nse_boxplots.csv"), &boxplot_table(&rows))?;
    }

    if !a.summary.is_empty() {
        let mut out = String::from(evaluation::SUMMARY_HEADER);
        out.push('\n');
        for p in &a.summary {
            for row in read_csv(p, evaluation::SUMMARY_HEADER)? {
                if row.len() != 4 {
                    return Err(validation(format!("{}: expected 4 columns", p.display())));
                }
                parse_f64(p, &row[1])?;
                parse_f64(p, &row[2])?;
                if !row[3].is_empty() {
                    parse_f64(p, &row[3])?;
                }
                let _ = writeln!(out, "{}", row.join(","));
            }
        }
        write_text(&a.out.join("nse_vs_gain.csv"), &out)?;
    }

    if !a.models.is_empty() {
        let models = load_models(&a.models)?;
        let tests =
            test_sets(a.data.as_deref(), Some(vec![a.trajectory_sigma]), Some(a.realization + 1), None, a.seed)?;
        let seq = &tests[0].1[a.realization];
        let ys = models.iter().map(|(_, m)| Ok(m.simulate(&seq.u, None)?.y)).collect::<CliResult<Vec<_>>>()?;
        let mut out = String::from("t,u,measured");
        for (label, _) in &models {
            out.push(',');
            out.push_str(label);
        }
        out.push('\n');
        for k in 0..seq.len() {
            let _ = write!(out, "{:e},{:e},{:e}", k as f64 * seq.dt, seq.u[(k, 0)], seq.y[(k, 0)]);
            for y in &ys {
                let _ = write!(out, ",{:e}", y[(k, 0)]);
            }
            out.push('\n');
        }
        write_text(&a.out.join("trajectories.csv"), &out)?;
    }
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| validation(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Datagen(a) => datagen(a),
        Command::Train(a) => train(a, cli.quiet),
        Command::Eval(a) => eval(a),
        Command::Attack(a) => attack(a),
        Command::Certify(a) => certify(a),
        Command::Embed(a) => embed(a),
        Command::ExportPlots(a) => export_plots(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
