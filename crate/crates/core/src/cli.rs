//! Command-line front end: `synth`, `train`, `infer` and `eval`.
//!
//! Exit codes: 0 on success, 1 on a numerical failure (a JSON diagnostics file is
//! written), 2 on usage, input or I/O errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bound::elbo;
use crate::data::{generate_synthetic, matrix_to_csv, read_matrix_csv, replicate_columns, ColumnStats};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, compare_selections, mean_average_precision, mean_precision_recall_curve, nn_classify,
    rank_by_distance, select_columns, select_dims_by_gamma, signal_recovery_report, write_pr_curve_csv,
    DimSelection,
};
use crate::inference::infer_latent;
use crate::kernels::{KernelFamily, KernelSpec};
use crate::model::{
    init_model, init_mrd, read_checkpoint, save, AnyModel, Checkpoint, DataSource, InitStrategy, LatentModel,
};
use crate::optimize::{fit, OptConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERICAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment fallback for `--threads`.
pub const THREADS_ENV: &str = "SSLVM_THREADS";

const DEFAULT_Q: usize = 5;
const DEFAULT_M: usize = 20;
const DEFAULT_GAMMA_THRESHOLD: f64 = 0.5;

#[derive(Debug, Parser)]
#[command(name = "sslvm", version, about = "Spike-and-slab GP-LVM and multi-view relevance determination")]
struct Cli {
    /// Worker threads; 1 gives a fully sequential run.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic two-view data set.
    Synth(SynthArgs),
    /// Fit a single-view model (one data file) or a multi-view model (several).
    Train(TrainArgs),
    /// Infer latent posteriors for held-out rows of one view.
    Infer(InferArgs),
    /// Score a trained model.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Comma-separated CSV files, one per view.
    #[arg(long, value_delimiter = ',', required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    q: Option<usize>,
    /// Inducing points per view.
    #[arg(long)]
    m: Option<usize>,
    /// Kernel family, either one for all views or one per view.
    #[arg(long, value_delimiter = ',')]
    kernel: Option<Vec<KernelFamily>>,
    #[arg(long)]
    init: Option<InitArg>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optimise slab parameters and noise alone for this many iterations first.
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV of the bound and gradient norm per accepted iteration.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Data files start with a header row.
    #[arg(long)]
    header: bool,
    /// Standardise each column before training.
    #[arg(long)]
    normalize: bool,
    /// Repeat each view's columns this many times.
    #[arg(long)]
    replicate: Option<usize>,
    /// JSON file with defaults for any of the options above.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write diagnostics on a numerical failure.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum InitArg {
    Pca,
    Random,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test rows for one view, in the same column layout as its training file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    /// The test file starts with a header row.
    #[arg(long)]
    header: bool,
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Classify,
    Retrieve,
    Recovery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum DimsArg {
    All,
    Gamma,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Latents scored against the training latents (CSV from `infer`); defaults to the training latents.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Labels of the training rows, one per line.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Labels of the test rows, one per line.
    #[arg(long)]
    test_labels: Option<PathBuf>,
    /// True latent signals, one column per signal (recovery mode).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Which latent dimensions to use.
    #[arg(long, value_enum, default_value_t = DimsArg::All)]
    dims: DimsArg,
    /// View whose switches select dimensions.
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[arg(long, default_value_t = DEFAULT_GAMMA_THRESHOLD)]
    gamma_threshold: f64,
    /// Lengthscale threshold reported next to the switch-based selection.
    #[arg(long)]
    lengthscale_threshold: Option<f64>,
    /// Label and truth files start with a header row.
    #[arg(long)]
    header: bool,
    #[arg(long)]
    report: PathBuf,
    /// Mean precision-recall curve (retrieve mode).
    #[arg(long)]
    pr_curve: Option<PathBuf>,
}

/// Options accepted by `--config`. Command-line flags take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    q: Option<usize>,
    m: Option<usize>,
    kernel: Option<KernelConfig>,
    init: Option<InitArg>,
    iters: Option<usize>,
    seed: Option<u64>,
    warmup: Option<usize>,
    gtol: Option<f64>,
    ftol: Option<f64>,
    header: Option<bool>,
    normalize: Option<bool>,
    replicate: Option<usize>,
    threads: Option<usize>,
}

/// A family name, or a full kernel giving the starting hyperparameters.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum KernelConfig {
    Family(KernelFamily),
    Spec(KernelSpec),
    PerView(Vec<KernelConfig>),
}

struct Failure {
    code: i32,
    error: Error,
    diagnostics: Option<PathBuf>,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Failure {
            code: if error.is_numerical() { EXIT_NUMERICAL } else { EXIT_USAGE },
            error,
            diagnostics: None,
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return EXIT_OK;
            }
            let mut cmd = Cli::command();
            cmd.build();
            let sub = args.iter().skip(1).find_map(|a| a.to_str().and_then(|a| cmd.find_subcommand(a)).map(|c| c.get_name().to_string()));
            let usage = match sub.and_then(|s| cmd.find_subcommand_mut(&s).map(|c| c.render_usage())) {
                Some(u) => u,
                None => cmd.render_usage(),
            };
            eprintln!("\n{usage}");
            return EXIT_USAGE;
        }
    };
    let config = match &cli.command {
        Command::Train(t) => match t.config.as_deref().map(load_config).transpose() {
            Ok(c) => c.unwrap_or_default(),
            Err(e) => return report_failure("train", e.into()),
        },
        _ => TrainConfig::default(),
    };
    let threads = cli.threads.or_else(env_threads).or(config.threads);
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Infer(_) => "infer",
        Command::Eval(_) => "eval",
    };
    let diag = match &cli.command {
        Command::Train(t) => Some(t.diagnostics.clone().unwrap_or_else(|| sibling(&t.checkpoint, "diagnostics.json"))),
        Command::Infer(a) => Some(infer_diagnostics(a)),
        _ => None,
    };
    let body = || match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a, &config),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => cmd_eval(&a),
    };
    let result = match threads {
        Some(0) => Err(Error::invalid("threads", "must be at least 1").into()),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(body),
            Err(e) => Err(Error::invalid("threads", e.to_string()).into()),
        },
        None => body(),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(mut f) => {
            if f.code == EXIT_NUMERICAL && f.diagnostics.is_none() {
                f.diagnostics = diag;
            }
            report_failure(name, f)
        }
    }
}

fn env_threads() -> Option<usize> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    match raw.trim().parse() {
        Ok(n) => Some(n),
        Err(_) => {
            log::warn!("ignoring {THREADS_ENV}={raw}: not a thread count");
            None
        }
    }
}

fn report_failure(command: &str, f: Failure) -> i32 {
    eprintln!("error: {}", f.error);
    if let Some(path) = &f.diagnostics {
        let mut diag = json!({
            "command": command,
            "error": f.error.to_string(),
        });
        if let Error::Optimization { iteration, objective, reason } = &f.error {
            diag["iteration"] = json!(iteration);
            diag["objective"] = json!(objective);
            diag["reason"] = json!(reason);
        }
        match write_atomic(path, serde_json::to_string_pretty(&diag).unwrap_or_default().as_bytes()) {
            Ok(()) => eprintln!("diagnostics written to {}", path.display()),
            Err(e) => eprintln!("could not write diagnostics to {}: {e}", path.display()),
        }
    }
    f.code
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = OsString::from(".");
    name.push(path.file_name().unwrap_or_default());
    name.push(".tmp");
    path.with_file_name(name)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Writes every file or none of them.
fn write_all_or_nothing(files: &[(PathBuf, String)]) -> Result<()> {
    let mut staged = Vec::new();
    let outcome = (|| {
        for (path, body) in files {
            let tmp = tmp_path(path);
            fs::write(&tmp, body)?;
            staged.push(tmp);
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        for t in &staged {
            let _ = fs::remove_file(t);
        }
        return Err(e);
    }
    for ((path, _), tmp) in files.iter().zip(&staged) {
        fs::rename(tmp, path)?;
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let s = generate_synthetic(a.seed);
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::Format {
        path: a.out_dir.display().to_string(),
        reason: e.to_string(),
    })?;
    let files: Vec<(PathBuf, String)> = [
        ("latents.csv", &s.latents),
        ("view1.csv", &s.view1),
        ("view2.csv", &s.view2),
        ("mixing1.csv", &s.mixing1),
        ("mixing2.csv", &s.mixing2),
    ]
    .into_iter()
    .map(|(name, m)| (a.out_dir.join(name), matrix_to_csv(m, None)))
    .collect();
    write_all_or_nothing(&files)?;
    println!("wrote synthetic data (seed {}) to {}", a.seed, a.out_dir.display());
    Ok(())
}

/// Loads a view as it was prepared for training.
fn load_view(src: &DataSource) -> Result<(DMatrix<f64>, Option<ColumnStats>)> {
    let raw = read_matrix_csv(&src.path, src.header)?;
    let (y, stats) = if src.normalize {
        let stats = ColumnStats::of(&raw);
        (stats.apply(&raw)?, Some(stats))
    } else {
        (raw, None)
    };
    Ok((replicate_columns(&y, src.replicate)?, stats))
}

fn expand_kernels(cfg: &KernelConfig, views: usize, q: usize) -> Result<Vec<KernelSpec>> {
    match cfg {
        KernelConfig::Family(f) => Ok(vec![KernelSpec::default_for(*f, q); views]),
        KernelConfig::Spec(s) => {
            s.validate(q)?;
            Ok(vec![s.clone(); views])
        }
        KernelConfig::PerView(list) => {
            if list.len() != views {
                return Err(Error::mismatch("kernels in config", views, list.len()));
            }
            list.iter()
                .map(|k| match k {
                    KernelConfig::PerView(_) => Err(Error::invalid("kernel", "nested kernel lists")),
                    other => Ok(expand_kernels(other, 1, q)?.remove(0)),
                })
                .collect()
        }
    }
}

fn cmd_train(a: &TrainArgs, cfg: &TrainConfig) -> CmdResult {
    let q = a.q.or(cfg.q).unwrap_or(DEFAULT_Q);
    let m = a.m.or(cfg.m).unwrap_or(DEFAULT_M);
    let iters = a.iters.or(cfg.iters).unwrap_or(OptConfig::default().max_iters);
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let header = a.header || cfg.header.unwrap_or(false);
    let normalize = a.normalize || cfg.normalize.unwrap_or(false);
    let replicate = a.replicate.or(cfg.replicate).unwrap_or(1);
    let init = match a.init.or(cfg.init).unwrap_or(InitArg::Pca) {
        InitArg::Pca => InitStrategy::Pca,
        InitArg::Random => InitStrategy::Random,
    };
    let c = a.data.len();
    let kernels: Vec<KernelSpec> = match (&a.kernel, &cfg.kernel) {
        (Some(fams), _) => {
            if fams.len() != 1 && fams.len() != c {
                return Err(Error::mismatch("--kernel values", c, fams.len()).into());
            }
            (0..c).map(|k| KernelSpec::default_for(fams[k.min(fams.len() - 1)], q)).collect()
        }
        (None, Some(kc)) => expand_kernels(kc, c, q)?,
        (None, None) => vec![KernelSpec::default_for(KernelFamily::ExpQuad, q); c],
    };

    let mut opt = OptConfig::with_iters(iters);
    opt.seed = seed;
    if let Some(g) = cfg.gtol {
        opt.gtol = g;
    }
    if let Some(f) = cfg.ftol {
        opt.ftol = f;
    }
    if let Some(w) = a.warmup.or(cfg.warmup) {
        if w > 0 {
            opt.stage_schedule = OptConfig::warmup_schedule(w, iters);
        }
    }

    let sources: Vec<DataSource> = a
        .data
        .iter()
        .map(|p| {
            let abs = fs::canonicalize(p).map_err(|e| Error::Format {
                path: p.display().to_string(),
                reason: e.to_string(),
            })?;
            Ok(DataSource {
                path: abs.display().to_string(),
                header,
                normalize,
                replicate,
            })
        })
        .collect::<Result<_>>()?;
    let ys: Vec<DMatrix<f64>> = sources.iter().map(|s| load_view(s).map(|v| v.0)).collect::<Result<_>>()?;

    let families: Vec<KernelFamily> = kernels.iter().map(|k| k.family).collect();
    let mut model = if c == 1 {
        AnyModel::Single(init_model(&ys[0], q, m, families[0], &init, seed)?)
    } else {
        AnyModel::Multi(init_mrd(&ys, q, &vec![m; c], &families, &init, seed)?)
    };
    for (v, k) in model.views_mut().iter_mut().zip(kernels) {
        v.kernel = k;
    }

    let (fitted, trace) = fit(&model, &opt)?;
    let total = elbo(&fitted)?.total;

    let src: Vec<Option<DataSource>> = sources.into_iter().map(Some).collect();
    save(&fitted, &src, &a.checkpoint)?;
    if let Some(t) = &a.trace {
        trace.write_csv(t)?;
    }

    println!("elbo {total:.6}");
    for (k, v) in fitted.views().iter().enumerate() {
        println!("view {k} gamma {}", fmt_list(fitted.gamma(k).as_slice()));
        if v.kernel.lengthscales.is_empty() {
            println!("view {k} lengthscales none (linear kernel)");
        } else {
            println!("view {k} lengthscales {}", fmt_list(&v.kernel.lengthscales));
        }
    }
    println!("checkpoint {}", a.checkpoint.display());
    Ok(())
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn infer_diagnostics(a: &InferArgs) -> PathBuf {
    a.diagnostics.clone().unwrap_or_else(|| sibling(&a.out, "diagnostics.json"))
}

fn cmd_infer(a: &InferArgs) -> CmdResult {
    let ck = read_checkpoint(&a.checkpoint)?;
    let sources = ck.sources();
    if a.view >= sources.len() {
        return Err(Error::invalid("view", format!("checkpoint has {} views, got {}", sources.len(), a.view)).into());
    }
    let mut ys = Vec::with_capacity(sources.len());
    let mut stats = None;
    for (k, s) in sources.iter().enumerate() {
        let s = s.as_ref().ok_or_else(|| {
            Error::invalid("checkpoint", format!("view {k} does not record its training data"))
        })?;
        let (y, st) = load_view(s)?;
        if k == a.view {
            stats = Some((st, s.replicate));
        }
        ys.push(y);
    }
    let (stats, replicate) = stats.expect("view index checked");
    let model = ck.into_model(ys)?;

    let raw = read_matrix_csv(&a.data, a.header)?;
    let y_star = match stats {
        Some(st) => st.apply(&raw)?,
        None => raw,
    };
    let y_star = replicate_columns(&y_star, replicate)?;

    let res = infer_latent(&model, a.view, &y_star, &OptConfig::with_iters(a.iters))?;
    res.write_csv(&a.out)?;
    println!("inferred {} rows to {}", y_star.nrows(), a.out.display());
    if !res.failures.is_empty() {
        let rows: Vec<Value> = res
            .failures
            .iter()
            .map(|(i, e)| json!({"row": i, "error": e.to_string()}))
            .collect();
        let diag = infer_diagnostics(a);
        let body = json!({"command": "infer", "failed_rows": rows});
        write_atomic(&diag, serde_json::to_string_pretty(&body).unwrap_or_default().as_bytes())?;
        eprintln!(
            "error: {} rows failed and kept their warm start; see {}",
            res.failures.len(),
            diag.display()
        );
        return Err(Failure {
            code: EXIT_NUMERICAL,
            error: Error::NonFinite("test-time optimisation"),
            diagnostics: None,
        });
    }
    Ok(())
}

fn read_labels(path: &Path, header: bool) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            row: i + 1,
            column: 1,
            reason: e.to_string(),
        })?;
        match rec.get(0) {
            Some(s) if !s.is_empty() => out.push(s.to_string()),
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    row: i + 1,
                    column: 1,
                    reason: "empty label".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Test latents: the slab means from `infer` output (first Q of 2Q columns) or a Q-column file.
fn read_test_latents(path: &Path, q: usize) -> Result<DMatrix<f64>> {
    let x = read_matrix_csv(path, false)?;
    match x.ncols() {
        c if c == q => Ok(x),
        c if c == 2 * q => Ok(x.columns(0, q).into_owned()),
        c => Err(Error::mismatch("test latent columns", q, c)),
    }
}

fn need<'a, T>(v: &'a Option<T>, flag: &'static str, mode: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::invalid("flags", format!("--{flag} is required in {mode} mode")))
}

fn selections(ck: &Checkpoint, gthr: f64, lthr: Option<f64>) -> Vec<DimSelection> {
    (0..ck.views.len())
        .map(|k| {
            let g: Vec<f64> = ck.gamma.row(k).iter().copied().collect();
            let ls = &ck.views[k].kernel.lengthscales;
            // Without an explicit threshold, the median lengthscale splits the dimensions.
            let thr = lthr.unwrap_or_else(|| {
                let mut s = ls.clone();
                s.sort_by(f64::total_cmp);
                s.get(s.len() / 2).copied().unwrap_or(0.0)
            });
            compare_selections(&g, gthr, ls, thr)
        })
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let ck = read_checkpoint(&a.checkpoint)?;
    if a.view >= ck.views.len() {
        return Err(Error::invalid("view", format!("checkpoint has {} views, got {}", ck.views.len(), a.view)).into());
    }
    let q = ck.mu.ncols();
    let dims: Vec<usize> = match a.dims {
        DimsArg::All => (0..q).collect(),
        DimsArg::Gamma => {
            let g: Vec<f64> = ck.gamma.row(a.view).iter().copied().collect();
            select_dims_by_gamma(&g, a.gamma_threshold)
        }
    };
    if dims.is_empty() {
        return Err(Error::invalid("dims", "no dimension passes the switch threshold").into());
    }
    let train = select_columns(&ck.mu, &dims)?;
    let test = match &a.test {
        Some(p) => select_columns(&read_test_latents(p, q)?, &dims)?,
        None => train.clone(),
    };

    let mut report = json!({
        "mode": format!("{:?}", a.mode).to_lowercase(),
        "dims": dims,
        "selection": selections(&ck, a.gamma_threshold, a.lengthscale_threshold),
    });
    match a.mode {
        Mode::Classify => {
            let labels = read_labels(need(&a.labels, "labels", "classify")?, a.header)?;
            let truth = match (&a.test_labels, &a.test) {
                (Some(p), _) => read_labels(p, a.header)?,
                (None, None) => labels.clone(),
                (None, Some(_)) => return Err(Error::invalid("flags", "--test needs --test-labels").into()),
            };
            let predicted = nn_classify(&train, &labels, &test)?;
            let acc = accuracy(&predicted, &truth)?;
            report["accuracy"] = json!(acc);
            report["n_test"] = json!(test.nrows());
            println!("accuracy {acc:.4}");
        }
        Mode::Retrieve => {
            let rankings = rank_by_distance(&test, &train)?;
            // Relevance by shared label when labels are given, otherwise query i matches gallery row i.
            let relevance: Vec<Vec<bool>> = match &a.labels {
                Some(p) => {
                    let gallery = read_labels(p, a.header)?;
                    let queries = match &a.test_labels {
                        Some(t) => read_labels(t, a.header)?,
                        None => gallery.clone(),
                    };
                    if gallery.len() != train.nrows() {
                        return Err(Error::mismatch("gallery labels", train.nrows(), gallery.len()).into());
                    }
                    if queries.len() != test.nrows() {
                        return Err(Error::mismatch("query labels", test.nrows(), queries.len()).into());
                    }
                    queries.iter().map(|ql| gallery.iter().map(|g| g == ql).collect()).collect()
                }
                None => (0..test.nrows()).map(|i| (0..train.nrows()).map(|g| g == i).collect()).collect(),
            };
            let score = mean_average_precision(&rankings, &relevance)?;
            let curve = mean_precision_recall_curve(&rankings, &relevance);
            if let Some(p) = &a.pr_curve {
                write_pr_curve_csv(p, &curve)?;
            }
            println!("mAP {:.4} over {} queries", score.map, score.queries_scored);
            report["retrieval"] = serde_json::to_value(&score)?;
        }
        Mode::Recovery => {
            let truth = read_matrix_csv(need(&a.truth, "truth", "recovery")?, a.header)?;
            let rep = signal_recovery_report(&test, &truth)?;
            // Report dimensions in the model's own numbering.
            let assignment: Vec<Option<usize>> = rep.assignment.iter().map(|d| d.map(|d| dims[d])).collect();
            println!("recovery |corr| {}", fmt_list(&rep.scores));
            report["recovery"] = json!({
                "assignment": assignment,
                "scores": rep.scores,
                "abs_corr": rep.abs_corr,
            });
        }
    }
    write_atomic(&a.report, serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(())
}
