//! File-mediated commands behind the `apk` binary.
//!
//! Every command reads one resolved [`RunConfig`], writes its artifacts into
//! `files.out_dir` and records the config as `<command>.config.toml`. All
//! artifacts carry the SHA-256 digest of that record.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use crate::analysis::{gp_vs_renormalized, head_scores, ordered_pruning, prune_heads};
use crate::config::{digest_text, RunConfig, TaskKind};
use crate::data::{
    build_hmc_heads, build_one_shot_sequences, gen_hmc_dataset, random_query_key_heads, synthetic_episodes,
    SequenceDataset,
};
use crate::error::{Error, Result};
use crate::io::{self, Digest};
use crate::kernel::{compute_features, kernel_task_alignment, total_kernel, PathFeatureMatrix};
use crate::model::AttentionHeads;
use crate::predictor::{evaluate_predictor, temperature_sweep, PredictorReport};
use crate::sampler::{empirical_order_parameter_with_error, empirical_predictor, hmc_sample};
use crate::solver::{solve_saddle, OrderParameterSet, SolveTrace};

/// Divergence rate above which `sample` warns (and fails under `--strict`).
pub const DIVERGENCE_WARNING_RATE: f64 = 0.1;

#[derive(Debug, Parser)]
#[command(name = "apk", version, about = "Path-pair kernels and order-parameter theory for attention networks")]
pub struct Cli {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override the top-level seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Treat sampler warnings as failures.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory, overriding `files.out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate train/test datasets and the attention heads.
    GenData,
    /// Features, saddle point, predictor, alignment and head scores.
    Pipeline,
    /// Choose the temperature on a validation split.
    Sweep,
    /// Posterior sampling with empirical order parameter and predictor.
    Sample,
    /// Head pruning by order-parameter score.
    Prune,
    /// Infinite-width against finite-width accuracy and alignment.
    Compare,
    /// Check every artifact's digest against the recorded configs.
    Verify,
    /// Print the resolved configuration.
    Config,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pipeline => "pipeline",
            Command::Sweep => "sweep",
            Command::Sample => "sample",
            Command::Prune => "prune",
            Command::Compare => "compare",
            Command::Verify => "verify",
            Command::Config => "config",
        }
    }
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("APK_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialised");
        }
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.files.out_dir = o.clone();
    }
    let cfg = cfg.resolve()?;
    if cli.command == Command::Config {
        print!("{}", cfg.canonical_toml()?);
        return Ok(());
    }
    let ctx = Ctx::new(cfg, cli.command, cli.force, cli.strict)?;
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Pipeline => pipeline(&ctx),
        Command::Sweep => sweep(&ctx),
        Command::Sample => sample(&ctx),
        Command::Prune => prune(&ctx),
        Command::Compare => compare(&ctx),
        Command::Verify => verify(&ctx.cfg.files.out_dir),
        Command::Config => unreachable!(),
    }
}

struct Ctx {
    cfg: RunConfig,
    record: String,
    digest: Digest,
    command: Command,
    force: bool,
    strict: bool,
}

impl Ctx {
    fn new(cfg: RunConfig, command: Command, force: bool, strict: bool) -> Result<Self> {
        let record = cfg.canonical_toml()?;
        Ok(Self {
            digest: digest_text(&record),
            record,
            cfg,
            command,
            force,
            strict,
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.files.out(name)
    }

    /// Refuse to clobber outputs unless forced; create the output directory.
    fn guard(&self, names: &[&str]) -> Result<()> {
        let dir = &self.cfg.files.out_dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if self.force {
            return Ok(());
        }
        let record = format!("{}.config.toml", self.command.name());
        for name in names.iter().copied().chain([record.as_str()]) {
            let p = self.out(name);
            if p.exists() {
                return Err(Error::io(
                    &p,
                    std::io::Error::new(std::io::ErrorKind::AlreadyExists, "exists; pass --force to overwrite"),
                ));
            }
        }
        Ok(())
    }

    fn write_record(&self) -> Result<()> {
        let p = self.out(&format!("{}.config.toml", self.command.name()));
        let text = format!("# config_digest={}\n{}", hex::encode(self.digest), self.record);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn csv<I, R>(&self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator,
        R::Item: AsRef<[u8]>,
    {
        io::write_csv(&self.out(name), &self.digest, header, rows)
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Wrapped<'a, T> {
            config_digest: String,
            #[serde(flatten)]
            value: &'a T,
        }
        let w = Wrapped {
            config_digest: hex::encode(self.digest),
            value,
        };
        let p = self.out(name);
        let text = serde_json::to_string_pretty(&w).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    }
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().inspect_err(|e| log::error!("stage {name} failed: {e}"))
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let writes_heads = cfg.files.attention.is_none();
    let mut outputs = vec!["train.apkd", "test.apkd"];
    if writes_heads {
        outputs.push("attention.apkw");
    }
    if cfg.files.export_csv {
        outputs.extend(["train.csv", "test.csv"]);
    }
    ctx.guard(&outputs)?;
    let (train, test, heads) = match cfg.task.kind {
        TaskKind::Hmc => {
            let split = gen_hmc_dataset(&cfg.task.hmc)?;
            let heads = build_hmc_heads(&cfg.task.hmc, cfg.head_seed())?;
            (split.train, split.test, heads)
        }
        TaskKind::OneShot => {
            let t = &cfg.task.one_shot;
            let episodes = synthetic_episodes(&t.source, &t.shot)?;
            let all = build_one_shot_sequences(&episodes, &t.shot)?;
            let heads = random_query_key_heads(
                cfg.model.heads,
                cfg.model.depth,
                t.shot.token_width,
                cfg.model.query_dim,
                cfg.head_seed(),
            )?;
            (all.subset(0..t.train_count), all.subset(t.train_count..all.len()), heads)
        }
    };
    io::write_dataset(&ctx.out("train.apkd"), &train, &ctx.digest)?;
    io::write_dataset(&ctx.out("test.apkd"), &test, &ctx.digest)?;
    if writes_heads {
        io::write_attention_spec(&ctx.out("attention.apkw"), &heads, &ctx.digest)?;
    }
    if cfg.files.export_csv {
        io::write_dataset_csv(&ctx.out("train.csv"), &train, &ctx.digest)?;
        io::write_dataset_csv(&ctx.out("test.csv"), &test, &ctx.digest)?;
    }
    ctx.write_record()
}

struct Inputs {
    train: PathFeatureMatrix,
    test: PathFeatureMatrix,
    labels: DVector<f64>,
    test_labels: DVector<f64>,
}

fn load_dataset(ctx: &Ctx, path: &Path) -> Result<SequenceDataset> {
    let (data, digest) = io::read_dataset(path)?;
    if digest != ctx.digest {
        log::warn!("{} was written under a different configuration", path.display());
    }
    Ok(data)
}

fn load_heads(ctx: &Ctx) -> Result<AttentionHeads> {
    let heads = io::read_attention_spec(&ctx.cfg.files.attention_path())?;
    let m = &ctx.cfg.model;
    if heads.head_count() != m.heads || heads.depth() != m.depth {
        return Err(Error::Config(format!(
            "attention file has H={}, L={} but the model is H={}, L={}",
            heads.head_count(),
            heads.depth(),
            m.heads,
            m.depth
        )));
    }
    Ok(heads)
}

/// Features of one split, reusing `<name>.apkf` when it was written under the
/// same configuration.
fn cached_features(ctx: &Ctx, name: &str, data: &SequenceDataset, heads: &AttentionHeads) -> Result<PathFeatureMatrix> {
    let path = ctx.out(&format!("features_{name}.apkf"));
    if !ctx.force && path.exists() {
        if let Ok((f, d)) = io::read_features(&path) {
            if d == ctx.digest && f.example_count() == data.len() {
                log::info!("reusing {}", path.display());
                return Ok(f);
            }
        }
    }
    let f = compute_features(&data.examples, heads, ctx.cfg.model.readout, true)?;
    io::write_features(&path, &f, &ctx.digest)?;
    Ok(f)
}

fn load_inputs(ctx: &Ctx, allow_subset: bool) -> Result<Inputs> {
    let files = &ctx.cfg.files;
    fs::create_dir_all(&files.out_dir).map_err(|e| Error::io(&files.out_dir, e))?;
    let train_data = load_dataset(ctx, &files.train_path())?;
    let test_data = load_dataset(ctx, &files.test_path())?;
    let heads = load_heads(ctx)?;
    let mut train = cached_features(ctx, "train", &train_data, &heads)?;
    let mut test = cached_features(ctx, "test", &test_data, &heads)?;
    if let Some(keep) = ctx.cfg.path_positions()? {
        if !allow_subset {
            return Err(Error::Config(format!("{} needs the full path set", ctx.command.name())));
        }
        train = train.select_paths(&keep)?;
        test = test.select_paths(&keep)?;
        if ctx.cfg.model.renormalize_paths {
            train.set_normalization(keep.len() as f64);
            test.set_normalization(keep.len() as f64);
        }
    }
    Ok(Inputs {
        labels: train_data.labels_vector(),
        test_labels: test_data.labels_vector(),
        train,
        test,
    })
}

fn trace_rows(trace: &SolveTrace) -> impl Iterator<Item = Vec<String>> + '_ {
    (0..trace.iterations()).map(move |i| {
        vec![
            (i + 1).to_string(),
            fmt(trace.action[i]),
            fmt(trace.entropy[i]),
            fmt(trace.energy[i]),
            fmt(trace.gradient_norm[i]),
            fmt(trace.learning_rate_at[i]),
        ]
    })
}

const TRACE_HEADER: [&str; 6] = ["iteration", "action", "entropy", "energy", "gradient_norm", "learning_rate"];

fn prediction_rows(r: &PredictorReport) -> impl Iterator<Item = Vec<String>> + '_ {
    (0..r.mean.len()).map(move |i| {
        vec![
            (i + 1).to_string(),
            fmt(r.mean[i]),
            fmt(r.variance[i]),
            r.labels.as_ref().map_or(String::new(), |y| format!("{}", y[i])),
        ]
    })
}

#[derive(Serialize)]
struct PredictorSummary {
    accuracy: Option<f64>,
    temperature: f64,
    width: Option<usize>,
    train_count: usize,
    test_count: usize,
    alpha: f64,
    seed: u64,
    iterations: usize,
    converged: bool,
}

fn pipeline(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let subset = cfg.model.paths.is_some();
    if subset && cfg.model.width.is_some() {
        return Err(Error::Config("model.paths needs the infinite-width limit (no model.width)".into()));
    }
    let mut outputs = vec![
        "u1.csv",
        "u1.apkm",
        "kernel.apkk",
        "solve_trace.csv",
        "learning_rates.csv",
        "predictions.csv",
        "predictor_summary.json",
        "alignment.csv",
    ];
    if !subset {
        outputs.extend(["order_parameters.apku", "head_scores.csv"]);
    }
    ctx.guard(&outputs)?;
    let inputs = stage("features", || load_inputs(ctx, true))?;
    let h = cfg.model.heads;
    let l = cfg.model.depth;
    let (u, trace) = stage("solve", || {
        if cfg.solver.alpha == 0.0 {
            let gp = OrderParameterSet::gp_point(h, l, cfg.solver.sigma2)?;
            return Ok((gp, SolveTrace::default()));
        }
        solve_saddle(&inputs.train, &inputs.labels, &cfg.solver).inspect_err(|e| {
            if let Error::Solver { trace, .. } = e {
                let _ = ctx.csv("solve_trace.partial.csv", &TRACE_HEADER, trace_rows(trace));
            }
        })
    })?;
    let u1 = match cfg.path_positions()? {
        Some(keep) => u.u1().select_rows(&keep).select_columns(&keep),
        None => u.u1().clone(),
    };
    let t = cfg.solver.temperature;
    let mut report = stage("predict", || {
        evaluate_predictor(&u1, &inputs.train, &inputs.labels, &inputs.test, Some(&inputs.test_labels), t)
    })?;
    report.width = cfg.model.width;
    report.alpha = Some(cfg.solver.alpha);
    let kernel = total_kernel(&u1, &inputs.train)?;
    let alignment = stage("align", || kernel_task_alignment(&kernel.values, &inputs.labels))?;

    io::write_path_matrix_csv(&ctx.out("u1.csv"), &u1, inputs.train.paths(), &ctx.digest)?;
    if subset {
        // Path subsets have no place in the nested hierarchy on disk.
        io::write_path_matrix(&ctx.out("u1.apkm"), u.u1(), h, l, &ctx.digest)?;
    } else {
        io::write_path_matrix(&ctx.out("u1.apkm"), &u1, h, l, &ctx.digest)?;
        io::write_order_parameters(&ctx.out("order_parameters.apku"), &u, &ctx.digest)?;
        let scores = stage("score", || head_scores(&u1, h, l))?;
        ctx.csv(
            "head_scores.csv",
            &["layer", "head", "raw", "normalized"],
            scores.scores.iter().map(|s| {
                vec![s.layer.to_string(), (s.head + 1).to_string(), fmt(s.raw), fmt(s.normalized)]
            }),
        )?;
    }
    io::write_kernel(&ctx.out("kernel.apkk"), &kernel, &ctx.digest)?;
    ctx.csv("solve_trace.csv", &TRACE_HEADER, trace_rows(&trace))?;
    ctx.csv(
        "learning_rates.csv",
        &["learning_rate", "score", "chosen"],
        trace.sweep.iter().map(|r| {
            vec![
                fmt(r.learning_rate),
                r.score.map_or(String::new(), fmt),
                (r.learning_rate == trace.learning_rate).to_string(),
            ]
        }),
    )?;
    ctx.csv("predictions.csv", &["example", "mean", "variance", "label"], prediction_rows(&report))?;
    ctx.json(
        "predictor_summary.json",
        &PredictorSummary {
            accuracy: report.accuracy,
            temperature: t,
            width: cfg.model.width,
            train_count: report.train_count,
            test_count: report.mean.len(),
            alpha: cfg.solver.alpha,
            seed: cfg.seed,
            iterations: trace.iterations(),
            converged: trace.converged || cfg.solver.alpha == 0.0,
        },
    )?;
    ctx.csv(
        "alignment.csv",
        &["rank", "eigenvalue", "overlap", "overlap_squared"],
        alignment.iter().enumerate().map(|(i, a)| {
            vec![(i + 1).to_string(), fmt(a.eigenvalue), fmt(a.overlap), fmt(a.overlap * a.overlap)]
        }),
    )?;
    if let Some(a) = report.accuracy {
        println!("accuracy {a:.4}");
    }
    ctx.write_record()
}

#[derive(Serialize)]
struct SweepSummary {
    best_temperature: f64,
    validation_accuracy: f64,
    held_out_accuracy: Option<f64>,
    validation_count: usize,
    held_out_count: usize,
}

fn sweep(ctx: &Ctx) -> Result<()> {
    ctx.guard(&["sweep.csv", "sweep_summary.json"])?;
    let inputs = stage("features", || load_inputs(ctx, false))?;
    let n_test = inputs.test.example_count();
    let v = ctx.cfg.sweep.validation_count;
    if v == 0 || v >= n_test {
        return Err(Error::Config(format!(
            "sweep.validation_count must lie in [1, {n_test}) for this test split"
        )));
    }
    let val = inputs.test.select_examples(0..v)?;
    let held = inputs.test.select_examples(v..n_test)?;
    let yv = inputs.test_labels.rows(0, v).into_owned();
    let yh = inputs.test_labels.rows(v, n_test - v).into_owned();
    let result = stage("sweep", || {
        temperature_sweep(&inputs.train, &inputs.labels, &val, &yv, &ctx.cfg.sweep.temperatures, &ctx.cfg.solver)
    })?;
    let best_t = result.best_temperature;
    let held_out = stage("evaluate", || {
        let solver = crate::solver::SolverConfig {
            temperature: best_t,
            ..ctx.cfg.solver.clone()
        };
        let (u, _) = solve_saddle(&inputs.train, &inputs.labels, &solver)?;
        evaluate_predictor(u.u1(), &inputs.train, &inputs.labels, &held, Some(&yh), best_t)
    })?;
    ctx.csv(
        "sweep.csv",
        &["temperature", "accuracy", "error"],
        result.table.iter().map(|r| {
            vec![
                fmt(r.temperature),
                r.accuracy.map_or(String::new(), fmt),
                r.error.clone().unwrap_or_default(),
            ]
        }),
    )?;
    ctx.json(
        "sweep_summary.json",
        &SweepSummary {
            best_temperature: best_t,
            validation_accuracy: result.best_accuracy,
            held_out_accuracy: held_out.accuracy,
            validation_count: v,
            held_out_count: n_test - v,
        },
    )?;
    println!("best temperature {best_t:e} (validation accuracy {:.4})", result.best_accuracy);
    ctx.write_record()
}

fn sample(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    if cfg.model.width.is_none() {
        return Err(Error::Config("sampling needs model.width".into()));
    }
    ctx.guard(&[
        "samples.apks",
        "u_est.csv",
        "u_est_se.csv",
        "u_est.apkm",
        "sampled_predictions.csv",
        "sample_summary.csv",
    ])?;
    let inputs = stage("features", || load_inputs(ctx, false))?;
    let samples = stage("sample", || hmc_sample(&inputs.train, &inputs.labels, &cfg.sampler))?;
    let (u_est, se) = stage("estimate", || empirical_order_parameter_with_error(&samples))?;
    let (mean, var) = empirical_predictor(&samples, &inputs.test)?;
    let paths = inputs.train.paths();
    io::write_samples(&ctx.out("samples.apks"), &samples, &ctx.digest)?;
    io::write_path_matrix_csv(&ctx.out("u_est.csv"), &u_est, paths, &ctx.digest)?;
    io::write_path_matrix_csv(&ctx.out("u_est_se.csv"), &se, paths, &ctx.digest)?;
    io::write_path_matrix(&ctx.out("u_est.apkm"), &u_est, cfg.model.heads, cfg.model.depth, &ctx.digest)?;
    ctx.csv(
        "sampled_predictions.csv",
        &["example", "mean", "variance", "label"],
        (0..mean.len()).map(|i| vec![(i + 1).to_string(), fmt(mean[i]), fmt(var[i]), format!("{}", inputs.test_labels[i])]),
    )?;
    let iterations = cfg.sampler.warmup + cfg.sampler.samples;
    let rate = samples.divergence_rate(iterations);
    let warning = if rate > DIVERGENCE_WARNING_RATE {
        log::warn!("divergence rate {rate:.3} exceeds {DIVERGENCE_WARNING_RATE}");
        format!("divergence rate {rate:.3} exceeds {DIVERGENCE_WARNING_RATE}")
    } else {
        String::new()
    };
    ctx.csv(
        "sample_summary.csv",
        &["chain", "draws", "acceptance", "divergences", "divergence_rate", "warning"],
        (0..samples.acceptance.len()).map(|c| {
            vec![
                (c + 1).to_string(),
                samples.chain_of.iter().filter(|&&k| k == c).count().to_string(),
                fmt(samples.acceptance[c]),
                samples.divergences[c].to_string(),
                fmt(samples.divergences[c] as f64 / iterations.max(1) as f64),
                warning.clone(),
            ]
        }),
    )?;
    for (c, a) in samples.acceptance.iter().enumerate() {
        println!("chain {} acceptance {a:.3}", c + 1);
    }
    ctx.write_record()?;
    if ctx.strict && !warning.is_empty() {
        return Err(Error::Numeric(warning));
    }
    Ok(())
}

fn head_list(heads: &[(usize, usize)]) -> String {
    heads
        .iter()
        .map(|(l, h)| format!("{l}:{}", h + 1))
        .collect::<Vec<_>>()
        .join(";")
}

fn path_list(f: &PathFeatureMatrix, kept: &[usize]) -> String {
    kept.iter().map(|&k| f.paths()[k].label()).collect::<Vec<_>>().join(";")
}

fn prune(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    ctx.guard(&["prune.csv", "ordered_pruning.csv"])?;
    let inputs = stage("features", || load_inputs(ctx, false))?;
    let (u, _) = io::read_order_parameters(&ctx.out("order_parameters.apku"))?;
    let u1 = u.u1();
    let t = cfg.solver.temperature;
    let yt = Some(&inputs.test_labels);
    let requested: Vec<(usize, usize)> = cfg.prune.heads.iter().map(|[l, h]| (*l, h - 1)).collect();
    let mut rows = Vec::new();
    for heads in [Vec::new(), requested] {
        let o = prune_heads(u1, &inputs.train, &inputs.labels, &inputs.test, yt, t, &heads, false)?;
        rows.push(vec![
            head_list(&o.removed),
            path_list(&inputs.train, &o.kept_paths),
            o.report.accuracy.map_or(String::new(), fmt),
        ]);
    }
    if cfg.prune.heads.is_empty() {
        rows.pop();
    }
    ctx.csv("prune.csv", &["removed", "kept_paths", "accuracy"], rows)?;
    let total = cfg.model.heads * cfg.model.depth;
    let max_removed = cfg.prune.max_removed.unwrap_or(total - 1);
    let scores = head_scores(u1, cfg.model.heads, cfg.model.depth)?;
    let steps = stage("ordered pruning", || {
        ordered_pruning(u1, &inputs.train, &inputs.labels, &inputs.test, yt, t, max_removed)
    })?;
    ctx.csv(
        "ordered_pruning.csv",
        &["step", "layer", "head", "score", "kept_paths", "accuracy"],
        steps.iter().enumerate().map(|(i, o)| {
            let (l, h) = *o.removed.last().expect("one head per step");
            vec![
                (i + 1).to_string(),
                l.to_string(),
                (h + 1).to_string(),
                fmt(scores.get(l, h).normalized),
                path_list(&inputs.train, &o.kept_paths),
                o.report.accuracy.map_or(String::new(), fmt),
            ]
        }),
    )?;
    ctx.write_record()
}

fn compare(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    ctx.guard(&["compare.csv", "compare_alignment.csv"])?;
    let inputs = stage("features", || load_inputs(ctx, false))?;
    let rows = stage("compare", || {
        gp_vs_renormalized(
            &inputs.train,
            &inputs.labels,
            &inputs.test,
            &inputs.test_labels,
            cfg.solver.sigma2,
            cfg.solver.temperature,
            &cfg.compare.alphas,
            &cfg.solver,
        )
    })?;
    ctx.csv(
        "compare.csv",
        &["alpha", "used_solver", "accuracy", "top_overlap_squared"],
        rows.iter().map(|r| {
            vec![
                fmt(r.alpha),
                r.used_solver.to_string(),
                r.accuracy.map_or(String::new(), fmt),
                r.alignment.first().map_or(String::new(), |a| fmt(a.overlap * a.overlap)),
            ]
        }),
    )?;
    ctx.csv(
        "compare_alignment.csv",
        &["alpha", "rank", "eigenvalue", "overlap"],
        rows.iter().flat_map(|r| {
            r.alignment
                .iter()
                .enumerate()
                .map(|(i, a)| vec![fmt(r.alpha), (i + 1).to_string(), fmt(a.eigenvalue), fmt(a.overlap)])
        }),
    )?;
    ctx.write_record()
}

/// Outcome of checking one file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyEntry {
    pub file: PathBuf,
    pub ok: bool,
    pub detail: String,
}

fn json_digest(path: &Path) -> Result<Digest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(0, e.to_string()))?;
    let hexed = v
        .get("config_digest")
        .and_then(|d| d.as_str())
        .ok_or_else(|| Error::parse(0, "missing config_digest"))?;
    hex::decode(hexed)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::parse(0, "malformed config_digest"))
}

/// Check config records against their contents, then every artifact against
/// the recorded digests.
pub fn verify_dir(dir: &Path) -> Result<Vec<VerifyEntry>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    names.sort();
    let is_record = |p: &Path| p.to_string_lossy().ends_with(".config.toml");
    let mut known = Vec::new();
    let mut out = Vec::new();
    for p in names.iter().filter(|p| is_record(p)) {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let (head, body) = text.split_once('\n').unwrap_or((&text, ""));
        let stored = head.strip_prefix("# config_digest=").unwrap_or_default();
        let recomputed = RunConfig::from_toml(body)
            .and_then(|c| c.canonical_toml())
            .map(|canon| digest_text(&canon));
        let entry = match recomputed {
            Ok(d) if hex::encode(d) == stored && digest_text(body) == d => {
                known.push(d);
                VerifyEntry {
                    file: p.clone(),
                    ok: true,
                    detail: "record".into(),
                }
            }
            Ok(_) => VerifyEntry {
                file: p.clone(),
                ok: false,
                detail: "record does not match its digest".into(),
            },
            Err(e) => VerifyEntry {
                file: p.clone(),
                ok: false,
                detail: e.to_string(),
            },
        };
        out.push(entry);
    }
    for p in names.iter().filter(|p| p.is_file() && !is_record(p)) {
        let d = if p.extension().is_some_and(|e| e == "json") {
            json_digest(p)
        } else {
            io::read_digest(p)
        };
        out.push(match d {
            Ok(d) if known.contains(&d) => VerifyEntry {
                file: p.clone(),
                ok: true,
                detail: hex::encode(d),
            },
            Ok(d) => VerifyEntry {
                file: p.clone(),
                ok: false,
                detail: format!("digest {} matches no record", hex::encode(d)),
            },
            Err(e) => VerifyEntry {
                file: p.clone(),
                ok: false,
                detail: e.to_string(),
            },
        });
    }
    Ok(out)
}

fn verify(dir: &Path) -> Result<()> {
    let entries = verify_dir(dir)?;
    let failed = entries.iter().filter(|e| !e.ok).count();
    for e in &entries {
        println!("{} {} {}", if e.ok { "ok" } else { "FAIL" }, e.file.display(), e.detail);
    }
    if failed > 0 {
        return Err(Error::Domain(format!("{failed} file(s) failed verification")));
    }
    Ok(())
}
